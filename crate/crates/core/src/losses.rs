//! Training objectives and their weighted sum.
//!
//! Every loss takes graph values and returns a scalar var, so the same code
//! serves training (f32) and gradient checks (f64).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::perceptual::{gram_distance, FeatureExtractor};
use crate::tensor::{Array, Real};
use crate::transforms::AppearanceTransform;

/// Clamp margin of the contrastive ratio.
pub const CTS_EPS: f64 = 1e-6;
pub const DEFAULT_N_NEG: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_trans: f64,
    pub lambda_cycle: f64,
    pub lambda_adv: f64,
    pub lambda_aug: f64,
    pub lambda_cts: f64,
    /// Weight of the content term inside the transfer loss.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_trans: 1.0,
            lambda_cycle: 10.0,
            lambda_adv: 1.0,
            lambda_aug: 10.0,
            lambda_cts: 1.0,
            alpha: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_trans: 0.0,
            lambda_cycle: 0.0,
            lambda_adv: 0.0,
            lambda_aug: 0.0,
            lambda_cts: 0.0,
            alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_trans,
            self.lambda_cycle,
            self.lambda_adv,
            self.lambda_aug,
            self.lambda_cts,
            self.alpha,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

/// The six generator terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts<V> {
    pub makeup: V,
    pub content: V,
    pub cycle: V,
    pub adv_g: V,
    pub aug: V,
    pub cts: V,
}

impl<V: Copy> LossParts<V> {
    pub fn splat(v: V) -> Self {
        Self {
            makeup: v,
            content: v,
            cycle: v,
            adv_g: v,
            aug: v,
            cts: v,
        }
    }

    pub fn named(&self) -> [(&'static str, V); 6] {
        [
            ("makeup", self.makeup),
            ("content", self.content),
            ("cycle", self.cycle),
            ("adv_g", self.adv_g),
            ("aug", self.aug),
            ("cts", self.cts),
        ]
    }

    pub fn map<U>(&self, f: impl Fn(V) -> U) -> LossParts<U> {
        LossParts {
            makeup: f(self.makeup),
            content: f(self.content),
            cycle: f(self.cycle),
            adv_g: f(self.adv_g),
            aug: f(self.aug),
            cts: f(self.cts),
        }
    }
}

fn coefficients(w: &LossWeights) -> LossParts<f64> {
    LossParts {
        makeup: w.lambda_trans,
        content: w.lambda_trans * w.alpha,
        cycle: w.lambda_cycle,
        adv_g: w.lambda_adv,
        aug: w.lambda_aug,
        cts: w.lambda_cts,
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("loss term {name}"), format!("value {v}")))
    }
}

impl LossParts<f64> {
    /// `λ_trans·(makeup + α·content) + λ_cycle·cycle + λ_adv·adv_g + λ_aug·aug + λ_cts·cts`.
    pub fn total(&self, w: &LossWeights) -> Result<f64> {
        for (name, v) in self.named() {
            check_finite(name, v)?;
        }
        let c = coefficients(w);
        Ok(w.lambda_trans * (self.makeup + w.alpha * self.content)
            + c.cycle * self.cycle
            + c.adv_g * self.adv_g
            + c.aug * self.aug
            + c.cts * self.cts)
    }
}

/// Weighted generator objective on graph values; a non-finite term is an
/// error naming that term.
pub fn total_generator_loss<'t, T: Real>(parts: &LossParts<Var<'t, T>>, w: &LossWeights) -> Result<Var<'t, T>> {
    for (name, v) in parts.named() {
        check_finite(name, v.item().f64())?;
    }
    let c = coefficients(w);
    let weighted = [
        parts.makeup.scale(T::c(c.makeup)),
        parts.content.scale(T::c(c.content)),
        parts.cycle.scale(T::c(c.cycle)),
        parts.adv_g.scale(T::c(c.adv_g)),
        parts.aug.scale(T::c(c.aug)),
        parts.cts.scale(T::c(c.cts)),
    ];
    Ok(weighted[1..].iter().fold(weighted[0], |acc, &v| acc + v))
}

fn same_shape<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference of two arrays.
pub fn l1<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(&a, &b, "l1")?;
    Ok((a - b).abs().mean())
}

/// Low-frequency agreement between the back-deformed transfer and the reference.
pub fn loss_makeup<'t, T: Real>(xbar_l: Var<'t, T>, y_l: Var<'t, T>) -> Result<Var<'t, T>> {
    l1(xbar_l, y_l)
}

/// Gradient-profile distance: `mean(|∂x a − ∂x b| + |∂y a − ∂y b|)` with
/// forward differences and a zero last column/row.
pub fn loss_content<'t, T: Real>(xhat_h: Var<'t, T>, x_h: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(&xhat_h, &x_h, "content loss")?;
    let gx = (xhat_h.diff_x() - x_h.diff_x()).abs();
    let gy = (xhat_h.diff_y() - x_h.diff_y()).abs();
    Ok((gx + gy).mean())
}

pub fn loss_cycle<'t, T: Real>(ybar: Var<'t, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
    l1(ybar, y)
}

fn mean_over_scales<'t, T: Real>(terms: Vec<Var<'t, T>>) -> Var<'t, T> {
    let n = terms.len();
    let sum = terms[1..].iter().fold(terms[0], |acc, &v| acc + v);
    sum.scale(T::c(1.0 / n as f64))
}

/// Least-squares discriminator loss averaged over scales.
pub fn loss_adv_d<'t, T: Real>(real: &[Var<'t, T>], fake: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::Dimension(format!(
            "discriminator loss needs matching non-empty score lists, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| r.add_scalar(-T::ONE).square().mean() + f.square().mean())
        .collect();
    Ok(mean_over_scales(terms))
}

/// Least-squares generator loss averaged over scales.
pub fn loss_adv_g<'t, T: Real>(fake: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if fake.is_empty() {
        return Err(Error::Dimension("generator adversarial loss needs score maps".into()));
    }
    Ok(mean_over_scales(
        fake.iter().map(|&f| f.add_scalar(-T::ONE).square().mean()).collect(),
    ))
}

/// `−log(1 − r)` with `r = ℓ(x̂, y⁺) / (Σ ℓ(x̂, y⁻) + ε)` clamped to `[0, 1 − ε]`.
pub fn loss_cts_with_negatives<'t, T: Real>(
    xhat_fg: Var<'t, T>,
    positive: &Array<T>,
    negatives: &[Array<T>],
    fe: &FeatureExtractor<T>,
) -> Result<Var<'t, T>> {
    if negatives.is_empty() {
        return Err(Error::Config("contrastive loss needs at least one negative".into()));
    }
    let tape = xhat_fg.tape();
    let pos = gram_distance(xhat_fg, tape.constant(positive.clone()), fe)?;
    let mut neg = gram_distance(xhat_fg, tape.constant(negatives[0].clone()), fe)?;
    for n in &negatives[1..] {
        neg = neg + gram_distance(xhat_fg, tape.constant(n.clone()), fe)?;
    }
    let eps = T::c(CTS_EPS);
    let r = pos.div(neg.add_scalar(eps)).clamp(T::ZERO, T::ONE - eps);
    Ok(r.neg().add_scalar(T::ONE).ln().neg())
}

/// Appearance-jittered copies of the reference foreground.
pub fn sample_negatives<T: Real>(y_fg: &Image, fg: &Mask, n_neg: usize, rng: &mut impl Rng) -> Vec<Array<T>> {
    (0..n_neg)
        .map(|_| AppearanceTransform::sample(rng).apply(y_fg, fg).to_array())
        .collect()
}

/// Colour contrastive loss with `n_neg` fresh negatives.
pub fn loss_cts<'t, T: Real>(
    xhat_fg: Var<'t, T>,
    y_fg: &Image,
    y_mask: &Mask,
    rng: &mut impl Rng,
    n_neg: usize,
    fe: &FeatureExtractor<T>,
) -> Result<Var<'t, T>> {
    if n_neg == 0 {
        return Err(Error::Config("n_neg must be at least 1".into()));
    }
    let negatives = sample_negatives(y_fg, y_mask, n_neg, rng);
    loss_cts_with_negatives(xhat_fg, &y_fg.to_array(), &negatives, fe)
}

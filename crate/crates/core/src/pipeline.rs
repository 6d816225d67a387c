//! Forward transfer: decomposition, correspondence, deformation and rendering
//! composed into one graph, plus the generator loss assembly built on it.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::correspondence::{correlation_var, deform_transpose_var, deform_var, validate_tau};
use crate::error::{Error, Result};
use crate::image::{Image, Mask, ParsingMap};
use crate::losses::{l1, loss_adv_g, loss_content, loss_cts, loss_cycle, loss_makeup, LossParts};
use crate::networks::{discriminate_var, encoder_inputs, render_var, sc_encode_var, Bound, ParamSet};
use crate::perceptual::FeatureExtractor;
use crate::pyramid::{decompose_var, DecomposedVars};
use crate::tensor::{Array, Real};
use crate::transforms::{apply_spatial, SpatialTransform};

/// Fails with the stage name when `v` holds a NaN or infinity.
pub fn ensure_finite<'t, T: Real>(v: Var<'t, T>, stage: &str) -> Result<Var<'t, T>> {
    if v.value().all_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(stage, format!("shape {:?}", v.shape())))
    }
}

/// One face placed on a tape: decomposition and encoder features.
pub struct FaceVars<'t, T: Real> {
    pub image: Var<'t, T>,
    pub parts: DecomposedVars<'t, T>,
    pub features: Var<'t, T>,
    pub fg_mask: Mask,
}

pub fn face_vars<'t, T: Real>(
    b: &Bound<'t, '_, T>,
    img: &Image,
    parsing: &ParsingMap,
    stage: &str,
) -> Result<FaceVars<'t, T>> {
    let tape = b.tape();
    let d = b.config().d;
    let (masked, onehot) = encoder_inputs::<T>(img, parsing)?;
    let fg_mask = parsing.foreground();
    let image = tape.constant(img.to_array());
    let parts = decompose_var(image, &fg_mask, d)?;
    let features = sc_encode_var(b, tape.constant(masked), tape.constant(onehot))?;
    ensure_finite(features, &format!("{stage} features"))?;
    Ok(FaceVars {
        image,
        parts,
        features,
        fg_mask,
    })
}

/// Source-to-reference transfer on a tape.
pub struct TransferVars<'t, T: Real> {
    /// Cosine correlation `(P, P)`, rows indexed by source pixels.
    pub m: Var<'t, T>,
    /// Reference LF deformed to the source geometry.
    pub yl_hat: Var<'t, T>,
    pub xhat: Var<'t, T>,
}

pub fn transfer_vars<'t, T: Real>(
    b: &Bound<'t, '_, T>,
    x: &FaceVars<'t, T>,
    y: &FaceVars<'t, T>,
    tau: f64,
) -> Result<TransferVars<'t, T>> {
    validate_tau(tau)?;
    let m = ensure_finite(correlation_var(x.features, y.features)?, "correlation")?;
    let yl_hat = ensure_finite(deform_var(m, y.parts.lf, tau)?, "deform")?;
    let xhat = ensure_finite(render_var(b, x.parts.bg, x.parts.hf, yl_hat)?, "render")?;
    Ok(TransferVars { m, yl_hat, xhat })
}

/// Every intermediate of a training forward pass.
pub struct BundleVars<'t, T: Real> {
    pub x: FaceVars<'t, T>,
    pub y: FaceVars<'t, T>,
    pub transfer: TransferVars<'t, T>,
    /// Decomposition of `x̂` under the source mask.
    pub xhat_parts: DecomposedVars<'t, T>,
    /// `x̂_l` deformed back to the reference geometry.
    pub xbar_l: Var<'t, T>,
    /// Reference re-rendered from its own content and `x̄_l`.
    pub ybar: Var<'t, T>,
}

pub fn forward_transfer_vars<'t, T: Real>(
    b: &Bound<'t, '_, T>,
    x: (&Image, &ParsingMap),
    y: (&Image, &ParsingMap),
    tau: f64,
) -> Result<BundleVars<'t, T>> {
    let d = b.config().d;
    let x = face_vars(b, x.0, x.1, "source")?;
    let y = face_vars(b, y.0, y.1, "reference")?;
    let transfer = transfer_vars(b, &x, &y, tau)?;
    let xhat_parts = decompose_var(transfer.xhat, &x.fg_mask, d)?;
    let xbar_l = ensure_finite(deform_transpose_var(transfer.m, xhat_parts.lf, tau)?, "deform transpose")?;
    let ybar = ensure_finite(render_var(b, y.parts.bg, y.parts.hf, xbar_l)?, "cycle render")?;
    Ok(BundleVars {
        x,
        y,
        transfer,
        xhat_parts,
        xbar_l,
        ybar,
    })
}

/// Array snapshot of [`BundleVars`].
#[derive(Clone, Debug)]
pub struct TransferBundle<T: Real> {
    pub x_bg: Array<T>,
    pub x_lf: Array<T>,
    pub x_hf: Array<T>,
    pub y_bg: Array<T>,
    pub y_lf: Array<T>,
    pub y_hf: Array<T>,
    pub fx: Array<T>,
    pub fy: Array<T>,
    pub m: Array<T>,
    pub yl_hat: Array<T>,
    pub xhat: Array<T>,
    pub xhat_lf: Array<T>,
    pub xhat_hf: Array<T>,
    pub xbar_l: Array<T>,
    pub ybar: Array<T>,
}

impl<T: Real> TransferBundle<T> {
    pub fn named(&self) -> [(&'static str, &Array<T>); 15] {
        [
            ("x_bg", &self.x_bg),
            ("x_lf", &self.x_lf),
            ("x_hf", &self.x_hf),
            ("y_bg", &self.y_bg),
            ("y_lf", &self.y_lf),
            ("y_hf", &self.y_hf),
            ("fx", &self.fx),
            ("fy", &self.fy),
            ("m", &self.m),
            ("yl_hat", &self.yl_hat),
            ("xhat", &self.xhat),
            ("xhat_lf", &self.xhat_lf),
            ("xhat_hf", &self.xhat_hf),
            ("xbar_l", &self.xbar_l),
            ("ybar", &self.ybar),
        ]
    }
}

fn val<T: Real>(v: Var<'_, T>) -> Array<T> {
    (*v.value()).clone()
}

pub fn forward_transfer<T: Real>(
    params: &ParamSet<T>,
    x: (&Image, &ParsingMap),
    y: (&Image, &ParsingMap),
    tau: f64,
) -> Result<TransferBundle<T>> {
    let tape = Tape::new();
    let b = Bound::frozen(&tape, params);
    let v = forward_transfer_vars(&b, x, y, tau)?;
    Ok(TransferBundle {
        x_bg: val(v.x.parts.bg),
        x_lf: val(v.x.parts.lf),
        x_hf: val(v.x.parts.hf),
        y_bg: val(v.y.parts.bg),
        y_lf: val(v.y.parts.lf),
        y_hf: val(v.y.parts.hf),
        fx: val(v.x.features),
        fy: val(v.y.features),
        m: val(v.transfer.m),
        yl_hat: val(v.transfer.yl_hat),
        xhat: val(v.transfer.xhat),
        xhat_lf: val(v.xhat_parts.lf),
        xhat_hf: val(v.xhat_parts.hf),
        xbar_l: val(v.xbar_l),
        ybar: val(v.ybar),
    })
}

/// Self-augmented reconstruction: `x` as source, `T_s(x)` as reference,
/// L1 of the result against `x`.
pub fn loss_aug_var<'t, T: Real>(
    b: &Bound<'t, '_, T>,
    img: &Image,
    parsing: &ParsingMap,
    t: &SpatialTransform,
    tau: f64,
) -> Result<Var<'t, T>> {
    let (ref_img, ref_parsing) = apply_spatial(img, parsing, t)?;
    let x = face_vars(b, img, parsing, "aug source")?;
    let y = face_vars(b, &ref_img, &ref_parsing, "aug reference")?;
    let out = transfer_vars(b, &x, &y, tau)?;
    l1(out.xhat, x.image)
}

pub fn loss_aug<T: Real>(
    params: &ParamSet<T>,
    img: &Image,
    parsing: &ParsingMap,
    rng: &mut impl Rng,
    tau: f64,
) -> Result<T> {
    let tape = Tape::new();
    let b = Bound::frozen(&tape, params);
    let t = SpatialTransform::sample(rng);
    Ok(loss_aug_var(&b, img, parsing, &t, tau)?.item())
}

/// Auxiliary inputs of one generator step.
pub struct AugInputs<'a> {
    /// Makeup-domain face used as its own reference after `transform`.
    pub face: (&'a Image, &'a ParsingMap),
    pub transform: SpatialTransform,
}

#[allow(clippy::too_many_arguments)]
/// All six generator terms on top of a forward pass; `disc` scores `x̂`
/// with frozen weights.
pub fn generator_losses<'t, T: Real>(
    b: &Bound<'t, '_, T>,
    disc: &Bound<'t, '_, T>,
    v: &BundleVars<'t, T>,
    aug: &AugInputs<'_>,
    reference: (&Image, &ParsingMap),
    tau: f64,
    n_neg: usize,
    fe: &FeatureExtractor<T>,
    rng: &mut impl Rng,
) -> Result<LossParts<Var<'t, T>>> {
    let makeup = loss_makeup(v.xbar_l, v.y.parts.lf)?;
    let content = loss_content(v.xhat_parts.hf, v.x.parts.hf)?;
    let cycle = loss_cycle(v.ybar, v.y.image)?;
    let adv_g = loss_adv_g(&discriminate_var(disc, v.transfer.xhat)?)?;
    let aug = loss_aug_var(b, aug.face.0, aug.face.1, &aug.transform, tau)?;
    let x_mask = b.tape().constant(v.x.fg_mask.to_array::<T>(3));
    let xhat_fg = v.transfer.xhat * x_mask;
    let y_mask = reference.1.foreground();
    let y_fg = reference.0.masked(&y_mask);
    let cts = loss_cts(xhat_fg, &y_fg, &y_mask, rng, n_neg, fe)?;
    let parts = LossParts {
        makeup,
        content,
        cycle,
        adv_g,
        aug,
        cts,
    };
    for (name, p) in parts.named() {
        ensure_finite(p, &format!("loss term {name}"))?;
    }
    Ok(parts)
}

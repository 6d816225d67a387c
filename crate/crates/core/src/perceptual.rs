//! Frozen convolutional feature extractor for Gram-matrix style distances.
//!
//! The default stack is two seeded random 3×3 conv layers (16 and 32
//! channels, stride 2, ReLU). Pretrained weights can be loaded from a
//! container file tagged [`FEATURES_FORMAT`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Container, FEATURES_FORMAT};
use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_f00d;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayer<T: Real> {
    pub weight: Array<T>,
    pub bias: Array<T>,
    pub stride: usize,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T: Real = f32> {
    pub layers: Vec<FeatureLayer<T>>,
}

impl<T: Real> FeatureExtractor<T> {
    /// Two stride-2 ReLU conv layers with He-normal weights from `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for cout in [16, 32] {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            layers.push(FeatureLayer {
                weight: Array::from_fn(&[cout, cin, 3, 3], |_| T::c(normal.sample(&mut rng))),
                bias: Array::zeros(&[cout]),
                stride: 2,
                relu: true,
            });
            cin = cout;
        }
        Self { layers }
    }

    /// Single 1×1 identity layer without activation.
    pub fn identity(channels: usize) -> Self {
        let weight = Array::from_fn(&[channels, channels, 1, 1], |i| {
            if i / channels == i % channels {
                T::ONE
            } else {
                T::ZERO
            }
        });
        Self {
            layers: vec![FeatureLayer {
                weight,
                bias: Array::zeros(&[channels]),
                stride: 1,
                relu: false,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("feature extractor needs at least one layer".into()));
        }
        let mut cin = 3;
        for (i, l) in self.layers.iter().enumerate() {
            let (co, ci, kh, kw) = l.weight.dims4()?;
            if ci != cin || kh != kw || kh % 2 == 0 || l.bias.shape() != [co] || l.stride == 0 {
                return Err(Error::Config(format!(
                    "feature layer {i}: weight {:?}, bias {:?}, stride {}",
                    l.weight.shape(),
                    l.bias.shape(),
                    l.stride
                )));
            }
            cin = co;
        }
        Ok(())
    }

    /// Activations after every layer.
    pub fn features<'t>(&self, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let tape = x.tape();
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let k = l.weight.shape()[2];
            h = h.conv2d(
                tape.constant(l.weight.clone()),
                Some(tape.constant(l.bias.clone())),
                l.stride,
                k / 2,
            );
            if l.relu {
                h = h.relu();
            }
            out.push(h);
        }
        out
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            layers: self
                .layers
                .iter()
                .map(|l| FeatureLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    stride: l.stride,
                    relu: l.relu,
                })
                .collect(),
        }
    }
}

impl FeatureExtractor<f32> {
    /// Loads layers `l{i}.weight` / `l{i}.bias` with metadata `l{i}.stride`
    /// and `l{i}.relu`.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, FEATURES_FORMAT)?;
        let mut layers = Vec::new();
        for i in 0.. {
            let Some(weight) = c.tensors.get(&format!("l{i}.weight")) else {
                break;
            };
            let bias = c
                .tensors
                .get(&format!("l{i}.bias"))
                .cloned()
                .unwrap_or_else(|| Array::zeros(&[weight.shape()[0]]));
            let meta = |k: &str, default: &str| c.metadata.get(&format!("l{i}.{k}")).cloned().unwrap_or(default.into());
            let stride = meta("stride", "1")
                .parse()
                .map_err(|_| Error::Checkpoint(format!("l{i}.stride is not an integer")))?;
            let relu = meta("relu", "true") == "true";
            layers.push(FeatureLayer {
                weight: weight.clone(),
                bias,
                stride,
                relu,
            });
        }
        let fe = Self { layers };
        fe.validate()?;
        Ok(fe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(FEATURES_FORMAT);
        for (i, l) in self.layers.iter().enumerate() {
            c.tensors.insert(format!("l{i}.weight"), l.weight.clone());
            c.tensors.insert(format!("l{i}.bias"), l.bias.clone());
            c.metadata.insert(format!("l{i}.stride"), l.stride.to_string());
            c.metadata.insert(format!("l{i}.relu"), l.relu.to_string());
        }
        c.save(path)
    }
}

/// `φ̃ᵀφ̃ / (C·H·W)` for a `(1, C, H, W)` activation, `φ̃` the `(H·W) × C` flattening.
pub fn gram<'t, T: Real>(phi: Var<'t, T>) -> Var<'t, T> {
    let s = phi.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let f = phi.reshape(&[c, hw]);
    f.matmul_t(f, false, true).scale(T::c(1.0 / (c * hw) as f64))
}

/// Sum over layers of the mean absolute Gram difference.
pub fn gram_distance<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>, fe: &FeatureExtractor<T>) -> Result<Var<'t, T>> {
    fe.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let fa = fe.features(a);
    let fb = fe.features(b);
    let mut total: Option<Var<'t, T>> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let d = (gram(x) - gram(y)).abs().mean();
        total = Some(match total {
            Some(t) => t + d,
            None => d,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Array-level convenience.
pub fn gram_distance_arrays<T: Real>(a: &Array<T>, b: &Array<T>, fe: &FeatureExtractor<T>) -> Result<T> {
    let tape = Tape::new();
    Ok(gram_distance(tape.constant(a.clone()), tape.constant(b.clone()), fe)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_tape_gradient, rand_array};

    #[test]
    fn identity_gram_matches_hand_computation() {
        // 2x2 image, channels r, g, b
        let px = [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9], [1.0, 0.0, 0.5]];
        let qx = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.5, 0.5], [0.2, 0.4, 0.6]];
        let to_arr = |p: &[[f64; 3]; 4]| {
            Array::from_vec(&[1, 3, 2, 2], (0..12).map(|i| p[i % 4][i / 4]).collect()).unwrap()
        };
        let gram_hand = |p: &[[f64; 3]; 4]| {
            let mut g = [[0.0; 3]; 3];
            for (i, row) in g.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = p.iter().map(|q| q[i] * q[j]).sum::<f64>() / 12.0;
                }
            }
            g
        };
        let (ga, gb) = (gram_hand(&px), gram_hand(&qx));
        let want: f64 = (0..9).map(|k| (ga[k / 3][k % 3] - gb[k / 3][k % 3]).abs()).sum::<f64>() / 9.0;
        let got = gram_distance_arrays(&to_arr(&px), &to_arr(&qx), &FeatureExtractor::identity(3)).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn zero_on_equal_and_symmetric() {
        let fe = FeatureExtractor::<f64>::random(1);
        let a = rand_array(&[1, 3, 8, 8], 1).map(|v| v.abs());
        let b = rand_array(&[1, 3, 8, 8], 2).map(|v| v.abs());
        assert_eq!(gram_distance_arrays(&a, &a, &fe).unwrap(), 0.0);
        let ab = gram_distance_arrays(&a, &b, &fe).unwrap();
        let ba = gram_distance_arrays(&b, &a, &fe).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fe = FeatureExtractor::<f64>::random(3);
        let a = rand_array(&[1, 3, 8, 8], 4);
        let b = rand_array(&[1, 3, 8, 8], 5);
        check_tape_gradient(&[a, b], |_, v| gram_distance(v[0], v[1], &fe).unwrap(), 1e-4);
    }

    #[test]
    fn empty_extractor_is_rejected() {
        let fe = FeatureExtractor::<f64> { layers: vec![] };
        let a = Array::zeros(&[1, 3, 4, 4]);
        assert!(matches!(gram_distance_arrays(&a, &a, &fe), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let fe = FeatureExtractor::<f32>::random(9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feat.safetensors");
        fe.save(&p).unwrap();
        assert_eq!(FeatureExtractor::load(&p).unwrap(), fe);
    }
}

//! Semantic correspondence between two faces and low-frequency deformation.
//!
//! Feature maps are `(1, C, h, w)` arrays on the low-frequency grid. The
//! correlation matrix compares every source pixel with every reference pixel;
//! deformation replaces each source pixel with a softmax-weighted average of
//! reference low-frequency pixels.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

/// Added to the cosine denominator so zero-norm features stay finite.
pub const COSINE_EPS: f64 = 1e-8;
pub const DEFAULT_TAU: f64 = 100.0;

/// Correlation matrix with the temperature used to turn it into weights.
#[derive(Clone, Debug)]
pub struct CorrMatrix<T: Real> {
    /// `P × P`, row `i` is the source pixel, column `j` the reference pixel.
    pub m: Array<T>,
    pub tau: f64,
}

pub fn validate_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `(1, C, h, w)` → `(C, h·w)`.
fn flatten_features<'t, T: Real>(f: Var<'t, T>) -> Result<(Var<'t, T>, usize, usize)> {
    let (n, c, h, w) = f.value().dims4()?;
    if n != 1 {
        return Err(Error::Dimension(format!("expected a single feature map, got batch {n}")));
    }
    Ok((f.reshape(&[c, h * w]), h, w))
}

/// Cosine-similarity matrix between source and reference features (differentiable).
pub fn correlation_var<'t, T: Real>(fx: Var<'t, T>, fy: Var<'t, T>) -> Result<Var<'t, T>> {
    if fx.shape() != fy.shape() {
        return Err(Error::Dimension(format!(
            "feature maps differ: {:?} vs {:?}",
            fx.shape(),
            fy.shape()
        )));
    }
    let (a, _, _) = flatten_features(fx)?;
    let (b, _, _) = flatten_features(fy)?;
    Ok(a.cosine_corr(b, T::c(COSINE_EPS)))
}

pub fn correlation_matrix<T: Real>(fx: &Array<T>, fy: &Array<T>, tau: f64) -> Result<CorrMatrix<T>> {
    validate_tau(tau)?;
    let tape = Tape::new();
    let m = correlation_var(tape.constant(fx.clone()), tape.constant(fy.clone()))?;
    Ok(CorrMatrix {
        m: (*m.value()).clone(),
        tau,
    })
}

fn deform_rows<'t, T: Real>(m: Var<'t, T>, lf: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    validate_tau(tau)?;
    let (p, q) = m.value().dims2()?;
    let (n, c, h, w) = lf.value().dims4()?;
    if n != 1 || h * w != q || p != q {
        return Err(Error::Dimension(format!(
            "correlation {p}x{q} does not match low-frequency grid {h}x{w}"
        )));
    }
    let weights = m.row_softmax(T::c(1.0 / tau));
    // (c, q) · (p, q)ᵀ = (c, p)
    let out = lf.reshape(&[c, q]).matmul_t(weights, false, true);
    Ok(out.reshape(&[1, c, h, w]))
}

/// `ŷ(i) = Σ_j softmax_j(m[i,·]/τ) · y(j)` (differentiable).
pub fn deform_var<'t, T: Real>(m: Var<'t, T>, yl: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    deform_rows(m, yl, tau)
}

/// Deformation with the transposed matrix: re-aligns a source-aligned LF to
/// the reference geometry.
pub fn deform_transpose_var<'t, T: Real>(m: Var<'t, T>, xl: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    deform_rows(m.transpose2(), xl, tau)
}

pub fn deform<T: Real>(corr: &CorrMatrix<T>, yl: &Array<T>) -> Result<Array<T>> {
    let tape = Tape::new();
    let v = deform_var(tape.constant(corr.m.clone()), tape.constant(yl.clone()), corr.tau)?;
    Ok((*v.value()).clone())
}

pub fn deform_transpose<T: Real>(corr: &CorrMatrix<T>, xl: &Array<T>) -> Result<Array<T>> {
    let tape = Tape::new();
    let v = deform_transpose_var(tape.constant(corr.m.clone()), tape.constant(xl.clone()), corr.tau)?;
    Ok((*v.value()).clone())
}

/// Row-softmax weights `softmax_j(m[i,·]/τ)`.
pub fn softmax_weights<T: Real>(corr: &CorrMatrix<T>) -> Result<Array<T>> {
    validate_tau(corr.tau)?;
    corr.m.dims2()?;
    let tape = Tape::new();
    let w = tape.constant(corr.m.clone()).row_softmax(T::c(1.0 / corr.tau));
    Ok((*w.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_tape_gradient, rand_array};
    use proptest::prelude::*;

    fn oracle_cosine(fx: &Array<f64>, fy: &Array<f64>) -> Vec<Vec<f64>> {
        let (_, c, h, w) = fx.dims4().unwrap();
        let p = h * w;
        let at = |f: &Array<f64>, ch: usize, i: usize| f.data()[ch * p + i];
        (0..p)
            .map(|i| {
                (0..p)
                    .map(|j| {
                        let mut dot = 0.0;
                        let mut na = 0.0;
                        let mut nb = 0.0;
                        for ch in 0..c {
                            dot += at(fx, ch, i) * at(fy, ch, j);
                            na += at(fx, ch, i).powi(2);
                            nb += at(fy, ch, j).powi(2);
                        }
                        (dot / (na.sqrt() * nb.sqrt() + 1e-8)).clamp(-1.0, 1.0)
                    })
                    .collect()
            })
            .collect()
    }

    fn oracle_deform(m: &[Vec<f64>], yl: &Array<f64>, tau: f64) -> Vec<f64> {
        let (_, c, h, w) = yl.dims4().unwrap();
        let p = h * w;
        let mut out = vec![0.0; c * p];
        for i in 0..p {
            let z: f64 = m[i].iter().map(|v| (v / tau).exp()).sum();
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += (m[i][j] / tau).exp() / z * yl.data()[ch * p + j];
                }
                out[ch * p + i] = acc;
            }
        }
        out
    }

    fn to_matrix(m: &[Vec<f64>]) -> Array<f64> {
        let p = m.len();
        Array::from_vec(&[p, m[0].len()], m.iter().flatten().copied().collect()).unwrap()
    }

    fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
    }

    #[test]
    fn cosine_matches_oracle() {
        for (h, w) in [(2, 2), (4, 4), (2, 3)] {
            let fx = rand_array(&[1, 5, h, w], 20);
            let fy = rand_array(&[1, 5, h, w], 21);
            let got = correlation_matrix(&fx, &fy, 1.0).unwrap();
            let want = oracle_cosine(&fx, &fy);
            for i in 0..h * w {
                for j in 0..h * w {
                    assert!((got.m.data()[i * h * w + j] - want[i][j]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn cosine_diagonal_and_orthogonal() {
        // pixel features e0, e1, e0+e1, -e0
        let fx = Array::from_vec(&[1, 2, 2, 2], vec![1.0, 0.0, 1.0, -1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let c = correlation_matrix(&fx, &fx, 1.0).unwrap();
        for i in 0..4 {
            assert!((c.m.data()[i * 4 + i] - 1.0).abs() < 1e-7);
        }
        assert_eq!(c.m.data()[1], 0.0);
        assert!((c.m.data()[3] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn zero_features_are_finite() {
        let z = Array::<f64>::zeros(&[1, 4, 2, 2]);
        let c = correlation_matrix(&z, &z, 1.0).unwrap();
        assert!(c.m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Array::<f64>::zeros(&[1, 4, 2, 2]);
        let b = Array::<f64>::zeros(&[1, 4, 2, 3]);
        assert!(matches!(correlation_matrix(&a, &b, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_positive_tau_is_a_config_error() {
        let c = CorrMatrix {
            m: Array::<f64>::zeros(&[4, 4]),
            tau: 0.0,
        };
        let yl = Array::zeros(&[1, 3, 2, 2]);
        assert!(matches!(deform(&c, &yl), Err(Error::Config(_))));
        let c = CorrMatrix { tau: -1.0, ..c };
        assert!(matches!(deform_transpose(&c, &yl), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_matrix_gives_mean() {
        let yl = rand_array(&[1, 3, 2, 2], 22);
        for tau in [0.01, 1.0, 100.0] {
            let c = CorrMatrix {
                m: Array::full(&[4, 4], 0.3),
                tau,
            };
            for out in [deform(&c, &yl).unwrap(), deform_transpose(&c, &yl).unwrap()] {
                for ch in 0..3 {
                    let mean: f64 = yl.plane(0, ch).iter().sum::<f64>() / 4.0;
                    assert!(out.plane(0, ch).iter().all(|v| (v - mean).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn saturated_row_selects_argmax() {
        let tau = 0.05;
        let yl = rand_array(&[1, 3, 2, 2], 23);
        let mut m = vec![vec![-1.0; 4]; 4];
        let pick = [2, 0, 3, 1];
        for (i, &j) in pick.iter().enumerate() {
            m[i][j] = 1.0 + 100.0 * tau;
        }
        let out = deform(&CorrMatrix { m: to_matrix(&m), tau }, &yl).unwrap();
        for (i, &j) in pick.iter().enumerate() {
            for ch in 0..3 {
                assert!((out.plane(0, ch)[i] - yl.plane(0, ch)[j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn deform_matches_softmax_oracle() {
        let m: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| rand_array(&[1], (i * 4 + j) as u64).item()).collect())
            .collect();
        let yl = rand_array(&[1, 3, 2, 2], 24);
        let c = CorrMatrix { m: to_matrix(&m), tau: 1.0 };
        let got = deform(&c, &yl).unwrap();
        for (a, b) in got.data().iter().zip(oracle_deform(&m, &yl, 1.0)) {
            assert!((a - b).abs() < 1e-6);
        }
        let got_t = deform_transpose(&c, &yl).unwrap();
        for (a, b) in got_t.data().iter().zip(oracle_deform(&transpose(&m), &yl, 1.0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_matrix_transpose_is_same() {
        let fx = rand_array(&[1, 6, 2, 2], 25);
        let c = correlation_matrix(&fx, &fx, 0.3).unwrap();
        let yl = rand_array(&[1, 3, 2, 2], 26);
        assert_eq!(deform(&c, &yl).unwrap(), deform_transpose(&c, &yl).unwrap());
    }

    #[test]
    fn deform_gradients() {
        let m = rand_array(&[4, 4], 27);
        let yl = rand_array(&[1, 3, 2, 2], 28);
        let coef = rand_array(&[1, 3, 2, 2], 29);
        for tau in [0.5, 100.0] {
            check_tape_gradient(
                &[m.clone(), yl.clone()],
                |t, v| (deform_var(v[0], v[1], tau).unwrap() * t.constant(coef.clone())).sum(),
                1e-4,
            );
            check_tape_gradient(
                &[m.clone(), yl.clone()],
                |t, v| (deform_transpose_var(v[0], v[1], tau).unwrap() * t.constant(coef.clone())).sum(),
                1e-4,
            );
        }
    }

    /// Random correlation instance with P ≤ 16.
    fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, f64)> {
        (1usize..=4, 1usize..=4, 0.01f64..200.0).prop_flat_map(|(h, w, tau)| {
            let p = h * w;
            (
                Just(h),
                Just(w),
                prop::collection::vec(-1.0f64..1.0, p * p),
                prop::collection::vec(-2.0f64..2.0, 3 * p),
                Just(tau),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn rows_are_stochastic_and_outputs_in_hull((h, w, m, y, tau) in instance()) {
            let p = h * w;
            let c = CorrMatrix { m: Array::from_vec(&[p, p], m).unwrap(), tau };
            let weights = softmax_weights(&c).unwrap();
            for i in 0..p {
                let s: f64 = weights.data()[i * p..(i + 1) * p].iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
            let yl = Array::from_vec(&[1, 3, h, w], y).unwrap();
            for out in [deform(&c, &yl).unwrap(), deform_transpose(&c, &yl).unwrap()] {
                for ch in 0..3 {
                    let lo = yl.plane(0, ch).iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = yl.plane(0, ch).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for &v in out.plane(0, ch) {
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn permutation_equivariance((h, w, m, y, tau) in instance(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let p = h * w;
            let mut perm: Vec<usize> = (0..p).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pm: Vec<f64> = (0..p * p).map(|k| m[(k / p) * p + perm[k % p]]).collect();
            let py: Vec<f64> = (0..3 * p).map(|k| y[(k / p) * p + perm[k % p]]).collect();
            let a = deform(
                &CorrMatrix { m: Array::from_vec(&[p, p], m).unwrap(), tau },
                &Array::from_vec(&[1, 3, h, w], y).unwrap(),
            ).unwrap();
            let b = deform(
                &CorrMatrix { m: Array::from_vec(&[p, p], pm).unwrap(), tau },
                &Array::from_vec(&[1, 3, h, w], py).unwrap(),
            ).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn identity_round_trip(p in 2usize..=16, seed in any::<u64>()) {
            // orthonormal one-hot features are pairwise separated by cosine 1
            let mut f = Array::<f64>::zeros(&[1, p, 1, p]);
            for i in 0..p {
                f.data_mut()[i * p + i] = 1.0 + i as f64;
            }
            let c = correlation_matrix(&f, &f, 0.01).unwrap();
            let yl = rand_array(&[1, 3, 1, p], seed);
            let back = deform_transpose(&c, &deform(&c, &yl).unwrap()).unwrap();
            for (u, v) in back.data().iter().zip(yl.data()) {
                prop_assert!((u - v).abs() <= 1e-3);
            }
        }
    }
}

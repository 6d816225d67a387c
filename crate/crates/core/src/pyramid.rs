//! Frequency decomposition of face images.
//!
//! An image splits into its background, a low-frequency component (Gaussian
//! blur + stride-2 sampling applied `log2(d)` times to the foreground) and the
//! high-frequency residual `fg - up(lf)`. Because the residual is defined by
//! subtraction, `bg + up(lf) + hf` reproduces the input up to round-off.
//!
//! All resampling is separable and linear, so each axis is represented by a
//! small dense operator matrix and applied with [`Var::separable`]. This keeps
//! one code path for data images and for generated images that need gradients.

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Image, Mask, ParsingMap};
use crate::tensor::{Array, Real};

/// Side length of the blur kernel.
pub const KERNEL_SIZE: usize = 5;
/// Standard deviation of the blur kernel in pixels.
pub const KERNEL_SIGMA: f64 = 1.0;

/// Normalised 1-D Gaussian taps. The 2-D kernel is their outer product and
/// therefore also sums to one.
pub fn gaussian_taps() -> [f64; KERNEL_SIZE] {
    let r = (KERNEL_SIZE / 2) as f64;
    let mut k = [0.0; KERNEL_SIZE];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * KERNEL_SIGMA * KERNEL_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn validate_factor(d: usize) -> Result<()> {
    if d < 2 || !d.is_power_of_two() {
        return Err(Error::Config(format!(
            "downsampling factor must be a power of two >= 2, got {d}"
        )));
    }
    Ok(())
}

fn check_divisible(h: usize, w: usize, d: usize) -> Result<()> {
    if h % d != 0 || w % d != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} is not divisible by the downsampling factor {d}"
        )));
    }
    Ok(())
}

/// `(n/2) × n` operator: 5-tap blur with reflect padding, sampled every other pixel.
fn blur_stride2_operator(n: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = (KERNEL_SIZE / 2) as isize;
    let out = n / 2;
    let mut m = vec![0.0; out * n];
    for i in 0..out {
        for (k, &t) in taps.iter().enumerate() {
            let src = reflect_index(2 * i as isize + k as isize - r, n);
            m[i * n + src] += t;
        }
    }
    m
}

/// `(n/d) × n` operator for `log2(d)` blur+stride-2 stages along one axis.
pub fn downsample_operator<T: Real>(n: usize, d: usize) -> Result<Array<T>> {
    validate_factor(d)?;
    if n % d != 0 {
        return Err(Error::Dimension(format!("{n} is not divisible by {d}")));
    }
    // start from the identity and left-multiply each stage
    let mut acc: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect();
    let mut rows = n;
    while rows > n / d {
        let stage = blur_stride2_operator(rows);
        let next = rows / 2;
        let mut prod = vec![0.0; next * n];
        for i in 0..next {
            for k in 0..rows {
                let s = stage[i * rows + k];
                if s == 0.0 {
                    continue;
                }
                for j in 0..n {
                    prod[i * n + j] += s * acc[k * n + j];
                }
            }
        }
        acc = prod;
        rows = next;
    }
    Array::from_vec(&[n / d, n], acc.into_iter().map(T::c).collect())
}

/// `n_out × n_in` bilinear resampling operator with half-pixel centres
/// (`src = (o + 0.5)·n_in/n_out − 0.5`, clamped to the valid range).
pub fn resize_operator<T: Real>(n_in: usize, n_out: usize) -> Array<T> {
    let scale = n_in as f64 / n_out as f64;
    let mut m = Array::zeros(&[n_out, n_in]);
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        let frac = if i0 == i1 { 0.0 } else { frac };
        m.data_mut()[o * n_in + i0] += T::c(1.0 - frac);
        m.data_mut()[o * n_in + i1] += T::c(frac);
    }
    m
}

/// Gaussian-blur-and-subsample by `d` (differentiable).
pub fn gaussian_downsample<'t, T: Real>(x: Var<'t, T>, d: usize) -> Result<Var<'t, T>> {
    let v = x.value();
    let (_, _, h, w) = v.dims4()?;
    validate_factor(d)?;
    check_divisible(h, w, d)?;
    let rows = Rc::new(downsample_operator::<T>(h, d)?);
    let cols = Rc::new(downsample_operator::<T>(w, d)?);
    Ok(x.separable(rows, cols))
}

/// Bilinear upsampling by `d` (differentiable).
pub fn bilinear_upsample<'t, T: Real>(x: Var<'t, T>, d: usize) -> Result<Var<'t, T>> {
    let v = x.value();
    let (_, _, h, w) = v.dims4()?;
    if d == 0 {
        return Err(Error::Dimension(
            "upsampling factor must be positive".into(),
        ));
    }
    Ok(bilinear_resize(x, h * d, w * d))
}

/// Bilinear resize of every plane to `h × w`.
pub fn bilinear_resize<'t, T: Real>(x: Var<'t, T>, h: usize, w: usize) -> Var<'t, T> {
    let (_, _, h0, w0) = x.value().dims4().expect("4-D");
    if (h0, w0) == (h, w) {
        return x;
    }
    x.separable(
        Rc::new(resize_operator::<T>(h0, h)),
        Rc::new(resize_operator::<T>(w0, w)),
    )
}

/// Array-level wrapper around [`gaussian_downsample`].
pub fn gaussian_downsample_array<T: Real>(x: &Array<T>, d: usize) -> Result<Array<T>> {
    let tape = Tape::new();
    let v = gaussian_downsample(tape.constant(x.clone()), d)?;
    Ok((*v.value()).clone())
}

/// Array-level wrapper around [`bilinear_upsample`].
pub fn bilinear_upsample_array<T: Real>(x: &Array<T>, d: usize) -> Result<Array<T>> {
    let tape = Tape::new();
    let v = bilinear_upsample(tape.constant(x.clone()), d)?;
    Ok((*v.value()).clone())
}

/// Background, low-frequency and high-frequency parts of one image.
#[derive(Clone, Debug)]
pub struct Decomposition<T: Real> {
    /// `(1, 3, H, W)`, zero on the foreground.
    pub bg: Array<T>,
    /// `(1, 3, H/d, W/d)` low-pass prediction of the foreground.
    pub lf: Array<T>,
    /// `(1, 3, H, W)` signed residual `fg − up(lf)`.
    pub hf: Array<T>,
    pub d: usize,
    pub fg_mask: Mask,
}

/// Split `img` into background, low-frequency and high-frequency parts.
pub fn decompose<T: Real>(img: &Image, parsing: &ParsingMap, d: usize) -> Result<Decomposition<T>> {
    if (img.height(), img.width()) != (parsing.height(), parsing.width()) {
        return Err(Error::Dimension(format!(
            "image {}x{} vs parsing {}x{}",
            img.height(),
            img.width(),
            parsing.height(),
            parsing.width()
        )));
    }
    validate_factor(d)?;
    check_divisible(img.height(), img.width(), d)?;
    let fg = parsing.foreground();
    let tape = Tape::new();
    let x = tape.constant(img.to_array::<T>());
    let parts = decompose_var(x, &fg, d)?;
    Ok(Decomposition {
        bg: (*parts.bg.value()).clone(),
        lf: (*parts.lf.value()).clone(),
        hf: (*parts.hf.value()).clone(),
        d,
        fg_mask: fg,
    })
}

/// Graph-level decomposition pieces.
pub struct DecomposedVars<'t, T: Real> {
    pub bg: Var<'t, T>,
    pub fg: Var<'t, T>,
    pub lf: Var<'t, T>,
    pub hf: Var<'t, T>,
}

/// Differentiable decomposition of a `(1, 3, H, W)` var under a fixed mask.
pub fn decompose_var<'t, T: Real>(
    x: Var<'t, T>,
    fg_mask: &Mask,
    d: usize,
) -> Result<DecomposedVars<'t, T>> {
    let (_, c, h, w) = x.value().dims4()?;
    if (fg_mask.height(), fg_mask.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "mask {}x{} vs image {h}x{w}",
            fg_mask.height(),
            fg_mask.width()
        )));
    }
    let tape = x.tape();
    let m = tape.constant(fg_mask.to_array::<T>(c));
    let inv = tape.constant(fg_mask.not().to_array::<T>(c));
    let fg = x * m;
    let bg = x * inv;
    let lf = gaussian_downsample(fg, d)?;
    let hf = fg - bilinear_upsample(lf, d)?;
    Ok(DecomposedVars { bg, fg, lf, hf })
}

/// `bg + up(lf) + hf`.
pub fn reconstruct<T: Real>(dec: &Decomposition<T>) -> Result<Image> {
    Image::from_array_unclamped(&reconstruct_array(dec)?)
}

pub fn reconstruct_array<T: Real>(dec: &Decomposition<T>) -> Result<Array<T>> {
    let (n, c, h, w) = dec.bg.dims4()?;
    let (n2, c2, lh, lw) = dec.lf.dims4()?;
    if dec.hf.shape() != dec.bg.shape() || n != n2 || c != c2 || lh * dec.d != h || lw * dec.d != w
    {
        return Err(Error::Dimension(format!(
            "inconsistent decomposition: bg {:?}, lf {:?}, hf {:?}, d {}",
            dec.bg.shape(),
            dec.lf.shape(),
            dec.hf.shape(),
            dec.d
        )));
    }
    let up = bilinear_upsample_array(&dec.lf, dec.d)?;
    let mut out = dec.bg.clone();
    for ((o, &u), &hf) in out.data_mut().iter_mut().zip(up.data()).zip(dec.hf.data()) {
        *o = *o + (u + hf);
    }
    Ok(out)
}

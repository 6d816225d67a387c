//! Random spatial and appearance transforms used by the augmentation and
//! contrastive losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{label, Image, Mask, ParsingMap};

/// Affine warp `flip ∘ rotate ∘ scale ∘ translate` about the image centre.
///
/// A source point `q` (pixel coordinates relative to the centre) maps to
/// `flip(R(θ)·(s·(q + t)))`. `R(θ)` is `[[cos, −sin], [sin, cos]]` on `(x, y)`
/// with `y` pointing down, and the flip mirrors `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    /// Translation as fractions of width and height.
    pub translate: [f64; 2],
}

/// Sampling ranges used during training.
pub const FLIP_PROB: f64 = 0.5;
pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const MAX_TRANSLATE: f64 = 0.1;

impl Default for SpatialTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SpatialTransform {
    pub fn identity() -> Self {
        Self {
            flip: false,
            rotation_deg: 0.0,
            scale: 1.0,
            translate: [0.0, 0.0],
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip: rng.random_bool(FLIP_PROB),
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            translate: [
                rng.random_range(-MAX_TRANSLATE..=MAX_TRANSLATE),
                rng.random_range(-MAX_TRANSLATE..=MAX_TRANSLATE),
            ],
        }
    }

    /// Accepts any full-turn rotation, scale in `[0.1, 10]` and translation
    /// within one image size.
    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg.is_finite()
            && self.rotation_deg.abs() <= 360.0
            && (0.1..=10.0).contains(&self.scale)
            && self.translate.iter().all(|t| t.is_finite() && t.abs() <= 1.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("spatial transform out of range: {self:?}")))
        }
    }

    /// Maps an output pixel back to its source location.
    fn source_of(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (mut px, py) = (x - cx, y - cy);
        if self.flip {
            px = -px;
        }
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        // R(−θ)
        let (rx, ry) = (c * px + s * py, -s * px + c * py);
        let (qx, qy) = (rx / self.scale, ry / self.scale);
        (
            qy - self.translate[1] * h as f64 + cy,
            qx - self.translate[0] * w as f64 + cx,
        )
    }
}

fn in_frame(sy: f64, sx: f64, h: usize, w: usize) -> bool {
    sy >= -0.5 && sx >= -0.5 && sy <= h as f64 - 0.5 && sx <= w as f64 - 0.5
}

/// Mean colour of label-0 pixels, black if there are none.
fn background_color(img: &Image, parsing: &ParsingMap) -> [f32; 3] {
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (i, &l) in parsing.labels().iter().enumerate() {
        if l == label::BACKGROUND {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img.plane(c)[i] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return [0.0; 3];
    }
    acc.map(|v| (v / n as f64) as f32)
}

/// Warps an image (bilinear) and its parsing (nearest). Pixels whose source
/// falls outside the frame become background: label 0 and the mean
/// background colour of the input.
pub fn apply_spatial(img: &Image, parsing: &ParsingMap, t: &SpatialTransform) -> Result<(Image, ParsingMap)> {
    t.validate()?;
    let (h, w) = (img.height(), img.width());
    if (parsing.height(), parsing.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "image {h}x{w} vs parsing {}x{}",
            parsing.height(),
            parsing.width()
        )));
    }
    if *t == SpatialTransform::identity() {
        return Ok((img.clone(), parsing.clone()));
    }
    let fill = background_color(img, parsing);
    let mut out = Image::filled(h, w, fill);
    let mut labels = ParsingMap::filled(h, w, label::BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = t.source_of(y as f64, x as f64, h, w);
            if !in_frame(sy, sx, h, w) {
                continue;
            }
            let ny = (sy.round().max(0.0) as usize).min(h - 1);
            let nx = (sx.round().max(0.0) as usize).min(w - 1);
            labels.set(y, x, parsing.get(ny, nx));
            let cy = sy.clamp(0.0, (h - 1) as f64);
            let cx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((cy - y0 as f64) as f32, (cx - x0 as f64) as f32);
            for c in 0..3 {
                let p = img.plane(c);
                let v = (1.0 - fy) * ((1.0 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1])
                    + fy * ((1.0 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]);
                out.set(y, x, c, v);
            }
        }
    }
    Ok((out, labels))
}

/// Per-channel colour jitter `clamp(a_c·v + b_c, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceTransform {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

pub const GAIN_RANGE: (f64, f64) = (0.5, 1.5);
pub const MAX_OFFSET: f64 = 0.2;

impl AppearanceTransform {
    pub fn identity() -> Self {
        Self {
            gain: [1.0; 3],
            offset: [0.0; 3],
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut t = Self::identity();
        for c in 0..3 {
            t.gain[c] = rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1);
            t.offset[c] = rng.random_range(-MAX_OFFSET..=MAX_OFFSET);
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gain.iter().all(|g| (GAIN_RANGE.0..=GAIN_RANGE.1).contains(g))
            && self.offset.iter().all(|b| b.abs() <= MAX_OFFSET);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("appearance transform out of range: {self:?}")))
        }
    }

    /// Jitters the pixels inside `mask`; pixels outside become zero.
    pub fn apply(&self, img: &Image, mask: &Mask) -> Image {
        let mut out = Image::new(img.height(), img.width());
        for c in 0..3 {
            let (a, b) = (self.gain[c] as f32, self.offset[c] as f32);
            let src = img.plane(c);
            for (i, o) in out.plane_mut(c).iter_mut().enumerate() {
                if mask.data()[i] {
                    *o = (a * src[i] + b).clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

//! Pixel containers: RGB images, face-parsing label maps and binary masks,
//! plus their PNG codecs.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

/// Number of face-parsing categories.
pub const NUM_LABELS: usize = 10;

/// Face-parsing label ids.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const LEFT_BROW: u8 = 2;
    pub const RIGHT_BROW: u8 = 3;
    pub const LEFT_EYE: u8 = 4;
    pub const RIGHT_EYE: u8 = 5;
    pub const NOSE: u8 = 6;
    pub const UPPER_LIP: u8 = 7;
    pub const LOWER_LIP: u8 = 8;
    pub const HAIR: u8 = 9;
}

/// H×W×3 image with channels stored as planes, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..3 {
            img.plane_mut(c).iter_mut().for_each(|v| *v = rgb[c]);
        }
        img
    }

    /// From planar data (`3·H·W` values, channel-major).
    pub fn from_planes(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Dimension(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(y, x, 0), self.get(y, x, 1), self.get(y, x, 2)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(y, x, c, v);
        }
    }

    /// `(1, 3, H, W)` array.
    pub fn to_array<T: Real>(&self) -> Array<T> {
        Array::from_vec(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::c(v as f64)).collect(),
        )
        .expect("image shape")
    }

    /// From a `(1, 3, H, W)` array; values are clamped to `[0, 1]`.
    pub fn from_array<T: Real>(a: &Array<T>) -> Result<Self> {
        let (n, c, h, w) = a.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Dimension(format!(
                "expected a (1, 3, H, W) array, got {:?}",
                a.shape()
            )));
        }
        Ok(Self {
            height: h,
            width: w,
            data: a
                .data()
                .iter()
                .map(|v| v.f64().clamp(0.0, 1.0) as f32)
                .collect(),
        })
    }

    /// Raw `(1, 3, H, W)` values without clamping (for signed components).
    pub fn from_array_unclamped<T: Real>(a: &Array<T>) -> Result<Self> {
        let (n, c, h, w) = a.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Dimension(format!(
                "expected a (1, 3, H, W) array, got {:?}",
                a.shape()
            )));
        }
        Ok(Self {
            height: h,
            width: w,
            data: a.data().iter().map(|v| v.f64() as f32).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Multiply every channel by a mask (1 keeps, 0 clears).
    pub fn masked(&self, mask: &Mask) -> Image {
        let mut out = self.clone();
        let n = self.height * self.width;
        for c in 0..3 {
            for i in 0..n {
                if !mask.data[i] {
                    out.data[c * n + i] = 0.0;
                }
            }
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let n = self.height * self.width;
        let mut raw = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                raw.push(quantize(self.data[c * n + i]));
            }
        }
        encode_png(self.width, self.height, png::ColorType::Rgb, None, &raw)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(Error::Png("unexpanded indexed image".into()));
            }
        };
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let px = &buf[(y * w + x) * channels..];
                let rgb = if channels < 3 {
                    [px[0]; 3]
                } else {
                    [px[0], px[1], px[2]]
                };
                for (c, v) in rgb.into_iter().enumerate() {
                    img.set(y, x, c, v as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }

    /// Pixel values after an 8-bit round trip.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| quantize(v) as f32 / 255.0)
                .collect(),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    raw: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(raw)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Per-pixel face-parsing labels in `0..NUM_LABELS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsingMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

/// Display palette for the indexed label PNGs.
const LABEL_PALETTE: [[u8; 3]; NUM_LABELS] = [
    [0, 0, 0],
    [204, 153, 128],
    [102, 51, 0],
    [153, 76, 0],
    [0, 0, 255],
    [0, 128, 255],
    [255, 204, 0],
    [255, 0, 0],
    [178, 0, 64],
    [64, 32, 16],
];

impl ParsingMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "parsing {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_LABELS) {
            return Err(Error::Data(format!(
                "invalid parsing label {bad} (max {})",
                NUM_LABELS - 1
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, l: u8) -> Self {
        Self::new(height, width, vec![l; height * width]).expect("valid label")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, l: u8) {
        assert!((l as usize) < NUM_LABELS);
        self.labels[y * self.width + x] = l;
    }

    /// Foreground: every label except background and hair.
    pub fn foreground(&self) -> Mask {
        self.mask_where(|l| l != label::BACKGROUND && l != label::HAIR)
    }

    pub fn mask_where(&self, f: impl Fn(u8) -> bool) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }

    /// `(1, NUM_LABELS, H, W)` one-hot encoding.
    pub fn one_hot<T: Real>(&self) -> Array<T> {
        let n = self.height * self.width;
        let mut a = Array::zeros(&[1, NUM_LABELS, self.height, self.width]);
        for (i, &l) in self.labels.iter().enumerate() {
            a.data_mut()[l as usize * n + i] = T::ONE;
        }
        a
    }

    pub fn histogram(&self) -> [usize; NUM_LABELS] {
        let mut h = [0; NUM_LABELS];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let palette = LABEL_PALETTE.iter().flatten().copied().collect();
        encode_png(
            self.width,
            self.height,
            png::ColorType::Indexed,
            Some(palette),
            &self.labels,
        )
    }

    /// Decode an indexed or 8-bit grayscale PNG whose pixel values are label ids.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!(
                "parsing maps must be 8-bit, got {:?}",
                info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Indexed | png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
        };
        let labels = (0..w * h).map(|i| buf[i * channels]).collect();
        Self::new(h, w, labels)
    }
}

/// Binary H×W mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}x{width} needs {} values",
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn and(&self, o: &Mask) -> Mask {
        self.zip(o, |a, b| a && b)
    }

    pub fn or(&self, o: &Mask) -> Mask {
        self.zip(o, |a, b| a || b)
    }

    pub fn and_not(&self, o: &Mask) -> Mask {
        self.zip(o, |a, b| a && !b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    fn zip(&self, o: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!(
            (self.height, self.width),
            (o.height, o.width),
            "mask size mismatch"
        );
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&o.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Square-window dilation with Chebyshev radius `r`.
    pub fn dilate(&self, r: usize) -> Mask {
        let (h, w) = (self.height, self.width);
        let mut out = Mask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let y0 = y.saturating_sub(r);
                let y1 = (y + r).min(h - 1);
                let x0 = x.saturating_sub(r);
                let x1 = (x + r).min(w - 1);
                let hit = (y0..=y1).any(|yy| (x0..=x1).any(|xx| self.get(yy, xx)));
                out.set(y, x, hit);
            }
        }
        out
    }

    /// Logical OR over non-overlapping `factor`×`factor` blocks.
    pub fn max_pool(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "mask {}x{} not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Mask::empty(h, w);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.set(y / factor, x / factor, true);
                }
            }
        }
        Ok(out)
    }

    /// `(1, channels, H, W)` array of 0/1 values.
    pub fn to_array<T: Real>(&self, channels: usize) -> Array<T> {
        let n = self.height * self.width;
        Array::from_fn(&[1, channels, self.height, self.width], |i| {
            if self.data[i % n] {
                T::ONE
            } else {
                T::ZERO
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_png_round_trip_within_quantization() {
        let mut img = Image::new(5, 7);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.037) % 1.0;
        }
        let back = Image::from_png(&img.to_png().unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn label_png_round_trip_exact() {
        let labels = (0..24).map(|i| (i % NUM_LABELS) as u8).collect();
        let p = ParsingMap::new(4, 6, labels).unwrap();
        assert_eq!(ParsingMap::from_png(&p.to_png().unwrap()).unwrap(), p);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(matches!(
            ParsingMap::new(1, 2, vec![0, 10]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn foreground_excludes_background_and_hair() {
        let p = ParsingMap::new(1, 4, vec![0, 1, 9, 7]).unwrap();
        assert_eq!(p.foreground().data(), &[false, true, false, true]);
    }

    #[test]
    fn max_pool_is_block_or() {
        let m = Mask::new(
            2,
            4,
            vec![false, false, false, true, false, false, false, false],
        )
        .unwrap();
        assert_eq!(m.max_pool(2).unwrap().data(), &[false, true]);
    }
}

//! Image metrics, the self-augmented evaluation protocol and the
//! frequency-component error report.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::control::{removal, transfer, FaceRef, Model};
use crate::error::{Error, Result};
use crate::facedata::{resize_image, resize_parsing, synth_pair, synth_sample, Domain, FaceSample};
use crate::image::{Image, Mask, ParsingMap};
use crate::pyramid::{bilinear_upsample_array, decompose};
use crate::transforms::{apply_spatial, SpatialTransform};

pub const REPORT_SCHEMA: &str = "csdmt-eval-v1";
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const REMOVAL_NOTE: &str = "pseudo-sources are produced by this model's own makeup removal";

fn check_pair(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Dimension(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if let Some(m) = mask {
        if (m.height(), m.width()) != (a.height(), a.width()) {
            return Err(Error::Dimension("mask size differs from images".into()));
        }
    }
    Ok(())
}

/// Mean squared error over all channels of the masked pixels.
pub fn mse(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let n = a.height() * a.width();
    let (mut sum, mut count) = (0.0, 0usize);
    for c in 0..3 {
        for (i, (&p, &q)) in a.plane(c).iter().zip(b.plane(c)).enumerate() {
            if mask.is_none_or(|m| m.data()[i % n]) {
                sum += (p as f64 - q as f64).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("metric mask is empty".into()));
    }
    Ok(sum / count as f64)
}

/// `10·log10(1/MSE)`; `+inf` for identical inputs.
pub fn psnr(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    let e = mse(a, b, mask)?;
    Ok(if e == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / e).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` map.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|j| g[j] * x[y * w + x0 + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM averaged over channels and over windows whose
/// centre lies in `mask`. Window statistics only use masked pixels, so
/// masking both inputs identically does not change the value.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let g = gaussian_window();
    let m: Vec<f64> = (0..h * w)
        .map(|i| if mask.is_none_or(|m| m.data()[i]) { 1.0 } else { 0.0 })
        .collect();
    let wm = filter_valid(&m, h, w, &g);
    let (ow, r) = (w + 1 - SSIM_WINDOW, SSIM_WINDOW / 2);
    let centres: Vec<usize> = (0..wm.len())
        .filter(|&i| m[(i / ow + r) * w + i % ow + r] > 0.0)
        .collect();
    if centres.is_empty() {
        return Err(Error::Data("no SSIM window centre lies in the mask".into()));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let prod = |f: &dyn Fn(usize) -> f64| filter_valid(&(0..h * w).map(|i| m[i] * f(i)).collect::<Vec<_>>(), h, w, &g);
        let sx = prod(&|i| x[i]);
        let sy = prod(&|i| y[i]);
        let sxx = prod(&|i| x[i] * x[i]);
        let syy = prod(&|i| y[i] * y[i]);
        let sxy = prod(&|i| x[i] * y[i]);
        for &i in &centres {
            let n = wm[i];
            let (mx, my) = (sx[i] / n, sy[i] / n);
            let vx = (sxx[i] / n - mx * mx).max(0.0);
            let vy = (syy[i] / n - my * my).max(0.0);
            let cxy = sxy[i] / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (3 * centres.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Crop,
    Rotate,
}

/// Corruption magnitudes of the pseudo-reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Crop side as a fraction of the image side, sampled uniformly.
    pub crop_range: (f64, f64),
    /// Rotation angle is uniform in `±max_rotation_deg`.
    pub max_rotation_deg: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            crop_range: (0.6, 0.8),
            max_rotation_deg: 45.0,
        }
    }
}

impl ProtocolParams {
    pub fn identity() -> Self {
        Self {
            crop_range: (1.0, 1.0),
            max_rotation_deg: 0.0,
        }
    }
}

/// Square crop at a random position, resized back to the original size.
pub fn random_crop(img: &Image, parsing: &ParsingMap, frac: f64, rng: &mut impl Rng) -> Result<(Image, ParsingMap)> {
    let (h, w) = (img.height(), img.width());
    let side = ((frac * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
    let y0 = rng.random_range(0..=h - side);
    let x0 = rng.random_range(0..=w - side);
    let mut ci = Image::new(side, side);
    let mut cp = ParsingMap::filled(side, side, 0);
    for y in 0..side {
        for x in 0..side {
            ci.set_pixel(y, x, img.pixel(y0 + y, x0 + x));
            cp.set(y, x, parsing.get(y0 + y, x0 + x));
        }
    }
    Ok((resize_image(&ci, h, w), resize_parsing(&cp, h, w)))
}

/// Something that renders `x` with `y`'s makeup.
pub trait Transferer {
    fn transfer(&self, x: FaceRef<'_>, y: FaceRef<'_>) -> Result<Image>;

    fn remove(&self, x_makeup: FaceRef<'_>, y_bare: FaceRef<'_>) -> Result<Image> {
        self.transfer(x_makeup, y_bare)
    }
}

impl Transferer for Model {
    fn transfer(&self, x: FaceRef<'_>, y: FaceRef<'_>) -> Result<Image> {
        Ok(transfer(self, x, y)?.image)
    }

    fn remove(&self, x: FaceRef<'_>, y: FaceRef<'_>) -> Result<Image> {
        Ok(removal(self, x, y)?.image)
    }
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("bad dB value {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the pseudo-reference itself against the original.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub reference_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub rows: Vec<SampleRow>,
    pub count: usize,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mean_reference_psnr: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl ScenarioReport {
    pub fn from_rows(scenario: Scenario, mut rows: Vec<SampleRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            scenario,
            count: rows.len(),
            mean_psnr: mean(rows.iter().map(|r| r.psnr)),
            mean_ssim: mean(rows.iter().map(|r| r.ssim)),
            mean_reference_psnr: mean(rows.iter().map(|r| r.reference_psnr)),
            rows,
        }
    }
}

fn sample_seed(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// For each makeup face `g`: corrupt it into a pseudo-reference, remove its
/// makeup with a random bare face to get a pseudo-source, transfer, and
/// score the result against `g` on the foreground.
pub fn self_aug_protocol(
    model: &impl Transferer,
    makeup: &[FaceSample],
    bare: &[FaceSample],
    seed: u64,
    scenario: Scenario,
    params: &ProtocolParams,
) -> Result<ScenarioReport> {
    if makeup.is_empty() || bare.is_empty() {
        return Err(Error::Data("self-augmented protocol needs makeup and bare faces".into()));
    }
    let mut rows = Vec::with_capacity(makeup.len());
    for (i, g) in makeup.iter().enumerate() {
        let mut rng = sample_seed(seed, i);
        let (ref_img, ref_parsing) = match scenario {
            Scenario::Crop => {
                let (lo, hi) = params.crop_range;
                let frac = if lo < hi { rng.random_range(lo..=hi) } else { lo };
                random_crop(&g.image, &g.parsing, frac, &mut rng)?
            }
            Scenario::Rotate => {
                let m = params.max_rotation_deg;
                let t = SpatialTransform {
                    rotation_deg: if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 },
                    ..SpatialTransform::identity()
                };
                apply_spatial(&g.image, &g.parsing, &t)?
            }
        };
        let nb = &bare[rng.random_range(0..bare.len())];
        let pseudo_source = model.remove((&g.image, &g.parsing), (&nb.image, &nb.parsing))?;
        let out = model.transfer((&pseudo_source, &g.parsing), (&ref_img, &ref_parsing))?;
        let fg = g.parsing.foreground();
        rows.push(SampleRow {
            id: g.id.clone(),
            psnr: psnr(&out, &g.image, Some(&fg))?,
            ssim: ssim(&out, &g.image, Some(&fg))?,
            reference_psnr: psnr(&ref_img, &g.image, Some(&fg))?,
        });
    }
    Ok(ScenarioReport::from_rows(scenario, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub lf_mse: f64,
    pub hf_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub d: usize,
    pub rows: Vec<FrequencyRow>,
    pub mean_lf_mse: f64,
    pub mean_hf_mse: f64,
}

/// MSE between the LF components (upsampled to full size) and between the
/// HF components of each `(source, transferred, parsing)` pair.
pub fn frequency_mse_report(pairs: &[(Image, Image, ParsingMap)], d: usize) -> Result<FrequencyReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (a, b, p) in pairs {
        check_pair(a, b, None)?;
        let da = decompose::<f64>(a, p, d)?;
        let db = decompose::<f64>(b, p, d)?;
        let ua = bilinear_upsample_array(&da.lf, d)?;
        let ub = bilinear_upsample_array(&db.lf, d)?;
        let m = |x: &crate::tensor::Array<f64>, y: &crate::tensor::Array<f64>| {
            x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64
        };
        rows.push(FrequencyRow {
            lf_mse: m(&ua, &ub),
            hf_mse: m(&da.hf, &db.hf),
        });
    }
    Ok(FrequencyReport {
        d,
        mean_lf_mse: mean(rows.iter().map(|r| r.lf_mse)),
        mean_hf_mse: mean(rows.iter().map(|r| r.hf_mse)),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: String,
    /// Seed of the protocol's own random draws.
    pub seed: u64,
    /// Seed of the synthetic generator the held-out faces come from.
    pub dataset_seed: u64,
    /// First held-out sample index; pick it past the training range.
    pub first_index: u64,
    pub samples: usize,
    pub size: usize,
    pub protocol: ProtocolParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: String::new(),
            seed: 0,
            dataset_seed: 0,
            first_index: 200,
            samples: 50,
            size: 64,
            protocol: ProtocolParams::default(),
        }
    }
}

/// Held-out synthetic makeup and bare faces at indices
/// `first_index..first_index + samples`.
pub fn held_out_sets(cfg: &EvalConfig) -> Result<(Vec<FaceSample>, Vec<FaceSample>)> {
    let range = cfg.first_index..cfg.first_index + cfg.samples as u64;
    let makeup = range
        .clone()
        .map(|i| synth_sample(cfg.dataset_seed, Domain::Makeup, i, cfg.size))
        .collect::<Result<_>>()?;
    let bare = range
        .map(|i| synth_sample(cfg.dataset_seed, Domain::NonMakeup, i, cfg.size))
        .collect::<Result<_>>()?;
    Ok((makeup, bare))
}

/// Both protocol scenarios plus the frequency table of ground-truth
/// synthetic pairs, all on the held-out range.
pub fn evaluate(model: &impl Transferer, d: usize, cfg: &EvalConfig) -> Result<EvalReport> {
    let (makeup, bare) = held_out_sets(cfg)?;
    let mut scenarios = Vec::new();
    for sc in [Scenario::Crop, Scenario::Rotate] {
        scenarios.push(self_aug_protocol(model, &makeup, &bare, cfg.seed, sc, &cfg.protocol)?);
    }
    let pairs = (cfg.first_index..cfg.first_index + cfg.samples as u64)
        .map(|i| synth_pair(cfg.dataset_seed, i, cfg.size))
        .collect::<Result<Vec<_>>>()?;
    let freq = frequency_mse_report(&pairs, d)?;
    Ok(EvalReport::new(cfg.clone(), scenarios, Some(freq)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub note: String,
    pub config: EvalConfig,
    pub sample_count: usize,
    pub scenarios: Vec<ScenarioReport>,
    pub frequency: Option<FrequencyReport>,
}

impl EvalReport {
    pub fn new(config: EvalConfig, scenarios: Vec<ScenarioReport>, frequency: Option<FrequencyReport>) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            note: REMOVAL_NOTE.into(),
            sample_count: config.samples,
            config,
            scenarios,
            frequency,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_markdown(&self) -> String {
        let db = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.2}") };
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation report\n");
        let _ = writeln!(
            s,
            "Checkpoint: `{}`, seed {}, {} held-out samples from index {} at {}x{}.",
            self.config.checkpoint,
            self.config.seed,
            self.sample_count,
            self.config.first_index,
            self.config.size,
            self.config.size
        );
        let _ = writeln!(s, "Note: {}.\n", self.note);
        let _ = writeln!(s, "| scenario | samples | PSNR (dB) | SSIM | pseudo-reference PSNR (dB) |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for r in &self.scenarios {
            let name = match r.scenario {
                Scenario::Crop => "crop",
                Scenario::Rotate => "rotate",
            };
            let _ = writeln!(s, "| {name} | {} | {} | {:.4} | {} |", r.count, db(r.mean_psnr), r.mean_ssim, db(r.mean_reference_psnr));
        }
        if let Some(f) = &self.frequency {
            let _ = writeln!(s, "\n| component | mean MSE |\n|---|---|");
            let _ = writeln!(s, "| LF | {:.6} |\n| HF | {:.6} |", f.mean_lf_mse, f.mean_hf_mse);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::label;

    fn rand_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_planes(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = rand_image(1, 16, 16);
        let a = Image::from_planes(16, 16, a.data().iter().map(|v| v * 0.8).collect()).unwrap();
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        let b = Image::from_planes(16, 16, a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-5);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
    }

    /// Direct per-window SSIM, no separability.
    fn ssim_oracle(a: &Image, b: &Image, mask: Option<&Mask>) -> f64 {
        let (h, w) = (a.height(), a.width());
        let r = 5usize;
        let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let mut vals = Vec::new();
        for cy in r..h - r {
            for cx in r..w - r {
                if mask.is_some_and(|m| !m.get(cy, cx)) {
                    continue;
                }
                for c in 0..3 {
                    let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let (y, x) = (cy + i - r, cx + j - r);
                            if mask.is_some_and(|m| !m.get(y, x)) {
                                continue;
                            }
                            let wt = g[i] * g[j];
                            let (p, q) = (a.get(y, x, c) as f64, b.get(y, x, c) as f64);
                            n += wt;
                            sx += wt * p;
                            sy += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (mx, my) = (sx / n, sy / n);
                    let (vx, vy, cxy) = (sxx / n - mx * mx, syy / n - my * my, sxy / n - mx * my);
                    vals.push(
                        ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4)),
                    );
                }
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn metrics_match_direct_oracles() {
        let a = rand_image(2, 20, 24);
        let b = rand_image(3, 20, 24);
        let mut sum = 0.0;
        for (p, q) in a.data().iter().zip(b.data()) {
            sum += (*p as f64 - *q as f64).powi(2);
        }
        let want = 10.0 * (a.data().len() as f64 / sum).log10();
        assert!((psnr(&a, &b, None).unwrap() - want).abs() < 1e-6);
        assert!((ssim(&a, &b, None).unwrap() - ssim_oracle(&a, &b, None)).abs() < 1e-4);
        let f = synth_sample(0, Domain::Makeup, 0, 32).unwrap();
        let g = synth_sample(0, Domain::Makeup, 1, 32).unwrap();
        let fg = f.parsing.foreground();
        assert!((ssim(&f.image, &g.image, Some(&fg)).unwrap() - ssim_oracle(&f.image, &g.image, Some(&fg))).abs() < 1e-4);
    }

    #[test]
    fn metric_symmetry_and_mask_invariance() {
        let f = synth_sample(0, Domain::Makeup, 2, 32).unwrap();
        let g = synth_sample(0, Domain::NonMakeup, 2, 32).unwrap();
        let m = f.parsing.foreground();
        let (a, b) = (&f.image, &g.image);
        assert_eq!(psnr(a, b, Some(&m)).unwrap(), psnr(b, a, Some(&m)).unwrap());
        assert!((ssim(a, b, Some(&m)).unwrap() - ssim(b, a, Some(&m)).unwrap()).abs() < 1e-12);
        let (am, bm) = (a.masked(&m), b.masked(&m));
        assert_eq!(psnr(&am, &bm, Some(&m)).unwrap(), psnr(a, b, Some(&m)).unwrap());
        assert!((ssim(&am, &bm, Some(&m)).unwrap() - ssim(a, b, Some(&m)).unwrap()).abs() < 1e-12);
        let s = ssim(a, b, None).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!(psnr(a, &Image::new(8, 8), None).is_err());
    }

    struct CopyReference;

    impl Transferer for CopyReference {
        fn transfer(&self, _x: FaceRef<'_>, y: FaceRef<'_>) -> Result<Image> {
            Ok(y.0.clone())
        }
    }

    fn sets(n: u64) -> (Vec<FaceSample>, Vec<FaceSample>) {
        let m = (0..n).map(|i| synth_sample(4, Domain::Makeup, i, 32).unwrap()).collect();
        let b = (0..n).map(|i| synth_sample(4, Domain::NonMakeup, i, 32).unwrap()).collect();
        (m, b)
    }

    #[test]
    fn identity_stress_gives_perfect_scores() {
        let (m, b) = sets(3);
        for sc in [Scenario::Crop, Scenario::Rotate] {
            let r = self_aug_protocol(&CopyReference, &m, &b, 0, sc, &ProtocolParams::identity()).unwrap();
            assert_eq!(r.count, 3);
            assert!(r.rows.iter().all(|row| row.psnr == f64::INFINITY && (row.ssim - 1.0).abs() < 1e-12));
            assert_eq!(r.mean_psnr, f64::INFINITY);
        }
    }

    #[test]
    fn protocol_is_deterministic_and_aggregates_are_means() {
        let (m, b) = sets(4);
        let model = Model::new(
            crate::networks::ParamSet::init(&crate::networks::ArchConfig::toy(2)).unwrap(),
            100.0,
        )
        .unwrap();
        let r1 = self_aug_protocol(&model, &m, &b, 9, Scenario::Rotate, &ProtocolParams::default()).unwrap();
        let r2 = self_aug_protocol(&model, &m, &b, 9, Scenario::Rotate, &ProtocolParams::default()).unwrap();
        assert_eq!(r1, r2);
        let mp = r1.rows.iter().map(|r| r.psnr).sum::<f64>() / 4.0;
        assert!((r1.mean_psnr - mp).abs() < 1e-12);
        let crop = self_aug_protocol(&CopyReference, &m, &b, 9, Scenario::Crop, &ProtocolParams::default()).unwrap();
        assert!(crop.rows.iter().all(|r| r.psnr.is_finite() && r.psnr == r.reference_psnr));
        assert!(self_aug_protocol(&model, &[], &b, 0, Scenario::Crop, &ProtocolParams::default()).is_err());
    }

    #[test]
    fn frequency_report_isolates_components() {
        let (a, _, p) = synth_pair(0, 0, 32).unwrap();
        let same = frequency_mse_report(&[(a.clone(), a.clone(), p.clone())], 2).unwrap();
        assert_eq!((same.mean_lf_mse, same.mean_hf_mse), (0.0, 0.0));

        // all-foreground face shifted by 0.2: only the LF moves
        let full = ParsingMap::filled(32, 32, label::SKIN);
        let src = Image::from_planes(32, 32, a.data().iter().map(|v| v * 0.7).collect()).unwrap();
        let shifted = Image::from_planes(32, 32, src.data().iter().map(|v| v + 0.2).collect()).unwrap();
        let r = frequency_mse_report(&[(src, shifted, full)], 2).unwrap();
        assert!(r.mean_hf_mse <= 1e-4, "{}", r.mean_hf_mse);
        assert!((r.mean_lf_mse - 0.04).abs() < 1e-6);
    }

    #[test]
    fn synthetic_makeup_lives_in_low_frequencies() {
        let pairs: Vec<_> = (0..20).map(|i| synth_pair(0, i, 64).unwrap()).collect();
        let r = frequency_mse_report(&pairs, 2).unwrap();
        assert_eq!(r.rows.len(), 20);
        assert!(r.mean_lf_mse > r.mean_hf_mse, "{r:?}");
    }

    #[test]
    fn evaluate_covers_both_scenarios() {
        let cfg = EvalConfig {
            samples: 3,
            size: 32,
            ..Default::default()
        };
        let rep = evaluate(&CopyReference, 2, &cfg).unwrap();
        assert_eq!(rep.scenarios.len(), 2);
        assert!(rep.scenarios.iter().all(|s| s.count == 3 && s.rows[0].id.ends_with("00200")));
        assert_eq!(rep.frequency.as_ref().unwrap().rows.len(), 3);
    }

    #[test]
    fn report_serialises_infinity() {
        let (m, b) = sets(1);
        let r = self_aug_protocol(&CopyReference, &m, &b, 0, Scenario::Crop, &ProtocolParams::identity()).unwrap();
        let rep = EvalReport::new(
            EvalConfig {
                checkpoint: "x".into(),
                samples: 1,
                size: 32,
                protocol: ProtocolParams::identity(),
                ..Default::default()
            },
            vec![r],
            None,
        );
        let json = rep.to_json().unwrap();
        assert!(json.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
        assert!(rep.to_markdown().contains("| crop | 1 | inf |"));
    }
}

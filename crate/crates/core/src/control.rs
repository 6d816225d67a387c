//! Inference-time makeup control. Every operation builds a conditioning
//! array on the LF grid from deformed reference LFs and renders it with the
//! source's background and high-frequency detail.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::correspondence::{correlation_matrix, deform, validate_tau, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::facedata::region_masks;
use crate::image::{Image, Mask, ParsingMap};
use crate::networks::{render, sc_encode, ParamSet};
use crate::pyramid::{decompose, Decomposition};
use crate::tensor::Array;

/// An image with its parsing map.
pub type FaceRef<'a> = (&'a Image, &'a ParsingMap);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Lip,
    Eye,
    Face,
    Global,
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lip" => Ok(Region::Lip),
            "eye" => Ok(Region::Eye),
            "face" => Ok(Region::Face),
            "global" => Ok(Region::Global),
            _ => Err(Error::Config(format!("unknown region {s:?}; expected lip, eye, face or global"))),
        }
    }
}

/// Clamps `beta` to `[0, 1]`, returning a warning when it had to.
pub fn clamp_beta(beta: f64) -> Result<(f64, Option<String>)> {
    if beta.is_nan() {
        return Err(Error::Config("beta is NaN".into()));
    }
    if (0.0..=1.0).contains(&beta) {
        return Ok((beta, None));
    }
    let c = beta.clamp(0.0, 1.0);
    let msg = format!("beta {beta} clamped to {c}");
    warn!("{msg}");
    Ok((c, Some(msg)))
}

/// Region masks on the LF grid: max-pooled, then made disjoint with
/// precedence lip > eye > face.
#[derive(Clone, Debug, PartialEq)]
pub struct LfMasks {
    pub fg: Mask,
    pub lip: Mask,
    pub eye: Mask,
    pub face: Mask,
}

impl LfMasks {
    pub fn new(parsing: &ParsingMap, d: usize) -> Result<Self> {
        let r = region_masks(parsing);
        let lip = r.lip.max_pool(d)?;
        let eye = r.eye.max_pool(d)?.and_not(&lip);
        let face = r.face.max_pool(d)?.and_not(&lip).and_not(&eye);
        Ok(Self {
            fg: r.fg.max_pool(d)?,
            lip,
            eye,
            face,
        })
    }

    pub fn region(&self, region: Region) -> &Mask {
        match region {
            Region::Lip => &self.lip,
            Region::Eye => &self.eye,
            Region::Face => &self.face,
            Region::Global => &self.fg,
        }
    }
}

/// `(1−β)·a + β·b` with exact endpoints.
pub fn lerp(a: &Array<f32>, b: &Array<f32>, beta: f64) -> Result<Array<f32>> {
    same_shape(a, b)?;
    Ok(if beta == 0.0 {
        a.clone()
    } else if beta == 1.0 {
        b.clone()
    } else {
        a.zip_map(b, |p, q| ((1.0 - beta) * p as f64 + beta * q as f64) as f32)
    })
}

fn same_shape(a: &Array<f32>, b: &Array<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `inside` where `mask` is set, `outside` elsewhere, for `(1, C, h, w)` arrays.
pub fn select(mask: &Mask, inside: &Array<f32>, outside: &Array<f32>) -> Result<Array<f32>> {
    same_shape(inside, outside)?;
    let (_, c, h, w) = inside.dims4()?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "mask {}x{} vs LF {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let n = h * w;
    let m = mask.data();
    Ok(Array::from_fn(&[1, c, h, w], |i| {
        if m[i % n] {
            inside.data()[i]
        } else {
            outside.data()[i]
        }
    }))
}

/// Global interpolation of two deformed LFs.
pub fn cond_global(y1: &Array<f32>, y2: &Array<f32>, beta: f64) -> Result<Array<f32>> {
    lerp(y1, y2, beta)
}

/// Interpolation inside `mask`, `filler` outside.
pub fn cond_local(y1: &Array<f32>, y2: &Array<f32>, beta: f64, mask: &Mask, filler: &Array<f32>) -> Result<Array<f32>> {
    select(mask, &lerp(y1, y2, beta)?, filler)
}

/// Skin-tone preservation: on the face mask blend from the source tone
/// `xl` toward `y2`, elsewhere `y2`.
pub fn cond_skin(xl: &Array<f32>, y2: &Array<f32>, beta: f64, face: &Mask) -> Result<Array<f32>> {
    select(face, &lerp(xl, y2, beta)?, y2)
}

/// Lip from `y1`, eyes from `y2`, face from `y3`, `filler` elsewhere.
pub fn cond_partial(y: [&Array<f32>; 3], masks: &LfMasks, filler: &Array<f32>) -> Result<Array<f32>> {
    let c = select(&masks.face, y[2], filler)?;
    let c = select(&masks.eye, y[1], &c)?;
    select(&masks.lip, y[0], &c)
}

/// Trained weights plus the temperature they were trained with.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: ParamSet<f32>,
    pub tau: f64,
}

impl Model {
    pub fn new(params: ParamSet<f32>, tau: f64) -> Result<Self> {
        params.validate()?;
        validate_tau(tau)?;
        Ok(Self { params, tau })
    }

    /// Loads a checkpoint; the temperature comes from its embedded training
    /// config when present.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let tau = ck
            .metadata
            .get("train_config")
            .and_then(|s| serde_json::from_str::<serde_json::Value>(s).ok())
            .and_then(|v| v.get("tau").and_then(|t| t.as_f64()))
            .unwrap_or(DEFAULT_TAU);
        Self::new(ck.params, tau)
    }

    pub fn d(&self) -> usize {
        self.params.config.d
    }

    pub fn prepare(&self, face: FaceRef<'_>) -> Result<Prepared> {
        let dec = decompose::<f32>(face.0, face.1, self.d())?;
        let features = sc_encode(&self.params, face.0, face.1)?;
        let masks = LfMasks::new(face.1, self.d())?;
        Ok(Prepared { dec, features, masks })
    }

    /// Reference LF deformed to the source geometry.
    pub fn deformed_lf(&self, x: &Prepared, y: &Prepared) -> Result<Array<f32>> {
        let corr = correlation_matrix(&x.features, &y.features, self.tau)?;
        deform(&corr, &y.dec.lf)
    }

    pub fn render(&self, x: &Prepared, cond: &Array<f32>) -> Result<Image> {
        let out = render(&self.params, &x.dec.bg, &x.dec.hf, cond)?;
        if !out.all_finite() {
            return Err(Error::non_finite("render", "renderer output"));
        }
        Image::from_array(&out)
    }
}

/// Decomposition, features and LF masks of one face.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dec: Decomposition<f32>,
    pub features: Array<f32>,
    pub masks: LfMasks,
}

/// Outside-area filler for local operations.
#[derive(Clone, Copy, Debug, Default)]
pub enum Filler<'a> {
    /// The source's own LF.
    #[default]
    Source,
    /// An earlier result's LF, e.g. from a previous transfer.
    Given(&'a Array<f32>),
}

impl Filler<'_> {
    fn resolve<'b>(&'b self, x: &'b Prepared) -> &'b Array<f32> {
        match self {
            Filler::Source => &x.dec.lf,
            Filler::Given(a) => a,
        }
    }
}

/// Rendered result with its conditioning array and any warnings.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub image: Image,
    pub cond: Array<f32>,
    pub warnings: Vec<String>,
}

impl ControlOutput {
    /// The conditioning LF as a small image.
    pub fn preview(&self) -> Result<Image> {
        Image::from_array(&self.cond)
    }
}

/// The control operations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum ControlOp {
    Transfer,
    Removal,
    InterpolateGlobal { beta: f64 },
    InterpolateLocal { beta: f64, region: Region },
    PreserveSkin { beta: f64 },
    Partial,
    Edit,
}

impl ControlOp {
    pub fn references(&self) -> usize {
        match self {
            ControlOp::Transfer | ControlOp::Removal | ControlOp::Edit | ControlOp::PreserveSkin { .. } => 1,
            ControlOp::InterpolateGlobal { .. } | ControlOp::InterpolateLocal { .. } => 2,
            ControlOp::Partial => 3,
        }
    }
}

fn nonempty<'a>(mask: &'a Mask, region: Region) -> Result<&'a Mask> {
    if mask.is_empty() {
        return Err(Error::Data(format!("{region:?} region is empty on the source face").to_lowercase()));
    }
    Ok(mask)
}

/// Plain transfer: `render(x_bg, x_h, deform(M, y_l))`.
pub fn transfer(model: &Model, x: FaceRef<'_>, y: FaceRef<'_>) -> Result<ControlOutput> {
    let xp = model.prepare(x)?;
    let cond = model.deformed_lf(&xp, &model.prepare(y)?)?;
    Ok(ControlOutput {
        image: model.render(&xp, &cond)?,
        cond,
        warnings: vec![],
    })
}

/// Removal is transfer with a makeup source and a bare reference.
pub fn removal(model: &Model, x_makeup: FaceRef<'_>, y_bare: FaceRef<'_>) -> Result<ControlOutput> {
    transfer(model, x_makeup, y_bare)
}

pub fn interpolate_global(model: &Model, x: FaceRef<'_>, y1: FaceRef<'_>, y2: FaceRef<'_>, beta: f64) -> Result<ControlOutput> {
    let (beta, w) = clamp_beta(beta)?;
    let xp = model.prepare(x)?;
    let a = model.deformed_lf(&xp, &model.prepare(y1)?)?;
    let b = model.deformed_lf(&xp, &model.prepare(y2)?)?;
    let cond = cond_global(&a, &b, beta)?;
    Ok(ControlOutput {
        image: model.render(&xp, &cond)?,
        cond,
        warnings: w.into_iter().collect(),
    })
}

pub fn interpolate_local(
    model: &Model,
    x: FaceRef<'_>,
    y1: FaceRef<'_>,
    y2: FaceRef<'_>,
    beta: f64,
    region: Region,
    filler: Filler<'_>,
) -> Result<ControlOutput> {
    let (beta, w) = clamp_beta(beta)?;
    let xp = model.prepare(x)?;
    let mask = nonempty(xp.masks.region(region), region)?;
    let a = model.deformed_lf(&xp, &model.prepare(y1)?)?;
    let b = model.deformed_lf(&xp, &model.prepare(y2)?)?;
    let cond = cond_local(&a, &b, beta, mask, filler.resolve(&xp))?;
    Ok(ControlOutput {
        image: model.render(&xp, &cond)?,
        cond,
        warnings: w.into_iter().collect(),
    })
}

/// `beta = 0` keeps the source tone on the face (or `filler`'s), `beta = 1`
/// is plain transfer from `y2`.
pub fn preserve_skin(model: &Model, x: FaceRef<'_>, y2: FaceRef<'_>, beta: f64, filler: Filler<'_>) -> Result<ControlOutput> {
    let (beta, w) = clamp_beta(beta)?;
    let xp = model.prepare(x)?;
    let face = nonempty(&xp.masks.face, Region::Face)?;
    let b = model.deformed_lf(&xp, &model.prepare(y2)?)?;
    let cond = cond_skin(filler.resolve(&xp), &b, beta, face)?;
    Ok(ControlOutput {
        image: model.render(&xp, &cond)?,
        cond,
        warnings: w.into_iter().collect(),
    })
}

/// Lips from `y[0]`, eyes from `y[1]`, remaining face from `y[2]`.
pub fn partial_transfer(model: &Model, x: FaceRef<'_>, y: [FaceRef<'_>; 3], filler: Filler<'_>) -> Result<ControlOutput> {
    let xp = model.prepare(x)?;
    let mut lfs = Vec::with_capacity(3);
    for r in y {
        lfs.push(model.deformed_lf(&xp, &model.prepare(r)?)?);
    }
    let cond = cond_partial([&lfs[0], &lfs[1], &lfs[2]], &xp.masks, filler.resolve(&xp))?;
    Ok(ControlOutput {
        image: model.render(&xp, &cond)?,
        cond,
        warnings: vec![],
    })
}

/// Transfer from a reference whose pixels were painted by the caller. The
/// deformed LF in the output shows where the paint lands.
pub fn edit_and_transfer(model: &Model, x: FaceRef<'_>, y_edited: FaceRef<'_>) -> Result<ControlOutput> {
    let (img, parsing) = y_edited;
    if (img.height(), img.width()) != (parsing.height(), parsing.width()) {
        return Err(Error::Dimension(format!(
            "edited reference {}x{} vs parsing {}x{}",
            img.height(),
            img.width(),
            parsing.height(),
            parsing.width()
        )));
    }
    transfer(model, x, y_edited)
}

/// Dispatches `op` over `references` (count per [`ControlOp::references`]).
pub fn run(model: &Model, op: &ControlOp, source: FaceRef<'_>, references: &[FaceRef<'_>]) -> Result<ControlOutput> {
    if references.len() != op.references() {
        return Err(Error::Config(format!(
            "{op:?} needs {} reference(s), got {}",
            op.references(),
            references.len()
        )));
    }
    let r = references;
    match *op {
        ControlOp::Transfer => transfer(model, source, r[0]),
        ControlOp::Removal => removal(model, source, r[0]),
        ControlOp::Edit => edit_and_transfer(model, source, r[0]),
        ControlOp::InterpolateGlobal { beta } => interpolate_global(model, source, r[0], r[1], beta),
        ControlOp::InterpolateLocal { beta, region } => {
            interpolate_local(model, source, r[0], r[1], beta, region, Filler::Source)
        }
        ControlOp::PreserveSkin { beta } => preserve_skin(model, source, r[0], beta, Filler::Source),
        ControlOp::Partial => partial_transfer(model, source, [r[0], r[1], r[2]], Filler::Source),
    }
}

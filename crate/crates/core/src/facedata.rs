//! Procedural faces with exact parsing maps, region masks and dataset IO.
//!
//! A face is drawn from one RNG stream: geometry and skin texture first, then
//! (optionally) makeup. Two calls with equally seeded generators therefore
//! share geometry and texture whether or not makeup is applied. Makeup only
//! changes smooth colour fields, so its effect sits mostly in the
//! low-frequency band.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{label, Image, Mask, ParsingMap};
use crate::pyramid::resize_operator;
use crate::tensor::Array;

pub const MIN_SIZE: usize = 32;
/// Side lengths must be divisible by this (the largest supported factor).
pub const SIZE_MULTIPLE: usize = 8;
pub const EYE_DILATION: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    NonMakeup,
    Makeup,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::NonMakeup => "non-makeup",
            Domain::Makeup => "makeup",
        }
    }

    fn tag(self) -> char {
        match self {
            Domain::NonMakeup => 'n',
            Domain::Makeup => 'm',
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub image: Image,
    pub parsing: ParsingMap,
    pub domain: Domain,
    pub id: String,
}

pub fn validate_size(size: usize) -> Result<()> {
    if size < MIN_SIZE || size % SIZE_MULTIPLE != 0 {
        return Err(Error::Config(format!(
            "face size must be a multiple of {SIZE_MULTIPLE} and at least {MIN_SIZE}, got {size}"
        )));
    }
    Ok(())
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    /// Squared normalised radius; `< 1` inside.
    fn r2(&self, u: f64, v: f64) -> f64 {
        let dx = (u - self.cx) / self.rx;
        let dy = (v - self.cy) / self.ry;
        dx * dx + dy * dy
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        self.r2(u, v) < 1.0
    }
}

struct Geometry {
    face: Ellipse,
    hair: Ellipse,
    hair_floor: f64,
    eyes: [Ellipse; 2],
    irises: [Ellipse; 2],
    brows: [Ellipse; 2],
    nose: Ellipse,
    lip_line: f64,
    upper_lip: Ellipse,
    lower_lip: Ellipse,
    bg: [f64; 3],
    bg_slope: [f64; 3],
    skin: [f64; 3],
    hair_color: [f64; 3],
    iris_color: [f64; 3],
    light: (f64, f64),
}

fn rgb(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn draw_geometry(rng: &mut impl Rng) -> Geometry {
    let cx = 0.5 + rng.random_range(-0.04..0.04);
    let cy = 0.55 + rng.random_range(-0.03..0.03);
    let face = Ellipse {
        cx,
        cy,
        rx: rng.random_range(0.26..0.31),
        ry: rng.random_range(0.33..0.38),
    };
    let hair = Ellipse {
        cx,
        cy: cy - rng.random_range(0.05..0.09),
        rx: face.rx * rng.random_range(1.12..1.25),
        ry: face.ry * rng.random_range(1.0..1.1),
    };
    let hair_floor = cy + rng.random_range(0.0..0.12);

    let ex = rng.random_range(0.11..0.14);
    let ey = rng.random_range(0.06..0.09);
    let erx = rng.random_range(0.05..0.065);
    let ery = rng.random_range(0.028..0.036);
    let eyes = [-1.0, 1.0].map(|s| Ellipse {
        cx: cx + s * ex,
        cy: cy - ey,
        rx: erx,
        ry: ery,
    });
    let irises = [-1.0, 1.0].map(|s| Ellipse {
        cx: cx + s * ex,
        cy: cy - ey,
        rx: ery,
        ry: ery,
    });
    let brow_dy = rng.random_range(0.055..0.07);
    let brow_rx = rng.random_range(0.06..0.075);
    let brow_ry = rng.random_range(0.02..0.028);
    let brows = [-1.0, 1.0].map(|s| Ellipse {
        cx: cx + s * ex,
        cy: cy - ey - brow_dy,
        rx: brow_rx,
        ry: brow_ry,
    });
    let nose = Ellipse {
        cx,
        cy: cy + rng.random_range(0.01..0.04),
        rx: rng.random_range(0.025..0.035),
        ry: rng.random_range(0.07..0.09),
    };
    let lip_line = cy + rng.random_range(0.17..0.2);
    let lw = rng.random_range(0.09..0.12);
    let upper_lip = Ellipse {
        cx,
        cy: lip_line,
        rx: lw,
        ry: rng.random_range(0.045..0.055),
    };
    let lower_lip = Ellipse {
        cx,
        cy: lip_line,
        rx: lw,
        ry: rng.random_range(0.05..0.065),
    };

    let bg = rgb(rng, 0.15, 0.85);
    let bg_slope = rgb(rng, -0.15, 0.15);
    let tone = rng.random_range(0.0..1.0);
    let mut skin = mix([0.95, 0.80, 0.70], [0.55, 0.38, 0.28], tone);
    for c in &mut skin {
        *c += rng.random_range(-0.03..0.03);
    }
    let hair_color = mix([0.05, 0.04, 0.03], [0.55, 0.40, 0.25], rng.random_range(0.0..1.0));
    let iris_color = rgb(rng, 0.05, 0.4);
    let light = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    Geometry {
        face,
        hair,
        hair_floor,
        eyes,
        irises,
        brows,
        nose,
        lip_line,
        upper_lip,
        lower_lip,
        bg,
        bg_slope,
        skin,
        hair_color,
        iris_color,
        light,
    }
}

fn label_at(g: &Geometry, u: f64, v: f64) -> u8 {
    if g.face.contains(u, v) {
        if g.eyes[0].contains(u, v) {
            label::LEFT_EYE
        } else if g.eyes[1].contains(u, v) {
            label::RIGHT_EYE
        } else if g.brows[0].contains(u, v) {
            label::LEFT_BROW
        } else if g.brows[1].contains(u, v) {
            label::RIGHT_BROW
        } else if v < g.lip_line && g.upper_lip.contains(u, v) {
            label::UPPER_LIP
        } else if v >= g.lip_line && g.lower_lip.contains(u, v) {
            label::LOWER_LIP
        } else if g.nose.contains(u, v) {
            label::NOSE
        } else {
            label::SKIN
        }
    } else if g.hair.contains(u, v) && v < g.hair_floor {
        label::HAIR
    } else {
        label::BACKGROUND
    }
}

fn base_color(g: &Geometry, l: u8, u: f64, v: f64) -> [f64; 3] {
    let shade = 1.0 + g.light.0 * (u - g.face.cx) + g.light.1 * (v - g.face.cy)
        - 0.25 * (g.face.r2(u, v) * 0.5).min(1.0);
    let skin = g.skin.map(|c| c * shade);
    match l {
        label::BACKGROUND => [0, 1, 2].map(|c| g.bg[c] + g.bg_slope[c] * (v - 0.5)),
        label::HAIR | label::LEFT_BROW | label::RIGHT_BROW => g.hair_color,
        label::LEFT_EYE | label::RIGHT_EYE => {
            let k = (l - label::LEFT_EYE) as usize;
            if g.irises[k].contains(u, v) {
                g.iris_color
            } else {
                [0.92, 0.92, 0.9]
            }
        }
        label::NOSE => skin.map(|c| c * 0.9),
        label::UPPER_LIP => [skin[0] * 0.92, skin[1] * 0.62, skin[2] * 0.62],
        label::LOWER_LIP => [skin[0] * 0.98, skin[1] * 0.68, skin[2] * 0.68],
        _ => skin,
    }
}

struct Makeup {
    lipstick: [f64; 3],
    lip_alpha: f64,
    shadow: [f64; 3],
    shadow_alpha: f64,
    shadow_scale: (f64, f64),
    blush: [f64; 3],
    blush_alpha: f64,
    blush_radius: f64,
    tint: [f64; 3],
    tint_alpha: f64,
}

fn draw_makeup(rng: &mut impl Rng) -> Makeup {
    Makeup {
        lipstick: [
            rng.random_range(0.5..0.95),
            rng.random_range(0.05..0.35),
            rng.random_range(0.1..0.5),
        ],
        lip_alpha: rng.random_range(0.65..0.9),
        shadow: rgb(rng, 0.1, 0.8),
        shadow_alpha: rng.random_range(0.5..0.8),
        shadow_scale: (rng.random_range(1.7..2.1), rng.random_range(2.8..3.6)),
        blush: [
            rng.random_range(0.85..1.0),
            rng.random_range(0.35..0.55),
            rng.random_range(0.4..0.6),
        ],
        blush_alpha: rng.random_range(0.25..0.45),
        blush_radius: rng.random_range(0.07..0.1),
        tint: rgb(rng, 0.45, 0.95),
        tint_alpha: rng.random_range(0.1..0.3),
    }
}

fn apply_makeup(g: &Geometry, m: &Makeup, l: u8, u: f64, v: f64, c: [f64; 3]) -> [f64; 3] {
    let mut c = c;
    let is_skin = matches!(l, label::SKIN | label::NOSE);
    if is_skin {
        c = mix(c, m.tint, m.tint_alpha);
        for e in &g.eyes {
            let shadow = Ellipse {
                cx: e.cx,
                cy: e.cy - 0.5 * e.ry,
                rx: e.rx * m.shadow_scale.0,
                ry: e.ry * m.shadow_scale.1,
            };
            let w = (1.0 - shadow.r2(u, v)).max(0.0);
            c = mix(c, m.shadow, m.shadow_alpha * w * w);
        }
        for s in [-1.0, 1.0] {
            let (bx, by) = (g.face.cx + s * 0.17, g.face.cy + 0.07);
            let d2 = ((u - bx).powi(2) + (v - by).powi(2)) / (m.blush_radius * m.blush_radius);
            c = mix(c, m.blush, m.blush_alpha * (-0.5 * d2).exp());
        }
    }
    if matches!(l, label::UPPER_LIP | label::LOWER_LIP) {
        c = mix(c, m.lipstick, m.lip_alpha);
    }
    c
}

/// Draws one face of side `size` from `rng`.
pub fn synth_face(rng: &mut impl Rng, size: usize, makeup: bool) -> Result<(Image, ParsingMap)> {
    validate_size(size)?;
    let g = draw_geometry(rng);
    let mut labels = vec![0u8; size * size];
    let mut clean = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let l = label_at(&g, u, v);
            labels[y * size + x] = l;
            clean[y * size + x] = base_color(&g, l, u, v);
        }
    }
    // fine texture, drawn before makeup so both variants share it
    let texture: Vec<f64> = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    if makeup {
        let m = draw_makeup(rng);
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                clean[i] = apply_makeup(&g, &m, labels[i], u, v, clean[i]);
            }
        }
    }
    let mut img = Image::new(size, size);
    for (i, (&l, col)) in labels.iter().zip(&clean).enumerate() {
        let amp = match l {
            label::BACKGROUND => 0.01,
            label::HAIR => 0.05,
            _ => 0.02,
        };
        for c in 0..3 {
            img.plane_mut(c)[i] = (col[c] + amp * texture[i]).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((img, ParsingMap::new(size, size, labels)?))
}

/// Deterministic generator for sample `index` of a domain.
pub fn sample_rng(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = match domain {
        Domain::NonMakeup => 0,
        Domain::Makeup => 1,
    };
    rng.set_stream((d << 40) | index);
    rng
}

pub fn sample_id(seed: u64, domain: Domain, index: u64) -> String {
    format!("synth-{seed}-{}-{index:05}", domain.tag())
}

pub fn synth_sample(seed: u64, domain: Domain, index: u64, size: usize) -> Result<FaceSample> {
    let mut rng = sample_rng(seed, domain, index);
    let (image, parsing) = synth_face(&mut rng, size, domain == Domain::Makeup)?;
    Ok(FaceSample {
        image,
        parsing,
        domain,
        id: sample_id(seed, domain, index),
    })
}

/// The same face with and without makeup: `(source, made-up, parsing)`.
pub fn synth_pair(seed: u64, index: u64, size: usize) -> Result<(Image, Image, ParsingMap)> {
    let (plain, parsing) = synth_face(&mut sample_rng(seed, Domain::Makeup, index), size, false)?;
    let (made_up, _) = synth_face(&mut sample_rng(seed, Domain::Makeup, index), size, true)?;
    Ok((plain, made_up, parsing))
}

/// Parses a synthetic id back into its generator coordinates.
pub fn parse_sample_id(id: &str) -> Option<(u64, Domain, u64)> {
    let rest = id.strip_prefix("synth-")?;
    let mut it = rest.split('-');
    let seed = it.next()?.parse().ok()?;
    let domain = match it.next()? {
        "m" => Domain::Makeup,
        "n" => Domain::NonMakeup,
        _ => return None,
    };
    let index = it.next()?.parse().ok()?;
    it.next().is_none().then_some((seed, domain, index))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub fg: Mask,
    pub bg: Mask,
    pub lip: Mask,
    pub eye: Mask,
    pub face: Mask,
}

/// Lip, eye and face regions with precedence lip > eye > face.
pub fn region_masks(parsing: &ParsingMap) -> RegionMasks {
    let fg = parsing.foreground();
    let bg = fg.not();
    let lip = parsing.mask_where(|l| l == label::UPPER_LIP || l == label::LOWER_LIP);
    let eyes = parsing.mask_where(|l| l == label::LEFT_EYE || l == label::RIGHT_EYE);
    let skin_or_eyes = parsing.mask_where(|l| l == label::SKIN).or(&eyes);
    let eye = eyes.dilate(EYE_DILATION).and(&skin_or_eyes).and_not(&lip);
    let face = fg.and_not(&lip).and_not(&eye);
    RegionMasks { fg, bg, lip, eye, face }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub size: usize,
    pub seed: u64,
    pub makeup: usize,
    pub non_makeup: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn io<T>(r: std::io::Result<T>, what: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|e| Error::io(what(), e))
}

/// Writes `images/<domain>/<id>.png` and `parsing/<domain>/<id>.png`.
pub fn save_sample(sample: &FaceSample, root: &Path) -> Result<(PathBuf, PathBuf)> {
    let name = format!("{}.png", sample.id);
    let img_dir = root.join("images").join(sample.domain.dir_name());
    let par_dir = root.join("parsing").join(sample.domain.dir_name());
    for d in [&img_dir, &par_dir] {
        io(fs::create_dir_all(d), || format!("creating {}", d.display()))?;
    }
    let (ip, pp) = (img_dir.join(&name), par_dir.join(&name));
    io(fs::write(&ip, sample.image.to_png()?), || format!("writing {}", ip.display()))?;
    io(fs::write(&pp, sample.parsing.to_png()?), || format!("writing {}", pp.display()))?;
    Ok((ip, pp))
}

/// Generates and saves a synthetic set plus its manifest.
pub fn write_synthetic_dataset(root: &Path, seed: u64, n_makeup: usize, n_non_makeup: usize, size: usize) -> Result<Manifest> {
    validate_size(size)?;
    for (domain, n) in [(Domain::NonMakeup, n_non_makeup), (Domain::Makeup, n_makeup)] {
        for i in 0..n as u64 {
            save_sample(&synth_sample(seed, domain, i, size)?, root)?;
        }
    }
    let m = Manifest {
        generator: "synthetic".into(),
        size,
        seed,
        makeup: n_makeup,
        non_makeup: n_non_makeup,
    };
    let p = root.join(MANIFEST_FILE);
    io(fs::write(&p, serde_json::to_vec_pretty(&m)?), || format!("writing {}", p.display()))?;
    Ok(m)
}

/// Bilinear image resize.
pub fn resize_image(img: &Image, h: usize, w: usize) -> Image {
    if (img.height(), img.width()) == (h, w) {
        return img.clone();
    }
    let rows = resize_operator::<f32>(img.height(), h);
    let cols = resize_operator::<f32>(img.width(), w).transpose2().expect("2-D");
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let plane = Array::from_vec(&[img.height(), img.width()], img.plane(c).to_vec()).expect("plane");
        let out = rows.matmul(&plane).and_then(|t| t.matmul(&cols)).expect("shapes agree");
        data.extend_from_slice(out.data());
    }
    Image::from_planes(h, w, data).expect("sizes agree")
}

/// Nearest-neighbour parsing resize.
pub fn resize_parsing(p: &ParsingMap, h: usize, w: usize) -> ParsingMap {
    if (p.height(), p.width()) == (h, w) {
        return p.clone();
    }
    let src = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut out = ParsingMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, p.get(src(y, p.height(), h), src(x, p.width(), w)));
        }
    }
    out
}

struct Entry {
    image: PathBuf,
    parsing: PathBuf,
    domain: Domain,
    id: String,
}

/// Lazily loads samples from `images/` and `parsing/`; unreadable or
/// unpaired files are skipped with a warning and counted.
pub struct DatasetReader {
    entries: std::vec::IntoIter<Entry>,
    size: Option<usize>,
    skipped: usize,
}

impl DatasetReader {
    pub fn open(root: &Path, size: Option<usize>) -> Result<Self> {
        if let Some(s) = size {
            validate_size(s)?;
        }
        let mut entries = Vec::new();
        let mut skipped = 0;
        for domain in [Domain::NonMakeup, Domain::Makeup] {
            let dir = root.join("images").join(domain.dir_name());
            let Ok(rd) = fs::read_dir(&dir) else { continue };
            let mut files: Vec<PathBuf> = rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            for image in files {
                let file = image.file_name().expect("file").to_owned();
                let parsing = root.join("parsing").join(domain.dir_name()).join(&file);
                if !parsing.is_file() {
                    warn!("no parsing map for {}; skipped", image.display());
                    skipped += 1;
                    continue;
                }
                let id = image.file_stem().expect("stem").to_string_lossy().into_owned();
                entries.push(Entry { image, parsing, domain, id });
            }
        }
        if entries.is_empty() {
            return Err(Error::Dataset {
                path: root.to_path_buf(),
                message: "no images found under images/{makeup,non-makeup}".into(),
            });
        }
        Ok(Self {
            entries: entries.into_iter(),
            size,
            skipped,
        })
    }

    /// Files skipped so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn load(&self, e: &Entry) -> Result<FaceSample> {
        let read = |p: &Path| io(fs::read(p), || format!("reading {}", p.display()));
        let mut image = Image::from_png(&read(&e.image)?)?;
        let mut parsing = ParsingMap::from_png(&read(&e.parsing)?)?;
        if (image.height(), image.width()) != (parsing.height(), parsing.width()) {
            return Err(Error::Data(format!("{}: image and parsing sizes differ", e.id)));
        }
        if let Some(s) = self.size {
            image = resize_image(&image, s, s);
            parsing = resize_parsing(&parsing, s, s);
        }
        Ok(FaceSample {
            image,
            parsing,
            domain: e.domain,
            id: e.id.clone(),
        })
    }
}

impl Iterator for DatasetReader {
    type Item = FaceSample;

    fn next(&mut self) -> Option<FaceSample> {
        loop {
            let e = self.entries.next()?;
            match self.load(&e) {
                Ok(s) => return Some(s),
                Err(err) => {
                    warn!("skipping {}: {err}", e.image.display());
                    self.skipped += 1;
                }
            }
        }
    }
}

/// Samples split by domain.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub non_makeup: Vec<FaceSample>,
    pub makeup: Vec<FaceSample>,
    pub skipped: usize,
}

impl Dataset {
    pub fn load(root: &Path, size: Option<usize>) -> Result<Self> {
        let mut reader = DatasetReader::open(root, size)?;
        let mut ds = Dataset::default();
        for s in reader.by_ref() {
            match s.domain {
                Domain::NonMakeup => ds.non_makeup.push(s),
                Domain::Makeup => ds.makeup.push(s),
            }
        }
        ds.skipped = reader.skipped();
        if ds.non_makeup.is_empty() || ds.makeup.is_empty() {
            return Err(Error::Dataset {
                path: root.to_path_buf(),
                message: format!(
                    "need samples in both domains, found {} non-makeup and {} makeup",
                    ds.non_makeup.len(),
                    ds.makeup.len()
                ),
            });
        }
        Ok(ds)
    }

    pub fn synthetic(seed: u64, n_makeup: usize, n_non_makeup: usize, size: usize) -> Result<Self> {
        let gen = |d, n: usize| (0..n as u64).map(|i| synth_sample(seed, d, i, size)).collect::<Result<Vec<_>>>();
        Ok(Self {
            non_makeup: gen(Domain::NonMakeup, n_non_makeup)?,
            makeup: gen(Domain::Makeup, n_makeup)?,
            skipped: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synth_sample(3, Domain::Makeup, 7, 64).unwrap();
        let b = synth_sample(3, Domain::Makeup, 7, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id, "synth-3-m-00007");
        assert_eq!(parse_sample_id(&a.id), Some((3, Domain::Makeup, 7)));
        assert_eq!(parse_sample_id("synth-3-x-1"), None);
        assert!(synth_face(&mut ChaCha8Rng::seed_from_u64(0), 24, false).is_err());
        assert!(synth_face(&mut ChaCha8Rng::seed_from_u64(0), 60, false).is_err());
    }

    #[test]
    fn makeup_only_changes_foreground() {
        for i in 0..10 {
            let (plain, made_up, parsing) = synth_pair(1, i, 64).unwrap();
            let (_, p2) = synth_face(&mut sample_rng(1, Domain::Makeup, i), 64, true).unwrap();
            assert_eq!(p2, parsing);
            let fg = parsing.foreground();
            let mut differs = false;
            for c in 0..3 {
                for (k, (&a, &b)) in plain.plane(c).iter().zip(made_up.plane(c)).enumerate() {
                    if fg.data()[k] {
                        differs |= a != b;
                    } else {
                        assert_eq!(a, b);
                    }
                }
            }
            assert!(differs);
        }
    }

    #[test]
    fn every_facial_label_occurs() {
        for size in [32, 64] {
            for i in 0..100 {
                let s = synth_sample(0, if i % 2 == 0 { Domain::Makeup } else { Domain::NonMakeup }, i, size).unwrap();
                let h = s.parsing.histogram();
                for (l, &count) in h.iter().enumerate().take(9).skip(1) {
                    assert!(count > 0, "label {l} missing in sample {i} at {size}");
                }
                assert!(s.parsing.foreground().count() * 20 >= size * size);
            }
        }
    }

    #[test]
    fn region_masks_hand_built() {
        // 8x8: eye at (2,2), lips at row 6 columns 3..5, hair row 0, rest skin
        let mut p = ParsingMap::filled(8, 8, label::SKIN);
        for x in 0..8 {
            p.set(0, x, label::HAIR);
        }
        p.set(2, 2, label::LEFT_EYE);
        for x in 3..5 {
            p.set(6, x, label::UPPER_LIP);
        }
        p.set(7, 7, label::BACKGROUND);
        let m = region_masks(&p);
        for y in 0..8 {
            for x in 0..8 {
                let l = p.get(y, x);
                let is_bg = l == label::HAIR || l == label::BACKGROUND;
                let is_lip = l == label::UPPER_LIP;
                let near_eye = y.abs_diff(2) <= 3 && x.abs_diff(2) <= 3;
                let is_eye = near_eye && !is_bg && !is_lip;
                assert_eq!(m.bg.get(y, x), is_bg, "bg {y},{x}");
                assert_eq!(m.lip.get(y, x), is_lip);
                assert_eq!(m.eye.get(y, x), is_eye, "eye {y},{x}");
                assert_eq!(m.face.get(y, x), !is_bg && !is_lip && !is_eye);
            }
        }
        let empty = region_masks(&ParsingMap::filled(4, 4, 0));
        assert!(empty.fg.is_empty() && empty.lip.is_empty() && empty.eye.is_empty() && empty.face.is_empty());
        assert_eq!(empty.bg.count(), 16);
    }

    #[test]
    fn region_masks_partition_synthetic_faces() {
        for i in 0..100 {
            let s = synth_sample(5, Domain::Makeup, i, 64).unwrap();
            let m = region_masks(&s.parsing);
            assert!(m.lip.and(&m.eye).is_empty());
            for k in 0..64 * 64 {
                let n = [&m.lip, &m.eye, &m.face, &m.bg].iter().filter(|mk| mk.data()[k]).count();
                assert_eq!(n, 1);
            }
            assert_eq!(m.fg, m.bg.not());
        }
    }

    #[test]
    fn save_load_round_trip_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let m = write_synthetic_dataset(root, 2, 2, 1, 32).unwrap();
        assert_eq!(m.makeup, 2);
        let ds = Dataset::load(root, None).unwrap();
        assert_eq!((ds.makeup.len(), ds.non_makeup.len(), ds.skipped), (2, 1, 0));
        let orig = synth_sample(2, Domain::Makeup, 1, 32).unwrap();
        let back = ds.makeup.iter().find(|s| s.id == orig.id).unwrap();
        assert_eq!(back.parsing, orig.parsing);
        assert!(back.image.max_abs_diff(&orig.image) <= 1.0 / 255.0 + 1e-6);

        // corrupt one file
        fs::write(root.join("images/makeup/synth-2-m-00000.png"), b"garbage").unwrap();
        let ds = Dataset::load(root, Some(32)).unwrap();
        assert_eq!((ds.makeup.len() + ds.non_makeup.len(), ds.skipped), (2, 1));
    }

    #[test]
    fn empty_directory_names_path() {
        let dir = tempfile::tempdir().unwrap();
        match Dataset::load(dir.path(), None) {
            Err(Error::Dataset { path, .. }) => assert_eq!(path, dir.path()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resize_on_load() {
        let s = synth_sample(0, Domain::NonMakeup, 0, 64).unwrap();
        let small = resize_image(&s.image, 32, 32);
        assert_eq!((small.height(), small.width()), (32, 32));
        let p = resize_parsing(&s.parsing, 32, 32);
        assert_eq!(p.get(16, 16), s.parsing.get(33, 33));
        let c = resize_image(&Image::filled(16, 16, [0.2, 0.4, 0.6]), 32, 32);
        assert!(c.max_abs_diff(&Image::filled(32, 32, [0.2, 0.4, 0.6])) < 1e-6);
    }
}

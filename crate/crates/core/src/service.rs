//! Transport-independent request handling for the inference service:
//! JSON request/response types, image payload decoding and a model
//! registry that can be swapped atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::control::{self, ControlOp, ControlOutput, Model, Region};
use crate::error::Error;
use crate::facedata::{parse_sample_id, synth_sample};
use crate::image::{Image, ParsingMap};

pub const API_SCHEMA: &str = "csdmt-api-v1";
/// Per-image cap on decoded PNG bytes.
pub const MAX_IMAGE_BYTES: usize = 4 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operation {
    Transfer,
    Removal,
    Interpolate,
    InterpolateLocal,
    Skin,
    Partial,
    EditTransfer,
}

impl Operation {
    pub const ALL: [Operation; 7] = [
        Operation::Transfer,
        Operation::Removal,
        Operation::Interpolate,
        Operation::InterpolateLocal,
        Operation::Skin,
        Operation::Partial,
        Operation::EditTransfer,
    ];

    /// URL path of the endpoint serving this operation.
    pub fn path(self) -> &'static str {
        match self {
            Operation::Transfer => "/transfer",
            Operation::Removal => "/removal",
            Operation::Interpolate => "/interpolate",
            Operation::InterpolateLocal => "/interpolate-local",
            Operation::Skin => "/skin",
            Operation::Partial => "/partial",
            Operation::EditTransfer => "/edit-transfer",
        }
    }
}

/// One face: a base64 PNG plus either a base64 PNG parsing map or a
/// synthetic sample id whose stored parsing can be regenerated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacePayload {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsing: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl FacePayload {
    pub fn from_face(image: &Image, parsing: Option<&ParsingMap>, id: Option<&str>) -> crate::Result<Self> {
        Ok(Self {
            image: B64.encode(image.to_png()?),
            parsing: parsing.map(|p| p.to_png().map(|b| B64.encode(b))).transpose()?,
            id: id.map(str::to_string),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    /// Filled from the endpoint when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operation: Option<Operation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub source: FacePayload,
    #[serde(default)]
    pub references: Vec<FacePayload>,
    /// Painted copy of `references[0]` for edit-transfer; its parsing
    /// defaults to the reference's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_reference: Option<FacePayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub schema: String,
    pub model: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview: Option<String>,
    pub timing_ms: f64,
    pub warnings: Vec<String>,
}

impl ApiResponse {
    pub fn image_png(&self) -> crate::Result<Vec<u8>> {
        B64.decode(&self.image).map_err(|e| Error::Png(format!("response image: {e}")))
    }
}

/// Structured failure; `status` is the HTTP status code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub schema: String,
    pub code: String,
    pub stage: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &str, stage: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            schema: API_SCHEMA.into(),
            code: code.into(),
            stage: stage.into(),
            message: message.into(),
        }
    }

    fn from_core(stage: &str, e: Error) -> Self {
        match e {
            Error::NonFinite { stage, message } => Self::new(500, "non-finite", &stage, message),
            Error::Png(m) => Self::new(400, "bad-image", stage, m),
            Error::Dimension(m) => Self::new(400, "bad-dimensions", stage, m),
            Error::Config(m) | Error::Data(m) => Self::new(400, "invalid-request", stage, m),
            other => Self::new(500, "internal", stage, other.to_string()),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {} at {}: {}", self.status, self.code, self.stage, self.message)
    }
}

impl std::error::Error for ApiError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub schema: String,
    pub status: String,
    pub models: Vec<String>,
    pub default_model: String,
    pub size: usize,
}

/// Loaded models keyed by id. Readers see one consistent snapshot.
#[derive(Debug)]
pub struct Snapshot {
    pub models: BTreeMap<String, Arc<Model>>,
    pub default_model: String,
}

#[derive(Debug)]
pub struct ModelRegistry {
    sources: Vec<(String, PathBuf)>,
    size: usize,
    current: RwLock<Arc<Snapshot>>,
}

/// Model id used for a checkpoint path: its file stem.
pub fn model_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

impl ModelRegistry {
    /// Loads every checkpoint; the first becomes the default model.
    pub fn load(checkpoints: &[PathBuf], size: usize) -> crate::Result<Self> {
        let sources: Vec<(String, PathBuf)> = checkpoints.iter().map(|p| (model_id(p), p.clone())).collect();
        let snap = Self::read(&sources)?;
        Ok(Self {
            sources,
            size,
            current: RwLock::new(Arc::new(snap)),
        })
    }

    /// Registry over already-loaded models.
    pub fn from_models(models: Vec<(String, Model)>, size: usize) -> crate::Result<Self> {
        let default_model = models
            .first()
            .map(|(id, _)| id.clone())
            .ok_or_else(|| Error::Config("the service needs at least one model".into()))?;
        Ok(Self {
            sources: vec![],
            size,
            current: RwLock::new(Arc::new(Snapshot {
                models: models.into_iter().map(|(id, m)| (id, Arc::new(m))).collect(),
                default_model,
            })),
        })
    }

    fn read(sources: &[(String, PathBuf)]) -> crate::Result<Snapshot> {
        let Some((default_model, _)) = sources.first() else {
            return Err(Error::Config("the service needs at least one checkpoint".into()));
        };
        let mut models = BTreeMap::new();
        for (id, path) in sources {
            models.insert(id.clone(), Arc::new(Model::load(path)?));
        }
        Ok(Snapshot {
            models,
            default_model: default_model.clone(),
        })
    }

    /// Re-reads the checkpoints from disk and swaps them in as a unit.
    pub fn reload(&self) -> crate::Result<()> {
        let snap = Self::read(&self.sources)?;
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(snap);
        Ok(())
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn health(&self) -> Health {
        let snap = self.snapshot();
        Health {
            schema: API_SCHEMA.into(),
            status: "ok".into(),
            models: snap.models.keys().cloned().collect(),
            default_model: snap.default_model.clone(),
            size: self.size,
        }
    }
}

fn decode_png(field: &str, b64: &str) -> Result<Vec<u8>, ApiError> {
    if b64.len() > MAX_IMAGE_BYTES.div_ceil(3) * 4 {
        return Err(ApiError::new(413, "too-large", field, format!("{field} exceeds {MAX_IMAGE_BYTES} bytes")));
    }
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| ApiError::new(400, "bad-image", field, format!("{field} is not valid base64: {e}")))?;
    if bytes.len() > MAX_IMAGE_BYTES {
        return Err(ApiError::new(413, "too-large", field, format!("{field} exceeds {MAX_IMAGE_BYTES} bytes")));
    }
    Ok(bytes)
}

fn decode_face(field: &str, p: &FacePayload, size: usize, fallback: Option<&ParsingMap>) -> Result<(Image, ParsingMap), ApiError> {
    let image = Image::from_png(&decode_png(field, &p.image)?)
        .map_err(|e| ApiError::new(400, "bad-image", field, format!("{field}: {e}")))?;
    if (image.height(), image.width()) != (size, size) {
        return Err(ApiError::new(
            400,
            "bad-dimensions",
            field,
            format!("{field} is {}x{}, the service expects {size}x{size}", image.height(), image.width()),
        ));
    }
    let pfield = format!("{field}.parsing");
    let parsing = if let Some(b) = &p.parsing {
        ParsingMap::from_png(&decode_png(&pfield, b)?)
            .map_err(|e| ApiError::new(400, "bad-image", &pfield, format!("{pfield}: {e}")))?
    } else if let Some((seed, domain, index)) = p.id.as_deref().and_then(parse_sample_id) {
        synth_sample(seed, domain, index, size)
            .map_err(|e| ApiError::from_core(&pfield, e))?
            .parsing
    } else if let Some(f) = fallback {
        f.clone()
    } else {
        return Err(ApiError::new(
            400,
            "missing-parsing",
            &pfield,
            format!("{field} has no parsing map and no synthetic sample id; no face parser is bundled"),
        ));
    };
    if (parsing.height(), parsing.width()) != (size, size) {
        return Err(ApiError::new(400, "bad-dimensions", &pfield, format!("{pfield} does not match the image size")));
    }
    Ok((image, parsing))
}

fn control_op(req: &ApiRequest, op: Operation) -> Result<ControlOp, ApiError> {
    let beta = || {
        req.beta
            .ok_or_else(|| ApiError::new(400, "invalid-request", "beta", format!("{} needs a beta", op.path())))
    };
    Ok(match op {
        Operation::Transfer => ControlOp::Transfer,
        Operation::Removal => ControlOp::Removal,
        Operation::EditTransfer => ControlOp::Edit,
        Operation::Partial => ControlOp::Partial,
        Operation::Interpolate => ControlOp::InterpolateGlobal { beta: beta()? },
        Operation::Skin => ControlOp::PreserveSkin { beta: beta()? },
        Operation::InterpolateLocal => ControlOp::InterpolateLocal {
            beta: beta()?,
            region: req.region.ok_or_else(|| {
                ApiError::new(400, "invalid-request", "region", "interpolate-local needs a region")
            })?,
        },
    })
}

/// Routes a request to its control operation. `endpoint`, when given,
/// must agree with the request's own operation field.
pub fn handle_request(req: &ApiRequest, endpoint: Option<Operation>, registry: &ModelRegistry) -> Result<ApiResponse, ApiError> {
    let start = Instant::now();
    if let Some(s) = &req.schema {
        if s != API_SCHEMA {
            return Err(ApiError::new(400, "bad-schema", "schema", format!("unsupported schema {s:?}; expected {API_SCHEMA}")));
        }
    }
    let op = match (endpoint, req.operation) {
        (Some(e), Some(o)) if e != o => {
            return Err(ApiError::new(400, "invalid-request", "operation", format!("operation {o:?} sent to {}", e.path())))
        }
        (Some(o), _) | (None, Some(o)) => o,
        (None, None) => return Err(ApiError::new(400, "invalid-request", "operation", "no operation given")),
    };
    let snap = registry.snapshot();
    let id = req.model.clone().unwrap_or_else(|| snap.default_model.clone());
    let model = snap
        .models
        .get(&id)
        .ok_or_else(|| ApiError::new(404, "unknown-model", "model", format!("no model {id:?} is loaded")))?;
    let cop = control_op(req, op)?;

    let size = registry.size();
    let source = decode_face("source", &req.source, size, None)?;
    let mut refs = Vec::with_capacity(req.references.len());
    for (i, r) in req.references.iter().enumerate() {
        refs.push(decode_face(&format!("references[{i}]"), r, size, None)?);
    }
    if refs.len() != cop.references() {
        return Err(ApiError::new(
            400,
            "invalid-request",
            "references",
            format!("{} needs {} reference(s), got {}", op.path(), cop.references(), refs.len()),
        ));
    }
    if op == Operation::EditTransfer {
        let edited = req.edited_reference.as_ref().ok_or_else(|| {
            ApiError::new(400, "invalid-request", "edited_reference", "edit-transfer needs an edited reference")
        })?;
        refs[0] = decode_face("edited_reference", edited, size, Some(&refs[0].1))?;
    }

    let ref_views: Vec<_> = refs.iter().map(|(i, p)| (i, p)).collect();
    let out: ControlOutput =
        control::run(model, &cop, (&source.0, &source.1), &ref_views).map_err(|e| ApiError::from_core("control", e))?;
    let encode = |img: &Image, stage: &str| img.to_png().map(|b| B64.encode(b)).map_err(|e| ApiError::from_core(stage, e));
    let preview = out.preview().map_err(|e| ApiError::from_core("preview", e))?;
    Ok(ApiResponse {
        schema: API_SCHEMA.into(),
        model: id,
        image: encode(&out.image, "encode result")?,
        preview: Some(encode(&preview, "encode preview")?),
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
        warnings: out.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facedata::{sample_id, Domain};
    use crate::networks::{ArchConfig, ParamSet};

    fn registry() -> ModelRegistry {
        let m = Model::new(ParamSet::init(&ArchConfig::toy(2)).unwrap(), 100.0).unwrap();
        ModelRegistry::from_models(vec![("toy".into(), m)], 32).unwrap()
    }

    fn payload(domain: Domain, index: u64, with_parsing: bool) -> FacePayload {
        let s = synth_sample(3, domain, index, 32).unwrap();
        let id = sample_id(3, domain, index);
        FacePayload::from_face(&s.image, with_parsing.then_some(&s.parsing), Some(&id)).unwrap()
    }

    fn request(refs: usize) -> ApiRequest {
        ApiRequest {
            source: payload(Domain::NonMakeup, 0, true),
            references: (0..refs as u64).map(|i| payload(Domain::Makeup, i, true)).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn transfer_matches_direct_call() {
        let reg = registry();
        let resp = handle_request(&request(1), Some(Operation::Transfer), &reg).unwrap();
        assert_eq!(resp.schema, API_SCHEMA);
        assert_eq!(resp.model, "toy");
        let x = synth_sample(3, Domain::NonMakeup, 0, 32).unwrap();
        let y = synth_sample(3, Domain::Makeup, 0, 32).unwrap();
        let (xi, yi) = (x.image.quantized(), y.image.quantized());
        let model = reg.snapshot().models["toy"].clone();
        let direct = control::transfer(&model, (&xi, &x.parsing), (&yi, &y.parsing)).unwrap();
        assert_eq!(resp.image_png().unwrap(), direct.image.to_png().unwrap());
        assert!(resp.preview.is_some());
    }

    #[test]
    fn synthetic_ids_stand_in_for_parsing() {
        let reg = registry();
        let mut req = request(1);
        let with = handle_request(&req, Some(Operation::Transfer), &reg).unwrap();
        req.source = payload(Domain::NonMakeup, 0, false);
        req.references[0] = payload(Domain::Makeup, 0, false);
        let without = handle_request(&req, Some(Operation::Transfer), &reg).unwrap();
        assert_eq!(with.image, without.image);
        req.source.id = Some("upload.png".into());
        let e = handle_request(&req, Some(Operation::Transfer), &reg).unwrap_err();
        assert_eq!((e.status, e.code.as_str(), e.stage.as_str()), (400, "missing-parsing", "source.parsing"));
    }

    #[test]
    fn betas_are_clamped_with_warning() {
        let reg = registry();
        let mut req = request(2);
        req.beta = Some(1.7);
        let hi = handle_request(&req, Some(Operation::Interpolate), &reg).unwrap();
        assert_eq!(hi.warnings.len(), 1);
        assert!(hi.warnings[0].contains("clamped to 1"));
        req.beta = Some(1.0);
        let one = handle_request(&req, Some(Operation::Interpolate), &reg).unwrap();
        assert!(one.warnings.is_empty());
        assert_eq!(hi.image, one.image);
    }

    #[test]
    fn error_classes() {
        let reg = registry();
        let mut req = request(1);
        req.model = Some("nope".into());
        assert_eq!(handle_request(&req, Some(Operation::Transfer), &reg).unwrap_err().status, 404);

        let mut req = request(1);
        req.source.image = "not base64!".into();
        let e = handle_request(&req, Some(Operation::Transfer), &reg).unwrap_err();
        assert_eq!((e.status, e.stage.as_str()), (400, "source"));

        let mut req = request(1);
        req.source.image = B64.encode(b"definitely not a png");
        assert_eq!(handle_request(&req, Some(Operation::Transfer), &reg).unwrap_err().code, "bad-image");

        let mut req = request(1);
        req.source.image = "A".repeat(MAX_IMAGE_BYTES * 2);
        assert_eq!(handle_request(&req, Some(Operation::Transfer), &reg).unwrap_err().status, 413);

        let big = synth_sample(3, Domain::Makeup, 0, 64).unwrap();
        let mut req = request(1);
        req.references[0] = FacePayload::from_face(&big.image, Some(&big.parsing), None).unwrap();
        assert_eq!(handle_request(&req, Some(Operation::Transfer), &reg).unwrap_err().code, "bad-dimensions");

        let req = request(1);
        assert_eq!(handle_request(&req, Some(Operation::Partial), &reg).unwrap_err().stage, "references");
        assert_eq!(handle_request(&req, Some(Operation::Skin), &reg).unwrap_err().stage, "beta");
        let mut req = request(1);
        req.operation = Some(Operation::Removal);
        assert!(handle_request(&req, Some(Operation::Transfer), &reg).is_err());
        req.schema = Some("v0".into());
        assert_eq!(handle_request(&req, None, &reg).unwrap_err().code, "bad-schema");
    }

    #[test]
    fn non_finite_maps_to_server_error_with_stage() {
        let mut params = ParamSet::init(&ArchConfig::toy(2)).unwrap();
        let name = params.paths_with_prefix("gmr.").next().unwrap().clone();
        params.get_mut(&name).unwrap().data_mut().fill(f32::MAX);
        let reg = ModelRegistry::from_models(vec![("bad".into(), Model { params, tau: 100.0 })], 32).unwrap();
        let e = handle_request(&request(1), Some(Operation::Transfer), &reg).unwrap_err();
        assert_eq!((e.status, e.code.as_str()), (500, "non-finite"));
        assert!(!e.stage.is_empty() && e.stage != "control", "{e}");
    }

    #[test]
    fn every_operation_routes_and_requests_are_independent() {
        let reg = registry();
        let mut req = request(3);
        req.beta = Some(0.5);
        req.region = Some(Region::Lip);
        req.edited_reference = Some(payload(Domain::Makeup, 5, false));
        let want_refs = |op| match op {
            Operation::Interpolate | Operation::InterpolateLocal => 2,
            Operation::Partial => 3,
            _ => 1,
        };
        let mut first = Vec::new();
        for op in Operation::ALL {
            let mut r = req.clone();
            r.references.truncate(want_refs(op));
            first.push(handle_request(&r, Some(op), &reg).unwrap().image);
        }
        for (op, want) in Operation::ALL.into_iter().rev().zip(first.iter().rev()) {
            let mut r = req.clone();
            r.references.truncate(want_refs(op));
            assert_eq!(&handle_request(&r, Some(op), &reg).unwrap().image, want, "{op:?}");
        }
        let h = reg.health();
        assert_eq!((h.status.as_str(), h.models.clone()), ("ok", vec!["toy".to_string()]));
    }

    #[test]
    fn reload_swaps_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desk.safetensors");
        let a = ParamSet::<f32>::init(&ArchConfig::toy(2)).unwrap();
        crate::checkpoint::Checkpoint::new(a).save(&path).unwrap();
        let reg = ModelRegistry::load(std::slice::from_ref(&path), 32).unwrap();
        assert_eq!(reg.health().models, vec!["desk".to_string()]);
        let before = handle_request(&request(1), Some(Operation::Transfer), &reg).unwrap();
        let b = ParamSet::<f32>::init(&ArchConfig { seed: 99, ..ArchConfig::toy(2) }).unwrap();
        crate::checkpoint::Checkpoint::new(b).save(&path).unwrap();
        reg.reload().unwrap();
        let after = handle_request(&request(1), Some(Operation::Transfer), &reg).unwrap();
        assert_ne!(before.image, after.image);
        assert!(ModelRegistry::load(&[], 32).is_err());
    }
}

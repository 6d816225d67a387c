//! Single-file tensor container for network weights, optimizer state and
//! frozen feature extractors.
//!
//! The file is a safetensors archive. Its metadata carries a format tag, the
//! architecture config as JSON, and any caller-supplied string entries.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::networks::{ArchConfig, ParamSet};
use crate::tensor::{Array, Real};

pub const CHECKPOINT_FORMAT: &str = "csdmt-ckpt-v1";
pub const FEATURES_FORMAT: &str = "csdmt-feat-v1";

const FORMAT_KEY: &str = "format";
const CONFIG_KEY: &str = "config";

/// Tensors plus string metadata, tagged with a format name.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub format: String,
    pub tensors: BTreeMap<String, Array<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn new(format: &str) -> Self {
        Self {
            format: format.to_string(),
            tensors: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, a)| {
                let mut bytes = Vec::with_capacity(a.len() * 4);
                for &v in a.data() {
                    v.write_le(&mut bytes);
                }
                (k.clone(), bytes, a.shape().to_vec())
            })
            .collect();
        let views = raw
            .iter()
            .map(|(k, b, s)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert(FORMAT_KEY.into(), self.format.clone());
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], expected_format: &str) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let format = metadata
            .remove(FORMAT_KEY)
            .ok_or_else(|| Error::Checkpoint("missing format tag".into()))?;
        if format != expected_format {
            return Err(Error::Checkpoint(format!(
                "format {format:?}, expected {expected_format:?}"
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {:?}", view.dtype())));
            }
            let data = view.data().chunks_exact(4).map(f32::read_le).collect();
            tensors.insert(name, Array::from_vec(view.shape(), data)?);
        }
        Ok(Self {
            format,
            tensors,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path, expected_format: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, expected_format)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Network weights plus optional extra tensors (optimizer moments) and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet<f32>,
    pub extra: BTreeMap<String, Array<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ParamSet<f32>) -> Self {
        Self {
            params,
            extra: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_FORMAT);
        c.metadata = self.metadata.clone();
        c.metadata
            .insert(CONFIG_KEY.into(), serde_json::to_string(&self.params.config)?);
        for (k, v) in self.params.tensors.iter().chain(&self.extra) {
            if c.tensors.insert(k.clone(), v.clone()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {k}")));
            }
        }
        Ok(c)
    }

    fn from_container(mut c: Container) -> Result<Self> {
        let config_json = c
            .metadata
            .remove(CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint("missing architecture config".into()))?;
        let config: ArchConfig = serde_json::from_str(&config_json)?;
        let shapes = config.param_shapes();
        let (params, extra): (BTreeMap<_, _>, BTreeMap<_, _>) =
            c.tensors.into_iter().partition(|(k, _)| shapes.contains_key(k));
        let params = ParamSet { config, tensors: params };
        params.validate()?;
        Ok(Self {
            params,
            extra,
            metadata: c.metadata,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes, CHECKPOINT_FORMAT)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, CHECKPOINT_FORMAT)?)
            .map_err(|e| match e {
                Error::Checkpoint(m) if !m.starts_with(&path.display().to_string()) => {
                    Error::Checkpoint(format!("{}: {m}", path.display()))
                }
                other => other,
            })
    }
}

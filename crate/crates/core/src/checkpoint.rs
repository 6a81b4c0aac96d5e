//! Versioned safetensors container: named tensors plus string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::{Error, Result};

pub const FORMAT: &str = "turbofill";
pub const FORMAT_VERSION: u32 = 1;

/// What a checkpoint file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Slow and fast backbones from `pretrain`.
    Backbones,
    /// A full training state.
    Train,
    /// Adapter weights only.
    Adapter,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Backbones => "backbones",
            Kind::Train => "train",
            Kind::Adapter => "adapter",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "backbones" => Ok(Kind::Backbones),
            "train" => Ok(Kind::Train),
            "adapter" => Ok(Kind::Adapter),
            other => Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
        }
    }
}

pub struct Checkpoint {
    kind: Kind,
    metadata: BTreeMap<String, String>,
    tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: Kind) -> Self {
        Self { kind, metadata: BTreeMap::new(), tensors: HashMap::new() }
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Checkpoint(format!("metadata {key:?} has invalid value {raw:?}")))
    }

    pub fn insert_all(&mut self, tensors: impl IntoIterator<Item = (String, Tensor)>) {
        self.tensors.extend(tensors);
    }

    pub fn get(&self, key: &str) -> Option<Tensor> {
        self.tensors.get(key).cloned()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("format_version".into(), FORMAT_VERSION.to_string());
        meta.insert("kind".into(), self.kind.as_str().into());
        let mut entries: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        safetensors::serialize(entries, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut metadata: BTreeMap<String, String> =
            header.metadata().clone().unwrap_or_default().into_iter().collect();
        if metadata.remove("format").as_deref() != Some(FORMAT) {
            return Err(Error::Checkpoint("not a turbofill checkpoint".into()));
        }
        let version = metadata.remove("format_version").unwrap_or_default();
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Checkpoint(format!("unsupported format version {version:?}")));
        }
        let kind = Kind::parse(&metadata.remove("kind").unwrap_or_default())?;
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        Ok(Self { kind, metadata, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the kind.
    pub fn load_kind(path: &Path, allowed: &[Kind]) -> Result<Self> {
        let ck = Self::load(path)?;
        if !allowed.contains(&ck.kind) {
            return Err(Error::Checkpoint(format!(
                "{}: expected a {} checkpoint, found {}",
                path.display(),
                allowed.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(" or "),
                ck.kind.as_str()
            )));
        }
        Ok(ck)
    }
}

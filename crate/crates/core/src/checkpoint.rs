//! Self-describing network checkpoints.
//!
//! One safetensors file per network. Weights are stored as `w.<param>`,
//! optimizer moments as `m.<param>` / `v.<param>`. The header metadata has a
//! single `pseudoseg-checkpoint` entry, a JSON object with the format version,
//! network kind, spec, epoch and optimizer step. One entry keeps the file bytes
//! independent of map iteration order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::optim::Adam;
use crate::params::ParamStore;
use crate::{Error, Result};

pub const FORMAT: &str = "pseudoseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: String,
    pub spec: serde_json::Value,
    pub epoch: usize,
    pub optimizer_step: u64,
    pub weights: BTreeMap<String, Tensor>,
    /// Empty for networks saved without optimizer state.
    pub optimizer: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn capture(
        network: &str,
        spec: serde_json::Value,
        epoch: usize,
        store: &ParamStore,
        optimizer: Option<&Adam>,
    ) -> Result<Self> {
        let (optimizer, optimizer_step) = match optimizer {
            Some(o) => o.export()?,
            None => (BTreeMap::new(), 0),
        };
        Ok(Self {
            network: network.to_string(),
            spec,
            epoch,
            optimizer_step,
            weights: store.snapshot()?,
            optimizer,
        })
    }

    /// Loads weights (and optimizer state when `optimizer` is given) into live objects.
    pub fn apply(&self, store: &ParamStore, optimizer: Option<&mut Adam>) -> Result<()> {
        store.restore(&self.weights)?;
        if let Some(o) = optimizer {
            o.import(&self.optimizer, self.optimizer_step)?;
        }
        Ok(())
    }

    /// Parses the stored spec into `T`.
    pub fn spec_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.spec.clone())
            .map_err(|e| Error::Checkpoint(format!("{} spec does not parse: {e}", self.network)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut tensors: Vec<(String, &Tensor)> =
            Vec::with_capacity(self.weights.len() + self.optimizer.len());
        tensors.extend(self.weights.iter().map(|(k, t)| (format!("w.{k}"), t)));
        tensors.extend(self.optimizer.iter().map(|(k, t)| (k.clone(), t)));
        let header = serde_json::json!({
            "version": VERSION,
            "network": self.network,
            "spec": self.spec,
            "epoch": self.epoch,
            "optimizer_step": self.optimizer_step,
        });
        let meta = HashMap::from([(FORMAT.to_string(), header.to_string())]);
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let bad = |what: String| Error::Checkpoint(format!("{}: {what}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(FORMAT))
            .ok_or_else(|| bad("not a checkpoint of this format".into()))?;
        let mut meta: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| bad(format!("header: {e}")))?;
        let mut field = |k: &str| {
            meta.get_mut(k)
                .map(serde_json::Value::take)
                .ok_or_else(|| bad(format!("missing `{k}` in header")))
        };
        let version = field("version")?.as_u64();
        if version != Some(VERSION as u64) {
            return Err(bad(format!("unsupported version {version:?}")));
        }
        let spec = field("spec")?;
        let network = field("network")?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| bad("bad network".into()))?;
        let epoch = field("epoch")?
            .as_u64()
            .ok_or_else(|| bad("bad epoch".into()))? as usize;
        let optimizer_step = field("optimizer_step")?
            .as_u64()
            .ok_or_else(|| bad("bad optimizer step".into()))?;
        let mut weights = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, t) in candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)? {
            if let Some(p) = name.strip_prefix("w.") {
                weights.insert(p.to_string(), t);
            } else if name.starts_with("m.") || name.starts_with("v.") {
                optimizer.insert(name, t);
            } else {
                return Err(bad(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(Self {
            network,
            spec,
            epoch,
            optimizer_step,
            weights,
            optimizer,
        })
    }
}

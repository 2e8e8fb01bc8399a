//! Everything a trained model needs, saved as one checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, LoraSet, ModelConfig, TransformerWeights};
use crate::numerics::{Matrix, Rng};
use crate::retrieval::{ModuleLora, RetrievalModule};

/// Backbone, retrieval module and optional stage-2 adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub model: ModelConfig,
    pub weights: TransformerWeights,
    pub module: RetrievalModule,
    pub lora: Option<LoraSet>,
    pub module_lora: Option<ModuleLora>,
    /// Free-form label such as `stage1` or `stage2`.
    pub stage: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    model: ModelConfig,
    stage: String,
    has_lora: bool,
}

impl ModelBundle {
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let header = BundleHeader {
            model: self.model.clone(),
            stage: self.stage.clone(),
            has_lora: self.lora.is_some(),
        };
        if self.lora.is_some() != self.module_lora.is_some() {
            return Err(Error::Checkpoint("backbone and module adapters must be saved together".into()));
        }
        let mut tensors = self.weights.named_tensors();
        tensors.extend(self.module.named_tensors());
        if let (Some(l), Some(ml)) = (&self.lora, &self.module_lora) {
            tensors.extend(l.named_tensors());
            tensors.extend(ml.named_tensors());
        }
        save_checkpoint(manifest, serde_json::to_value(header)?, &tensors)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let (config, mut tensors) = load_checkpoint(manifest)?;
        let header: BundleHeader = serde_json::from_value(config)
            .map_err(|e| Error::Checkpoint(format!("bad manifest config: {e}")))?;
        let cfg = header.model;
        cfg.validate()?;
        let weights = TransformerWeights::from_named(&cfg, &mut tensors)?;
        let module = RetrievalModule::from_named(&cfg, &mut tensors)?;
        let (lora, module_lora) = if header.has_lora {
            let mut rng = Rng::new(0);
            let mut l = LoraSet::new(&cfg, &mut rng);
            let mut ml = ModuleLora::new(&cfg, &mut rng);
            fill_from_named(l.params_mut(), &mut tensors)?;
            fill_from_named(ml.params_mut(), &mut tensors)?;
            (Some(l), Some(ml))
        } else {
            (None, None)
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(ModelBundle { model: cfg, weights, module, lora, module_lora, stage: header.stage })
    }

    /// Backbone and module with adapters folded in, ready for inference.
    pub fn merged(&self) -> Result<(TransformerWeights, RetrievalModule)> {
        let weights = match &self.lora {
            Some(l) => l.merge_into(&self.weights)?,
            None => self.weights.clone(),
        };
        let module = match &self.module_lora {
            Some(l) => l.merge_into(&self.module)?,
            None => self.module.clone(),
        };
        Ok((weights, module))
    }
}

fn fill_from_named(targets: Vec<(String, &mut Matrix)>, tensors: &mut BTreeMap<String, Matrix>) -> Result<()> {
    for (name, slot) in targets {
        let m = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if m.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    Ok(())
}

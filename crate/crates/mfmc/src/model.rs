//! Versioned JSON envelope shared by every serializable model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifiers::{KnnModel, QdaModel};
use crate::error::{Error, Result};
use crate::gbt::GbtModel;
use crate::harmonize::ComBatModel;
use crate::stacking::StackModel;

/// Schema identifier written into every model file.
pub const MODEL_SCHEMA: &str = "mfmc.model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Knn(KnnModel),
    Qda(QdaModel),
    Gbt(GbtModel),
    Combat(ComBatModel),
    Stack(StackModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnvelope {
    pub schema: String,
    #[serde(flatten)]
    pub model: ModelKind,
}

impl ModelEnvelope {
    pub fn new(model: ModelKind) -> Self {
        ModelEnvelope {
            schema: MODEL_SCHEMA.to_string(),
            model,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let envelope: ModelEnvelope = serde_json::from_slice(bytes)?;
        if envelope.schema != MODEL_SCHEMA {
            return Err(Error::Schema(format!(
                "unsupported model schema '{}', expected '{MODEL_SCHEMA}'",
                envelope.schema
            )));
        }
        Ok(envelope)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn as_stack(&self) -> Result<&StackModel> {
        match &self.model {
            ModelKind::Stack(m) => Ok(m),
            _ => Err(Error::Schema("expected a stack model".into())),
        }
    }

    pub fn as_combat(&self) -> Result<&ComBatModel> {
        match &self.model {
            ModelKind::Combat(m) => Ok(m),
            _ => Err(Error::Schema("expected a ComBat model".into())),
        }
    }
}

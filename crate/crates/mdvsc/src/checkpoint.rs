//! Model and optimizer state in a single safetensors archive.
//!
//! Parameters are stored as `param.<name>`, Adam moments as
//! `adam.m.<name>` and `adam.v.<name>`. The `mdvsc` metadata entry holds a
//! JSON document with the model configuration, the training configuration
//! and the step counters.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use mdvsc_core::model::{Mdvsc, ModelConfig, ParamMap};
use mdvsc_core::train::{Adam, Trainer};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::config::{ModelSection, TrainSection};
use crate::error::{Error, Result};

const FORMAT: &str = "mdvsc-checkpoint-1";
const META_KEY: &str = "mdvsc";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelSection,
    train: Option<TrainSection>,
    step: u64,
    adam_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainSection>,
    /// Optimizer steps completed.
    pub step: u64,
    pub params: ParamMap<f32>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn from_model(model: &Mdvsc<f32>) -> Self {
        Self { model: *model.config(), train: None, step: 0, params: model.params(), adam: None }
    }

    pub fn from_trainer(trainer: &Trainer, train: TrainSection) -> Self {
        Self {
            model: *trainer.model.config(),
            train: Some(train),
            step: trainer.step,
            params: trainer.model.params(),
            adam: Some(trainer.optimizer.clone()),
        }
    }

    pub fn build_model(&self) -> mdvsc_core::Result<Mdvsc<f32>> {
        let mut model = Mdvsc::new(self.model, 0)?;
        model.load_params(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.into(),
            model: self.model.into(),
            train: self.train.clone(),
            step: self.step,
            adam_steps: self.adam.as_ref().map(|a| a.steps),
        };
        let mut buffers: Vec<(String, Vec<u8>, usize)> = Vec::new();
        let mut push = |prefix: &str, map: &ParamMap<f32>| {
            for (name, values) in map {
                let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                buffers.push((format!("{prefix}{name}"), bytes, values.len()));
            }
        };
        push("param.", &self.params);
        if let Some(adam) = &self.adam {
            push("adam.m.", &adam.m);
            push("adam.v.", &adam.v);
        }
        let views = buffers
            .iter()
            .map(|(name, bytes, len)| Ok((name.as_str(), TensorView::new(Dtype::F32, vec![*len], bytes)?)))
            .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Checkpoint { path: "<memory>".into(), message: e.to_string() })?;
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header).expect("serializable header"))]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint { path: "<memory>".into(), message: e.to_string() })
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint { path: path.into(), message };
        let (_, metadata) = SafeTensors::read_metadata(bytes).map_err(|e| fail(e.to_string()))?;
        let json = metadata.metadata().as_ref().and_then(|m| m.get(META_KEY)).ok_or_else(|| fail("missing metadata".into()))?;
        let header: Header = serde_json::from_str(json).map_err(|e| fail(format!("bad metadata: {e}")))?;
        if header.format != FORMAT {
            return Err(fail(format!("unknown format {:?}", header.format)));
        }
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| fail(e.to_string()))?;
        let (mut params, mut m, mut v) = (ParamMap::new(), ParamMap::new(), ParamMap::new());
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(fail(format!("{name} has dtype {:?}", view.dtype())));
            }
            let values: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let (map, key) = if let Some(k) = name.strip_prefix("param.") {
                (&mut params, k)
            } else if let Some(k) = name.strip_prefix("adam.m.") {
                (&mut m, k)
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                (&mut v, k)
            } else {
                return Err(fail(format!("unexpected tensor {name}")));
            };
            map.insert(key.to_string(), values);
        }
        let adam = header.adam_steps.map(|steps| Adam { steps, m, v, ..Adam::default() });
        Ok(Self { model: header.model.into(), train: header.train, step: header.step, params, adam })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Loads a model; a `expected` configuration that differs from the stored
/// one is an error.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Mdvsc<f32>> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(want) = expected {
        if *want != ckpt.model {
            return Err(Error::Checkpoint {
                path: path.into(),
                message: format!("stored config {:?} differs from {:?}", ckpt.model, want),
            });
        }
    }
    ckpt.build_model().map_err(|e| Error::Checkpoint { path: path.into(), message: e.to_string() })
}

//! JSON checkpoints: architecture config, flat parameters, actnorm flag.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{ConditionalFlow, FlowConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "calflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: FlowConfig,
    actnorm_initialized: bool,
    params: Vec<f64>,
}

impl ConditionalFlow {
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            actnorm_initialized: self.initialized,
            params: self.params.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> std::result::Result<Self, String> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(format!("unexpected format tag {:?}", file.format));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {}", file.version));
        }
        if let Some(bad) = file.params.iter().find(|v| !v.is_finite()) {
            return Err(format!("non-finite parameter {bad}"));
        }
        // Weights are overwritten below, so the seed does not matter.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut flow = ConditionalFlow::new(file.config, &mut rng).map_err(|e| e.to_string())?;
        if file.params.len() != flow.param_count() {
            return Err(format!(
                "{} parameters stored, architecture needs {}",
                file.params.len(),
                flow.param_count()
            ));
        }
        flow.params = file.params;
        flow.initialized = file.actnorm_initialized;
        Ok(flow)
    }
}

pub fn save_checkpoint(flow: &ConditionalFlow, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, flow.to_checkpoint_json()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ConditionalFlow> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ConditionalFlow::from_checkpoint_json(&text).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, EarlyStopping, LoopState, TrainConfig, TrainLog};
use crate::autodiff::Tensor;
use crate::dataset::{EventTable, FeatureSchema};
use crate::error::{Error, Result};
use crate::models::{FeatureResidualModel, ModelKind, Parameters};

/// Where and when the epoch loop writes its resumable state.
#[derive(Clone, Debug)]
pub struct CheckpointPolicy {
    pub path: PathBuf,
    /// Continue from `path` when it exists.
    pub resume: bool,
    /// Pause once this many epochs are complete.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Serialize, Deserialize)]
pub(super) struct Checkpoint {
    kind: ModelKind,
    fingerprint: String,
    epoch: usize,
    finished: bool,
    model: Vec<Tensor>,
    best: Vec<Tensor>,
    adam: AdamState,
    stopper: EarlyStopping,
    log: TrainLog,
    #[serde(default)]
    stage1: Option<Vec<Option<Vec<Tensor>>>>,
    #[serde(default)]
    stage1_logs: Option<Vec<Option<TrainLog>>>,
}

/// Identifies the training problem a checkpoint belongs to.
pub(super) fn fingerprint(
    cfg: &TrainConfig,
    schema: &FeatureSchema,
    source: &EventTable,
    target: &EventTable,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update(schema.hash());
    for t in [source, target] {
        h.update((t.n_events() as u64).to_le_bytes());
        for v in t.values().data() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn owned<M: Parameters>(m: &M) -> Vec<Tensor> {
    m.tensors().into_iter().cloned().collect()
}

fn assign<M: Parameters>(m: &mut M, ts: &[Tensor]) -> Result<()> {
    let mut dst = m.tensors_mut();
    if dst.len() != ts.len() || dst.iter().zip(ts).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Compatibility(
            "checkpoint parameters do not fit the model".into(),
        ));
    }
    for (a, b) in dst.iter_mut().zip(ts) {
        **a = b.clone();
    }
    Ok(())
}

impl Checkpoint {
    pub(super) fn capture<M: Parameters + Clone>(
        kind: ModelKind,
        fingerprint: &str,
        state: &LoopState<M>,
        stage1: Option<&(Vec<Option<FeatureResidualModel>>, Vec<Option<TrainLog>>)>,
    ) -> Self {
        Self {
            kind,
            fingerprint: fingerprint.to_string(),
            epoch: state.epoch,
            finished: state.finished,
            model: owned(&state.model),
            best: owned(&state.best),
            adam: state.adam.clone(),
            stopper: state.stopper.clone(),
            log: state.log.clone(),
            stage1: stage1.map(|(m, _)| m.iter().map(|m| m.as_ref().map(owned)).collect()),
            stage1_logs: stage1.map(|(_, l)| l.clone()),
        }
    }

    pub(super) fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub(super) fn restore<M: Parameters + Clone>(&self, state: &mut LoopState<M>) -> Result<()> {
        assign(&mut state.model, &self.model)?;
        assign(&mut state.best, &self.best)?;
        state.adam = self.adam.clone();
        state.stopper = self.stopper.clone();
        state.log = self.log.clone();
        state.epoch = self.epoch;
        state.finished = self.finished;
        Ok(())
    }

    /// Rebuilds the frozen stage-1 models; `make(j)` supplies the architecture.
    pub(super) fn restore_stage1(
        &self,
        make: impl Fn(usize) -> Result<FeatureResidualModel>,
    ) -> Result<(Vec<Option<FeatureResidualModel>>, Vec<Option<TrainLog>>)> {
        let (Some(params), Some(logs)) = (&self.stage1, &self.stage1_logs) else {
            return Err(Error::Format(
                "two-step checkpoint lacks the stage-1 models".into(),
            ));
        };
        let models = params
            .iter()
            .enumerate()
            .map(|(j, p)| {
                p.as_ref()
                    .map(|p| {
                        let mut m = make(j)?;
                        assign(&mut m, p)?;
                        Ok(m)
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((models, logs.clone()))
    }
}

/// Loads the checkpoint named by `policy` when resuming and it exists.
pub(super) fn resume(
    policy: Option<&CheckpointPolicy>,
    fingerprint: &str,
    kind: ModelKind,
) -> Result<Option<Checkpoint>> {
    let Some(p) = policy.filter(|p| p.resume && p.path.exists()) else {
        return Ok(None);
    };
    let ck = Checkpoint::load(&p.path)?;
    if ck.kind != kind {
        return Err(Error::Kind {
            expected: kind.as_str().into(),
            found: ck.kind.as_str().into(),
        });
    }
    if ck.fingerprint != fingerprint {
        return Err(Error::Compatibility(format!(
            "{} was written for a different configuration or data set",
            p.path.display()
        )));
    }
    Ok(Some(ck))
}

//! Checkpoints, snapshot selection and averaged ensemble prediction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{InputKind, InputShape, LayerSpec, Network, TensorEntry};
use crate::optim::EpochRecord;
use crate::tensor::TensorF32;

const SNAP_MAGIC: &[u8; 4] = b"SNAP";
const SNAP_VERSION: u32 = 1;

/// Network parameters frozen at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub spec_hash: String,
    pub layers: Vec<LayerSpec>,
    pub input_kind: InputKind,
    pub input_shape: InputShape,
    pub tensors: Vec<TensorEntry>,
    pub params: Vec<f32>,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec_hash: String,
    epoch: usize,
    train_acc: f64,
    val_acc: Option<f64>,
    input_kind: InputKind,
    input_shape: InputShape,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    param_count: usize,
}

impl Checkpoint {
    pub fn capture(net: &Network<f32>, epoch: usize, train_acc: f64, val_acc: Option<f64>) -> Self {
        Self {
            epoch,
            spec_hash: net.spec_hash(),
            layers: net.spec().to_vec(),
            input_kind: net.input_kind(),
            input_shape: net.input_shape(),
            tensors: net.tensor_table(),
            params: net.params().to_vec(),
            train_acc,
            val_acc,
        }
    }

    /// Rebuild a standalone network in eval mode.
    pub fn restore(&self) -> Result<Network<f32>> {
        let mut net = Network::new(self.layers.clone(), self.input_kind, self.input_shape)?;
        self.restore_into(&mut net)?;
        net.set_mode(crate::nn::Mode::Eval);
        Ok(net)
    }

    /// Copy parameters into `net`, which must have the same spec hash.
    pub fn restore_into(&self, net: &mut Network<f32>) -> Result<()> {
        let hash = net.spec_hash();
        if hash != self.spec_hash {
            return Err(Error::Compat(format!(
                "checkpoint spec hash {} does not match network {hash}",
                self.spec_hash
            )));
        }
        net.set_params(self.params.clone())
    }

    fn validate(&self) -> Result<()> {
        let hash = crate::nn::network_spec_hash(&self.layers, self.input_kind, self.input_shape);
        if hash != self.spec_hash {
            return Err(Error::Compat(format!("recorded spec hash {} but layers hash to {hash}", self.spec_hash)));
        }
        let expected: usize = self.layers.iter().map(LayerSpec::param_count).sum();
        if expected != self.params.len() {
            return Err(Error::Format(format!("{} parameters for a spec of {expected}", self.params.len())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            spec_hash: self.spec_hash.clone(),
            epoch: self.epoch,
            train_acc: self.train_acc,
            val_acc: self.val_acc,
            input_kind: self.input_kind,
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            tensors: self.tensors.clone(),
            param_count: self.params.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + self.params.len() * 4);
        out.extend_from_slice(SNAP_MAGIC);
        out.extend_from_slice(&SNAP_VERSION.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        if &bytes[..4] != SNAP_MAGIC {
            return Err(Error::Format("bad magic, expected SNAP".into()));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let version = word(4);
        if version != SNAP_VERSION {
            return Err(Error::Format(format!("unsupported SNAP version {version}")));
        }
        let len = word(8) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let blob = &body[len..];
        if blob.len() != header.param_count * 4 {
            return Err(Error::Format(format!(
                "parameter blob has {} bytes, header declares {} parameters",
                blob.len(),
                header.param_count
            )));
        }
        let params = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let ck = Checkpoint {
            epoch: header.epoch,
            spec_hash: header.spec_hash,
            layers: header.layers,
            input_kind: header.input_kind,
            input_shape: header.input_shape,
            tensors: header.tensors,
            params,
            train_acc: header.train_acc,
            val_acc: header.val_acc,
        };
        ck.validate()?;
        Ok(ck)
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    crate::write_atomic(path, &c.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Anchor at the last epoch and step backwards.
    BackwardFromLast,
    /// Anchor at the first epoch whose metric exceeds the threshold.
    ForwardFromTrigger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMetric {
    TrainAccuracy,
    ValAccuracy,
}

/// Which epochs form a snapshot ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotPolicy {
    pub direction: Direction,
    pub trigger_metric: TriggerMetric,
    pub threshold: f64,
    pub gap: usize,
    pub count: usize,
}

impl SnapshotPolicy {
    /// Train accuracy above 0.9 gates eligibility; seven members counted back
    /// from the last epoch, ten apart.
    pub fn backward_default() -> Self {
        Self {
            direction: Direction::BackwardFromLast,
            trigger_metric: TriggerMetric::TrainAccuracy,
            threshold: 0.9,
            gap: 10,
            count: 7,
        }
    }

    /// Seven members ten apart, starting at the first epoch with validation
    /// accuracy above 0.8.
    pub fn forward_default() -> Self {
        Self {
            direction: Direction::ForwardFromTrigger,
            trigger_metric: TriggerMetric::ValAccuracy,
            threshold: 0.8,
            gap: 10,
            count: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gap == 0 || self.count == 0 {
            return Err(Error::Argument("snapshot gap and count must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Argument(format!("snapshot threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    /// Epochs spanned by the selection.
    pub fn span(&self) -> usize {
        self.gap * (self.count - 1) + 1
    }
}

fn metric(r: &EpochRecord, m: TriggerMetric) -> Option<f64> {
    match m {
        TriggerMetric::TrainAccuracy => Some(r.train_accuracy),
        TriggerMetric::ValAccuracy => r.val_accuracy,
    }
}

/// Pick snapshot epochs from a training history. Returns exactly
/// `policy.count` epochs or an error.
pub fn select_snapshots(history: &[EpochRecord], policy: &SnapshotPolicy) -> Result<Vec<usize>> {
    policy.validate()?;
    if history.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
        return Err(Error::Argument("history epochs must be strictly increasing".into()));
    }
    let first_hit = history
        .iter()
        .find(|r| metric(r, policy.trigger_metric).is_some_and(|v| v > policy.threshold))
        .ok_or_else(|| {
            Error::Selection(format!(
                "threshold not met: {:?} never exceeded {}",
                policy.trigger_metric, policy.threshold
            ))
        })?;
    let step = policy.gap;
    let n = policy.count - 1;
    let epochs: Vec<usize> = match policy.direction {
        Direction::BackwardFromLast => {
            let last = history.last().expect("non-empty when trigger found").epoch;
            if last < n * step {
                return Err(insufficient(policy, last));
            }
            (0..=n).map(|i| last - i * step).collect()
        }
        Direction::ForwardFromTrigger => (0..=n).map(|i| first_hit.epoch + i * step).collect(),
    };
    let present: std::collections::HashSet<usize> = history.iter().map(|r| r.epoch).collect();
    if epochs.iter().any(|e| !present.contains(e)) {
        return Err(insufficient(policy, history.last().map_or(0, |r| r.epoch)));
    }
    Ok(epochs)
}

fn insufficient(policy: &SnapshotPolicy, last: usize) -> Error {
    Error::Selection(format!(
        "insufficient epochs: {} members {} apart do not fit in a history ending at epoch {last}",
        policy.count, policy.gap
    ))
}

/// Restored checkpoints whose sigmoid outputs are averaged.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Network<f32>>,
    threshold: f64,
}

/// Per-sample inputs for each input kind. Either may be absent when no
/// member consumes it.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnsembleInputs<'a> {
    pub images: Option<&'a [TensorF32]>,
    pub features: Option<&'a [TensorF32]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub mean: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Ensemble {
    pub fn from_checkpoints(checkpoints: &[Checkpoint]) -> Result<Self> {
        let members = checkpoints.iter().map(Checkpoint::restore).collect::<Result<Vec<_>>>()?;
        Self::from_networks(members)
    }

    pub fn from_networks(members: Vec<Network<f32>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Argument("ensemble needs at least one member".into()));
        }
        Ok(Self { members, threshold: 0.5 })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Network<f32>] {
        &self.members
    }

    /// Mean member probability per sample; label 1 iff the mean exceeds the
    /// threshold.
    pub fn predict(&self, inputs: &EnsembleInputs<'_>) -> Result<EnsemblePrediction> {
        let n = match (inputs.images, inputs.features) {
            (Some(a), Some(b)) if a.len() != b.len() => {
                return Err(Error::Argument(format!("{} images but {} feature rows", a.len(), b.len())))
            }
            (Some(a), _) => a.len(),
            (None, Some(b)) => b.len(),
            (None, None) => return Err(Error::Routing("no inputs supplied".into())),
        };
        let routed = self
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let batch = match m.input_kind() {
                    InputKind::Image => inputs.images,
                    InputKind::Features => inputs.features,
                };
                batch.ok_or_else(|| Error::Routing(format!("member {i} needs {:?} inputs", m.input_kind())))
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs: Vec<Vec<f32>> = exec::map_range(self.members.len(), |i| self.members[i].predict(routed[i]))
            .into_iter()
            .collect::<Result<_>>()?;
        let mut mean = vec![0.0f64; n];
        for out in &outputs {
            for (m, &p) in mean.iter_mut().zip(out) {
                *m += p as f64;
            }
        }
        let k = self.members.len() as f64;
        for m in &mut mean {
            *m /= k;
        }
        let labels = mean.iter().map(|&p| u8::from(p > self.threshold)).collect();
        Ok(EnsemblePrediction { mean, labels })
    }
}

/// Functional form of [`Ensemble::predict`].
pub fn ensemble_predict(e: &Ensemble, inputs: &EnsembleInputs<'_>) -> Result<EnsemblePrediction> {
    e.predict(inputs)
}

//! Worker state machine.
//!
//! One iteration is split into two halves so the same code can be driven by
//! threads, sockets, or a single-threaded round-robin scheduler:
//! [`Worker::begin_iteration`] produces the push frame and
//! [`Worker::finish_iteration`] consumes the pull frame.

use std::sync::Arc;

use crate::codec::{decode_aggregate, encode_step, EncodedGradient};
use crate::numerics::{Dataset, GradTensor, Model, NumericsError};
use crate::optimizer::{EmaShadow, OptimizerState};

use super::message::Message;
use super::{ClusterConfig, ClusterError};

/// Telemetry for one worker iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub worker: u16,
    /// Mean loss over this worker's shard.
    pub loss: f64,
    /// L2 norm of the local (unclipped) gradient.
    pub grad_norm: f64,
    /// Push frame bytes, header included.
    pub bytes_up: usize,
    /// Pull frame bytes, header included.
    pub bytes_down: usize,
    /// Fraction of zero codes per ternarized tensor.
    pub zero_fraction: Vec<(String, f64)>,
    /// Accuracy of the EMA parameters on the evaluation set, when evaluated.
    pub eval_accuracy: Option<f64>,
    /// Hash of the parameter bits after the update.
    pub param_digest: u64,
}

/// Intermediate values of the most recent iteration, kept when tracing.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub grads: Vec<GradTensor>,
    pub encoded: EncodedGradient,
    pub averaged: Vec<GradTensor>,
}

struct InFlight {
    loss: f64,
    grad_norm: f64,
    bytes_up: usize,
    zero_fraction: Vec<(String, f64)>,
    trace: Option<(Vec<GradTensor>, EncodedGradient)>,
}

pub struct Worker {
    id: u16,
    cfg: Arc<ClusterConfig>,
    model: Model,
    optimizer: OptimizerState,
    ema: EmaShadow,
    data: Arc<Dataset>,
    eval: Option<Arc<Dataset>>,
    iteration: u64,
    in_flight: Option<InFlight>,
    tracing: bool,
    last_trace: Option<StepTrace>,
}

impl Worker {
    /// `model` must be the shared initial model; every worker starts from
    /// identical parameters.
    pub fn new(id: u16, cfg: Arc<ClusterConfig>, model: Model, data: Arc<Dataset>) -> Result<Self, ClusterError> {
        cfg.validate()?;
        if id as usize >= cfg.workers {
            return Err(ClusterError::Config(format!("worker id {id} >= {} workers", cfg.workers)));
        }
        if data.is_empty() {
            return Err(ClusterError::Config("training set is empty".into()));
        }
        if data.dim() != model.input_dim() {
            return Err(ClusterError::Config(format!(
                "data has {} features, model expects {}",
                data.dim(),
                model.input_dim()
            )));
        }
        let ema = EmaShadow::new(cfg.ema_decay, model.params()).with_warmup(cfg.ema_warmup);
        Ok(Self {
            id,
            optimizer: OptimizerState::new(cfg.rule),
            cfg,
            model,
            ema,
            data,
            eval: None,
            iteration: 0,
            in_flight: None,
            tracing: false,
            last_trace: None,
        })
    }

    /// Evaluate EMA accuracy on `eval` every `cfg.eval_every` iterations and
    /// at the last one.
    pub fn with_eval(mut self, eval: Arc<Dataset>) -> Self {
        self.eval = Some(eval);
        self
    }

    /// Keep gradients, the push and the averaged gradient of each iteration.
    pub fn with_tracing(mut self, on: bool) -> Self {
        self.tracing = on;
        self
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn ema(&self) -> &EmaShadow {
        &self.ema
    }

    pub fn last_trace(&self) -> Option<&StepTrace> {
        self.last_trace.as_ref()
    }

    pub fn register_frame(&self) -> Result<Vec<u8>, ClusterError> {
        Message::Register { worker: self.id }.to_frame()
    }

    pub fn shutdown_frame(&self) -> Result<Vec<u8>, ClusterError> {
        Message::Shutdown {
            worker: self.id,
            iteration: self.iteration,
        }
        .to_frame()
    }

    /// Sample indices of this worker's shard at iteration `t`.
    pub fn shard(&self, t: u64) -> Vec<usize> {
        shard_indices(self.cfg.global_batch(), self.cfg.workers, self.id as usize, t, self.data.len())
    }

    /// Computes gradients on this worker's shard, encodes them, and returns
    /// the push frame.
    pub fn begin_iteration(&mut self) -> Result<Vec<u8>, ClusterError> {
        if self.in_flight.is_some() {
            return Err(ClusterError::Protocol("iteration already in flight".into()));
        }
        let t = self.iteration;
        let batch = self.data.batch(self.shard(t))?;
        let (loss, grads) = self.model.forward_backward(&batch).map_err(|e| match e {
            NumericsError::NonFinite { .. } => ClusterError::Divergence(format!("iteration {t}: {e}")),
            other => other.into(),
        })?;
        if !loss.is_finite() {
            return Err(ClusterError::Divergence(format!("iteration {t}: loss {loss}")));
        }
        let grad_norm = grads.iter().map(|g| g.l2_norm().powi(2)).sum::<f64>().sqrt();
        let (encoded, _) = encode_step(&grads, &self.cfg.codec, t, self.id)?;
        let zero_fraction = encoded
            .zero_counts()
            .into_iter()
            .map(|(name, zeros, n)| (name, if n == 0 { 0.0 } else { zeros as f64 / n as f64 }))
            .collect();
        let frame = Message::Push(encoded.clone()).to_frame()?;
        self.in_flight = Some(InFlight {
            loss,
            grad_norm,
            bytes_up: frame.len(),
            zero_fraction,
            trace: self.tracing.then_some((grads, encoded)),
        });
        Ok(frame)
    }

    /// Decodes the averaged gradient and applies the update.
    pub fn finish_iteration(&mut self, pull: &[u8]) -> Result<IterationRecord, ClusterError> {
        let t = self.iteration;
        let flight = self
            .in_flight
            .take()
            .ok_or_else(|| ClusterError::Protocol("pull received with no push in flight".into()))?;
        let blocks = match Message::from_frame(pull)? {
            Message::Pull { iteration, blocks } if iteration == t => blocks,
            Message::Pull { iteration, .. } => {
                return Err(ClusterError::Protocol(format!(
                    "worker {} at iteration {t} received pull for {iteration}",
                    self.id
                )));
            }
            other => {
                return Err(ClusterError::Protocol(format!(
                    "expected pull, got {:?}",
                    other.msg_type()
                )));
            }
        };
        let averaged = reshape_like(decode_aggregate(&blocks)?, self.model.params())?;
        let rate = self.cfg.schedule.rate(t);
        self.optimizer
            .apply(self.model.params_mut(), &averaged, rate, self.cfg.weight_decay)?;
        if !self.model.params().iter().all(GradTensor::all_finite) {
            return Err(ClusterError::Divergence(format!("iteration {t}: parameters became non-finite")));
        }
        self.ema.update(self.model.params())?;
        self.iteration += 1;

        let last = self.iteration == self.cfg.iterations;
        let eval_accuracy = match &self.eval {
            Some(eval) if last || (self.cfg.eval_every > 0 && self.iteration.is_multiple_of(self.cfg.eval_every)) => {
                Some(self.model.with_params(self.ema.swap())?.accuracy(eval)?)
            }
            _ => None,
        };
        if let Some((grads, encoded)) = flight.trace {
            self.last_trace = Some(StepTrace {
                grads,
                encoded,
                averaged: averaged.clone(),
            });
        }
        Ok(IterationRecord {
            iteration: t,
            worker: self.id,
            loss: flight.loss,
            grad_norm: flight.grad_norm,
            bytes_up: flight.bytes_up,
            bytes_down: pull.len(),
            zero_fraction: flight.zero_fraction,
            eval_accuracy,
            param_digest: param_digest(self.model.params()),
        })
    }
}

/// Contiguous (wrapping) slice of the global batch for `worker` at `t`.
pub fn shard_indices(global_batch: usize, workers: usize, worker: usize, t: u64, n: usize) -> Vec<usize> {
    let shard = global_batch / workers;
    let start = (t as u128 * global_batch as u128 + (worker * shard) as u128) % n as u128;
    (0..shard).map(|k| ((start + k as u128) % n as u128) as usize).collect()
}

fn reshape_like(flat: Vec<GradTensor>, params: &[GradTensor]) -> Result<Vec<GradTensor>, ClusterError> {
    if flat.len() != params.len() {
        return Err(ClusterError::Protocol(format!(
            "pull carries {} tensors, model has {}",
            flat.len(),
            params.len()
        )));
    }
    flat.into_iter()
        .zip(params)
        .map(|(g, p)| {
            if g.name() != p.name() {
                return Err(ClusterError::Protocol(format!("pull tensor {} where {} expected", g.name(), p.name())));
            }
            Ok(g.reshape(p.shape().to_vec())?)
        })
        .collect()
}

/// FNV-1a over the bit patterns of every parameter value.
pub fn param_digest(params: &[GradTensor]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in params {
        for v in p.values() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

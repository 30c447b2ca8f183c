//! Synchronous parameter-server cluster.
//!
//! Every iteration each worker computes a gradient on its shard, pushes the
//! encoded gradient, and blocks until the server broadcasts the aggregate.
//! All workers then apply the same update, so their parameters stay
//! identical. The same [`Worker`] and [`ServerState`] drive three runners:
//! a single-threaded round-robin loop, threads over in-process mailboxes,
//! and threads over TCP.

mod message;
mod server;
mod transport;
mod worker;

use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

pub use message::{push_frame_len, Header, Message, MsgType, HEADER_LEN, MAGIC, SERVER_ID, VERSION};
pub use server::{ServerAction, ServerState};
pub use transport::{
    in_process, read_frame, InProcessServer, InProcessWorker, ServerTransport, SocketServer, SocketWorker,
    WorkerTransport,
};
pub use worker::{param_digest, shard_indices, IterationRecord, StepTrace, Worker};

use crate::codec::{CodecConfig, CodecError};
use crate::numerics::{Dataset, GradTensor, Model, NumericsError};
use crate::optimizer::{LrSchedule, OptimizerError, Rule};

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("transport error: {msg}")]
    Transport { retryable: bool, msg: String },
    #[error("barrier timed out after {0:?}")]
    Timeout(Duration),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

impl ClusterError {
    pub(crate) fn transport(msg: impl Into<String>) -> Self {
        ClusterError::Transport {
            retryable: false,
            msg: msg.into(),
        }
    }
}

/// How the global batch relates to the worker count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Batching {
    /// Fixed global batch split evenly across workers.
    Strong { total: usize },
    /// Fixed per-worker batch; the global batch grows with the worker count.
    Weak { per_worker: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub workers: usize,
    pub batching: Batching,
    pub codec: CodecConfig,
    pub rule: Rule,
    pub schedule: LrSchedule,
    pub weight_decay: f32,
    pub ema_decay: f32,
    pub ema_warmup: bool,
    pub iterations: u64,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_every: u64,
    /// How long any party waits for a frame before giving up.
    pub barrier_timeout: Option<Duration>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            batching: Batching::Weak { per_worker: 32 },
            codec: CodecConfig::default(),
            rule: Rule::Vanilla,
            schedule: LrSchedule::Constant { base: 0.01 },
            weight_decay: 0.0,
            ema_decay: 0.999,
            ema_warmup: true,
            iterations: 100,
            eval_every: 0,
            barrier_timeout: Some(Duration::from_secs(60)),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.workers == 0 || self.workers >= SERVER_ID as usize {
            return Err(ClusterError::Config(format!("invalid worker count {}", self.workers)));
        }
        match self.batching {
            Batching::Strong { total } if total == 0 || total % self.workers != 0 => {
                return Err(ClusterError::Config(format!(
                    "global batch {total} does not split evenly over {} workers",
                    self.workers
                )));
            }
            Batching::Weak { per_worker: 0 } => {
                return Err(ClusterError::Config("per-worker batch must be positive".into()));
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(ClusterError::Config(format!("ema decay {} outside [0, 1)", self.ema_decay)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(ClusterError::Config(format!("invalid weight decay {}", self.weight_decay)));
        }
        self.codec.validate()?;
        Ok(())
    }

    pub fn global_batch(&self) -> usize {
        match self.batching {
            Batching::Strong { total } => total,
            Batching::Weak { per_worker } => per_worker * self.workers,
        }
    }
}

/// Per-iteration view across all workers.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationSummary {
    pub iteration: u64,
    /// Mean of the workers' shard losses.
    pub mean_loss: f64,
    pub eval_accuracy: Option<f64>,
    /// Zero fraction per tensor, averaged over workers.
    pub zero_fraction: Vec<(String, f64)>,
    /// Bytes pushed by all workers.
    pub bytes_up: usize,
    /// Bytes pulled by all workers.
    pub bytes_down: usize,
}

/// Bytes moved over a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrafficSummary {
    pub iterations: u64,
    pub workers: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl TrafficSummary {
    pub fn up_per_push(&self) -> f64 {
        self.bytes_up as f64 / (self.iterations as f64 * self.workers as f64)
    }

    pub fn down_per_pull(&self) -> f64 {
        self.bytes_down as f64 / (self.iterations as f64 * self.workers as f64)
    }

    /// `(up ratio, down ratio)` of `baseline` traffic over this run's.
    pub fn reduction_vs(&self, baseline: &TrafficSummary) -> (f64, f64) {
        (
            baseline.up_per_push() / self.up_per_push(),
            baseline.down_per_pull() / self.down_per_pull(),
        )
    }
}

/// Outcome of a full run.
#[derive(Clone, Debug)]
pub struct ClusterReport {
    /// `records[w][t]`: worker `w` at iteration `t`.
    pub records: Vec<Vec<IterationRecord>>,
    /// Final parameters of every worker.
    pub params: Vec<Vec<GradTensor>>,
    /// Final EMA parameters of worker 0.
    pub ema: Vec<GradTensor>,
}

impl ClusterReport {
    pub fn iterations(&self) -> usize {
        self.records.first().map_or(0, Vec::len)
    }

    pub fn summaries(&self) -> Vec<IterationSummary> {
        (0..self.iterations()).map(|t| self.summary(t)).collect()
    }

    pub fn summary(&self, t: usize) -> IterationSummary {
        let rows: Vec<&IterationRecord> = self.records.iter().map(|r| &r[t]).collect();
        let n = rows.len() as f64;
        let mut zero_fraction: Vec<(String, f64)> = rows[0].zero_fraction.iter().map(|(k, _)| (k.clone(), 0.0)).collect();
        for r in &rows {
            for ((_, acc), (_, z)) in zero_fraction.iter_mut().zip(&r.zero_fraction) {
                *acc += z / n;
            }
        }
        IterationSummary {
            iteration: rows[0].iteration,
            mean_loss: rows.iter().map(|r| r.loss).sum::<f64>() / n,
            eval_accuracy: rows.iter().find_map(|r| r.eval_accuracy),
            zero_fraction,
            bytes_up: rows.iter().map(|r| r.bytes_up).sum(),
            bytes_down: rows.iter().map(|r| r.bytes_down).sum(),
        }
    }

    pub fn traffic(&self) -> TrafficSummary {
        let all = self.records.iter().flatten();
        let (up, down) = all.fold((0u64, 0u64), |(u, d), r| (u + r.bytes_up as u64, d + r.bytes_down as u64));
        TrafficSummary {
            iterations: self.iterations() as u64,
            workers: self.records.len(),
            bytes_up: up,
            bytes_down: down,
        }
    }

    /// True when every worker ended with bit-identical parameters.
    pub fn workers_agree(&self) -> bool {
        let d0 = param_digest(&self.params[0]);
        self.params.iter().all(|p| param_digest(p) == d0)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.iterations().checked_sub(1).map(|t| self.summary(t).mean_loss)
    }
}

/// Inputs shared by all workers of a run.
#[derive(Clone)]
pub struct RunInputs {
    pub cfg: Arc<ClusterConfig>,
    pub model: Model,
    pub train: Arc<Dataset>,
    pub eval: Option<Arc<Dataset>>,
}

impl RunInputs {
    pub fn new(cfg: ClusterConfig, model: Model, train: Dataset) -> Self {
        Self {
            cfg: Arc::new(cfg),
            model,
            train: Arc::new(train),
            eval: None,
        }
    }

    pub fn with_eval(mut self, eval: Dataset) -> Self {
        self.eval = Some(Arc::new(eval));
        self
    }

    /// Builds worker `id`; only worker 0 evaluates.
    pub fn worker(&self, id: u16) -> Result<Worker, ClusterError> {
        let w = Worker::new(id, Arc::clone(&self.cfg), self.model.clone(), Arc::clone(&self.train))?;
        Ok(match (&self.eval, id) {
            (Some(eval), 0) => w.with_eval(Arc::clone(eval)),
            _ => w,
        })
    }
}

/// Serves one run over `transport` until every worker shuts down.
pub fn run_server<T: ServerTransport>(transport: &mut T, workers: usize, codec: CodecConfig) -> Result<u64, ClusterError> {
    let mut state = ServerState::new(workers, codec)?;
    loop {
        let frame = transport.recv()?;
        match state.accept(Message::from_frame(&frame)?)? {
            ServerAction::Wait => {}
            ServerAction::Broadcast(pull) => {
                let frame = pull.to_frame()?;
                for w in 0..workers as u16 {
                    transport.send(w, &frame)?;
                }
            }
            ServerAction::Done => return Ok(state.iteration()),
        }
    }
}

/// Drives `worker` through every configured iteration, calling `on_record`
/// after each update.
pub fn run_worker<T: WorkerTransport>(
    worker: &mut Worker,
    transport: &mut T,
    iterations: u64,
    mut on_record: impl FnMut(&IterationRecord),
) -> Result<Vec<IterationRecord>, ClusterError> {
    transport.send(&worker.register_frame()?)?;
    let mut records = Vec::with_capacity(iterations as usize);
    for _ in 0..iterations {
        let push = worker.begin_iteration()?;
        transport.send(&push)?;
        let pull = transport.recv()?;
        let record = worker.finish_iteration(&pull)?;
        on_record(&record);
        records.push(record);
    }
    transport.send(&worker.shutdown_frame()?)?;
    Ok(records)
}

fn report(workers: Vec<Worker>, records: Vec<Vec<IterationRecord>>) -> ClusterReport {
    ClusterReport {
        records,
        params: workers.iter().map(|w| w.model().params().to_vec()).collect(),
        ema: workers[0].ema().shadow().to_vec(),
    }
}

/// Runs every worker and the server on the calling thread, in worker-id
/// order. Deterministic and free of scheduling effects.
pub fn run_round_robin(inputs: &RunInputs) -> Result<ClusterReport, ClusterError> {
    let (workers, records) = round_robin(inputs, inputs.cfg.iterations, false)?;
    Ok(report(workers, records))
}

/// Runs iterations `0..=t` round-robin and returns worker 0's gradients,
/// push and averaged gradient at iteration `t`.
pub fn trace_iteration(inputs: &RunInputs, t: u64) -> Result<StepTrace, ClusterError> {
    let (workers, _) = round_robin(inputs, t + 1, true)?;
    workers[0]
        .last_trace()
        .cloned()
        .ok_or_else(|| ClusterError::Protocol("no iteration was traced".into()))
}

fn round_robin(
    inputs: &RunInputs,
    iterations: u64,
    trace: bool,
) -> Result<(Vec<Worker>, Vec<Vec<IterationRecord>>), ClusterError> {
    let cfg = &inputs.cfg;
    cfg.validate()?;
    let mut state = ServerState::new(cfg.workers, cfg.codec.clone())?;
    let mut workers = (0..cfg.workers as u16)
        .map(|id| inputs.worker(id).map(|w| w.with_tracing(trace && id == 0)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut records = vec![Vec::with_capacity(iterations as usize); cfg.workers];
    for w in &workers {
        state.accept(Message::from_frame(&w.register_frame()?)?)?;
    }
    for _ in 0..iterations {
        let mut pull = None;
        for w in workers.iter_mut() {
            let push = w.begin_iteration()?;
            if let ServerAction::Broadcast(msg) = state.accept(Message::from_frame(&push)?)? {
                pull = Some(msg.to_frame()?);
            }
        }
        let pull = pull.ok_or_else(|| ClusterError::Protocol("barrier did not release".into()))?;
        for (w, rec) in workers.iter_mut().zip(records.iter_mut()) {
            rec.push(w.finish_iteration(&pull)?);
        }
    }
    for w in &workers {
        state.accept(Message::from_frame(&w.shutdown_frame()?)?)?;
    }
    Ok((workers, records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    /// TCP over the loopback interface.
    Socket,
}

/// Runs the server and every worker on their own threads.
pub fn run_threaded(inputs: &RunInputs, kind: TransportKind) -> Result<ClusterReport, ClusterError> {
    let cfg = Arc::clone(&inputs.cfg);
    cfg.validate()?;
    let n = cfg.workers;
    let workers = (0..n as u16).map(|id| inputs.worker(id)).collect::<Result<Vec<_>, _>>()?;

    let spawn_worker = |mut w: Worker, mut t: Box<dyn WorkerTransport>| {
        let iterations = cfg.iterations;
        thread::spawn(move || {
            let records = run_worker(&mut w, &mut t, iterations, |_| {});
            (w, records)
        })
    };

    let (server, handles) = match kind {
        TransportKind::InProcess => {
            let (mut server_end, ends) = in_process(n, cfg.barrier_timeout);
            let codec = cfg.codec.clone();
            let server = thread::spawn(move || run_server(&mut server_end, n, codec));
            let handles: Vec<_> = workers
                .into_iter()
                .zip(ends)
                .map(|(w, t)| spawn_worker(w, Box::new(t)))
                .collect();
            (server, handles)
        }
        TransportKind::Socket => {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| ClusterError::transport(e.to_string()))?;
            let addr = listener.local_addr().map_err(|e| ClusterError::transport(e.to_string()))?;
            let codec = cfg.codec.clone();
            let timeout = cfg.barrier_timeout;
            let server = thread::spawn(move || {
                let mut end = SocketServer::accept(listener, n, timeout)?;
                run_server(&mut end, n, codec)
            });
            let mut handles = Vec::with_capacity(n);
            for w in workers {
                let t = SocketWorker::connect(addr, 50, Duration::from_millis(20), cfg.barrier_timeout)?;
                handles.push(spawn_worker(w, Box::new(t)));
            }
            (server, handles)
        }
    };

    let mut finished = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut first_err = None;
    for h in handles {
        let (w, r) = h.join().map_err(|_| ClusterError::Protocol("worker thread panicked".into()))?;
        match r {
            Ok(r) => records.push(r),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
        finished.push(w);
    }
    let served = server.join().map_err(|_| ClusterError::Protocol("server thread panicked".into()))?;
    if let Some(e) = first_err {
        return Err(e);
    }
    served?;
    Ok(report(finished, records))
}

impl WorkerTransport for Box<dyn WorkerTransport> {
    fn send(&mut self, frame: &[u8]) -> Result<(), ClusterError> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>, ClusterError> {
        (**self).recv()
    }
}

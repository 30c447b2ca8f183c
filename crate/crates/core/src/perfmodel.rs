//! Analytical throughput model for data-parallel training on `j` machines
//! with `i` GPUs each.
//!
//! Computation time comes from one profiled single-GPU step `T(1,1,K,|g|)`;
//! communication is modelled as a `log2`-depth all-reduce inside each
//! machine (GPU-GPU bandwidth), one GPU-CPU copy, and a `log2`-depth
//! all-reduce across machines (latency plus network bandwidth).

use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum PerfModelError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("scenario: {0}")]
    Scenario(String),
}

/// Inputs of the model. Bandwidths in bytes/s, times in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerfModelParams {
    /// GPUs per machine.
    pub gpus_per_machine: u32,
    /// Machines.
    pub machines: u32,
    /// Mini-batch size (strong scaling) or per-worker batch (weak scaling).
    pub batch: u32,
    /// Bytes of gradient exchanged per step.
    pub grad_bytes: f64,
    pub gpu_bandwidth: f64,
    pub cpu_gpu_bandwidth: f64,
    pub net_latency: f64,
    pub net_bandwidth: f64,
    /// Profiled single-GPU step time for `batch` samples.
    pub step_time: f64,
}

impl PerfModelParams {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negations also reject NaN
    pub fn validate(&self) -> Result<(), PerfModelError> {
        let bad = |m: &str| Err(PerfModelError::Invalid(m.to_string()));
        if self.gpus_per_machine == 0 || self.machines == 0 || self.batch == 0 {
            return bad("GPUs per machine, machines and batch must be at least 1");
        }
        if !(self.grad_bytes >= 0.0 && self.grad_bytes.is_finite()) {
            return bad("gradient bytes must be finite and nonnegative");
        }
        for (name, bw) in [
            ("gpu_bandwidth", self.gpu_bandwidth),
            ("cpu_gpu_bandwidth", self.cpu_gpu_bandwidth),
            ("net_bandwidth", self.net_bandwidth),
        ] {
            if !(bw > 0.0) {
                return Err(PerfModelError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.net_latency >= 0.0) {
            return bad("network latency must be nonnegative");
        }
        if !(self.step_time > self.grad_bytes / self.cpu_gpu_bandwidth) {
            return Err(PerfModelError::Invalid(format!(
                "step time {} s does not exceed the GPU-CPU copy of {} s",
                self.step_time,
                self.grad_bytes / self.cpu_gpu_bandwidth
            )));
        }
        Ok(())
    }

    /// Total workers `i * j`.
    pub fn workers(&self) -> u32 {
        self.gpus_per_machine * self.machines
    }

    /// Same parameters with a different gradient size.
    pub fn with_grad_bytes(self, grad_bytes: f64) -> Self {
        Self { grad_bytes, ..self }
    }

    /// Same parameters on `workers` GPUs, filling machines first.
    pub fn with_workers(self, workers: u32, max_per_machine: u32) -> Self {
        let i = workers.min(max_per_machine).max(1);
        Self {
            gpus_per_machine: i,
            machines: workers.div_ceil(i),
            ..self
        }
    }

    fn copy_time(&self) -> f64 {
        self.grad_bytes / self.cpu_gpu_bandwidth
    }

    fn intra_time(&self) -> f64 {
        self.grad_bytes / self.gpu_bandwidth * (self.gpus_per_machine as f64).log2()
    }

    fn inter_time(&self) -> f64 {
        (self.net_latency + self.grad_bytes / self.net_bandwidth) * (self.machines as f64).log2()
    }
}

/// `|g|/C_gwd * log2 i + |g|/C_cwd + (C_ncost + |g|/C_nwd) * log2 j`.
pub fn t_comm(p: &PerfModelParams) -> f64 {
    p.intra_time() + p.copy_time() + p.inter_time()
}

/// Strong-scaling computation time: the profiled step minus its GPU-CPU
/// copy, split across `N` workers.
pub fn t_comp_strong(p: &PerfModelParams) -> f64 {
    (p.step_time - p.copy_time()) / p.workers() as f64
}

pub fn t_strong(p: &PerfModelParams) -> f64 {
    t_comp_strong(p) + t_comm(p)
}

/// Samples per second under strong scaling.
pub fn tput_strong(p: &PerfModelParams) -> f64 {
    p.batch as f64 / t_strong(p)
}

/// Weak-scaling step time. The GPU-CPU copy inside the profiled step and the
/// one in `t_comm` cancel.
pub fn t_weak(p: &PerfModelParams) -> f64 {
    p.step_time + p.intra_time() + p.inter_time()
}

/// Samples per second under weak scaling (`N * K` samples per step).
pub fn tput_weak(p: &PerfModelParams) -> f64 {
    p.workers() as f64 * p.batch as f64 / t_weak(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    Strong,
    Weak,
}

impl Scaling {
    pub fn throughput(self, p: &PerfModelParams) -> f64 {
        match self {
            Scaling::Strong => tput_strong(p),
            Scaling::Weak => tput_weak(p),
        }
    }
}

/// One row of a speedup table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedupRow {
    pub workers: u32,
    pub gpus_per_machine: u32,
    pub machines: u32,
    pub tput_float: f64,
    pub tput_ternary: f64,
    pub speedup: f64,
}

/// Throughput with float gradients vs. compressed gradients for each worker
/// count. `compressed_bytes` maps float gradient bytes to the bytes actually
/// sent when compressed; machines are filled up to `base.gpus_per_machine`.
pub fn speedup_curve(
    base: &PerfModelParams,
    scaling: Scaling,
    compressed_bytes: impl Fn(f64) -> f64,
    workers: &[u32],
) -> Result<Vec<SpeedupRow>, PerfModelError> {
    base.validate()?;
    let ternary_bytes = compressed_bytes(base.grad_bytes);
    workers
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(PerfModelError::Invalid("worker count must be positive".into()));
            }
            let float = base.with_workers(n, base.gpus_per_machine);
            let ternary = float.with_grad_bytes(ternary_bytes);
            ternary.validate()?;
            let tput_float = scaling.throughput(&float);
            let tput_ternary = scaling.throughput(&ternary);
            Ok(SpeedupRow {
                workers: n,
                gpus_per_machine: float.gpus_per_machine,
                machines: float.machines,
                tput_float,
                tput_ternary,
                speedup: tput_ternary / tput_float,
            })
        })
        .collect()
}

/// Bytes on the wire for a push of `grad_bytes` of f32 gradient after
/// ternary encoding as one tensor, block framing included.
pub fn ternary_wire_bytes(grad_bytes: f64) -> f64 {
    let n = (grad_bytes / 4.0).ceil() as usize;
    crate::codec::wire::ternary_block_len("grad", n) as f64
}

/// A scenario file: flat `key = value` pairs (TOML syntax).
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub scaling: Scaling,
    pub gpus_per_machine: u32,
    pub batch: u32,
    pub grad_bytes: f64,
    pub gpu_bandwidth: f64,
    pub cpu_gpu_bandwidth: f64,
    pub net_latency: f64,
    pub net_bandwidth: f64,
    pub step_time: f64,
    /// Worker counts to evaluate.
    pub workers: Vec<u32>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, PerfModelError> {
        let s: Scenario = toml::from_str(text).map_err(|e| PerfModelError::Scenario(e.to_string()))?;
        s.params().validate()?;
        if s.workers.is_empty() {
            return Err(PerfModelError::Scenario("workers list is empty".into()));
        }
        Ok(s)
    }

    /// Base parameters (single machine, single GPU).
    pub fn params(&self) -> PerfModelParams {
        PerfModelParams {
            gpus_per_machine: self.gpus_per_machine,
            machines: 1,
            batch: self.batch,
            grad_bytes: self.grad_bytes,
            gpu_bandwidth: self.gpu_bandwidth,
            cpu_gpu_bandwidth: self.cpu_gpu_bandwidth,
            net_latency: self.net_latency,
            net_bandwidth: self.net_bandwidth,
            step_time: self.step_time,
        }
    }

    pub fn speedup_curve(&self, compressed_bytes: impl Fn(f64) -> f64) -> Result<Vec<SpeedupRow>, PerfModelError> {
        speedup_curve(&self.params(), self.scaling, compressed_bytes, &self.workers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(i: u32, j: u32) -> PerfModelParams {
        PerfModelParams {
            gpus_per_machine: i,
            machines: j,
            batch: 256,
            grad_bytes: 100e6,
            gpu_bandwidth: 10e9,
            cpu_gpu_bandwidth: 10e9,
            net_latency: 1e-5,
            net_bandwidth: 12.5e9,
            step_time: 0.5,
        }
    }

    #[test]
    fn single_gpu_comm_is_copy() {
        let p = params(1, 1);
        assert_eq!(t_comm(&p), p.grad_bytes / p.cpu_gpu_bandwidth);
        assert_eq!(t_strong(&p), p.step_time);
        assert_eq!(t_weak(&p), p.step_time);
    }

    #[test]
    fn rejects_invalid() {
        let mut p = params(1, 1);
        p.net_bandwidth = 0.0;
        assert!(p.validate().is_err());
        let mut p = params(1, 1);
        p.step_time = 0.005;
        assert!(p.validate().is_err());
        let mut p = params(1, 1);
        p.net_latency = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn worker_placement() {
        let p = params(4, 1).with_workers(8, 4);
        assert_eq!((p.gpus_per_machine, p.machines), (4, 2));
        let p = params(4, 1).with_workers(2, 4);
        assert_eq!((p.gpus_per_machine, p.machines), (2, 1));
    }

    #[test]
    fn scenario_rejects_unknown_keys() {
        let text = "name='x'\nscaling='weak'\ngpus_per_machine=1\nbatch=1\ngrad_bytes=1.0\n\
            gpu_bandwidth=1.0\ncpu_gpu_bandwidth=1.0\nnet_latency=0.0\nnet_bandwidth=1.0\n\
            step_time=2.0\nworkers=[1]\n";
        assert!(Scenario::parse(text).is_ok());
        let bad = format!("{text}bogus=3\n");
        assert!(Scenario::parse(&bad).is_err());
    }
}

//! `terngrad` command-line front end.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use terngrad::cluster::{
    run_server, run_threaded, run_worker, trace_iteration, ClusterError, IterationRecord, IterationSummary,
    RunInputs, SocketServer, SocketWorker, TransportKind,
};
use terngrad::codec::wire::{aggregate_wire_size, decode_blocks, encode_blocks};
use terngrad::codec::{aggregate, clip, encode_step, histogram, wire_size, Block, CodecConfig, CodecError};
use terngrad::numerics::GradTensor;
use terngrad::perfmodel::{ternary_wire_bytes, PerfModelError, Scenario};

use config::{content_hash, Loaded};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const SEED_VAR: &str = "TERNGRAD_SEED";

#[derive(Parser)]
#[command(name = "terngrad", version, about = "Ternary-gradient data-parallel SGD harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Role {
    /// Server and workers as threads of this process.
    Local,
    Server,
    Worker,
}

#[derive(Subcommand)]
enum Command {
    /// Train with a synchronous parameter server and write a metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "local")]
        role: Role,
        /// Worker id when `--role worker`.
        #[arg(long)]
        id: Option<u16>,
        /// Address the server listens on.
        #[arg(long, default_value = "127.0.0.1:7447")]
        listen: String,
        /// Server address a worker connects to.
        #[arg(long, default_value = "127.0.0.1:7447")]
        connect: SocketAddr,
    },
    /// Measure codec throughput and compression ratios.
    BenchCodec {
        /// Gradient sizes in elements.
        #[arg(long, value_delimiter = ',', default_values_t = [1_000usize, 100_000, 1_000_000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// Worker count for the pull-ratio column.
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Evaluate the throughput model for one or more scenario files.
    PerfModel {
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Histogram one tensor's gradient at each codec stage.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tensor: String,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        iteration: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Failure {
    Other = 1,
    Config = 2,
    Divergence = 3,
    Transport = 4,
}

struct CliError {
    kind: Failure,
    err: anyhow::Error,
}

type CliResult<T> = Result<T, CliError>;

fn fail(kind: Failure) -> impl FnOnce(anyhow::Error) -> CliError {
    move |err| CliError { kind, err }
}

impl From<ClusterError> for CliError {
    fn from(e: ClusterError) -> Self {
        let kind = match &e {
            ClusterError::Config(_) | ClusterError::Codec(CodecError::Contract(_)) => Failure::Config,
            ClusterError::Divergence(_) => Failure::Divergence,
            ClusterError::Transport { .. } | ClusterError::Timeout(_) => Failure::Transport,
            _ => Failure::Other,
        };
        CliError { kind, err: e.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        fail(Failure::Other)(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        fail(Failure::Other)(e.into())
    }
}

fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| fail(Failure::Config)(anyhow!("{SEED_VAR}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

/// CSV writer whose file starts with a provenance comment line.
fn csv_file(path: &Path, hash: &str, seed: Option<u64>) -> CliResult<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path).with_context(|| format!("create {}", path.display())).map_err(fail(Failure::Other))?;
    let mut w = BufWriter::new(file);
    match seed {
        Some(s) => writeln!(w, "# terngrad-version={VERSION} config-hash={hash} seed={s}")?,
        None => writeln!(w, "# terngrad-version={VERSION} config-hash={hash}")?,
    }
    Ok(csv::Writer::from_writer(w))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.8}")
}

fn train(config: &Path, out: &Path, role: Role, id: Option<u16>, listen: &str, connect: SocketAddr) -> CliResult<()> {
    let loaded = Loaded::read(config, seed_override()?).map_err(fail(Failure::Config))?;
    let cfg = loaded.cluster().map_err(fail(Failure::Config))?;
    let (train_set, eval_set) = loaded.datasets().map_err(fail(Failure::Config))?;
    let model = loaded
        .model(train_set.dim(), train_set.classes())
        .map_err(fail(Failure::Config))?;
    let columns: Vec<String> = model
        .params()
        .iter()
        .map(|p| p.name().to_string())
        .filter(|n| cfg.codec.ternarizes(n))
        .collect();
    let inputs = RunInputs::new(cfg.clone(), model, train_set).with_eval(eval_set);
    let name = &loaded.config.name;

    match role {
        Role::Local => {
            let report = run_threaded(&inputs, TransportKind::InProcess)?;
            let mut w = csv_file(&out.join(format!("{name}.csv")), &loaded.hash, Some(loaded.seed))?;
            write_train_header(&mut w, &columns)?;
            for s in report.summaries() {
                write_train_row(&mut w, &columns, &s)?;
            }
            w.flush()?;
        }
        Role::Server => {
            let listener = TcpListener::bind(listen)
                .map_err(|e| fail(Failure::Transport)(anyhow!("bind {listen}: {e}")))?;
            let mut end = SocketServer::accept(listener, cfg.workers, cfg.barrier_timeout)?;
            let iterations = run_server(&mut end, cfg.workers, cfg.codec.clone())?;
            eprintln!("server finished after {iterations} iterations");
        }
        Role::Worker => {
            let id = id.ok_or_else(|| fail(Failure::Config)(anyhow!("--role worker needs --id")))?;
            let mut worker = inputs.worker(id)?;
            let mut link = SocketWorker::connect(connect, 100, Duration::from_millis(100), cfg.barrier_timeout)?;
            let path = out.join(format!("{name}.worker{id}.csv"));
            let mut w = csv_file(&path, &loaded.hash, Some(loaded.seed))?;
            write_train_header(&mut w, &columns)?;
            let records = run_worker(&mut worker, &mut link, cfg.iterations, |_| {})?;
            for r in &records {
                write_train_row(&mut w, &columns, &summary_of(r))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn summary_of(r: &IterationRecord) -> IterationSummary {
    IterationSummary {
        iteration: r.iteration,
        mean_loss: r.loss,
        eval_accuracy: r.eval_accuracy,
        zero_fraction: r.zero_fraction.clone(),
        bytes_up: r.bytes_up,
        bytes_down: r.bytes_down,
    }
}

fn write_train_header<W: Write>(w: &mut csv::Writer<W>, columns: &[String]) -> CliResult<()> {
    let mut header = vec!["iteration".to_string(), "mean_loss".into(), "eval_accuracy".into()];
    header.extend(columns.iter().map(|c| format!("zero_fraction[{c}]")));
    header.extend(["bytes_up".to_string(), "bytes_down".into()]);
    w.write_record(&header)?;
    Ok(())
}

fn write_train_row<W: Write>(w: &mut csv::Writer<W>, columns: &[String], s: &IterationSummary) -> CliResult<()> {
    if !s.mean_loss.is_finite() {
        return Err(fail(Failure::Divergence)(anyhow!("loss is {} at iteration {}", s.mean_loss, s.iteration)));
    }
    let mut row = vec![
        s.iteration.to_string(),
        fmt_f64(s.mean_loss),
        s.eval_accuracy.map(fmt_f64).unwrap_or_default(),
    ];
    for c in columns {
        let z = s.zero_fraction.iter().find(|(n, _)| n == c).map(|(_, z)| *z);
        row.push(z.map(fmt_f64).unwrap_or_default());
    }
    row.push(s.bytes_up.to_string());
    row.push(s.bytes_down.to_string());
    w.write_record(&row)?;
    Ok(())
}

fn bench_codec(sizes: &[usize], trials: usize, workers: usize, out: &Path) -> CliResult<()> {
    let config_err = |m: String| fail(Failure::Config)(anyhow!(m));
    if sizes.is_empty() {
        return Err(config_err("no sizes given".into()));
    }
    if let Some(pos) = sizes.iter().position(|&n| n == 0) {
        return Err(config_err(format!("size #{} is zero", pos + 1)));
    }
    if trials == 0 {
        return Err(config_err("trials must be at least 1".into()));
    }
    if workers == 0 || workers >= u16::MAX as usize {
        return Err(config_err(format!("invalid worker count {workers}")));
    }
    let description = format!("sizes={sizes:?} trials={trials} workers={workers}");
    let mut w = csv_file(&out.join("bench-codec.csv"), &content_hash(description.as_bytes()), None)?;
    w.write_record([
        "n",
        "trials",
        "encode_melem_per_s",
        "decode_melem_per_s",
        "push_bytes",
        "float_push_bytes",
        "push_ratio",
        "pull_ratio",
    ])?;
    let ternary = CodecConfig::default();
    let float = CodecConfig::float();
    for &n in sizes {
        let grad = |k: usize| {
            let values = (0..n)
                .map(|j| (((j * 7919 + k * 104_729) % 2001) as f32 - 1000.0) * 1e-3)
                .collect();
            GradTensor::flat("grad", values).expect("finite values")
        };
        let mut encode_s = 0.0;
        let mut decode_s = 0.0;
        let mut last = None;
        for t in 0..trials {
            let g = grad(t);
            let start = Instant::now();
            let (enc, _) = encode_step(std::slice::from_ref(&g), &ternary, t as u64, 0).map_err(cluster_err)?;
            let bytes = encode_blocks(&enc.blocks).map_err(cluster_err)?;
            encode_s += start.elapsed().as_secs_f64();
            let start = Instant::now();
            let blocks = decode_blocks(&bytes).map_err(cluster_err)?;
            let decoded: usize = blocks
                .iter()
                .map(|b| match b {
                    Block::Ternary(t) => t.values().len(),
                    Block::Passthrough(p) => p.values.len(),
                })
                .sum();
            decode_s += start.elapsed().as_secs_f64();
            debug_assert_eq!(decoded, n);
            last = Some(enc);
        }
        let enc = last.expect("at least one trial");
        let g = grad(0);
        let (float_push, _) = encode_step(std::slice::from_ref(&g), &float, 0, 0).map_err(cluster_err)?;
        let push_ratio = wire_size(&float_push) as f64 / wire_size(&enc) as f64;

        let round = |cfg: &CodecConfig| -> CliResult<usize> {
            let pushes = (0..workers)
                .map(|k| encode_step(&[grad(k)], cfg, 0, k as u16).map(|(e, _)| e))
                .collect::<Result<Vec<_>, _>>()
                .map_err(cluster_err)?;
            Ok(aggregate_wire_size(&aggregate(&pushes, workers, cfg).map_err(cluster_err)?))
        };
        let pull_ratio = round(&float)? as f64 / round(&ternary)? as f64;
        let total = (n * trials) as f64 / 1e6;
        w.write_record([
            n.to_string(),
            trials.to_string(),
            fmt_f64(total / encode_s.max(1e-12)),
            fmt_f64(total / decode_s.max(1e-12)),
            wire_size(&enc).to_string(),
            wire_size(&float_push).to_string(),
            fmt_f64(push_ratio),
            fmt_f64(pull_ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cluster_err(e: CodecError) -> CliError {
    ClusterError::from(e).into()
}

fn perf_model(configs: &[PathBuf], out: &Path) -> CliResult<()> {
    for path in configs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("read {}", path.display()))
            .map_err(fail(Failure::Config))?;
        let scenario = Scenario::parse(&text)
            .map_err(|e: PerfModelError| fail(Failure::Config)(anyhow!("{}: {e}", path.display())))?;
        let rows = scenario
            .speedup_curve(ternary_wire_bytes)
            .map_err(|e| fail(Failure::Config)(anyhow!("{}: {e}", path.display())))?;
        let mut w = csv_file(
            &out.join(format!("{}.csv", scenario.name)),
            &content_hash(text.as_bytes()),
            None,
        )?;
        w.write_record(["N", "i", "j", "tput_float", "tput_ternary", "speedup"])?;
        for r in rows {
            w.write_record([
                r.workers.to_string(),
                r.gpus_per_machine.to_string(),
                r.machines.to_string(),
                fmt_f64(r.tput_float),
                fmt_f64(r.tput_ternary),
                fmt_f64(r.speedup),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn inspect(config: &Path, tensor: &str, bins: usize, iteration: u64, out: &Path) -> CliResult<()> {
    if bins == 0 {
        return Err(fail(Failure::Config)(anyhow!("--bins must be at least 1")));
    }
    let loaded = Loaded::read(config, seed_override()?).map_err(fail(Failure::Config))?;
    let cfg = loaded.cluster().map_err(fail(Failure::Config))?;
    let (train_set, _) = loaded.datasets().map_err(fail(Failure::Config))?;
    let model = loaded
        .model(train_set.dim(), train_set.classes())
        .map_err(fail(Failure::Config))?;
    if !model.params().iter().any(|p| p.name() == tensor) {
        let names: Vec<&str> = model.params().iter().map(|p| p.name()).collect();
        return Err(fail(Failure::Config)(anyhow!("no tensor {tensor:?}; model has {names:?}")));
    }
    let inputs = RunInputs::new(cfg.clone(), model, train_set);
    let trace = trace_iteration(&inputs, iteration)?;

    let original = trace
        .grads
        .iter()
        .find(|g| g.name() == tensor)
        .expect("tensor exists")
        .clone();
    let clipped = if cfg.codec.ternarizes(tensor) && cfg.codec.clipping {
        clip(&original, cfg.codec.clip_factor)
    } else {
        original.clone()
    };
    let ternary: Vec<f32> = trace
        .encoded
        .blocks
        .iter()
        .filter(|b| b.name() == tensor)
        .flat_map(|b| match b {
            Block::Ternary(t) => t.values().into_iter().map(|c| t.scaler() * c as f32).collect::<Vec<_>>(),
            Block::Passthrough(p) => p.values.clone(),
        })
        .collect();
    let averaged = trace
        .averaged
        .iter()
        .find(|g| g.name() == tensor)
        .expect("tensor exists")
        .values()
        .to_vec();

    let stages: [(&str, &[f32]); 4] = [
        ("original", original.values()),
        ("clipped", clipped.values()),
        ("ternary", &ternary),
        ("averaged", &averaged),
    ];
    for (stage, values) in stages {
        let hist = histogram(values, bins).map_err(cluster_err)?;
        let path = out.join(format!("{}.{tensor}.{stage}.csv", loaded.config.name));
        let mut w = csv_file(&path, &loaded.hash, Some(loaded.seed))?;
        w.write_record(["lower", "upper", "count"])?;
        for b in hist {
            w.write_record([format!("{:.9e}", b.lower), format!("{:.9e}", b.upper), b.count.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            role,
            id,
            listen,
            connect,
        } => train(&config, &out, role, id, &listen, connect),
        Command::BenchCodec {
            sizes,
            trials,
            workers,
            out,
        } => bench_codec(&sizes, trials, workers, &out),
        Command::PerfModel { config, out } => perf_model(&config, &out),
        Command::Inspect {
            config,
            tensor,
            bins,
            iteration,
            out,
        } => inspect(&config, &tensor, bins, iteration, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { kind, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(kind as u8)
        }
    }
}

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_terngrad"));
    c.env_remove("TERNGRAD_SEED");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn terngrad");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

/// Bundled training config with some keys replaced.
fn variant(dir: &Path, bundled: &str, replace: &[(&str, &str)]) -> PathBuf {
    let mut text = fs::read_to_string(configs().join(bundled)).unwrap();
    for (from, to) in replace {
        assert!(text.contains(from), "{from} not in {bundled}");
        text = text.replace(from, to);
    }
    let path = dir.join(bundled);
    fs::write(&path, text).unwrap();
    path
}

/// Data rows of a CSV file, skipping the provenance line.
fn rows(path: &Path) -> Vec<csv::StringRecord> {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# terngrad-version="), "missing provenance line in {}", path.display());
    let body = text.split_once('\n').unwrap().1;
    csv::Reader::from_reader(body.as_bytes()).records().map(Result::unwrap).collect()
}

fn last_accuracy(path: &Path) -> f64 {
    rows(path).last().unwrap()[2].parse().unwrap()
}

#[test]
fn bundled_ternary_and_float_reach_the_same_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["lenet-like-n4-ternary", "lenet-like-n4-float"] {
        let cfg = configs().join(format!("{name}.toml"));
        assert!(run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path())).status.success());
    }
    let t = last_accuracy(&dir.path().join("lenet-like-n4-ternary.csv"));
    let f = last_accuracy(&dir.path().join("lenet-like-n4-float.csv"));
    assert!((t - f).abs() <= 0.01, "ternary {t} float {f}");
    assert!(f > 0.9);
}

#[test]
fn train_output_is_reproducible_and_has_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "lenet-like-n4-ternary.toml", &[("iterations = 600", "iterations = 30"), ("eval_every = 100", "eval_every = 10")]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert!(run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(out)).status.success());
    }
    let fa = fs::read(a.join("lenet-like-n4-ternary.csv")).unwrap();
    assert_eq!(fa, fs::read(b.join("lenet-like-n4-ternary.csv")).unwrap());

    let text = String::from_utf8(fa).unwrap();
    let header = text.lines().nth(1).unwrap();
    assert_eq!(
        header,
        "iteration,mean_loss,eval_accuracy,zero_fraction[fc1.weight],zero_fraction[fc1.bias],\
         zero_fraction[fc2.weight],zero_fraction[fc2.bias],bytes_up,bytes_down"
    );
    let r = rows(&a.join("lenet-like-n4-ternary.csv"));
    assert_eq!(r.len(), 30);
    assert!(r[9][2].parse::<f64>().is_ok());
    assert!(r[8][2].is_empty());
}

#[test]
fn zero_iterations_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "lenet-like-n4-float.toml", &[("iterations = 600", "iterations = 0")]);
    assert!(run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path())).status.success());
    let text = fs::read_to_string(dir.path().join("lenet-like-n4-float.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(rows(&dir.path().join("lenet-like-n4-float.csv")).is_empty());
}

#[test]
fn seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "lenet-like-n4-float.toml", &[("iterations = 600", "iterations = 3")]);
    let out = run(bin()
        .env("TERNGRAD_SEED", "99")
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("lenet-like-n4-float.csv")).unwrap();
    assert!(text.lines().next().unwrap().ends_with("seed=99"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "lenet-like-n4-float.toml", &[("seed = 1", "seed = 1\nsped = 3")]);
    let out = run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sped") && err.contains("line"), "{err}");

    let cfg = variant(dir.path(), "lenet-like-n4-float.toml", &[("batch = 64", "batch = 63")]);
    let out = run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "lenet-like-n4-float.toml", &[("base_lr = 0.01", "base_lr = 1e30")]);
    let out = run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn socket_workers_match_the_local_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "lenet-like-n4-ternary.toml", &[("iterations = 600", "iterations = 20"), ("eval_every = 100", "eval_every = 5")]);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut server = bin()
        .args(["train", "--role", "server", "--listen", &addr, "--config"])
        .arg(&cfg)
        .spawn()
        .unwrap();
    let workers: Vec<_> = (0..4)
        .map(|id| {
            bin()
                .args(["train", "--role", "worker", "--connect", &addr, "--id", &id.to_string(), "--config"])
                .arg(&cfg)
                .arg("--out")
                .arg(dir.path())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut w in workers {
        assert!(w.wait().unwrap().success());
    }
    assert!(server.wait().unwrap().success());

    let local = dir.path().join("local");
    assert!(run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&local)).status.success());
    let local_rows = rows(&local.join("lenet-like-n4-ternary.csv"));
    let w0 = rows(&dir.path().join("lenet-like-n4-ternary.worker0.csv"));
    assert_eq!(w0.len(), 20);
    for (a, b) in local_rows.iter().zip(&w0) {
        assert_eq!(&a[2], &b[2], "eval accuracy differs at iteration {}", &a[0]);
    }
    for id in 1..4 {
        assert_eq!(rows(&dir.path().join(format!("lenet-like-n4-ternary.worker{id}.csv"))).len(), 20);
    }
}

#[test]
fn perf_model_emits_one_csv_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["perf-model", "--config"])
        .arg(configs().join("ethernet.toml"))
        .arg("--config")
        .arg(configs().join("infiniband.toml"))
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success());
    let eth = rows(&dir.path().join("ethernet.csv"));
    let ib = rows(&dir.path().join("infiniband.csv"));
    let ns: Vec<u32> = eth.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(ns, vec![2, 4, 8, 16, 32, 64, 128, 256, 512]);
    assert_eq!(ib.len(), 9);
    let at8: f64 = eth[2][5].parse().unwrap();
    assert!(at8 > 2.0, "{at8}");
}

#[test]
fn perf_model_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("ethernet.toml")).unwrap() + "\nbogus = 1\n";
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = run(bin().args(["perf-model", "--config"]).arg(&path).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_codec_reports_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["bench-codec", "--sizes", "1000000", "--trials", "1", "--out"])
        .arg(dir.path()));
    assert!(out.status.success());
    let r = rows(&dir.path().join("bench-codec.csv"));
    assert_eq!(r.len(), 1);
    assert_eq!(&r[0][1], "1");
    let ratio: f64 = r[0][6].parse().unwrap();
    assert!(ratio >= 15.5, "{ratio}");

    let out = run(bin().args(["bench-codec", "--sizes", "10,0", "--out"]).arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_writes_four_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("lenet-like-n4-ternary.toml");
    let out = run(bin()
        .args(["inspect", "--tensor", "fc2.weight", "--bins", "20", "--iteration", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success());
    let mut files: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 4);
    for stage in ["original", "clipped", "ternary", "averaged"] {
        let r = rows(&dir.path().join(format!("lenet-like-n4-ternary.fc2.weight.{stage}.csv")));
        assert_eq!(r.len(), 20);
        let total: u64 = r.iter().map(|x| x[2].parse::<u64>().unwrap()).sum();
        assert_eq!(total, 64 * 10);
    }
    let ternary = rows(&dir.path().join("lenet-like-n4-ternary.fc2.weight.ternary.csv"));
    assert!(ternary.iter().filter(|x| &x[2] != "0").count() <= 3);

    let single = dir.path().join("single");
    let out = run(bin()
        .args(["inspect", "--tensor", "fc1.bias", "--bins", "1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&single));
    assert!(out.status.success());
    assert_eq!(rows(&single.join("lenet-like-n4-ternary.fc1.bias.original.csv")).len(), 1);
}

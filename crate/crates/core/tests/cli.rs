use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sblwta::checkpoint::load_checkpoint;
use sblwta::cli::{run, CHECKPOINT_FILE, METRICS_FILE, OVERLAP_FILE, REPORT_FILE, WINNERS_FILE};
use sblwta::compress::{parse_table_row, TABLE_HEADER};
use sblwta::model::{Architecture, Model};
use sblwta::stochastic::IbpPrior;
use sblwta::train::METRICS_HEADER;
use tempfile::TempDir;

fn write_idx(dir: &Path, split: &str, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let label = (i % 10) as u8;
        labels.push(label);
        // a bright stripe whose row depends on the label, plus noise
        for r in 0..28 {
            for _ in 0..28 {
                let base = if r / 2 == label as usize + 2 { 200 } else { 0 };
                images.push(base + rng.gen_range(0..50));
            }
        }
    }
    fs::write(dir.join(format!("{split}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{split}-labels-idx1-ubyte")), labels).unwrap();
}

fn fixture() -> (TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fs::create_dir(&data).unwrap();
    write_idx(&data, "train", 60, 1);
    write_idx(&data, "t10k", 30, 2);
    (tmp, data)
}

fn sblwta(args: &[&str]) -> i32 {
    let mut all = vec!["sblwta"];
    all.extend_from_slice(args);
    run(all)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_run(data: &Path, out: &Path, epochs: &str, seed: &str) -> i32 {
    sblwta(&[
        "train", "--preset", "lenet300-sb2", "--epochs", epochs, "--seed", seed, "--batch", "16",
        "--deterministic", "--data", s(data), "--out", s(out),
    ])
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let (tmp, data) = fixture();
    let out = tmp.path().join("run");
    assert_eq!(train_run(&data, &out, "1", "1"), 0);
    assert!(out.join(CHECKPOINT_FILE).exists());
    let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,4,"));
    let ckpt = load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!((ckpt.step, ckpt.seed), (4, 1));
    assert_eq!(ckpt.adam.unwrap().step, 4);
}

#[test]
fn equal_seeds_give_identical_metrics() {
    let (tmp, data) = fixture();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(train_run(&data, &a, "2", "7"), 0);
    assert_eq!(train_run(&data, &b, "2", "7"), 0);
    let read = |d: &Path| fs::read(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(fs::read(a.join(CHECKPOINT_FILE)).unwrap(), fs::read(b.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let (tmp, data) = fixture();
    let out = tmp.path().join("run");
    assert_eq!(train_run(&data, &out, "0", "3"), 0);
    let ckpt = load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap();
    let init = Model::new(
        Architecture::preset("lenet300-sb2").unwrap(),
        IbpPrior::default(),
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    assert_eq!(ckpt.model, init);
}

#[test]
fn compress_and_analyze_outputs() {
    let (tmp, data) = fixture();
    let out = tmp.path().join("run");
    assert_eq!(train_run(&data, &out, "1", "2"), 0);
    let ckpt = out.join(CHECKPOINT_FILE);

    assert_eq!(sblwta(&["compress", "--checkpoint", s(&ckpt), "--tau", "0", "--data", s(&data), "--out", s(&out)]), 0);
    let report = fs::read_to_string(out.join(REPORT_FILE)).unwrap();
    assert!(report.starts_with("[compression]\ntau = 0\n"));
    assert!(report.contains("[layer dense1]\nkind = dense-lwta\nkept = 117600\ntotal = 117600\n"));

    let (loaded, _, _) = {
        let model = load_checkpoint(&ckpt).unwrap().model;
        let test = sblwta::data::load_mnist(&data, "t10k").unwrap();
        sblwta::compress::compress(&model, 0.0, &test).unwrap()
    };
    let table = loaded.table();
    let mut rows = table.lines();
    assert_eq!(rows.next(), Some(TABLE_HEADER));
    for (row, layer) in rows.zip(&loaded.layers) {
        let (name, kept, total, bits, fp, q) = parse_table_row(row).unwrap();
        assert_eq!(name, layer.name);
        assert_eq!(kept, total);
        assert_eq!((kept, total, bits), (layer.kept, layer.total, layer.bits));
        assert_eq!((fp.to_bits(), q.to_bits()), (layer.err_fp.to_bits(), layer.err_q.to_bits()));
    }

    assert_eq!(sblwta(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out)]), 0);
    let stats = fs::read_to_string(out.join(WINNERS_FILE)).unwrap();
    let mut lines = stats.lines();
    assert_eq!(lines.next(), Some("class,block,p1,p2"));
    let mut n = 0;
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[2] + v[3] - 1.0).abs() < 1e-9);
        n += 1;
    }
    assert_eq!(n, 10 * 10);
    let overlap = fs::read_to_string(out.join(OVERLAP_FILE)).unwrap();
    let m: Vec<Vec<f64>> = overlap
        .lines()
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(m.len(), 10);
    for i in 0..10 {
        assert_eq!(m[i][i], 1.0);
        for j in 0..10 {
            assert_eq!(m[i][j], m[j][i]);
        }
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let (tmp, data) = fixture();
    let out = tmp.path().join("run");
    let missing = tmp.path().join("missing.ckpt");
    assert_eq!(sblwta(&["eval", "--checkpoint", s(&missing), "--data", s(&data)]), 2);
    assert_eq!(sblwta(&["compress", "--checkpoint", s(&missing), "--data", s(&data)]), 2);
    assert_eq!(sblwta(&["train", "--preset", "resnet", "--data", s(&data), "--out", s(&out)]), 2);
    assert_eq!(sblwta(&["train", "--bogus-flag"]), 2);
    assert_eq!(sblwta(&["frobnicate"]), 2);

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "arch = dense-lwta(K=150,U=2) -> dense-lwta(K=50,U=2,J=200) -> dense-out(10)\n").unwrap();
    assert_eq!(sblwta(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]), 2);
    assert!(!out.join(CHECKPOINT_FILE).exists());

    assert_eq!(train_run(&data, &out, "0", "1"), 0);
    let ckpt = out.join(CHECKPOINT_FILE);
    assert_eq!(sblwta(&["analyze", "--checkpoint", s(&ckpt), "--layer", "dense9", "--data", s(&data)]), 2);
    assert_eq!(sblwta(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]), 0);
}

#[test]
fn config_file_with_flag_overrides() {
    let (tmp, data) = fixture();
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, "arch = dense-lwta(K=8,U=2) -> dense-out(10)\nepochs = 5\nbatch = 30\nseed = 4\n").unwrap();
    let code = sblwta(&["train", "--config", s(&cfg), "--epochs", "1", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code, 0);
    let ckpt = load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.model.arch.to_string(), "dense-lwta(K=8,U=2) -> dense-out(10)");
    assert_eq!((ckpt.step, ckpt.seed), (2, 4));
}

#[test]
fn divergence_exits_3_and_keeps_a_checkpoint() {
    let (tmp, data) = fixture();
    let out = tmp.path().join("run");
    let bin = env!("CARGO_BIN_EXE_sblwta");
    let status = Command::new(bin)
        .args(["train", "--preset", "lenet300-sb2", "--epochs", "3", "--lr", "1e300", "--batch", "16"])
        .args(["--data", s(&data), "--out", s(&out)])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3), "{}", String::from_utf8_lossy(&status.stderr));
    let ckpt = load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap();
    assert!(ckpt.model.params().iter().all(|(_, _, t)| t.all_finite()));
}

#[test]
fn binary_reports_help_and_usage() {
    let bin = env!("CARGO_BIN_EXE_sblwta");
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["train", "eval", "compress", "analyze"] {
        assert!(text.contains(cmd), "{text}");
    }
    let bad = Command::new(bin).args(["compress"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

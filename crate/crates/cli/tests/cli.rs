use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dealias_core::numerics::{fft2_centered, ifft2_centered};
use dealias_core::simdata::read_dataset;
use dealias_core::{zero_filled, SamplingMask};

fn dealias(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dealias"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = dealias(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn reported_fraction(stdout: &str) -> f64 {
    let field = stdout
        .split_whitespace()
        .find_map(|t| t.strip_prefix("fraction="))
        .expect("fraction printed");
    field.parse().unwrap()
}

/// A mask plus small train and validation sets in a fresh directory.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        ok(&["mask", "--pattern", "uniform1d", "--h", "32", "--w", "32", "--r", "3", "--acs", "4", "-o", "m.msk"], p);
        ok(&["simulate", "--mask", "m.msk", "--count", "4", "--coils", "2", "--seed", "1", "-o", "train.pmrd"], p);
        ok(&["simulate", "--mask", "m.msk", "--count", "2", "--coils", "2", "--seed", "2", "-o", "val.pmrd"], p);
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

const SMALL_NET: [&str; 4] = ["--n", "2", "--L", "3"];

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--train", "train.pmrd", "--val", "val.pmrd", "--mask", "m.msk"];
    v.extend_from_slice(&SMALL_NET);
    v.extend_from_slice(extra);
    v
}

/// Log rows without the wall-clock column.
fn log_values(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn mask_reports_fraction_and_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["mask", "--pattern", "uniform1d", "--h", "256", "--w", "256", "--r", "3", "--acs", "28", "-o", "m.msk"], dir.path());
    let f = reported_fraction(&out);
    assert!((f - 1.0 / 3.0).abs() <= 0.15 / 3.0, "fraction {f}");
    let mask = SamplingMask::load(dir.path().join("m.msk")).unwrap();
    assert_eq!((mask.height(), mask.width()), (256, 256));

    let full = ok(&["mask", "--pattern", "random1d", "--h", "64", "--w", "64", "--r", "1", "--acs", "0", "-o", "f.msk"], dir.path());
    assert_eq!(reported_fraction(&full), 1.0);
}

#[test]
fn mask_rejects_bad_pattern_and_unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dealias(&["mask", "--pattern", "spiral", "--h", "8", "--w", "8", "--r", "2", "-o", "m.msk"], dir.path());
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("spiral"));
    let io = dealias(&["mask", "--pattern", "uniform1d", "--h", "8", "--w", "8", "--r", "2", "-o", "no/such/dir/m.msk"], dir.path());
    assert_eq!(code(&io), 1);
    let missing = dealias(&["mask", "--pattern", "uniform1d", "--h", "8"], dir.path());
    assert_eq!(code(&missing), 2);
}

#[test]
fn simulate_roundtrip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["mask", "--pattern", "poisson2d", "--h", "64", "--w", "64", "--r", "3", "--acs", "8", "-o", "m.msk"], p);
    ok(&["simulate", "--mask", "m.msk", "--count", "50", "--coils", "4", "--seed", "5", "-o", "a.pmrd"], p);
    ok(&["simulate", "--mask", "m.msk", "--count", "50", "--coils", "4", "--seed", "5", "-o", "b.pmrd"], p);
    let records = read_dataset(p.join("a.pmrd")).unwrap();
    assert_eq!(records.len(), 50);
    for r in &records {
        let s = r.shape();
        assert_eq!((s.coils, s.height, s.width), (4, 64, 64));
    }
    assert_eq!(std::fs::read(p.join("a.pmrd")).unwrap(), std::fs::read(p.join("b.pmrd")).unwrap());

    let missing = dealias(&["simulate", "--mask", "absent.msk", "-o", "c.pmrd"], p);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.msk"));
}

#[test]
fn simulate_noise_level() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["mask", "--pattern", "uniform1d", "--h", "64", "--w", "64", "--r", "1", "-o", "m.msk"], p);
    ok(&["simulate", "--mask", "m.msk", "--count", "2", "--coils", "4", "--noise", "0.01", "-o", "n.pmrd"], p);
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in read_dataset(p.join("n.pmrd")).unwrap() {
        for (y, f) in r.undersampled_kspace.as_slice().iter().zip(r.full_kspace.as_slice()) {
            let d = y - f;
            sum += d.re * d.re + d.im * d.im;
            n += 2;
        }
    }
    let std = (sum / n as f64).sqrt();
    assert!((std - 0.01).abs() < 0.001, "empirical noise std {std}");
}

#[test]
fn train_zero_rate_reproduces_init() {
    let fx = Fixture::new();
    ok(&["train", "--dump-init", "init.pmnw", "--n", "2", "--L", "3"], fx.path());
    ok(&train_args(&["--epochs", "1", "--lr", "0", "-o", "zero.pmnw"]), fx.path());
    assert_eq!(std::fs::read(fx.file("init.pmnw")).unwrap(), std::fs::read(fx.file("zero.pmnw")).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted_log() {
    let fx = Fixture::new();
    let p = fx.path();
    ok(&train_args(&["--epochs", "4", "--optimizer", "adam", "-o", "full.pmnw", "--log", "full.csv"]), p);
    ok(
        &train_args(&[
            "--epochs", "2", "--optimizer", "adam", "--checkpoint-every", "1", "--checkpoint-dir", "ck", "-o", "half.pmnw",
        ]),
        p,
    );
    ok(&train_args(&["--epochs", "4", "--optimizer", "adam", "--resume", "ck", "-o", "resumed.pmnw", "--log", "resumed.csv"]), p);
    assert_eq!(log_values(&fx.file("full.csv")), log_values(&fx.file("resumed.csv")));
    assert_eq!(std::fs::read(fx.file("full.pmnw")).unwrap(), std::fs::read(fx.file("resumed.pmnw")).unwrap());
    for name in ["epoch_0001.pmnw", "epoch_0002.pmnw", "latest.pmnw", "train_log.csv"] {
        assert!(fx.file("ck").join(name).exists(), "{name}");
    }
}

#[test]
fn training_divergence_exits_3() {
    let fx = Fixture::new();
    let out = dealias(&train_args(&["--epochs", "2", "--lr", "1e6", "-o", "x.pmnw"]), fx.path());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn train_rejects_bad_flags_before_io() {
    let fx = Fixture::new();
    let neg = dealias(&train_args(&["--lr", "-1", "-o", "x.pmnw"]), fx.path());
    assert_eq!(code(&neg), 2);
    let opt = dealias(&train_args(&["--optimizer", "rmsprop", "-o", "x.pmnw"]), fx.path());
    assert_eq!(code(&opt), 2);
    let too_many = dealias(&["train", "--dump-init", "x.pmnw", "--L", "10"], fx.path());
    assert_eq!(code(&too_many), 2);
    assert!(!fx.file("x.pmnw").exists());
}

#[test]
fn reconstruct_zero_filled_and_determinism() {
    let fx = Fixture::new();
    let p = fx.path();
    ok(&["reconstruct", "--zero-filled", "--data", "val.pmrd", "--mask", "m.msk", "-o", "zf.pmrd"], p);
    let mask = SamplingMask::load(fx.file("m.msk")).unwrap();
    let data = read_dataset(fx.file("val.pmrd")).unwrap();
    let zf = read_dataset(fx.file("zf.pmrd")).unwrap();
    assert_eq!(zf.len(), data.len());
    for (r, d) in zf.iter().zip(&data) {
        let want = zero_filled(&d.undersampled_kspace, &mask).unwrap();
        assert!(r.coil_images.max_abs_diff(&want) < 1e-6);
        assert!(ifft2_centered(&r.full_kspace).max_abs_diff(&r.coil_images) < 1e-6);
        assert_eq!(r.undersampled_kspace, d.undersampled_kspace);
        assert_eq!(r.mask_id, d.mask_id);
    }

    ok(&["train", "--dump-init", "init.pmnw", "--n", "2", "--L", "3"], p);
    let rec = ["reconstruct", "--model", "init.pmnw", "--data", "val.pmrd", "--mask", "m.msk", "-o"];
    ok(&[&rec[..], &["a.pmrd", "--rss-dir", "rss"]].concat(), p);
    ok(&[&rec[..], &["b.pmrd"]].concat(), p);
    assert_eq!(std::fs::read(fx.file("a.pmrd")).unwrap(), std::fs::read(fx.file("b.pmrd")).unwrap());
    assert!(fx.file("rss").join("rss_0001.pgm").exists());
    let a = read_dataset(fx.file("a.pmrd")).unwrap();
    assert!(fft2_centered(&a[0].coil_images).max_abs_diff(&a[0].full_kspace) < 1e-6);

    let mismatch = dealias(&[&rec[..], &["c.pmrd", "--n", "13"]].concat(), p);
    assert_eq!(code(&mismatch), 2);
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("field n"));
}

#[test]
fn reconstruct_rejects_mask_of_wrong_size() {
    let fx = Fixture::new();
    ok(&["mask", "--pattern", "uniform1d", "--h", "16", "--w", "16", "--r", "2", "-o", "small.msk"], fx.path());
    let out = dealias(&["reconstruct", "--zero-filled", "--data", "val.pmrd", "--mask", "small.msk", "-o", "z.pmrd"], fx.path());
    assert_eq!(code(&out), 2);
}

fn csv_field(csv: &str, column: &str) -> f64 {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == column).unwrap();
    row[i].parse().unwrap()
}

#[test]
fn evaluate_truth_and_errors() {
    let fx = Fixture::new();
    let p = fx.path();
    let out = ok(&["evaluate", "--recon", "val.pmrd", "--reference", "val.pmrd", "--method", "truth"], p);
    assert_eq!(csv_field(&out, "nmse_mean"), 0.0);
    assert_eq!(csv_field(&out, "ssim_mean"), 1.0);

    ok(&["evaluate", "--recon", "val.pmrd", "--reference", "val.pmrd", "-o", "r.csv", "--per-image", "pi.csv"], p);
    let per = std::fs::read_to_string(fx.file("pi.csv")).unwrap();
    assert_eq!(per.lines().next().unwrap(), "index,nmse,psnr,psnr_capped,ssim");
    assert_eq!(per.lines().count(), 3);

    let count = dealias(&["evaluate", "--recon", "val.pmrd", "--reference", "train.pmrd"], p);
    assert_eq!(code(&count), 2);
    let missing = dealias(&["evaluate", "--recon", "gone.pmrd", "--reference", "val.pmrd"], p);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("gone.pmrd"));
}

#[test]
fn zero_filled_error_grows_with_acceleration() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut nmse = Vec::new();
    for r in ["3", "5"] {
        let m = format!("r{r}.msk");
        let d = format!("r{r}.pmrd");
        let z = format!("z{r}.pmrd");
        ok(&["mask", "--pattern", "uniform1d", "--h", "64", "--w", "64", "--r", r, "--acs", "7", "-o", &m], p);
        ok(&["simulate", "--mask", &m, "--count", "5", "--coils", "4", "--seed", "3", "-o", &d], p);
        ok(&["reconstruct", "--zero-filled", "--data", &d, "--mask", &m, "-o", &z], p);
        let out = ok(&["evaluate", "--recon", &z, "--reference", &d, "--rate", r, "--method", "zero-filled"], p);
        nmse.push(csv_field(&out, "nmse_mean"));
    }
    assert!(nmse[1] > nmse[0], "{nmse:?}");
}

fn worst_errors(report: &str) -> Vec<f64> {
    report
        .lines()
        .skip(2)
        .filter_map(|l| l.split_whitespace().nth(2).and_then(|v| v.parse().ok()))
        .collect()
}

#[test]
fn gradcheck_exit_codes_and_step_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    let fine = ok(&["gradcheck"], dir.path());
    assert!(fine.trim_end().ends_with("PASS"));

    let broken = dealias(&["gradcheck", "--perturb-backward"], dir.path());
    assert_eq!(code(&broken), 4);
    let msg = String::from_utf8_lossy(&broken.stderr);
    assert!(msg.contains("stage") && msg.contains("index"), "{msg}");

    let coarse = dealias(&["gradcheck", "--step", "1e-3"], dir.path());
    let coarse = String::from_utf8_lossy(&coarse.stdout).into_owned();
    let (f, c) = (worst_errors(&fine), worst_errors(&coarse));
    assert_eq!(f.len(), c.len());
    let f_max = f.iter().cloned().fold(0.0, f64::max);
    let c_max = c.iter().cloned().fold(0.0, f64::max);
    assert!(c_max > f_max, "coarse {c_max} vs fine {f_max}");
}

fn parse_pgm(bytes: &[u8]) -> (usize, usize, &[u8]) {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap().to_string());
    }
    pos += 1;
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    assert_eq!(bytes.len() - pos, w * h);
    (w, h, &bytes[pos..])
}

#[test]
fn export_ground_truth_gives_black_error_map() {
    let fx = Fixture::new();
    let p = fx.path();
    ok(&["export", "--recon", "val.pmrd", "--reference", "val.pmrd", "--format", "pgm", "--out-dir", "ex"], p);
    for i in 0..2 {
        let err = std::fs::read(fx.file("ex").join(format!("error_{i:04}.pgm"))).unwrap();
        let (w, h, px) = parse_pgm(&err);
        assert_eq!((w, h), (32, 32));
        assert!(px.iter().all(|&v| v == 0));
        let rec = std::fs::read(fx.file("ex").join(format!("recon_{i:04}.pgm"))).unwrap();
        let (_, _, px) = parse_pgm(&rec);
        assert_eq!(*px.iter().max().unwrap(), 255);
    }

    ok(&["export", "--recon", "val.pmrd", "--reference", "val.pmrd", "--index", "1", "--out-dir", "png"], p);
    let png = std::fs::read(fx.file("png").join("recon_0001.png")).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    assert!(!fx.file("png").join("recon_0000.png").exists());

    let io = dealias(&["export", "--recon", "nothing.pmrd", "--out-dir", "ex"], p);
    assert_eq!(code(&io), 1);
}

#[test]
fn help_annotates_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&["train", "--help"], dir.path());
    for flag in ["--n", "--k", "--L", "--knots", "--rho", "--alpha-r", "--eta", "--epochs", "--lr", "--lambda-init"] {
        assert!(help.contains(flag), "{flag}");
    }
    for default in ["[default: 13]", "[default: 9]", "[default: 0.2]", "[default: 1.8]", "[default: 400]", "[default: 0.01]"] {
        assert!(help.contains(default), "{default}");
    }
    for sub in ["mask", "simulate", "reconstruct", "evaluate", "gradcheck", "export"] {
        assert!(ok(&[sub, "--help"], dir.path()).contains("Usage"), "{sub}");
    }
}

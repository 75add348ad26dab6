use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_censored-ldm"))
        .current_dir(dir)
        .env_remove("CENSORED_LDM_OUT")
        .args(args)
        .output()
        .expect("spawn binary")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

const TINY_TRAIN: [&str; 10] =
    ["--iterations", "12", "--warmup", "2", "--eval-every", "6", "--valid-samples", "8", "--batch-size", "4"];

fn gen(dir: &Path, out: &str) {
    ok(dir, &["gen-data", "--n", "24", "--n-valid", "8", "--n-test", "12", "--size", "16", "--seed", "5", "--out", out]);
}

#[test]
fn gen_data_is_deterministic_and_rejects_zero() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "a");
    gen(t.path(), "b");
    for f in ["train.fgrd", "valid.fgrd", "test.fgrd"] {
        assert_eq!(read(t.path().join("a").join(f)), read(t.path().join("b").join(f)), "{f}");
    }
    let out = run(t.path(), &["gen-data", "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_root_comes_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_censored-ldm"))
        .current_dir(t.path())
        .env("CENSORED_LDM_OUT", &root)
        .args(["gen-data", "--n", "4", "--n-valid", "2", "--n-test", "2", "--size", "16", "--out", "d"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("d/train.fgrd").exists());
}

#[test]
fn full_pipeline_and_replay() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    gen(d, "data");
    let vae_args = |loss: &str, beta: &str, out: &str| {
        let mut a = vec!["train-vae", "--data", "data", "--loss", loss, "--beta", beta, "--latent-channels", "2", "--base-width", "4"];
        a.extend(TINY_TRAIN);
        a.extend(["--lr-max", "1e-3", "--out", out]);
        a.into_iter().map(String::from).collect::<Vec<_>>()
    };
    let args = vae_args("censored", "1e-3", "vae");
    ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    let log = String::from_utf8(read(d.join("vae/vae_log.csv"))).unwrap();
    assert_eq!(log.lines().count(), 13);
    assert!(log.starts_with("iteration,lr,loss,recon,kl,lower_share,upper_share,valid_loss"));
    let second: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert!(!second[5].is_empty() && !second[6].is_empty());

    let args = vae_args("censored", "1", "vae_b1");
    ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_ne!(read(d.join("vae/vae.ckpt")), read(d.join("vae_b1/vae.ckpt")));

    let replay = t.path().join("vae/vae.ckpt");
    let first = read(&replay);
    ok(d, &["train-vae", "--config", "vae/train-vae.json"]);
    assert_eq!(first, read(&replay));

    let mut ldm = vec!["train-ldm", "--vae", "vae/vae.ckpt", "--data", "data", "--width", "4", "--time-embed-dim", "8"];
    ldm.extend(TINY_TRAIN);
    ldm.extend(["--out", "ldm"]);
    ok(d, &ldm);
    let mut diff = vec!["train-diff", "--space", "data", "--data", "data", "--width", "4", "--time-embed-dim", "8"];
    diff.extend(TINY_TRAIN);
    diff.extend(["--out", "diff"]);
    ok(d, &diff);

    ok(d, &["sample", "--model", "ldm/model.ckpt", "--vae", "vae/vae.ckpt", "--n", "3", "--steps", "4", "--out", "s20"]);
    ok(d, &["sample", "--model", "ldm/model.ckpt", "--vae", "vae/vae.ckpt", "--n", "3", "--steps", "4", "--out", "s20b"]);
    ok(d, &["sample", "--model", "ldm/model.ckpt", "--vae", "vae/vae.ckpt", "--n", "3", "--steps", "2", "--out", "s10"]);
    assert_eq!(read(d.join("s20/samples.fgrd")), read(d.join("s20b/samples.fgrd")));
    assert_ne!(read(d.join("s20/samples.fgrd")), read(d.join("s10/samples.fgrd")));
    let lat = String::from_utf8(read(d.join("s20/latency.csv"))).unwrap();
    assert!(lat.lines().nth(1).unwrap().starts_with("latent,3,4,9,"));
    ok(d, &["sample", "--model", "diff/model.ckpt", "--n", "2", "--steps", "2", "--clip-denoiser", "--clip-output", "--out", "sd"]);
    assert!(String::from_utf8(read(d.join("sd/latency.csv"))).unwrap().contains("data,2,2,5,"));

    // The LDM refuses a VAE it was not trained on.
    let out = run(d, &["sample", "--model", "ldm/model.ckpt", "--vae", "vae_b1/vae.ckpt", "--n", "1", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(1));

    ok(d, &["reconstruct", "--vae", "vae/vae.ckpt", "--input", "data/test.fgrd", "--out", "rec"]);
    ok(d, &["evaluate", "--ref", "data/test.fgrd", "--gen", "rec/reconstruction.fgrd", "--paired", "--out", "ev"]);
    let m = String::from_utf8(read(d.join("ev/metrics.csv"))).unwrap();
    assert!(m.contains("rmse,all,") && m.contains("ssim,all,") && m.contains("acc_sie,all,"));
}

#[test]
fn evaluate_identities_and_errors() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    gen(d, "data");
    ok(d, &["evaluate", "--ref", "data/test.fgrd", "--gen", "data/test.fgrd", "--paired", "--out", "p"]);
    let m = String::from_utf8(read(d.join("p/metrics.csv"))).unwrap();
    assert!(m.contains("rmse,all,0\n") || m.contains("rmse,all,0.0\n"), "{m}");
    assert!(m.contains("ssim,all,1\n") || m.contains("ssim,all,1.0\n"), "{m}");
    assert!(m.contains("acc_sie,all,1\n") || m.contains("acc_sie,all,1.0\n"), "{m}");
    ok(d, &["evaluate", "--ref", "data/test.fgrd", "--gen", "data/test.fgrd", "--out", "u"]);
    let m = String::from_utf8(read(d.join("u/metrics.csv"))).unwrap();
    assert!(m.contains("rmse_sie,all,0"), "{m}");
    assert_eq!(String::from_utf8(read(d.join("u/sie_curve.csv"))).unwrap().lines().count(), 21);

    std::fs::write(d.join("junk.fgrd"), b"not a grid").unwrap();
    let out = run(d, &["evaluate", "--ref", "junk.fgrd", "--gen", "data/test.fgrd"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    ok(d, &["gen-data", "--n", "24", "--n-valid", "8", "--n-test", "12", "--size", "16", "--seed", "9", "--out", "o9"]);
    let out = run(d, &["evaluate", "--ref", "data/test.fgrd", "--gen", "o9/test.fgrd", "--paired"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn spectrum_rows_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    gen(d, "data");
    // Find a land-free crop from the mask by trying candidates.
    let crop = ["0,0,8", "8,8,8", "0,8,8", "8,0,8", "4,4,8", "0,0,4", "12,12,4", "0,12,4", "12,0,4"]
        .into_iter()
        .find(|c| run(d, &["spectrum", "--input", "data/test.fgrd", "--crop", c, "--out", "probe"]).status.success())
        .expect("some crop avoids land");
    let size: usize = crop.rsplit(',').next().unwrap().parse().unwrap();
    ok(d, &["spectrum", "--input", "data/test.fgrd", "data/test.fgrd", "--crop", crop, "--out", "sp"]);
    let a = String::from_utf8(read(d.join("sp/spectrum_0_test.csv"))).unwrap();
    let b = String::from_utf8(read(d.join("sp/spectrum_1_test.csv"))).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 1 + size / 2);
    assert!(a.starts_with("wavenumber,density,coefficients"));
    ok(d, &["spectrum", "--config", "sp/spectrum.json"]);
    assert_eq!(a, String::from_utf8(read(d.join("sp/spectrum_0_test.csv"))).unwrap());
}

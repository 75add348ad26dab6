use censored_ldm::autodiff::Checkpoint;
use censored_ldm::grid::{generate_splits, load_fgrd, save_fgrd};
use censored_ldm::models::{Reconstruction, VaeConfig};
use censored_ldm::pipeline::{train_vae, TrainConfig, TrainedVae};

#[test]
fn fields_and_models_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_splits(6, 3, 4, 16, 16, 11).unwrap();
    let path = dir.path().join("test.fgrd");
    save_fgrd(&s.test, &path).unwrap();
    assert_eq!(load_fgrd(&path).unwrap(), s.test);

    let cfg = VaeConfig { latent_channels: 2, base_width: 3, depth: 2, blocks_per_level: 1, beta: 1e-3 };
    let tc = TrainConfig { iterations: 3, batch_size: 2, warmup: 1, eval_every: 3, valid_samples: 3, ..Default::default() };
    let vae = train_vae(&s.train, &s.valid, &cfg, Reconstruction::Censored, &tc, &mut |_| {}).unwrap();
    let ckpt = dir.path().join("vae.ckpt");
    vae.to_checkpoint().unwrap().save(&ckpt).unwrap();
    let back = TrainedVae::from_checkpoint(&Checkpoint::load(&ckpt).unwrap()).unwrap();
    assert_eq!(back.reconstruct(&s.test, true).unwrap(), vae.reconstruct(&s.test, true).unwrap());
    assert_eq!(back.meta, vae.meta);
}

#[test]
fn damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_splits(2, 2, 2, 16, 16, 12).unwrap();
    let path = dir.path().join("x.fgrd");
    save_fgrd(&s.test, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 7);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_fgrd(&path).is_err());
    std::fs::write(&path, b"FGRD").unwrap();
    assert!(load_fgrd(&path).is_err());
    assert!(Checkpoint::load(dir.path().join("missing.ckpt")).is_err());
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bvae_core::datasets::{encode_idx_images, encode_idx_labels};

pub fn bvae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bvae"))
        .args(args)
        .current_dir(dir)
        .env_remove("BVAE_CACHE_DIR")
        .env("BVAE_REVISION", "test")
        .output()
        .expect("spawn bvae")
}

pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "bvae failed ({:?}):\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// 4×4 images: class 0 lights the top half, class 1 the left half, each
/// with a pixel of per-image jitter. `shift` moves the pattern to make an
/// OoD set.
pub fn write_toy_idx(dir: &Path, stem: &str, n: usize, shift: bool) -> PathBuf {
    let mut pixels = Vec::with_capacity(n * 16);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        for p in 0..16 {
            let (r, c) = (p / 4, p % 4);
            let on = match (class, shift) {
                (0, false) => r < 2,
                (1, false) => c < 2,
                (0, true) => r >= 2,
                _ => c >= 2,
            };
            let jitter = ((i * 7 + p * 3) % 11) as u8;
            pixels.push(if on { 230 + jitter % 25 } else { jitter });
        }
        labels.push(class as u8);
    }
    let images = dir.join(format!("{stem}-images-idx3-ubyte"));
    std::fs::write(&images, encode_idx_images(n, 4, 4, &pixels)).unwrap();
    std::fs::write(
        dir.join(format!("{stem}-labels-idx1-ubyte")),
        encode_idx_labels(&labels),
    )
    .unwrap();
    images
}

pub const TOY_TRAIN_CONFIG: &str = r#"{
  "data": {"images": "toy-train-images-idx3-ubyte"},
  "train": {
    "arch": {"d_x": 16, "hidden": [8], "d_z": 2, "activation": "tanh", "likelihood": "bernoulli"},
    "sampler": {"step_size": 0.001, "momentum_decay": 0.05, "burn_in_epochs": 1, "thinning_epochs": 1},
    "epochs": 3,
    "batch_size": 16,
    "seed": 5
  }
}"#;

/// Toy train/in/OoD files plus `train.json` in `dir`.
pub fn toy_workspace(dir: &Path) {
    write_toy_idx(dir, "toy-train", 96, false);
    write_toy_idx(dir, "toy-test", 20, false);
    write_toy_idx(dir, "toy-ood", 20, true);
    std::fs::write(dir.join("train.json"), TOY_TRAIN_CONFIG).unwrap();
}

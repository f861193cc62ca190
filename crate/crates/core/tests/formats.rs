//! Checkpoint determinism and IDX parsing.

use std::path::Path;

use flatvae::data::{
    mnist_load, parse_idx_images, parse_idx_labels, pendulum_dataset, PendulumSpec, MNIST_TEST_FILES,
    MNIST_TRAIN_FILES,
};
use flatvae::nets::{Architecture, Likelihood};
use flatvae::trainer::{fit, init_model, Checkpoint, TrainConfig, TrainState};
use flatvae::Error;

fn images_bytes(count: u32, rows: u32, cols: u32) -> Vec<u8> {
    let mut b = Vec::with_capacity(16 + (count * rows * cols) as usize);
    for v in [0x0803, count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend((0..count * rows * cols).map(|i| (i % 251) as u8));
    b
}

fn labels_bytes(count: u32) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + count as usize);
    for v in [0x0801, count] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend((0..count).map(|i| (i % 10) as u8));
    b
}

fn is_format(e: &Error) -> bool {
    matches!(e, Error::Format { .. })
}

#[test]
fn idx_files_of_published_size_parse_to_published_counts() {
    for count in [60_000, 10_000] {
        let images = parse_idx_images(&images_bytes(count, 28, 28)).unwrap();
        assert_eq!((images.count, images.rows, images.cols), (count as usize, 28, 28));
        assert_eq!(images.pixels.len(), count as usize * 784);
        assert_eq!(parse_idx_labels(&labels_bytes(count)).unwrap().len(), count as usize);
    }
}

#[test]
fn corrupted_idx_headers_are_format_errors() {
    let good = images_bytes(3, 2, 2);
    let mut bad_magic = good.clone();
    bad_magic[3] = 0x01;
    let mut wrong_count = good.clone();
    wrong_count[7] = 4;
    let cases: [(&str, &[u8]); 5] = [
        ("bad magic", &bad_magic),
        ("count larger than payload", &wrong_count),
        ("header cut short", &good[..10]),
        ("empty file", &[]),
        ("payload cut short", &good[..good.len() - 1]),
    ];
    for (name, bytes) in cases {
        let e = parse_idx_images(bytes).unwrap_err();
        assert!(is_format(&e), "{name}: {e}");
    }
    let mut labels = labels_bytes(5);
    labels[2] = 0x09;
    assert!(is_format(&parse_idx_labels(&labels).unwrap_err()));
    assert!(is_format(&parse_idx_labels(&labels_bytes(5)[..9]).unwrap_err()));
}

#[test]
fn label_count_must_match_image_count() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("img"), images_bytes(4, 2, 2)).unwrap();
    std::fs::write(dir.path().join("lab"), labels_bytes(3)).unwrap();
    let e = mnist_load(&dir.path().join("img"), &dir.path().join("lab"), Some(0.5)).unwrap_err();
    assert!(is_format(&e), "{e}");
}

/// Runs only when `FLATVAE_MNIST_DIR` points at the four uncompressed files.
#[test]
fn real_mnist_files_when_available() {
    let Some(dir) = std::env::var_os("FLATVAE_MNIST_DIR") else {
        eprintln!("FLATVAE_MNIST_DIR not set; skipping");
        return;
    };
    let dir = Path::new(&dir);
    for ((images, labels), count) in [(MNIST_TRAIN_FILES, 60_000), (MNIST_TEST_FILES, 10_000)] {
        let ds = mnist_load(&dir.join(images), &dir.join(labels), Some(0.5)).unwrap();
        assert_eq!((ds.len(), ds.dim()), (count, 784));
    }
}

fn config(steps: u64) -> TrainConfig {
    TrainConfig {
        k_importance: 2,
        batch_size: 16,
        max_steps: steps,
        eta: 0.5,
        beta_init: 1e-3,
        kappa: 1.0,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn save_load_step_equals_uninterrupted_training() {
    let data = pendulum_dataset(&PendulumSpec { count: 64, noise_std: 0.05, seed: 2 }).unwrap();
    let arch = Architecture::uniform(256, 2, &[16], Likelihood::Gaussian);

    let cfg = config(12);
    let mut straight = init_model(arch.clone(), &cfg).unwrap();
    let mut straight_state = TrainState::new(&mut straight, &cfg);
    let straight_log = fit(&mut straight, &data, &cfg, &mut straight_state, |_| Ok(())).unwrap();

    // The checkpoint is taken after the initial phase, so both optimisers
    // carry state across it.
    let first = config(7);
    let mut model = init_model(arch, &first).unwrap();
    let mut state = TrainState::new(&mut model, &first);
    let mut log = fit(&mut model, &data, &first, &mut state, |_| Ok(())).unwrap();
    assert!(!state.initial_phase);
    let mut bytes = Vec::new();
    Checkpoint { config: cfg.clone(), model, state }.write_to(&mut bytes).unwrap();
    let Checkpoint { config: loaded_cfg, mut model, mut state } = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded_cfg, cfg);
    log.extend(fit(&mut model, &data, &loaded_cfg, &mut state, |_| Ok(())).unwrap());

    assert_eq!(model, straight);
    assert_eq!(state, straight_state);
    let bits = |l: &[flatvae::trainer::LogRecord]| -> Vec<u64> { l.iter().map(|r| r.total.to_bits()).collect() };
    assert_eq!(bits(&log), bits(&straight_log));
    assert_eq!(log, straight_log);
}

#[test]
fn checkpoint_roundtrip_is_exact_and_corruption_is_detected() {
    let cfg = config(3);
    let arch = Architecture::uniform(4, 2, &[5], Likelihood::Bernoulli);
    let mut model = init_model(arch, &cfg).unwrap();
    let state = TrainState::new(&mut model, &cfg);
    let ck = Checkpoint { config: cfg, model, state };
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut trailing = bytes.clone();
    trailing.push(0);
    for bad in [&bad_magic[..], &bytes[..bytes.len() / 2], &trailing[..], &[][..]] {
        let e = Checkpoint::from_bytes(bad).unwrap_err();
        assert!(is_format(&e), "{e}");
    }
}

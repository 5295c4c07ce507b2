//! Runs every example through its `run_example` entry point.

mod wkv_scan {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/wkv_scan.rs"));
}
mod lif_neuron {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/lif_neuron.rs"));
}
mod gradcheck {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gradcheck.rs"));
}
mod reconstruction {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/reconstruction.rs"));
}
mod train_toy {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/train_toy.rs"));
}
mod sample {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/sample.rs"));
}
mod count_params {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/count_params.rs"));
}
mod idx_loader {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/idx_loader.rs"));
}

#[test]
fn wkv_scan_matches_reference() {
    assert!(wkv_scan::run_example().unwrap() < 1e-10);
}

#[test]
fn lif_neuron_spike_counts() {
    let trains = lif_neuron::run_example().unwrap();
    let counts: Vec<f64> = trains.iter().map(|t| t.iter().sum()).collect();
    assert_eq!(counts[0], 0.0);
    assert_eq!(counts[1], 0.0, "0.8 never charges past 1 with tau 2");
    assert!(counts[2] > 0.0 && counts[2] < counts[3]);
    assert!(trains.iter().flatten().all(|&s| s == 0.0 || s == 1.0));
}

#[test]
fn gradcheck_passes() {
    let (wkv, block) = gradcheck::run_example().unwrap();
    assert!(wkv < 1e-5, "{wkv}");
    assert!(block < 1e-4, "{block}");
}

#[test]
fn reconstruction_identity() {
    let (same, moved) = reconstruction::run_example().unwrap();
    assert_eq!(same, 0.0);
    assert!(moved > 0.0);
}

#[test]
fn train_toy_short_run() {
    let losses = train_toy::run_example(20).unwrap();
    assert_eq!(losses.len(), 20);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
}

#[test]
fn sample_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = sample::run_example(dir.path()).unwrap();
    assert_eq!(imgs.shape(), &[9, 1, 8, 8]);
    assert!(imgs.is_finite());
    let pgm = std::fs::read(dir.path().join("blobs.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
}

#[test]
fn count_params_presets() {
    let counts = count_params_macs_rows();
    assert_eq!(counts.len(), 3);
    assert!(counts.windows(2).all(|w| w[0].1.params < w[1].1.params));
}

fn count_params_macs_rows() -> Vec<(String, sdit::model::Counts)> {
    count_params::run_example().unwrap()
}

#[test]
fn idx_loader_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(idx_loader::run_example(dir.path()).unwrap(), 3);
}

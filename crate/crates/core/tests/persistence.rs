use std::collections::BTreeMap;

use dpot::io::{
    load_checkpoint, load_checkpoint_filtered, read_dataset, save_checkpoint, write_dataset, Checkpoint,
    CheckpointError, DatasetError, DatasetMeta, TrajectoryDataset,
};
use dpot::tensor::Tensor;
use proptest::prelude::*;

const GOLDEN: &[u8] = include_bytes!("data/golden_v1.dpot");

fn golden_dataset() -> TrajectoryDataset {
    let (n, t, h, w, c) = (2, 3, 2, 4, 1);
    TrajectoryDataset {
        n,
        t,
        h,
        w,
        c,
        values: (0..n * t * h * w * c).map(|i| i as f32 * 0.25 - 1.5).collect(),
        mask: vec![1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
        meta: DatasetMeta {
            pde: "heat".into(),
            coefficients: BTreeMap::from([("nu".to_string(), 0.1)]),
            dt_save: 0.5,
            channel_names: vec!["u".into()],
            mean: vec![0.25],
            std: vec![0.5],
            seed: 7,
        },
    }
}

fn random_dataset(seed: u64, n: usize, t: usize, h: usize, c: usize) -> TrajectoryDataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    TrajectoryDataset {
        n,
        t,
        h,
        w: h,
        c,
        values: (0..n * t * h * h * c).map(|_| rng.random_range(-3.0f32..3.0)).collect(),
        mask: (0..n * h * h).map(|_| rng.random_range(0..2u8)).collect(),
        meta: DatasetMeta {
            pde: "diffusion_reaction".into(),
            coefficients: BTreeMap::from([("du".to_string(), 1e-3), ("dv".to_string(), 5e-3)]),
            dt_save: 0.1,
            channel_names: (0..c).map(|i| format!("c{i}")).collect(),
            mean: vec![0.0; c],
            std: vec![1.0; c],
            seed,
        },
    }
}

#[test]
fn golden_file_layout_is_stable() {
    let ds = golden_dataset();
    assert_eq!(ds.to_bytes().unwrap(), GOLDEN);
    assert_eq!(TrajectoryDataset::from_bytes(GOLDEN).unwrap(), ds);
    assert_eq!(&GOLDEN[..8], b"DPOTDS1\0");
    let word = |i: usize| u32::from_le_bytes(GOLDEN[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    assert_eq!(
        [word(0), word(1), word(2), word(3), word(4), word(5), word(6)],
        [1, 2, 3, 2, 4, 1, 1]
    );
    // First payload value -1.5 in little-endian IEEE single precision.
    assert_eq!(&GOLDEN[36..40], &(-1.5f32).to_le_bytes());
}

#[test]
fn payload_size_arithmetic() {
    let ds = random_dataset(1, 8, 21, 32, 1);
    let bytes = ds.to_bytes().unwrap();
    let json_len = serde_json::to_vec(&ds.meta).unwrap().len();
    let payload = 8 * 21 * 32 * 32 * 4;
    assert_eq!(payload, 688_128);
    assert_eq!(bytes.len(), 36 + payload + 8 * 32 * 32 + 8 + json_len + 4);
}

#[test]
fn file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dpot");
    let ds = random_dataset(3, 3, 5, 8, 2);
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    let bits = |d: &TrajectoryDataset| d.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&ds));
    assert_eq!(std::fs::read(&path).unwrap(), ds.to_bytes().unwrap());
    assert_eq!(
        std::fs::read_dir(dir.path()).unwrap().count(),
        1,
        "temporary file left behind"
    );
}

#[test]
fn flipped_payload_byte_fails_crc() {
    let mut bytes = GOLDEN.to_vec();
    bytes[50] ^= 0x01;
    assert!(matches!(
        TrajectoryDataset::from_bytes(&bytes),
        Err(DatasetError::Crc { .. })
    ));
}

#[test]
fn distinct_errors_for_distinct_corruptions() {
    let truncated = &GOLDEN[..GOLDEN.len() - 10];
    assert!(matches!(
        TrajectoryDataset::from_bytes(truncated),
        Err(DatasetError::Truncated { .. })
    ));
    assert!(matches!(
        TrajectoryDataset::from_bytes(&GOLDEN[..20]),
        Err(DatasetError::Truncated { .. })
    ));

    let mut version = GOLDEN.to_vec();
    version[8] = 9;
    assert!(matches!(
        TrajectoryDataset::from_bytes(&version),
        Err(DatasetError::UnsupportedVersion(9))
    ));

    let mut magic = GOLDEN.to_vec();
    magic[0] = b'X';
    assert!(matches!(
        TrajectoryDataset::from_bytes(&magic),
        Err(DatasetError::BadMagic)
    ));

    let mut dtype = GOLDEN.to_vec();
    dtype[32] = 2;
    assert!(matches!(
        TrajectoryDataset::from_bytes(&dtype),
        Err(DatasetError::UnsupportedDtype(2))
    ));
}

#[test]
fn non_finite_values_are_refused_at_write() {
    let mut ds = golden_dataset();
    ds.values[4] = f32::INFINITY;
    assert!(matches!(ds.to_bytes(), Err(DatasetError::NonFinite(4))));
}

#[test]
fn inconsistent_dataset_is_refused() {
    let mut ds = golden_dataset();
    ds.values.pop();
    assert!(matches!(ds.to_bytes(), Err(DatasetError::Inconsistent(_))));
}

fn sample_checkpoint() -> Checkpoint {
    Checkpoint {
        config: serde_json::json!({"d_model": 4}),
        params: vec![
            ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2)),
            (
                "b.bias".into(),
                Tensor::new(&[3], vec![1e-300, -0.0, f64::MAX]).unwrap(),
            ),
        ],
        optimizer: vec![("adam.m.a.weight".into(), Tensor::full(&[2, 3], 0.5))],
        state: serde_json::json!({"epoch": 3, "rng": {"seed": 9, "position": 120}}),
    }
}

#[test]
fn checkpoint_round_trip_and_stable_blob() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = sample_checkpoint();
    save_checkpoint(&ckpt, dir.path().join("c1")).unwrap();
    let loaded = load_checkpoint(dir.path().join("c1")).unwrap();
    assert_eq!(loaded, ckpt);
    save_checkpoint(&loaded, dir.path().join("c2")).unwrap();
    let blob = |d: &str| std::fs::read(dir.path().join(d).join("tensors.bin")).unwrap();
    assert_eq!(blob("c1"), blob("c2"));
    assert_eq!(blob("c1").len(), 8 * (6 + 3 + 6));
}

#[test]
fn partial_checkpoint_load() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&sample_checkpoint(), dir.path()).unwrap();
    let part = load_checkpoint_filtered(dir.path(), |k| k.starts_with("a.")).unwrap();
    assert_eq!(part.params.len(), 1);
    assert_eq!(part.params[0].0, "a.weight");
    assert!(part.optimizer.is_empty());
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&sample_checkpoint(), dir.path()).unwrap();
    let path = dir.path().join("tensors.bin");
    let mut blob = std::fs::read(&path).unwrap();
    blob.truncate(blob.len() - 8);
    std::fs::write(&path, blob).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(CheckpointError::Inconsistent(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_dataset_round_trips(seed in 0u64..10_000, n in 1usize..4, t in 1usize..4, h in 1usize..6, c in 1usize..3) {
        let ds = random_dataset(seed, n, t, h, c);
        let bytes = ds.to_bytes().unwrap();
        prop_assert_eq!(TrajectoryDataset::from_bytes(&bytes).unwrap(), ds);
    }

    #[test]
    fn any_single_byte_flip_is_detected(pos in 0usize..367, bit in 0u8..8) {
        let mut bytes = GOLDEN.to_vec();
        bytes[pos] ^= 1 << bit;
        prop_assert!(TrajectoryDataset::from_bytes(&bytes).is_err());
    }
}

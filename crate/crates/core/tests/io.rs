use std::fs::{self, OpenOptions};

use nfmm_core::datagen::{build_dataset, GenerateConfig, Regime, SourceKind};
use nfmm_core::io::{
    dataset_fingerprint, decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset, read_checkpoint,
    read_dataset, write_atomic, write_checkpoint, write_dataset,
};
use nfmm_core::model::{DeepNeuralFmm, ModelConfig};
use nfmm_core::optim::OptimizerState;
use nfmm_core::train::{Checkpoint, Normalizer, TrainConfig};
use nfmm_core::Error;

fn small_dataset() -> nfmm_core::datagen::Dataset {
    let cfg = GenerateConfig::new(2, Regime::Weak, SourceKind::Point, 8.0, 3, 1, 7, 3);
    build_dataset(&cfg).unwrap().0
}

fn small_checkpoint() -> Checkpoint {
    let config = TrainConfig {
        model: ModelConfig {
            in_channels: 1,
            hidden_width: 8,
            latent: 8,
            tree_depth: 3,
            model_layers: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let (_, params) = DeepNeuralFmm::new(&config.model, 3).unwrap();
    let mut optimizer = OptimizerState::new(&params, config.weight_decay);
    for (i, m) in optimizer.first_moment.iter_mut().enumerate() {
        m.iter_mut().enumerate().for_each(|(j, v)| *v = (i * 31 + j) as f64 * 1e-3);
    }
    optimizer.step = 17;
    Checkpoint {
        config,
        params,
        optimizer,
        step: 17,
        epoch: 4,
        metric: 0.25,
        normalizer: Normalizer {
            input_mean: vec![1.0],
            input_std: vec![0.03],
            output_scale: 0.4,
        },
        fingerprint: [9; 32],
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let ds = small_dataset();
    let bytes = encode_dataset(&ds);
    let back = decode_dataset(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(encode_dataset(&back), bytes);
    assert_eq!(&bytes[..8], b"NFMM-DS1");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.nfmm");
    write_dataset(&path, &ds).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
    assert_eq!(dataset_fingerprint(&ds), dataset_fingerprint(&back));
}

#[test]
fn dataset_stride_matches_layout() {
    let ds = small_dataset();
    let bytes = encode_dataset(&ds);
    let per_record = (7 * 64 + 8) * 4;
    let header_len = bytes.len() - ds.len() * per_record;
    let stride = u64::from_le_bytes(bytes[header_len - 8..header_len].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[header_len - 16..header_len - 8].try_into().unwrap());
    assert_eq!((stride as usize, count as usize), (per_record, ds.len()));
}

#[test]
fn dataset_rejects_corruption() {
    let bytes = encode_dataset(&small_dataset());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_dataset(&bad), Err(Error::Format(m)) if m.contains("magic")));
    let mut bad = bytes.clone();
    bad[8] = 2;
    assert!(matches!(decode_dataset(&bad), Err(Error::Format(m)) if m.contains("version")));
    assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_dataset(&long), Err(Error::Format(_))));
    assert!(matches!(decode_dataset(b"NF"), Err(Error::Format(_))));
    for cut in (0..200).step_by(7) {
        assert!(decode_dataset(&bytes[..cut]).is_err());
    }
}

#[test]
fn checkpoint_save_load_save_is_bit_identical() {
    let ck = small_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    write_checkpoint(&a, &ck).unwrap();
    let loaded = read_checkpoint(&a).unwrap();
    assert_eq!(loaded, ck);
    write_checkpoint(&b, &loaded).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "temporary or lock files left behind: {names:?}");
}

#[test]
fn checkpoint_rejects_wrong_magic_version_and_config() {
    let ck = small_checkpoint();
    let bytes = encode_checkpoint(&ck);
    let mut bad = bytes.clone();
    bad[5] = b'Z';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(m)) if m.contains("version")));

    let mut other = ck.clone();
    other.config.model.hidden_width = 10;
    assert!(matches!(decode_checkpoint(&encode_checkpoint(&other)), Err(Error::Incompatible(_))));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn concurrent_writer_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.bin");
    let lock = OpenOptions::new().create(true).truncate(false).write(true).open(dir.path().join("out.bin.lock")).unwrap();
    lock.lock().unwrap();
    match write_atomic(&path, b"x") {
        Err(Error::Io(e)) => assert_eq!(e.kind(), std::io::ErrorKind::WouldBlock),
        other => panic!("{other:?}"),
    }
    assert!(!path.exists());
    drop(lock);
    write_atomic(&path, b"y").unwrap();
    assert_eq!(fs::read(&path).unwrap(), b"y");
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn decoding_mutated_bytes_never_panics(pos in 0usize..4096, byte in 0u8..=255, cut in 0usize..4096) {
        let mut bytes = encode_dataset(&small_dataset());
        let p = pos % bytes.len();
        bytes[p] = byte;
        let _ = decode_dataset(&bytes);
        let _ = decode_dataset(&bytes[..cut.min(bytes.len())]);
        let mut ck = encode_checkpoint(&small_checkpoint());
        let p = pos % ck.len();
        ck[p] = byte;
        let _ = decode_checkpoint(&ck);
        let _ = decode_checkpoint(&ck[..cut.min(ck.len())]);
    }
}

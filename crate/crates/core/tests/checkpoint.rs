use fsc_core::checkpoint::{Checkpoint, Manifest, Stage, StageRecord, FORMAT_VERSION, MANIFEST};
use fsc_core::params::{ParamStore, Partition};
use fsc_core::CoreError;
use fsc_tensor::{AdamW, AdamWConfig, Moments, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn manifest(stage: Stage) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        config_hash: "c".repeat(64),
        model_hash: "m".repeat(64),
        stage,
        control_mode: None,
        provenance: vec![StageRecord { stage, config_hash: "c".repeat(64), steps: 3, seed: 42, task: None }],
        warnings: vec![],
        tasks: vec![],
        partitions: vec![],
        total_params: 0,
        optimizer: None,
    }
}

fn store() -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    s.insert("backbone.enc.conv_in.w".to_string(), Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng)).unwrap();
    s.insert("image_encoder.enc.conv_in.w".to_string(), Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng)).unwrap();
    s.insert("cond.enc.conv_in.w".to_string(), Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng)).unwrap();
    s.insert(
        "task.edge.enc.conv_in.b".to_string(),
        Tensor::new(&[4], vec![f32::MIN_POSITIVE, -0.0, 1e-38, 3.5]).unwrap(),
    )
    .unwrap();
    s.insert("proj.1.w".to_string(), Tensor::zeros(&[4, 4, 1, 1])).unwrap();
    s
}

#[test]
fn round_trip_is_bit_exact_and_partitions_sum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    let mut ck = Checkpoint { manifest: manifest(Stage::MetaTrain), store: store(), optimizer: None };
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    for ((ka, a), (kb, b)) in ck.store.iter().zip(back.store.iter()) {
        assert_eq!(ka, kb);
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{ka}");
    }
    let m = back.manifest;
    assert_eq!(m.tasks, vec!["edge".to_string()]);
    assert_eq!(m.partitions.iter().map(|p| p.params).sum::<usize>(), m.total_params);
    let frozen: Vec<Partition> = m.partitions.iter().filter(|p| p.frozen).map(|p| p.partition).collect();
    assert_eq!(frozen, vec![Partition::BackbonePhi, Partition::ImageEncoder]);
    // Raw little-endian f32 files, one per tensor.
    let raw = std::fs::read(path.join("tensors/task.edge.enc.conv_in.b.bin")).unwrap();
    assert_eq!(raw.len(), 16);
    assert_eq!(&raw[12..], &3.5f32.to_le_bytes());
}

#[test]
fn optimizer_state_survives_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = BTreeMap::new();
    state.insert(
        "proj.1.w".to_string(),
        Moments { m: Tensor::full(&[4, 4, 1, 1], 0.25f32), v: Tensor::full(&[4, 4, 1, 1], 1e-9f32) },
    );
    let opt = AdamW::with_state(AdamWConfig { lr: 1e-3, weight_decay: 0.01, ..AdamWConfig::default() }, 7, state);
    let mut ck = Checkpoint { manifest: manifest(Stage::Pretrain), store: store(), optimizer: Some(opt) };
    ck.save(&dir.path().join("ck")).unwrap();
    let back = Checkpoint::<f32>::load(&dir.path().join("ck")).unwrap();
    let o = back.optimizer.unwrap();
    assert_eq!(o.step_count(), 7);
    assert_eq!(o.config.lr, 1e-3);
    assert_eq!(o.state()["proj.1.w"].v.data()[0], 1e-9);
}

#[test]
fn saving_over_an_existing_checkpoint_replaces_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    let mut ck = Checkpoint { manifest: manifest(Stage::Pretrain), store: store(), optimizer: None };
    ck.save(&path).unwrap();
    ck.store.remove("proj.1.w").unwrap();
    ck.save(&path).unwrap();
    assert!(!path.join("tensors/proj.1.w.bin").exists());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 1, "{leftovers:?}");
}

#[test]
fn truncated_tensor_and_bad_manifest_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    let mut ck = Checkpoint { manifest: manifest(Stage::Pretrain), store: store(), optimizer: None };
    ck.save(&path).unwrap();
    let f = path.join("tensors/proj.1.w.bin");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&path), Err(CoreError::Data(_))));

    ck.save(&path).unwrap();
    let mpath = path.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).unwrap();
    std::fs::write(&mpath, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&path), Err(CoreError::Data(_))));
    std::fs::write(&mpath, "{ not json").unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&path), Err(CoreError::Data(_))));
}

#[test]
fn f64_store_loads_from_f32_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = Checkpoint { manifest: manifest(Stage::Pretrain), store: store(), optimizer: None };
    ck.save(&dir.path().join("ck")).unwrap();
    let back = Checkpoint::<f64>::load(&dir.path().join("ck")).unwrap();
    let a = ck.store.get("cond.enc.conv_in.w").unwrap();
    let b = back.store.get("cond.enc.conv_in.w").unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x as f64 == *y));
}

use fsc_core::backbone::{BackboneConfig, UNet, NULL_DESCRIPTOR};
use fsc_core::encoders::{
    bias_sites, clone_encoders, encode_condition, encode_image, register_task, task_bias_ratio, to_tokens,
};
use fsc_core::params::{Binder, ParamStore, Partition, Scope};
use fsc_core::CoreError;
use fsc_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> BackboneConfig {
    BackboneConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        image_size: 8,
        time_embed_dim: 16,
        cond_embed_dim: 8,
        norm_groups: 4,
        attn_heads: 2,
        ..Default::default()
    }
}

fn prepared(cfg: BackboneConfig, seed: u64) -> (UNet, ParamStore<f32>) {
    let unet = UNet::new(cfg).unwrap();
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unet.init_params(&mut s, "backbone.", &mut rng).unwrap();
    // Stand-in for pretraining: move every tensor off its initial value.
    let names: Vec<String> = s.iter().map(|(k, _)| k.clone()).collect();
    for n in names {
        let t = s.get_mut(&n).unwrap();
        let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
        t.axpy(1.0, &noise).unwrap();
    }
    clone_encoders(&mut s, &unet, true).unwrap();
    (unet, s)
}

fn cond_taps(unet: &UNet, s: &ParamStore<f32>, y: &Tensor<f32>, task: &str) -> Vec<Tensor<f32>> {
    let frozen = |_: &str| false;
    let mut g = Graph::new();
    let mut b = Binder::new(s, &frozen);
    let yv = g.constant(y.clone());
    let taps = encode_condition(&mut g, &mut b, unet, yv, task).unwrap();
    taps.iter().map(|&v| g.value(v).clone()).collect()
}

fn image_taps(unet: &UNet, s: &ParamStore<f32>, x: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let frozen = |_: &str| false;
    let mut g = Graph::new();
    let mut b = Binder::new(s, &frozen);
    let xv = g.constant(x.clone());
    let taps = encode_image(&mut g, &mut b, unet, xv).unwrap();
    taps.iter().map(|&v| g.value(v).clone()).collect()
}

#[test]
fn image_encoder_is_a_copy_of_the_backbone_encoder() {
    let (unet, s) = prepared(small(), 1);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let frozen = |_: &str| false;
    let mut g = Graph::new();
    let mut b = Binder::new(&s, &frozen);
    let scope = Scope::new("backbone.");
    let xv = g.constant(x.clone());
    let emb = unet.embed(&mut g, &mut b, &scope, &[0, 0], &[NULL_DESCRIPTOR; 2]).unwrap();
    let reference: Vec<Tensor<f32>> =
        unet.encode(&mut g, &mut b, &scope, xv, emb).unwrap().iter().map(|&v| g.value(v).clone()).collect();
    assert_eq!(image_taps(&unet, &s, &x), reference);
    assert_eq!(s.count(Partition::ImageEncoder), unet.encoder_specs().iter().map(|p| p.numel()).sum::<usize>());
}

#[test]
fn condition_encoder_weights_are_independent_of_image_encoder() {
    let (unet, mut s) = prepared(small(), 3);
    register_task(&mut s, &unet, "edge").unwrap();
    let x = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let before = image_taps(&unet, &s, &x);
    let w = s.get_mut("cond.enc.conv_in.w").unwrap();
    *w = w.map(|v| v * 3.0);
    assert_eq!(image_taps(&unet, &s, &x), before);
}

#[test]
fn template_biases_reproduce_the_task_agnostic_encoder() {
    let (unet, mut s) = prepared(small(), 5);
    register_task(&mut s, &unet, "edge").unwrap();
    let y = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    assert_eq!(cond_taps(&unet, &s, &y, "edge"), image_taps(&unet, &s, &y));
}

#[test]
fn registration_uses_mean_of_existing_tasks() {
    let (unet, mut s) = prepared(small(), 7);
    register_task(&mut s, &unet, "edge").unwrap();
    for spec in bias_sites(&unet) {
        assert_eq!(
            s.get(&format!("task.edge.{}", spec.name)).unwrap(),
            s.get(&format!("backbone.{}", spec.name)).unwrap()
        );
    }
    register_task(&mut s, &unet, "seg").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in ["edge", "seg"] {
        for spec in bias_sites(&unet) {
            *s.get_mut(&format!("task.{id}.{}", spec.name)).unwrap() = Tensor::randn(&spec.shape, 1.0, &mut rng);
        }
    }
    register_task(&mut s, &unet, "blob").unwrap();
    for spec in bias_sites(&unet) {
        let a = s.get(&format!("task.edge.{}", spec.name)).unwrap().data();
        let b = s.get(&format!("task.seg.{}", spec.name)).unwrap().data();
        let m = s.get(&format!("task.blob.{}", spec.name)).unwrap().data();
        for i in 0..m.len() {
            assert!((m[i] - (a[i] + b[i]) / 2.0).abs() < 1e-6);
        }
    }
}

#[test]
fn task_biases_are_isolated() {
    let (unet, mut s) = prepared(small(), 9);
    register_task(&mut s, &unet, "edge").unwrap();
    register_task(&mut s, &unet, "seg").unwrap();
    let y = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
    assert_eq!(cond_taps(&unet, &s, &y, "edge"), cond_taps(&unet, &s, &y, "seg"));
    let seg_before = cond_taps(&unet, &s, &y, "seg");
    let edge_before = cond_taps(&unet, &s, &y, "edge");
    let b = s.get_mut("task.edge.enc.conv_in.b").unwrap();
    *b = b.map(|v| v + 0.5);
    assert_eq!(cond_taps(&unet, &s, &y, "seg"), seg_before);
    let edge_after = cond_taps(&unet, &s, &y, "edge");
    assert!(edge_after.iter().zip(&edge_before).any(|(a, b)| a != b));
}

#[test]
fn patch_counts_and_errors() {
    let unet = UNet::new(BackboneConfig::default()).unwrap();
    let mut s = ParamStore::<f32>::new();
    unet.init_params(&mut s, "backbone.", &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let warning = clone_encoders(&mut s, &unet, false).unwrap();
    assert!(warning.is_some());
    register_task(&mut s, &unet, "edge").unwrap();
    let frozen = |_: &str| false;
    let mut g = Graph::new();
    let mut b = Binder::new(&s, &frozen);
    let y = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
    let taps = encode_condition(&mut g, &mut b, &unet, y, "edge").unwrap();
    let m: Vec<usize> = taps
        .iter()
        .map(|&t| {
            let tok = to_tokens(&mut g, t).unwrap();
            g.shape(tok)[1]
        })
        .collect();
    assert_eq!(m, vec![1024, 256, 64, 64]);
    assert!(matches!(encode_condition(&mut g, &mut b, &unet, y, "seg"), Err(CoreError::UnregisteredTask(_))));
    let bad = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
    assert!(encode_condition(&mut g, &mut b, &unet, bad, "edge").is_err());
    drop(b);
    let ratio = task_bias_ratio(&s, "edge");
    assert!(ratio < 0.05, "ratio {ratio}");
    register_task(&mut s, &unet, "seg").unwrap();
    assert_eq!(task_bias_ratio(&s, "seg"), ratio);
}

#[test]
fn task_bias_ratio_is_under_cap_for_every_preset() {
    for name in fsc_core::config::PRESETS {
        let cfg = fsc_core::config::RunConfig::preset(name).unwrap().backbone;
        let (unet, mut s) = prepared(cfg, 40);
        register_task(&mut s, &unet, "edge").unwrap();
        let ratio = task_bias_ratio(&s, "edge");
        assert!(ratio > 0.0 && ratio < fsc_core::pipeline::TASK_RATIO_CAP, "{name}: {ratio}");
    }
}

use std::collections::HashSet;

use fsc_core::image::grayscale;
use fsc_core::tasks::{
    blob_map, edge_map, extract_condition, generate_scene, make_finetune_split, pool_seeds, recover_scene, render,
    sample_episode, sample_scene_spec, seg_labels, Background, PoolKind, ScenePool, SceneSpec, Shape, ShapeKind, Split,
    TaskConfig, TaskKind,
};
use fsc_core::CoreError;
use fsc_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn scenes_are_deterministic() {
    for seed in [0, 7, 123_456] {
        assert_eq!(generate_scene(seed, 32), generate_scene(seed, 32));
    }
    let (img, _) = generate_scene(3, 32);
    assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn shape_count_census() {
    let mut counts = [0usize; 5];
    for seed in 0..10_000 {
        counts[sample_scene_spec(seed).shapes.len()] += 1;
    }
    assert_eq!(counts[0], 0);
    for (k, &c) in counts.iter().enumerate().skip(1) {
        assert!(c as f64 / 10_000.0 >= 0.15, "{k} shapes in {c} scenes");
    }
}

#[test]
fn spec_invariants_hold() {
    for seed in 0..500 {
        let spec = sample_scene_spec(seed);
        let mut z: Vec<usize> = spec.shapes.iter().map(|s| s.z_order).collect();
        z.sort_unstable();
        assert_eq!(z, (0..spec.shapes.len()).collect::<Vec<_>>());
        for s in &spec.shapes {
            let [x0, y0, x1, y1] = s.bbox();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0, "seed {seed}: {s:?}");
        }
    }
}

#[test]
fn shapes_only_touch_pixels_inside_their_bounds() {
    let size = 32;
    for seed in 0..50 {
        let spec = sample_scene_spec(seed);
        let img = render(&spec, size);
        let bare = render(&SceneSpec { shapes: vec![], ..spec.clone() }, size);
        for i in 0..size {
            for j in 0..size {
                let p = i * size + j;
                let changed = (0..3).any(|c| img.data()[c * size * size + p] != bare.data()[c * size * size + p]);
                if changed {
                    let inside = spec.shapes.iter().any(|s| {
                        let [x0, y0, x1, y1] = s.bbox();
                        let (px0, py0) = (j as f64 / size as f64, i as f64 / size as f64);
                        let (px1, py1) = ((j + 1) as f64 / size as f64, (i + 1) as f64 / size as f64);
                        px1 >= x0 && px0 <= x1 && py1 >= y0 && py0 <= y1
                    });
                    assert!(inside, "seed {seed}: pixel ({i}, {j}) changed outside every shape");
                }
            }
        }
    }
}

#[test]
fn edge_family_definitions() {
    let blank = Tensor::full(&[3, 16, 16], 0.4f32);
    let spec =
        SceneSpec { seed: 0, background: Background { direction: 0, from: [0.4; 3], to: [0.4; 3] }, shapes: vec![] };
    assert!(extract_condition(&blank, &spec, TaskKind::Edge).unwrap().data().iter().all(|&v| v == 0.0));
    for seed in 0..20 {
        let (img, spec) = generate_scene(seed, 32);
        let e = extract_condition(&img, &spec, TaskKind::Edge).unwrap();
        let inv = extract_condition(&img, &spec, TaskKind::InvEdge).unwrap();
        let dil = extract_condition(&img, &spec, TaskKind::DilatedEdge).unwrap();
        for ((a, b), d) in e.data().iter().zip(inv.data()).zip(dil.data()) {
            assert_eq!(*b, 1.0 - a);
            assert!(d >= a);
        }
        assert!(e.data().contains(&1.0));
        for task in TaskKind::ALL {
            assert_eq!(extract_condition(&img, &spec, task).unwrap(), extract_condition(&img, &spec, task).unwrap());
        }
    }
}

#[test]
fn segmentation_area_matches_geometry() {
    let size = 512;
    for (kind, s) in
        [(ShapeKind::Circle, 0.12), (ShapeKind::Rect, 0.15), (ShapeKind::Triangle, 0.2), (ShapeKind::Circle, 0.08)]
    {
        let shape = Shape { kind, center: [0.41, 0.57], size: s, color: [1.0, 0.0, 0.0], z_order: 0 };
        let spec = SceneSpec {
            seed: 0,
            background: Background { direction: 1, from: [0.2; 3], to: [0.6; 3] },
            shapes: vec![shape.clone()],
        };
        let labels = seg_labels(&spec, size);
        let count = labels.iter().filter(|&&l| l as usize == 1 + kind.class()).count() as f64;
        let want = shape.area() * (size * size) as f64;
        assert!((count - want).abs() / want < 0.02, "{kind:?}: {count} vs {want}");
    }
}

#[test]
fn episodes_are_reproducible_and_balanced() {
    let pool = ScenePool::render(&pool_seeds(0, PoolKind::Train, 40), 16);
    let cfg = TaskConfig::default();
    let tasks = cfg.tasks(Split::MetaTrain);
    let ep = sample_episode(tasks, &pool, &mut ChaCha8Rng::seed_from_u64(1), 3, 4).unwrap();
    assert_eq!(ep.support.len(), 3);
    assert_eq!(ep.query.len(), 4);
    let seeds: HashSet<u64> = ep.support.pairs.iter().chain(&ep.query).map(|p| p.seed).collect();
    assert_eq!(seeds.len(), 7);
    assert_eq!(ep, sample_episode(tasks, &pool, &mut ChaCha8Rng::seed_from_u64(1), 3, 4).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut freq = std::collections::HashMap::new();
    for _ in 0..1000 {
        *freq.entry(sample_episode(tasks, &pool, &mut rng, 1, 0).unwrap().task).or_insert(0usize) += 1;
    }
    for t in tasks {
        let f = freq[t] as f64 / 1000.0;
        assert!((f - 1.0 / 3.0).abs() < 0.05, "{t:?} at {f}");
    }
    assert!(sample_episode(&[], &pool, &mut rng, 3, 4).is_err());
}

#[test]
fn splits_and_pools_are_disjoint() {
    let cfg = TaskConfig::default();
    cfg.validate().unwrap();
    let all: HashSet<TaskKind> = cfg.all().into_iter().collect();
    assert_eq!(all.len(), 6);
    assert!(cfg.meta_train.iter().all(|t| !cfg.novel.contains(t)));
    let bad = TaskConfig { novel: vec![TaskKind::Edge], ..Default::default() };
    assert!(bad.validate().is_err());
    let pools: Vec<HashSet<u64>> =
        PoolKind::ALL.iter().map(|&k| pool_seeds(5, k, 1000).into_iter().collect()).collect();
    assert!(pools[0].is_disjoint(&pools[1]) && pools[1].is_disjoint(&pools[2]) && pools[0].is_disjoint(&pools[2]));
    assert!(matches!(TaskKind::parse("pose"), Err(CoreError::UnknownTask(_))));
    assert_eq!(TaskKind::parse("inv_edge").unwrap(), TaskKind::InvEdge);
}

#[test]
fn finetune_split_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = make_finetune_split(30, &mut rng).unwrap();
    assert_eq!((s.pseudo_support.len(), s.pseudo_query.len()), (5, 24));
    let s = make_finetune_split(3, &mut rng).unwrap();
    assert_eq!((s.pseudo_support.len(), s.pseudo_query.len()), (1, 1));
    assert!(matches!(make_finetune_split(2, &mut rng), Err(CoreError::SupportTooSmall { got: 2, need: 3 })));
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 + (seed as usize % 40);
        let s = make_finetune_split(n, &mut rng).unwrap();
        let r = s.repartition(n, &mut rng);
        for split in [s, r] {
            let mut all: Vec<usize> = split.pseudo_support.iter().chain(&split.pseudo_query).copied().collect();
            all.push(split.validation);
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn scenes_can_be_recovered_from_pixels() {
    let mut hits = 0;
    let mut total = 0;
    for seed in 0..200 {
        let spec = sample_scene_spec(seed);
        if spec.shapes.len() != 1 {
            continue;
        }
        total += 1;
        let img = render(&spec, 32);
        let rec = recover_scene(&img).unwrap();
        assert_eq!(rec.shapes.len(), 1, "seed {seed}");
        let (a, b) = (&spec.shapes[0], &rec.shapes[0]);
        assert!((a.center[0] - b.center[0]).abs() < 0.03 && (a.center[1] - b.center[1]).abs() < 0.03, "seed {seed}");
        hits += usize::from(a.kind == b.kind);
        let blob_err: f32 =
            blob_map(&spec, 32).iter().zip(blob_map(&rec, 32)).map(|(x, y)| (x - y).powi(2)).sum::<f32>() / 1024.0;
        assert!(blob_err < 0.01, "seed {seed}: {blob_err}");
    }
    assert!(total >= 30);
    assert!(hits as f64 / total as f64 > 0.8, "{hits}/{total} classes recovered");
    let edges = edge_map(&grayscale(&render(&sample_scene_spec(1), 32)), 32, 32);
    assert!(edges.contains(&1.0));
}

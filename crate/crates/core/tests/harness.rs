use std::collections::HashMap;

use dsat::harness::ablation::Variant;
use dsat::harness::augment::{augment, flip, out_of_frame_fraction, rotate, MAX_OUT_OF_FRAME};
use dsat::harness::checkpoint;
use dsat::harness::config::TrainConfig;
use dsat::harness::dataset::{read_dataset, write_dataset};
use dsat::harness::diagnostics::grad_check_config;
use dsat::harness::evaluate::{evaluate, predict, record_from_heatmaps, summarize};
use dsat::harness::model::build_model;
use dsat::harness::synth::{branch_params, generate_sample, generate_set, Difficulty, Mix};
use dsat::harness::train::{heatmap_points, train};
use dsat::landmarks::face;
use dsat::layers::{Forward, Mode};
use dsat::numerics::{ParamStore, Tensor};
use dsat::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> TrainConfig {
    TrainConfig {
        iterations: 3,
        train_samples: 4,
        heldout_samples: 4,
        ..grad_check_config()
    }
}

fn values(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .map(|p| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

#[test]
fn config_text_round_trip_and_hash() {
    let cfg = TrainConfig {
        dsa_placement: vec![1],
        cca_head_dim: Some(8),
        data_dir: Some("faces".into()),
        ..TrainConfig::default()
    };
    let back = TrainConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let mut other = cfg.clone();
    other.set("seed", "5").unwrap();
    assert_ne!(other.hash(), cfg.hash());
}

#[test]
fn default_schedule_halves_after_two_hundred_iterations() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.learning_rate(0), 2.5e-4);
    assert_eq!(cfg.learning_rate(199), 2.5e-4);
    assert_eq!(cfg.learning_rate(200), 1.25e-4);
    assert_eq!(cfg.learning_rate(400), 6.25e-5);
}

#[test]
fn generated_sets_are_deterministic_and_seed_dependent() {
    let a = generate_set(3, 10, &Mix::default(), 32).unwrap();
    let b = generate_set(3, 10, &Mix::default(), 32).unwrap();
    let c = generate_set(4, 10, &Mix::default(), 32).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].image, c[0].image);
    assert!(a.iter().enumerate().all(|(i, s)| s.id == i as u64));
}

#[test]
fn label_mix_is_proportioned_exactly() {
    let set = generate_set(1, 100, &Mix::default(), 16).unwrap();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &set {
        *counts.entry(s.label.name()).or_default() += 1;
    }
    assert_eq!(counts["neutral"], 40);
    assert_eq!(counts["occluded"], 20);
    assert_eq!(counts["rotated"], 20);
    assert_eq!(counts["blurred"], 20);
}

#[test]
fn rotated_landmarks_follow_the_rotation_matrix() {
    let seed = 11;
    let size = 64;
    let neutral = generate_sample(seed, Difficulty::Neutral, size).unwrap();
    let rotated = generate_sample(seed, Difficulty::Rotated, size).unwrap();
    let angle = branch_params(seed, size).angle;
    let c = 31.5;
    for (p, q) in neutral
        .landmarks
        .points
        .iter()
        .zip(&rotated.landmarks.points)
    {
        let (dx, dy) = (p.x - c, p.y - c);
        let x = c + angle.cos() * dx - angle.sin() * dy;
        let y = c + angle.sin() * dx + angle.cos() * dy;
        assert!((q.x - x).abs() < 1e-12 && (q.y - y).abs() < 1e-12);
    }
    assert!((rotated.landmarks.norm_distance - neutral.landmarks.norm_distance).abs() < 1e-9);
}

#[test]
fn occlusion_changes_only_the_occluder_rectangle() {
    let (seed, size) = (5, 32);
    let neutral = generate_sample(seed, Difficulty::Neutral, size).unwrap();
    let occluded = generate_sample(seed, Difficulty::Occluded, size).unwrap();
    let bp = branch_params(seed, size);
    let (x0, y0, w, h) = bp.occluder;
    for y in 0..size {
        for x in 0..size {
            let inside = (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y);
            let v = occluded.image.at(&[0, y, x]);
            if inside {
                assert_eq!(v, bp.occluder_tone);
            } else {
                assert_eq!(v, neutral.image.at(&[0, y, x]));
            }
        }
    }
    assert_eq!(occluded.landmarks, neutral.landmarks);
}

#[test]
fn blurred_images_are_smoother() {
    let tv = |t: &Tensor| -> f64 {
        let s = t.shape()[1];
        (0..s)
            .flat_map(|y| (1..s).map(move |x| (y, x)))
            .map(|(y, x)| (t.at(&[0, y, x]) - t.at(&[0, y, x - 1])).abs())
            .sum()
    };
    let neutral = generate_sample(9, Difficulty::Neutral, 64).unwrap();
    let blurred = generate_sample(9, Difficulty::Blurred, 64).unwrap();
    assert!(tv(&blurred.image) < 0.5 * tv(&neutral.image));
}

#[test]
fn flip_is_an_involution_and_mirrors_landmarks() {
    let s = generate_sample(2, Difficulty::Neutral, 32).unwrap();
    let f = flip(&s);
    for (i, p) in f.landmarks.points.iter().enumerate() {
        let src = s.landmarks.points[face::FLIP[i]];
        assert_eq!(p.x, 31.0 - src.x);
        assert_eq!(p.y, src.y);
    }
    assert_eq!(f.image.at(&[0, 4, 0]), s.image.at(&[0, 4, 31]));
    let ff = flip(&f);
    assert_eq!(ff.image, s.image);
    for (p, q) in ff.landmarks.points.iter().zip(&s.landmarks.points) {
        assert!((p.x - q.x).abs() < 1e-12 && p.y == q.y);
    }
}

#[test]
fn zero_rotation_is_the_identity() {
    let s = generate_sample(8, Difficulty::Blurred, 32).unwrap();
    assert_eq!(rotate(&s, 0.0), s);
}

#[test]
fn augmentation_keeps_most_landmarks_in_frame() {
    let s = generate_sample(4, Difficulty::Neutral, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let a = augment(&s, &mut rng);
        assert!(out_of_frame_fraction(&a.landmarks.points, 32) <= MAX_OUT_OF_FRAME);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn variants_register_exactly_their_components() {
    let base = TrainConfig {
        stacks: 2,
        dsa_placement: vec![0, 1],
        ..tiny()
    };
    for v in Variant::ALL {
        let cfg = v.apply(&base);
        let (mut store, model) = build_model(&cfg).unwrap();
        let has_cca = store.iter().any(|p| p.name.contains(".cca."));
        assert_eq!(has_cca, cfg.enable_cca, "{}", v.name());
        let gates = model.stacks.iter().filter(|s| s.gate.is_some()).count();
        assert_eq!(gates, if cfg.enable_dsa { 2 } else { 0 }, "{}", v.name());

        let sample = generate_sample(1, Difficulty::Neutral, cfg.image_size).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = Forward::new(&mut store, Mode::eval(), &mut rng);
        let x = f.input(sample.image.reshape(&[1, 1, 16, 16]).unwrap());
        let preds = model.forward(&mut f, x).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(f.gates.len(), gates);
        assert_eq!(f.tape.shape(preds[1].landmark), &[1, 12, 16, 16]);
        assert_eq!(f.tape.shape(preds[1].boundary), &[1, 3, 16, 16]);
    }
    assert_eq!("shn+dss".parse::<Variant>().unwrap(), Variant::ShnDss);
    assert!("shn+cca".parse::<Variant>().is_err());
}

#[test]
fn the_shn_variant_has_fewest_parameters() {
    let base = tiny();
    let count = |v: Variant| build_model(&v.apply(&base)).unwrap().0.trainable_scalars();
    assert_eq!(count(Variant::Shn), count(Variant::ShnDsa));
    assert!(count(Variant::Shn) < count(Variant::ShnDss));
    assert_eq!(count(Variant::ShnDss), count(Variant::Dsat));
    assert_eq!(count(Variant::Dsat), count(Variant::Dsat));
}

#[test]
fn zero_iterations_leave_the_initialization() {
    let cfg = TrainConfig {
        iterations: 0,
        ..tiny()
    };
    let samples = generate_set(0, 2, &Mix::default(), 16).unwrap();
    let (mut store, model) = build_model(&cfg).unwrap();
    let init = values(&store);
    let out = train(&cfg, &model, &mut store, &samples, |_, _| {}).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(values(&store), init);
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = TrainConfig {
        augment: true,
        dropout: 0.1,
        ..tiny()
    };
    let samples = generate_set(0, 3, &Mix::default(), 16).unwrap();
    let run = || {
        let (mut store, model) = build_model(&cfg).unwrap();
        let out = train(&cfg, &model, &mut store, &samples, |_, _| {}).unwrap();
        (out.losses, values(&store))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 3);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(pa, pb);
}

#[test]
fn divergence_reports_the_iteration_and_restores_the_last_good_state() {
    let cfg = TrainConfig {
        lr: 1e200,
        iterations: 5,
        ..tiny()
    };
    let samples = generate_set(0, 2, &Mix::default(), 16).unwrap();
    let (mut store, model) = build_model(&cfg).unwrap();
    let mut seen = Vec::new();
    let before = values(&store);
    let err = train(&cfg, &model, &mut store, &samples, |it, _| seen.push(it)).unwrap_err();
    match err {
        Error::Diverged { iteration, loss } => {
            assert_eq!(iteration, seen.len());
            assert!(!loss.is_finite());
            assert!(iteration >= 1);
            if iteration == 1 {
                assert_eq!(values(&store), before);
            }
        }
        e => panic!("unexpected error {e}"),
    }
    assert!(store
        .iter()
        .all(|p| p.value.data().iter().all(|v| v.is_finite())));
}

#[test]
fn checkpoints_round_trip_through_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let cfg = tiny();
    let samples = generate_set(0, 2, &Mix::default(), 16).unwrap();
    let (mut store, model) = build_model(&cfg).unwrap();
    train(&cfg, &model, &mut store, &samples, |_, _| {}).unwrap();
    checkpoint::save(&path, &cfg, &store).unwrap();
    let (cfg2, loaded, _) = checkpoint::load(&path).unwrap();
    assert_eq!(cfg2, cfg);
    for (a, b) in store.iter().zip(loaded.iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
    let first = std::fs::read(dir.path().join("model.bin")).unwrap();
    let again = dir.path().join("again.json");
    checkpoint::save(&again, &cfg2, &loaded).unwrap();
    assert_eq!(std::fs::read(dir.path().join("again.bin")).unwrap(), first);
}

#[test]
fn loading_into_a_different_model_names_the_first_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let cfg = tiny();
    let (store, _) = build_model(&cfg).unwrap();
    checkpoint::save(&path, &cfg, &store).unwrap();
    let (mut other, _) = build_model(&TrainConfig {
        enable_cca: false,
        ..cfg
    })
    .unwrap();
    match checkpoint::load_into(&path, &mut other).unwrap_err() {
        Error::Manifest { name, .. } => assert!(name.starts_with("stack0.dss."), "{name}"),
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_set(6, 5, &Mix::default(), 16).unwrap();
    write_dataset(dir.path(), &set).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in set.iter().zip(&back) {
        assert_eq!((a.id, a.seed, a.label), (b.id, b.seed, b.label));
        assert_eq!(a.landmarks, b.landmarks);
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
}

#[test]
fn evaluation_is_deterministic_and_aggregates_by_mean() {
    let cfg = tiny();
    let set = generate_set(2, 8, &Mix::default(), 16).unwrap();
    let (mut store, model) = build_model(&cfg).unwrap();
    let a = evaluate(&cfg, &model, &mut store, &set).unwrap();
    let b = evaluate(&cfg, &model, &mut store, &set).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let mean = a.records.iter().map(|r| r.nme_percent).sum::<f64>() / 8.0;
    assert!((a.overall.nme - mean).abs() < 1e-12);
    let counted: usize = a.clusters.iter().map(|c| c.count).sum();
    assert_eq!(counted, 8);
    let neutral = a.cluster("neutral").unwrap();
    let members: Vec<f64> = a
        .records
        .iter()
        .filter(|r| r.label == "neutral")
        .map(|r| r.nme_percent)
        .collect();
    assert_eq!(neutral.count, members.len());
    assert!((neutral.nme - members.iter().sum::<f64>() / members.len() as f64).abs() < 1e-12);
    let csv = a.gates_csv(cfg.channels);
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(csv.starts_with("sample_id,dsa_index,ratio,channels\n"));
}

#[test]
fn prediction_reports_binary_gate_ratios() {
    let cfg = tiny();
    let set = generate_set(3, 4, &Mix::default(), 16).unwrap();
    let (mut store, model) = build_model(&cfg).unwrap();
    for s in &set {
        let (maps, ratios) = predict(&model, &mut store, s).unwrap();
        assert_eq!(maps.shape(), &[12, 16, 16]);
        assert_eq!(ratios.len(), 1);
        let r = ratios[0].1;
        assert!((0.0..=1.0).contains(&r));
        assert_eq!((r * 4.0).fract(), 0.0);
    }
}

#[test]
fn peaks_at_the_ground_truth_pixels_score_within_rounding() {
    let cfg = tiny();
    let set = generate_set(4, 6, &Mix::default(), 16).unwrap();
    let records = set
        .iter()
        .map(|s| {
            let pts = heatmap_points(s, &cfg);
            let mut maps = Tensor::zeros(&[12, 16, 16]);
            for (l, p) in pts.iter().enumerate() {
                let x = p.x.round().clamp(0.0, 15.0) as usize;
                let y = p.y.round().clamp(0.0, 15.0) as usize;
                maps.set(&[l, y, x], 1.0);
            }
            let rec = record_from_heatmaps(s, &cfg, &maps, vec![]).unwrap();
            let expected: f64 = pts
                .iter()
                .map(|p| {
                    let dx = p.x.round().clamp(0.0, 15.0) - p.x;
                    let dy = p.y.round().clamp(0.0, 15.0) - p.y;
                    (dx * dx + dy * dy).sqrt()
                })
                .sum::<f64>()
                / 12.0;
            let d = pts[face::NORM_PAIRS.ocular.0].distance(pts[face::NORM_PAIRS.ocular.1]);
            assert!((rec.nme_percent - 100.0 * expected / d).abs() < 1e-9);
            rec
        })
        .collect();
    let report = summarize("h", records).unwrap();
    assert!(report.overall.nme < 10.0);
    assert_eq!(report.overall.failure_rate, 0.0);
}

#[test]
fn peaks_at_integer_landmarks_score_exactly_zero() {
    let cfg = tiny();
    let set = generate_set(5, 4, &Mix::default(), 16).unwrap();
    let records = set
        .into_iter()
        .map(|mut s| {
            for p in &mut s.landmarks.points {
                p.x = p.x.round().clamp(0.0, 15.0);
                p.y = p.y.round().clamp(0.0, 15.0);
            }
            let mut maps = Tensor::zeros(&[12, 16, 16]);
            for (l, p) in heatmap_points(&s, &cfg).iter().enumerate() {
                maps.set(&[l, p.y as usize, p.x as usize], 1.0);
            }
            let rec = record_from_heatmaps(&s, &cfg, &maps, vec![]).unwrap();
            assert_eq!(rec.nme_percent, 0.0);
            rec
        })
        .collect();
    let report = summarize("h", records).unwrap();
    assert_eq!(report.overall.nme, 0.0);
    assert_eq!(report.overall.failure_rate, 0.0);
}

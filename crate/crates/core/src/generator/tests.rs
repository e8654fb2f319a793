use super::*;
use crate::body::Skeleton;
use crate::features::synth::{synth_scenario, Pattern, SynthSpec};
use crate::numerics::{grad_check, DifferentiableFunction, DEFAULT_FD_STEP};
use proptest::prelude::*;

fn tiny_config(d_in: usize) -> GeneratorConfig {
    GeneratorConfig {
        d_in,
        d_model: 8,
        music_layers: 1,
        music_heads: 2,
        ff_dim: 8,
        group_layers: 2,
        heads: 2,
        d_k: 3,
        mlp_hidden: 6,
        mlp_layers: 2,
        window: 3,
    }
}

fn sample(pattern: Pattern, dancers: usize, frames: usize) -> TrainSample {
    let s = Skeleton::default();
    let sc = synth_scenario(
        &SynthSpec {
            pattern,
            dancers,
            frames,
            noise_px: 0.0,
            seed: 3,
        },
        &s,
    )
    .unwrap();
    TrainSample {
        features: sc.features,
        group: sc.motions,
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_taus(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-0.2..0.2), rng.random_range(4.0..8.0)])
        .collect()
}

fn params(cfg: &GeneratorConfig, seed: u64) -> ModelParams {
    ModelParams::init(cfg, seed).unwrap()
}

#[test]
fn config_validation() {
    assert!(GeneratorConfig::full_scale(28).validate("g").is_ok());
    assert!(GeneratorConfig::test_profile(28).validate("g").is_ok());
    let mut c = GeneratorConfig::test_profile(28);
    c.d_k = 20;
    match c.validate("g") {
        Err(Error::Config { path, .. }) => assert_eq!(path, "g.heads"),
        other => panic!("{other:?}"),
    }
    c.d_k = 8;
    c.group_layers = 0;
    match c.validate("g") {
        Err(Error::Config { path, .. }) => assert_eq!(path, "g.group_layers"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn single_frame_attention_is_one() {
    let cfg = tiny_config(5);
    let p = params(&cfg, 1);
    let (a, attn) = encode_music_with_attention(&random_matrix(1, 5, 2), &p).unwrap();
    assert_eq!(a.shape(), [1, 8]);
    for w in attn {
        assert_eq!(w.data(), [1.0]);
    }
}

#[test]
fn music_attention_rows_sum_to_one_and_is_deterministic() {
    let cfg = tiny_config(5);
    let p = params(&cfg, 1);
    let x = random_matrix(11, 5, 3);
    let (a, attn) = encode_music_with_attention(&x, &p).unwrap();
    assert_eq!(attn.len(), cfg.music_layers * cfg.music_heads);
    for w in &attn {
        for r in 0..w.rows() {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let b = encode_music(&x, &p).unwrap();
    assert_eq!(a, b);
    assert!(encode_music(&random_matrix(4, 6, 3), &p).is_err());
}

#[test]
fn initial_pose_depends_on_audio_mean_only() {
    let cfg = tiny_config(4);
    let p = params(&cfg, 5);
    let audio = random_matrix(9, cfg.d_model, 6);
    let mut rows = audio.to_rows();
    rows.reverse();
    rows.swap(0, 4);
    let shuffled = Tensor::from_rows(&rows).unwrap();
    let tau = [0.3, 0.0, 5.0];
    let a = initial_pose(&audio, tau, &p).unwrap();
    let b = initial_pose(&shuffled, tau, &p).unwrap();
    assert_eq!(a.len(), POSE_DIM);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    let c = initial_pose(&audio, [-1.0, 0.0, 6.0], &p).unwrap();
    assert_ne!(a, c);
}

#[test]
fn spatial_encoding_examples() {
    assert_eq!(spatial_encoding([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), 1.0);
    // squared distance √3
    let d = 3f64.sqrt().sqrt();
    let v = spatial_encoding([0.0; 3], [d, 0.0, 0.0]);
    assert!((v - (-1f64).exp()).abs() < 1e-15);
    assert!((v - 0.367879).abs() < 1e-6);
}

proptest! {
    #[test]
    fn spatial_encoding_bounds_and_symmetry(a in proptest::collection::vec(-5.0f64..5.0, 3), b in proptest::collection::vec(-5.0f64..5.0, 3), s in 1.01f64..3.0) {
        let (a, b) = ([a[0], a[1], a[2]], [b[0], b[1], b[2]]);
        let e = spatial_encoding(a, b);
        prop_assert!(e > 0.0 || a != b);
        prop_assert!(e <= 1.0);
        prop_assert!((e - spatial_encoding(b, a)).abs() < 1e-15);
        prop_assert_eq!(spatial_encoding(a, a), 1.0);
        // pushing b further away along the same ray strictly lowers e
        let far = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2])];
        if a != b && e > 1e-300 {
            prop_assert!(spatial_encoding(a, far) < e);
        }
    }
}

#[test]
fn single_dancer_attention_is_value_plus_gamma() {
    let cfg = tiny_config(4);
    let p = params(&cfg, 7);
    let h = random_matrix(1, cfg.d_model, 8);
    let out = cross_entity_attention(&h, &[[0.1, 0.2, 5.0]], &p, 1).unwrap();
    for head in 0..cfg.heads {
        assert_eq!(out.weights[head].data(), [1.0]);
        let gamma = p.get(&format!("group.1.h{head}.gamma"));
        let expect: Vec<f64> = out.values[head].data().iter().zip(gamma.data()).map(|(v, g)| v + g).collect();
        assert_eq!(out.head_outputs[head].data(), expect.as_slice());
    }
}

#[test]
fn far_dancer_gets_lower_logits() {
    let cfg = tiny_config(4);
    let p = params(&cfg, 9);
    let row = random_matrix(1, cfg.d_model, 10).into_data();
    let h = Tensor::matrix(3, cfg.d_model, row.repeat(3));
    let taus = [[0.0, 0.0, 5.0], [0.5, 0.0, 5.0], [4.0, 0.0, 7.0]];
    let out = cross_entity_attention(&h, &taus, &p, 0).unwrap();
    for head in 0..cfg.heads {
        let l = &out.logits[head];
        for i in 0..2 {
            let near = 1 - i;
            assert!(l.at(i, 2) < l.at(i, near), "head {head} row {i}");
        }
        for r in 0..3 {
            assert!((out.weights[head].row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
}

fn assert_rows_permuted(a: &Tensor, b: &Tensor, perm: &[usize], tol: f64) {
    for (k, &i) in perm.iter().enumerate() {
        for (x, y) in a.row(i).iter().zip(b.row(k)) {
            assert!((x - y).abs() <= tol, "row {i}: {x} vs {y}");
        }
    }
}

#[test]
fn cross_attention_is_permutation_equivariant() {
    let cfg = tiny_config(4);
    let p = params(&cfg, 11);
    for n in 1..=7 {
        let h = random_matrix(n, cfg.d_model, 12 + n as u64);
        let taus = random_taus(n, 40 + n as u64);
        let perm: Vec<usize> = (0..n).rev().collect();
        let a = cross_entity_attention(&h, &taus, &p, 0).unwrap();
        let ptaus: Vec<[f64; 3]> = perm.iter().map(|&i| taus[i]).collect();
        let b = cross_entity_attention(&permute_rows(&h, &perm), &ptaus, &p, 0).unwrap();
        assert_rows_permuted(&a.output, &b.output, &perm, 1e-12);
    }
}

fn random_state(cfg: &GeneratorConfig, n: usize, seed: u64) -> GroupState {
    let mut poses = random_matrix(n, POSE_DIM, seed);
    let taus = random_taus(n, seed + 1);
    for (i, t) in taus.iter().enumerate() {
        poses.data_mut()[i * POSE_DIM..i * POSE_DIM + 3].copy_from_slice(t);
    }
    let mut s = GroupState::new(poses, cfg).unwrap();
    for (l, (h, c)) in s.layers.iter_mut().enumerate() {
        *h = random_matrix(n, cfg.d_model, seed + 10 + l as u64).map(|v| 0.5 * v);
        *c = random_matrix(n, cfg.d_model, seed + 20 + l as u64);
    }
    s
}

fn permute_state(s: &GroupState, perm: &[usize]) -> GroupState {
    GroupState {
        layers: s
            .layers
            .iter()
            .map(|(h, c)| (permute_rows(h, perm), permute_rows(c, perm)))
            .collect(),
        poses: permute_rows(&s.poses, perm),
    }
}

#[test]
fn group_step_single_dancer_and_duplicates() {
    let cfg = tiny_config(4);
    let p = params(&cfg, 13);
    let a = random_matrix(1, cfg.d_model, 14).into_data();
    let s1 = random_state(&cfg, 1, 15);
    let (y, next) = group_step(&s1, &a, &p).unwrap();
    assert_eq!(y.shape(), [1, POSE_DIM]);
    assert!(y.is_finite());
    assert_eq!(next.taus()[0], [y.at(0, 0), y.at(0, 1), y.at(0, 2)]);

    let dup = permute_state(&s1, &[0, 0]);
    let (y2, _) = group_step(&dup, &a, &p).unwrap();
    for (u, v) in y2.row(0).iter().zip(y2.row(1)) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn group_step_is_permutation_equivariant() {
    let cfg = tiny_config(4);
    let p = params(&cfg, 16);
    let a = random_matrix(1, cfg.d_model, 17).into_data();
    for n in 2..=7 {
        let s = random_state(&cfg, n, 30 + n as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1);
        perm.swap(0, n - 1);
        let (y, next) = group_step(&s, &a, &p).unwrap();
        let (yp, nextp) = group_step(&permute_state(&s, &perm), &a, &p).unwrap();
        assert_rows_permuted(&y, &yp, &perm, 1e-12);
        for ((h, c), (hp, cp)) in next.layers.iter().zip(&nextp.layers) {
            assert_rows_permuted(h, hp, &perm, 1e-12);
            assert_rows_permuted(c, cp, &perm, 1e-12);
        }
    }
}

#[test]
fn generator_gradient_check() {
    let cfg = tiny_config(crate::features::default_layout().iter().map(|l| l.1).sum());
    let s = sample(Pattern::Crossing, 2, 8);
    let mut p = params(&cfg, 21);
    let (mean, std) = train::pose_statistics(std::slice::from_ref(&s)).unwrap();
    p.set_normalization(&mean, &std).unwrap();
    // perturb so biases and gamma are non-trivial
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x: Vec<f64> = p.flat().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    p.set_flat(&x).unwrap();
    for teacher in [vec![true, true, true], vec![true, false, true]] {
        let f = GeneratorLoss::new(p.clone(), &s, 2, 3, teacher).unwrap();
        let r = grad_check(&f, &f.initial(), DEFAULT_FD_STEP).unwrap();
        let names = f.layout();
        let worst = names.iter().find(|(_, rg)| rg.contains(&r.worst_index)).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?} in {}", worst.0);
        let g = f.gradient(&f.initial()).unwrap();
        for key in ["group.0.h0.wq", "group.1.h1.gamma", "group.0.lstm.wh", "music.0.h0.wk", "init.out.b"] {
            let rg = &names.iter().find(|(k, _)| k == key).unwrap().1;
            let m = g[rg.clone()].iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(m > 1e-10, "{key} has no gradient ({m})");
        }
    }
}

fn quick_train(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 2,
        steps,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn first_trace_entry_matches_direct_forward() {
    let s = sample(Pattern::Wave, 2, 10);
    let mut cfg = tiny_config(s.features.dim());
    cfg.window = 10;
    let t = TrainConfig {
        batch_size: 1,
        ..quick_train(1, 4)
    };
    let out = train(std::slice::from_ref(&s), &t, &cfg).unwrap();
    let mut p = ModelParams::init(&cfg, 4).unwrap();
    let (mean, std) = train::pose_statistics(std::slice::from_ref(&s)).unwrap();
    p.set_normalization(&mean, &std).unwrap();
    let w = train::Window::cut(&s, 0, 10).unwrap();
    let (direct, _) = train::window_loss(&p, &w, &[true; 10], false);
    assert_eq!(out.trace[0].loss, direct);
    assert_eq!(out.trace[0].teacher_forcing, 1.0);
}

#[test]
fn training_is_deterministic_and_learns() {
    let s = sample(Pattern::Wave, 2, 12);
    let mut cfg = tiny_config(s.features.dim());
    cfg.window = 8;
    let t = quick_train(150, 5);
    let a = train(std::slice::from_ref(&s), &t, &cfg).unwrap();
    let b = train(std::slice::from_ref(&s), &t, &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.params, b.params);
    let first = a.trace[0].loss;
    let last = a.trace.last().unwrap().loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn full_teacher_forcing_schedule_matches_pure_teacher_forcing() {
    let s = sample(Pattern::Wave, 2, 12);
    let mut cfg = tiny_config(s.features.dim());
    cfg.window = 6;
    let scheduled = TrainConfig {
        tf_start: 1.0,
        tf_end: 1.0,
        ..quick_train(10, 6)
    };
    let pure = TrainConfig {
        tf_decay_fraction: 0.0,
        tf_end: 1.0,
        ..scheduled.clone()
    };
    let a = train(std::slice::from_ref(&s), &scheduled, &cfg).unwrap();
    let b = train(std::slice::from_ref(&s), &pure, &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
}

#[test]
fn schedule_decays_linearly_then_holds() {
    let t = TrainConfig {
        steps: 100,
        ..TrainConfig::default()
    };
    assert_eq!(teacher_forcing_probability(0, &t), 1.0);
    assert!((teacher_forcing_probability(25, &t) - 0.55).abs() < 1e-12);
    assert!((teacher_forcing_probability(50, &t) - 0.1).abs() < 1e-12);
    assert!((teacher_forcing_probability(99, &t) - 0.1).abs() < 1e-12);
}

#[test]
fn divergent_training_reports_the_step() {
    let s = sample(Pattern::Wave, 2, 8);
    let mut cfg = tiny_config(s.features.dim());
    cfg.window = 4;
    let t = TrainConfig {
        lr: 1e300,
        ..quick_train(5, 7)
    };
    match train(std::slice::from_ref(&s), &t, &cfg) {
        Err(Error::TrainingFailed { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("{other:?}"),
    }
    let short = TrainConfig { ..quick_train(1, 7) };
    cfg.window = 9;
    assert!(train(std::slice::from_ref(&s), &short, &cfg).is_err());
}

#[test]
fn generation_symmetry_and_group_sizes() {
    let s = sample(Pattern::Static, 1, 6);
    let cfg = tiny_config(s.features.dim());
    let p = params(&cfg, 8);
    let same = generate(&s.features, &[[0.0, 0.0, 6.0], [0.0, 0.0, 6.0]], &p).unwrap();
    assert_eq!(same.len(), 2);
    assert_eq!(same[0].len(), 6);
    assert_eq!(same[0], same[1]);

    let taus = random_taus(7, 50);
    let out = generate(&s.features, &taus, &p).unwrap();
    assert_eq!(out.len(), 7);
    let perm = [3, 6, 0, 1, 5, 2, 4];
    let ptaus: Vec<[f64; 3]> = perm.iter().map(|&i| taus[i]).collect();
    let pout = generate(&s.features, &ptaus, &p).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in out[i].poses.iter().zip(&pout[k].poses) {
            for (x, y) in a.theta.iter().chain(&a.tau).zip(b.theta.iter().chain(&b.tau)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
    assert_eq!(generate(&s.features, &taus, &p).unwrap(), out);
}

#[test]
fn checkpoint_round_trip_and_shape_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(4);
    let p = params(&cfg, 9);
    let path = dir.path().join("m.gmm");
    p.save(&path).unwrap();
    assert_eq!(ModelParams::load(&path).unwrap(), p);

    let mut bad = p.clone();
    bad.tensors.insert("dec.out.b".into(), Tensor::zeros(&[1, 3]));
    bad.save(&path).unwrap();
    let err = ModelParams::load(&path).unwrap_err().to_string();
    assert!(err.contains("dec.out.b"), "{err}");
}

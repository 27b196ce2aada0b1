use ndarray::{Array2, Array4};
use num_rational::Ratio;
use petsynth::dataprep::{rng_from_seed, SlicePair};
use petsynth::nn::{forward, NetworkKind};
use petsynth::train::{
    fit_cgan, fit_fcn, generator_objective, load_checkpoint, save_checkpoint, split_suv_loss, synthesize,
    train_cgan, train_fcn, weighted_l2_loss, TrainConfig, TrainState,
};
use petsynth::train::loss::{generator_objective_grad, split_suv_grad, weighted_l2_grad};
use petsynth::{Error, Grid, Modality, Volume3D};
use proptest::prelude::*;
use rand::Rng;

const TH: f64 = 0.125;

fn batch(seed: u64) -> (Array4<f64>, Array4<f64>) {
    let mut rng = rng_from_seed(seed);
    let p = Array4::from_shape_fn((2, 8, 8, 1), |_| rng.gen_range(0.0..1.0));
    let t = Array4::from_shape_fn((2, 8, 8, 1), |_| rng.gen_range(0.0..0.4));
    (p, t)
}

fn check_grad(f: impl Fn(&Array4<f64>) -> f64, grad: &Array4<f64>, p: &Array4<f64>) {
    let h = 1e-3;
    for (idx, &g) in grad.indexed_iter() {
        let mut up = p.clone();
        up[idx] += h;
        let mut dn = p.clone();
        dn[idx] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
        assert!(rel < 1e-4 || (fd - g).abs() < 1e-12, "{idx:?}: fd {fd} vs analytic {g}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_gradients_match_finite_differences(seed in 0u64..10_000) {
        let (p, t) = batch(seed);
        check_grad(|x| weighted_l2_loss(x, &t).unwrap(), &weighted_l2_grad(&p, &t).unwrap(), &p);
        check_grad(|x| split_suv_loss(x, &t, TH).unwrap(), &split_suv_grad(&p, &t, TH).unwrap(), &p);
        let d_fake = ndarray::array![[0.3, 0.7], [0.9, 0.1]];
        check_grad(
            |x| generator_objective(x, &t, &d_fake, 20.0, TH).unwrap(),
            &generator_objective_grad(&p, &t, 20.0, TH).unwrap(),
            &p,
        );
    }

    #[test]
    fn split_loss_matches_voxel_loop(seed in 0u64..10_000) {
        let (p, t) = batch(seed);
        let (mut lo, mut nlo, mut hi, mut nhi) = (0.0, 0.0, 0.0, 0.0);
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            let e = tv * (pv - tv) * (pv - tv);
            if tv > TH { hi += e; nhi += 1.0 } else { lo += e; nlo += 1.0 }
        }
        let oracle = if nlo > 0.0 { lo / nlo } else { 0.0 } + if nhi > 0.0 { hi / nhi } else { 0.0 };
        prop_assert!((split_suv_loss(&p, &t, TH).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn losses_non_negative_and_zero_at_target(seed in 0u64..10_000) {
        let (p, t) = batch(seed);
        prop_assert!(weighted_l2_loss(&p, &t).unwrap() >= 0.0);
        prop_assert!(split_suv_loss(&p, &t, TH).unwrap() >= 0.0);
        prop_assert_eq!(weighted_l2_loss(&t, &t).unwrap(), 0.0);
        prop_assert_eq!(split_suv_loss(&t, &t, TH).unwrap(), 0.0);
        // Changing only zero-weight voxels keeps the loss at zero.
        let mut t0 = t.clone();
        t0.slice_mut(ndarray::s![0, .., .., ..]).fill(0.0);
        let mut q = t0.clone();
        q.slice_mut(ndarray::s![0, .., .., ..]).fill(0.7);
        prop_assert_eq!(weighted_l2_loss(&q, &t0).unwrap(), 0.0);
    }
}

fn toy_data(n: usize, seed: u64) -> Vec<SlicePair<f32>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let cy = rng.gen_range(8.0..24.0);
            let cx = rng.gen_range(8.0..24.0);
            let ct = Array2::from_shape_fn((32, 32), |(y, x)| {
                let r2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                if r2 < 36.0 { 0.6 } else { 0.3 }
            });
            let pet = ct.mapv(|v| if v > 0.5 { 0.3 } else { 0.05 });
            SlicePair { ct, pet }
        })
        .collect()
}

fn toy_config(steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        max_steps: steps,
        seed: 5,
        width_scale: Ratio::new(1, 16),
        input_size: (32, 32),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_keeps_initial_parameters() {
    let cfg = toy_config(0);
    let st = train_fcn(&toy_data(4, 1), &cfg).unwrap();
    let fresh = TrainState::<f32>::new_fcn(&cfg).unwrap();
    assert_eq!(st.model.params, fresh.model.params);
    assert!(st.history.is_empty());
}

#[test]
fn fcn_training_is_deterministic_and_reduces_loss() {
    let data = toy_data(6, 2);
    let cfg = toy_config(40);
    let a = train_fcn(&data, &cfg).unwrap();
    let b = train_fcn(&data, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    let losses = a.series("fcn_weighted");
    assert_eq!(losses.len(), 40);
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    let c = train_fcn(&data, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let data = toy_data(5, 3);
    let dir = tempfile::tempdir().unwrap();
    let straight = train_fcn(&data, &toy_config(12)).unwrap();

    let mut half = train_fcn(&data, &toy_config(7)).unwrap();
    let path = dir.path().join("fcn.ckpt");
    save_checkpoint(&half, &path).unwrap();
    let mut resumed: TrainState<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(resumed, half);
    let x = Array4::from_shape_fn((1, 32, 32, 1), |(_, y, x, _)| ((y * 32 + x) % 7) as f32 / 7.0);
    assert_eq!(
        forward(&resumed.model.graph, &resumed.model.params, &x).unwrap(),
        forward(&half.model.graph, &half.model.params, &x).unwrap()
    );
    resumed.config.max_steps = 12;
    fit_fcn(&mut resumed, &data, None).unwrap();
    half.config.max_steps = 12;
    fit_fcn(&mut half, &data, None).unwrap();
    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.model.params, straight.model.params);

    assert!(matches!(load_checkpoint::<f32>(dir.path().join("nope")), Err(Error::MissingFile(_))));
    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::CorruptCheckpoint(_))));
    std::fs::write(&bad, b"not a checkpoint at all").unwrap();
    assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn cgan_freezes_fcn_and_resumes_exactly() {
    let data = toy_data(4, 4);
    let fcn = train_fcn(&data, &toy_config(5)).unwrap();
    let before = fcn.model.params.clone();
    let cfg = toy_config(6);
    let a = train_cgan(&data, &fcn, &cfg).unwrap();
    assert_eq!(fcn.model.params, before);
    let b = train_cgan(&data, &fcn, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    for name in ["d_loss", "d_accuracy", "g_adv", "g_split_suv", "g_total"] {
        assert_eq!(a.series(name).len(), 6, "{name}");
    }

    let dir = tempfile::tempdir().unwrap();
    let mut part = train_cgan(&data, &fcn, &toy_config(3)).unwrap();
    save_checkpoint(&part, dir.path().join("g.ckpt")).unwrap();
    part = load_checkpoint(dir.path().join("g.ckpt")).unwrap();
    part.config.max_steps = 6;
    fit_cgan(&mut part, &data, &fcn, None).unwrap();
    assert_eq!(part.history, a.history);

    let joint = train_cgan(&data, &fcn, &TrainConfig { joint_finetune: true, ..cfg }).unwrap();
    assert_eq!(fcn.model.params, before);
    assert_ne!(joint.fcn.as_ref().unwrap().params, before);
}

#[test]
fn synthesize_keeps_grid_and_clips() {
    let data = toy_data(2, 5);
    let fcn = train_fcn(&data, &toy_config(2)).unwrap();
    let gan = train_cgan(&data, &fcn, &toy_config(2)).unwrap();
    let grid = Grid::new([32, 32, 5], [0.8, 0.8, 2.5], [1.0, -2.0, 30.0]).unwrap();
    let slices: Vec<Array2<f32>> = (0..5).map(|z| data[z % 2].ct.clone()).collect();
    let ct = Volume3D::from_axial_slices(&grid, &slices, Modality::Normalized).unwrap();
    for out in [synthesize(&ct, &fcn, None).unwrap(), synthesize(&ct, &fcn, Some(&gan)).unwrap()] {
        assert_eq!(out.grid(), ct.grid());
        assert_eq!(out.modality(), Modality::Normalized);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    let mut zero = fcn.clone();
    zero.model.params.fill(0.0);
    let blank = Volume3D::zeros(&grid, Modality::Normalized).unwrap();
    let out = synthesize(&blank, &zero, None).unwrap();
    assert!(out.data().iter().all(|&v| v == out.data()[[0, 0, 0]]));

    let wrong = Volume3D::<f32>::zeros(&Grid::new([16, 16, 2], [1.0; 3], [0.0; 3]).unwrap(), Modality::Normalized).unwrap();
    assert!(matches!(synthesize(&wrong, &fcn, None), Err(Error::ShapeMismatch(_))));
}

#[test]
fn divergence_is_reported() {
    let data = toy_data(2, 6);
    let cfg = TrainConfig { learning_rate: 1e30, ..toy_config(50) };
    match train_fcn(&data, &cfg) {
        Err(e @ Error::Divergence { .. }) => assert_eq!(e.class(), petsynth::ErrorClass::Numerical),
        other => panic!("expected divergence, got {:?}", other.map(|s| s.step)),
    }
}

#[test]
fn network_kinds_in_config_are_respected() {
    let cfg = TrainConfig { fcn_kind: NetworkKind::Fcn8s, ..toy_config(1) };
    let st = train_fcn(&toy_data(2, 7), &cfg).unwrap();
    assert_eq!(st.model.graph.kind, NetworkKind::Fcn8s);
}

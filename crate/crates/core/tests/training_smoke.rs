use num_rational::Ratio;
use petsynth::dataprep::{extract_slices, prepare_pair, AugmentConfig, SlicePair};
use petsynth::phantom::{generate_phantom_pair, PhantomConfig};
use petsynth::train::{discriminator_accuracy, fit_cgan, smooth, train_fcn, TrainConfig, TrainState};
use petsynth::Window;

fn liver_slices() -> Vec<SlicePair<f32>> {
    let mut all = Vec::new();
    for seed in 0..2 {
        let p = generate_phantom_pair::<f32>(&PhantomConfig { seed, ..Default::default() }).unwrap();
        let pair = prepare_pair(&p.ct, &p.pet, 1.0, 1.0, (Window::CT_LIVER, Window::SUV), p.liver_slice_range()).unwrap();
        all.extend(extract_slices(&pair).unwrap());
    }
    all
}

fn config(steps: u64) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        width_scale: Ratio::new(1, 4),
        input_size: (64, 64),
        augment_config: AugmentConfig::default().scaled_to(64),
        seed: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn fcn_halves_loss_and_discriminator_stays_balanced() {
    let all = liver_slices();
    let train: Vec<_> = all.iter().step_by(3).take(8).cloned().collect();
    let held: Vec<_> = all.iter().skip(1).step_by(3).cloned().collect();

    let fcn = train_fcn(&train, &config(300)).unwrap();
    let losses = fcn.series("fcn_weighted");
    let smoothed = smooth(&losses, 20);
    let ratio = smoothed[199] / losses[0];
    assert!(ratio < 0.5, "smoothed loss ratio after 200 steps {ratio}");

    // Warm up for 200 steps, then probe held-out accuracy at five checkpoints.
    let mut gan = TrainState::new_cgan(&TrainConfig { learning_rate: 1e-4, ..config(200) }, &fcn).unwrap();
    let mut probes = Vec::new();
    for stop in [200, 250, 300, 350, 400] {
        gan.config.max_steps = stop;
        fit_cgan(&mut gan, &train, &fcn, None).unwrap();
        probes.push(discriminator_accuracy(&held, &fcn, &gan).unwrap());
    }
    let mean = probes.iter().map(|a| a.threshold).sum::<f64>() / probes.len() as f64;
    assert!(mean > 0.5 && mean < 1.0, "held-out accuracy {probes:?}");
    assert!(probes.iter().all(|a| a.paired > 0.5), "{probes:?}");
}

use ndarray::{concatenate, s, Array2, Array4, Axis};

use super::loss::{adversarial_losses, discriminator_loss_grad, generator_adv_grad, generator_adv_term, REAL_CLASS};
use super::{Network, Stage, TrainState};
use crate::dataprep::{add_input_noise, augment, SlicePair};
use crate::error::{invalid, Error, Result};
use crate::nn::{backward, forward, forward_probs, forward_tape, NetworkGraph, Params};
use crate::volume::{Modality, Volume3D};
use crate::Scalar;

fn stack<T: Scalar>(images: &[Array2<T>]) -> Array4<T> {
    let (h, w) = images[0].dim();
    let mut out = Array4::zeros((images.len(), h, w, 1));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, .., .., 0]).assign(img);
    }
    out
}

fn channels<T: Scalar>(parts: &[&Array4<T>]) -> Array4<T> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(3), &views).expect("matching batch and spatial dims")
}

fn check_data<T>(data: &[SlicePair<T>], size: (usize, usize)) -> Result<()> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    for (i, p) in data.iter().enumerate() {
        if p.ct.dim() != size || p.pet.dim() != size {
            return Err(Error::ShapeMismatch(format!(
                "slice {i}: ct {:?} / pet {:?}, network expects {:?}",
                p.ct.dim(),
                p.pet.dim(),
                size
            )));
        }
    }
    Ok(())
}

fn diverged(step: u64, what: impl Into<String>) -> Error {
    Error::Divergence { step, what: what.into() }
}

/// Draws the next batch and returns stacked `(ct, pet)` tensors.
fn next_batch<T: Scalar>(state: &mut TrainState<T>, data: &[SlicePair<T>]) -> Result<(Vec<Array2<T>>, Array4<T>)> {
    let idx = state.sampler.next_batch(data.len(), state.config.batch_size)?;
    let mut cts = Vec::with_capacity(idx.len());
    let mut pets = Vec::with_capacity(idx.len());
    for i in idx {
        let sample = if state.config.augment {
            augment(&data[i], &state.config.augment_config, &mut state.sampler.rng)?
        } else {
            data[i].clone()
        };
        cts.push(sample.ct);
        pets.push(sample.pet);
    }
    Ok((cts, stack(&pets)))
}

/// Trains the first-stage FCN from scratch for `cfg.max_steps` steps.
pub fn train_fcn<T: Scalar>(data: &[SlicePair<T>], cfg: &super::TrainConfig) -> Result<TrainState<T>> {
    let mut state = TrainState::new_fcn(cfg)?;
    fit_fcn(&mut state, data, None)?;
    Ok(state)
}

fn mean_loss<T: Scalar>(
    graph: &NetworkGraph,
    params: &Params<T>,
    data: &[SlicePair<T>],
    loss: super::ReconLoss,
    threshold: f64,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(batch.max(1)) {
        let ct: Vec<_> = chunk.iter().map(|p| p.ct.clone()).collect();
        let pet: Vec<_> = chunk.iter().map(|p| p.pet.clone()).collect();
        let pred = forward(graph, params, &stack(&ct))?;
        total += loss.value(&pred, &stack(&pet), threshold)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Returns true when training should stop.
fn validate_step<T: Scalar>(state: &mut TrainState<T>, loss: f64) -> bool {
    state.record("val_loss", loss);
    let es = &mut state.early_stopping;
    if es.best.is_none_or(|b| loss < b) {
        es.best = Some(loss);
        es.stale = 0;
    } else {
        es.stale += 1;
    }
    if let Some(p) = state.config.early_stopping_patience {
        if es.stale >= p {
            es.stopped = true;
        }
    }
    es.stopped
}

/// Continues FCN training until `state.config.max_steps` or early stopping.
pub fn fit_fcn<T: Scalar>(state: &mut TrainState<T>, data: &[SlicePair<T>], val: Option<&[SlicePair<T>]>) -> Result<()> {
    if state.stage != Stage::Fcn {
        return Err(invalid("fit_fcn needs an FCN-stage state"));
    }
    check_data(data, state.config.input_size)?;
    if let Some(v) = val {
        check_data(v, state.config.input_size)?;
    }
    let loss_kind = state.config.fcn_loss;
    let th = state.config.threshold_normalized();
    let name = format!("fcn_{}", loss_kind.as_str());
    while state.step < state.config.max_steps && !state.early_stopping.stopped {
        let (cts, target) = next_batch(state, data)?;
        let net = &mut state.model;
        let tape = forward_tape(&net.graph, &net.params, &stack(&cts))?;
        let loss = loss_kind.value(tape.output(), &target, th)?;
        if !loss.is_finite() {
            return Err(diverged(state.step, format!("{name} = {loss}")));
        }
        let grad = loss_kind.grad(tape.output(), &target, th)?;
        let (grads, _) = backward(&net.graph, &net.params, &tape, &grad)?;
        net.adam.step(&mut net.params, &grads);
        if !net.params.is_finite() {
            return Err(diverged(state.step, "non-finite FCN parameters"));
        }
        state.step += 1;
        state.record(&name, loss);
        if let Some(v) = val {
            if state.step % state.config.eval_every == 0 {
                let net = &state.model;
                let vl = mean_loss(&net.graph, &net.params, v, loss_kind, th, state.config.batch_size)?;
                validate_step(state, vl);
            }
        }
    }
    Ok(())
}

/// Trains the cGAN refinement stage on top of a frozen FCN.
pub fn train_cgan<T: Scalar>(
    data: &[SlicePair<T>],
    fcn_state: &TrainState<T>,
    cfg: &super::TrainConfig,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new_cgan(cfg, fcn_state)?;
    fit_cgan(&mut state, data, fcn_state, None)?;
    Ok(state)
}

/// The FCN used for conditioning: the fine-tuned copy if present.
fn conditioning_fcn<'a, T>(state: &'a TrainState<T>, fcn_state: &'a TrainState<T>) -> &'a Network<T> {
    state.fcn.as_ref().unwrap_or(&fcn_state.model)
}

/// Continues cGAN training until `state.config.max_steps` or early stopping.
/// Each step updates the discriminator once and then the generator once.
pub fn fit_cgan<T: Scalar>(
    state: &mut TrainState<T>,
    data: &[SlicePair<T>],
    fcn_state: &TrainState<T>,
    val: Option<&[SlicePair<T>]>,
) -> Result<()> {
    if state.stage != Stage::Cgan || state.discriminator.is_none() {
        return Err(invalid("fit_cgan needs a cGAN-stage state"));
    }
    if fcn_state.stage != Stage::Fcn {
        return Err(invalid("conditioning state must come from the FCN stage"));
    }
    check_data(data, state.config.input_size)?;
    if let Some(v) = val {
        check_data(v, state.config.input_size)?;
    }
    let cfg = state.config.clone();
    let th = cfg.threshold_normalized();
    while state.step < cfg.max_steps && !state.early_stopping.stopped {
        let (cts, pet) = next_batch(state, data)?;
        let noisy: Vec<_> = cts.iter().map(|c| add_input_noise(c, &cfg.augment_config, &mut state.sampler.rng)).collect();
        let ct = stack(&cts);
        let ct_noisy = stack(&noisy);
        let n = ct.dim().0;

        let fcn = conditioning_fcn(state, fcn_state);
        let fcn_tape = forward_tape(&fcn.graph, &fcn.params, &ct)?;
        let fcn_out = fcn_tape.output().clone();
        let gen_in = channels(&[&ct_noisy, &fcn_out]);
        let gen_tape = forward_tape(&state.model.graph, &state.model.params, &gen_in)?;
        let fake = gen_tape.output().clone();

        // Discriminator update on real and fake batches in one pass.
        let disc = state.discriminator.as_mut().expect("checked above");
        let real_in = channels(&[&pet, &ct, &fcn_out]);
        let fake_in = channels(&[&fake, &ct, &fcn_out]);
        let both = concatenate(Axis(0), &[real_in.view(), fake_in.view()]).expect("same shapes");
        let d_tape = forward_tape(&disc.graph, &disc.params, &both)?;
        let probs = flatten_probs(d_tape.output());
        let (d_real, d_fake) = (probs.slice(s![..n, ..]), probs.slice(s![n.., ..]));
        let adv = adversarial_losses(&d_real, &d_fake)?;
        let acc = accuracy(&d_real, &d_fake);
        let (gr, gf) = discriminator_loss_grad(&d_real, &d_fake)?;
        let g_probs = concatenate(Axis(0), &[gr.view(), gf.view()]).expect("same widths");
        let (d_grads, _) = backward(&disc.graph, &disc.params, &d_tape, &unflatten(g_probs))?;
        disc.adam.step(&mut disc.params, &d_grads);
        if !adv.loss_d.is_finite() || !disc.params.is_finite() {
            return Err(diverged(state.step, format!("discriminator loss = {}", adv.loss_d)));
        }

        // Generator update against the refreshed discriminator.
        let d_tape = forward_tape(&disc.graph, &disc.params, &fake_in)?;
        let d_fake = flatten_probs(d_tape.output());
        let g_adv = generator_adv_term(&d_fake)?;
        let g_adv_grad = generator_adv_grad(&d_fake)?;
        let (_, d_in_grad) = backward(&disc.graph, &disc.params, &d_tape, &unflatten(g_adv_grad))?;
        let recon = cfg.cgan_loss.value(&fake, &pet, th)?;
        let lambda = T::lit(cfg.lambda);
        let mut g_grad = cfg.cgan_loss.grad(&fake, &pet, th)?.mapv(|g| g * lambda);
        g_grad.zip_mut_with(&d_in_grad.slice(s![.., .., .., 0..1]), |a, &b| *a = *a + b);
        let total = g_adv + cfg.lambda * recon;
        if !total.is_finite() {
            return Err(diverged(state.step, format!("generator objective = {total}")));
        }
        let (gen_grads, gen_in_grad) = backward(&state.model.graph, &state.model.params, &gen_tape, &g_grad)?;
        state.model.adam.step(&mut state.model.params, &gen_grads);
        if !state.model.params.is_finite() {
            return Err(diverged(state.step, "non-finite generator parameters"));
        }
        if let Some(f) = state.fcn.as_mut() {
            let g_fcn = gen_in_grad.slice(s![.., .., .., 1..2]).to_owned();
            let (f_grads, _) = backward(&f.graph, &f.params, &fcn_tape, &g_fcn)?;
            f.adam.step(&mut f.params, &f_grads);
            if !f.params.is_finite() {
                return Err(diverged(state.step, "non-finite fine-tuned FCN parameters"));
            }
        }

        state.step += 1;
        state.record("d_loss", adv.loss_d);
        state.record("d_accuracy", acc);
        state.record("g_adv", g_adv);
        state.record(&format!("g_{}", cfg.cgan_loss.as_str()), recon);
        state.record("g_total", total);
        if let Some(v) = val {
            if state.step % cfg.eval_every == 0 {
                let vl = cgan_val_loss(state, fcn_state, v)?;
                validate_step(state, vl);
            }
        }
    }
    Ok(())
}

fn cgan_val_loss<T: Scalar>(state: &TrainState<T>, fcn_state: &TrainState<T>, val: &[SlicePair<T>]) -> Result<f64> {
    let th = state.config.threshold_normalized();
    let mut total = 0.0;
    for chunk in val.chunks(state.config.batch_size) {
        let ct = stack(&chunk.iter().map(|p| p.ct.clone()).collect::<Vec<_>>());
        let pet = stack(&chunk.iter().map(|p| p.pet.clone()).collect::<Vec<_>>());
        let pred = predict(&ct, conditioning_fcn(state, fcn_state), Some(&state.model))?;
        total += state.config.cgan_loss.value(&pred, &pet, th)? * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

fn flatten_probs<T: Scalar>(y: &Array4<T>) -> Array2<T> {
    let (n, h, w, c) = y.dim();
    y.to_shape((n, h * w * c)).expect("contiguous").to_owned()
}

fn unflatten<T: Scalar>(g: Array2<T>) -> Array4<T> {
    let (n, k) = g.dim();
    g.into_shape_with_order((n, 1, 1, k)).expect("contiguous")
}

fn accuracy<T: Scalar>(d_real: &ndarray::ArrayView2<T>, d_fake: &ndarray::ArrayView2<T>) -> f64 {
    let half = T::lit(0.5);
    let correct = d_real.column(REAL_CLASS).iter().filter(|&&p| p > half).count()
        + d_fake.column(REAL_CLASS).iter().filter(|&&p| p < half).count();
    correct as f64 / (d_real.nrows() + d_fake.nrows()) as f64
}

/// Raw (unclipped) prediction for a `(n, h, w, 1)` CT batch.
fn predict<T: Scalar>(ct: &Array4<T>, fcn: &Network<T>, gen: Option<&Network<T>>) -> Result<Array4<T>> {
    let fcn_out = forward(&fcn.graph, &fcn.params, ct)?;
    match gen {
        None => Ok(fcn_out),
        Some(g) => forward(&g.graph, &g.params, &channels(&[ct, &fcn_out])),
    }
}

/// Discriminator quality on a set of slices, without augmentation or input
/// noise.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorAccuracy {
    /// Fraction of real and synthesized slices labelled correctly at
    /// `P(real) = 0.5`.
    pub threshold: f64,
    /// Fraction of slices whose real PET scores a higher `P(real)` than the
    /// synthesized PET under the same conditioning.
    pub paired: f64,
}

pub fn discriminator_accuracy<T: Scalar>(
    data: &[SlicePair<T>],
    fcn_state: &TrainState<T>,
    cgan_state: &TrainState<T>,
) -> Result<DiscriminatorAccuracy> {
    let disc = cgan_state.discriminator.as_ref().ok_or_else(|| invalid("state has no discriminator"))?;
    check_data(data, cgan_state.config.input_size)?;
    let fcn = conditioning_fcn(cgan_state, fcn_state);
    let (mut correct, mut ordered) = (0.0, 0usize);
    for chunk in data.chunks(cgan_state.config.batch_size) {
        let ct = stack(&chunk.iter().map(|p| p.ct.clone()).collect::<Vec<_>>());
        let pet = stack(&chunk.iter().map(|p| p.pet.clone()).collect::<Vec<_>>());
        let fcn_out = forward(&fcn.graph, &fcn.params, &ct)?;
        let fake = forward(&cgan_state.model.graph, &cgan_state.model.params, &channels(&[&ct, &fcn_out]))?;
        let d_real = forward_probs(&disc.graph, &disc.params, &channels(&[&pet, &ct, &fcn_out]))?;
        let d_fake = forward_probs(&disc.graph, &disc.params, &channels(&[&fake, &ct, &fcn_out]))?;
        correct += accuracy(&d_real.view(), &d_fake.view()) * 2.0 * chunk.len() as f64;
        ordered += d_real.column(REAL_CLASS).iter().zip(d_fake.column(REAL_CLASS)).filter(|(r, f)| r > f).count();
    }
    Ok(DiscriminatorAccuracy {
        threshold: correct / (2 * data.len()) as f64,
        paired: ordered as f64 / data.len() as f64,
    })
}

/// Predicts a normalized PET volume slice by slice on the CT grid.
pub fn synthesize<T: Scalar>(
    ct: &Volume3D<T>,
    fcn_state: &TrainState<T>,
    cgan_state: Option<&TrainState<T>>,
) -> Result<Volume3D<T>> {
    if ct.modality() != Modality::Normalized {
        return Err(invalid(format!("synthesis needs a normalized CT, got {}", ct.modality().as_str())));
    }
    if fcn_state.stage != Stage::Fcn {
        return Err(invalid("first argument must be an FCN-stage state"));
    }
    if let Some(c) = cgan_state {
        if c.stage != Stage::Cgan {
            return Err(invalid("second argument must be a cGAN-stage state"));
        }
    }
    let [nx, ny, nz] = ct.dims();
    let size = fcn_state.model.graph.input_size;
    if (ny, nx) != size {
        return Err(Error::ShapeMismatch(format!("CT slices are {ny}x{nx}, network expects {}x{}", size.0, size.1)));
    }
    let fcn = match cgan_state {
        Some(c) => conditioning_fcn(c, fcn_state),
        None => &fcn_state.model,
    };
    let gen = cgan_state.map(|c| &c.model);
    let batch = fcn_state.config.batch_size.max(1);
    let mut slices = Vec::with_capacity(nz);
    for z0 in (0..nz).step_by(batch) {
        let chunk: Vec<Array2<T>> = (z0..(z0 + batch).min(nz)).map(|z| ct.axial(z).to_owned()).collect();
        let pred = predict(&stack(&chunk), fcn, gen)?;
        for i in 0..chunk.len() {
            slices.push(pred.slice(s![i, .., .., 0]).mapv(|v| v.max(T::zero()).min(T::one())));
        }
    }
    Volume3D::from_axial_slices(&ct.grid(), &slices, Modality::Normalized)
}

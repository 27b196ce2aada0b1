//! Reconstruction and adversarial objectives with their analytic gradients.
//!
//! Reconstruction losses take the normalized target PET as a per-voxel
//! weight. Sums are accumulated in `f64` whatever the element type.

use ndarray::{Array, Array2, ArrayBase, Data, Dimension, Ix2, Zip};

use crate::error::{Error, Result};
use crate::Scalar;

/// Clamp applied to discriminator probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;
/// Column of the discriminator output holding P(real).
pub const REAL_CLASS: usize = 1;

fn same_shape<A, B, D: Dimension>(a: &ArrayBase<A, D>, b: &ArrayBase<B, D>) -> Result<()>
where
    A: Data,
    B: Data,
{
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs target {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(1/N) Σ target·(pred − target)²` over all `N` voxels.
pub fn weighted_l2_loss<T, S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<f64>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    same_shape(pred, target)?;
    let n = pred.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    Zip::from(pred).and(target).for_each(|&p, &t| {
        let (p, t) = (p.as_f64(), t.as_f64());
        acc += t * (p - t) * (p - t);
    });
    Ok(acc / n as f64)
}

pub fn weighted_l2_grad<T, S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<Array<T, D>>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    same_shape(pred, target)?;
    let scale = T::lit(2.0 / pred.len().max(1) as f64);
    Ok(Zip::from(pred).and(target).map_collect(|&p, &t| scale * t * (p - t)))
}

/// Plain `(1/N) Σ (pred − target)²`.
pub fn l2_loss<T, S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<f64>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    same_shape(pred, target)?;
    let mut acc = 0.0;
    Zip::from(pred).and(target).for_each(|&p, &t| acc += (p.as_f64() - t.as_f64()).powi(2));
    Ok(acc / pred.len().max(1) as f64)
}

pub fn l2_grad<T, S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<Array<T, D>>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    same_shape(pred, target)?;
    let scale = T::lit(2.0 / pred.len().max(1) as f64);
    Ok(Zip::from(pred).and(target).map_collect(|&p, &t| scale * (p - t)))
}

/// The weighted loss evaluated separately over target voxels `<= threshold`
/// and `> threshold`, each normalized by its own voxel count, then summed.
/// An empty subset contributes zero.
pub fn split_suv_loss<T, S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>, threshold: f64) -> Result<f64>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    let parts = split_suv_parts(pred, target, threshold)?;
    Ok(parts.low + parts.high)
}

/// The two terms of [`split_suv_loss`] and their voxel counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParts {
    pub low: f64,
    pub high: f64,
    pub n_low: usize,
    pub n_high: usize,
}

pub fn split_suv_parts<T, S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>, threshold: f64) -> Result<SplitParts>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    same_shape(pred, target)?;
    let (mut low, mut high, mut n_low, mut n_high) = (0.0, 0.0, 0usize, 0usize);
    Zip::from(pred).and(target).for_each(|&p, &t| {
        let (p, t) = (p.as_f64(), t.as_f64());
        let term = t * (p - t) * (p - t);
        if t > threshold {
            high += term;
            n_high += 1;
        } else {
            low += term;
            n_low += 1;
        }
    });
    Ok(SplitParts {
        low: if n_low > 0 { low / n_low as f64 } else { 0.0 },
        high: if n_high > 0 { high / n_high as f64 } else { 0.0 },
        n_low,
        n_high,
    })
}

pub fn split_suv_grad<T, S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>, threshold: f64) -> Result<Array<T, D>>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    let parts = split_suv_parts(pred, target, threshold)?;
    let s_low = T::lit(2.0 / parts.n_low.max(1) as f64);
    let s_high = T::lit(2.0 / parts.n_high.max(1) as f64);
    let th = T::lit(threshold);
    Ok(Zip::from(pred).and(target).map_collect(|&p, &t| {
        let s = if t > th { s_high } else { s_low };
        s * t * (p - t)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialLosses {
    /// `−mean log D(real) − mean log(1 − D(fake))`.
    pub loss_d: f64,
    /// Non-saturating generator term `−mean log D(fake)`.
    pub loss_g_adv: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_probs<T: Scalar, S: Data<Elem = T>>(d: &ArrayBase<S, Ix2>) -> Result<()> {
    if d.ncols() <= REAL_CLASS || d.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!("expected (N, 2) probabilities, got {:?}", d.shape())));
    }
    Ok(())
}

pub fn adversarial_losses<T, S1, S2>(d_real: &ArrayBase<S1, Ix2>, d_fake: &ArrayBase<S2, Ix2>) -> Result<AdversarialLosses>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
{
    check_probs(d_real)?;
    check_probs(d_fake)?;
    let real_term = -mean_real_class(d_real, f64::ln);
    let fake_term = -mean_real_class(d_fake, |p| (1.0 - p).ln());
    let g_term = -mean_real_class(d_fake, f64::ln);
    Ok(AdversarialLosses { loss_d: real_term + fake_term, loss_g_adv: g_term })
}

/// Gradients of `loss_d` with respect to the real and fake probability rows.
/// Entries inside the clamp region get zero gradient.
pub fn discriminator_loss_grad<T, S1, S2>(d_real: &ArrayBase<S1, Ix2>, d_fake: &ArrayBase<S2, Ix2>) -> Result<(Array2<T>, Array2<T>)>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
{
    check_probs(d_real)?;
    check_probs(d_fake)?;
    let mut gr = Array2::zeros(d_real.raw_dim());
    let mut gf = Array2::zeros(d_fake.raw_dim());
    let (nr, nf) = (d_real.nrows() as f64, d_fake.nrows() as f64);
    for (i, &p) in d_real.column(REAL_CLASS).iter().enumerate() {
        let p = p.as_f64();
        if p > PROB_EPS && p < 1.0 - PROB_EPS {
            gr[[i, REAL_CLASS]] = T::lit(-1.0 / (nr * p));
        }
    }
    for (i, &p) in d_fake.column(REAL_CLASS).iter().enumerate() {
        let p = p.as_f64();
        if p > PROB_EPS && p < 1.0 - PROB_EPS {
            gf[[i, REAL_CLASS]] = T::lit(1.0 / (nf * (1.0 - p)));
        }
    }
    Ok((gr, gf))
}

/// Gradient of `loss_g_adv` with respect to the fake probability rows.
pub fn generator_adv_grad<T, S>(d_fake: &ArrayBase<S, Ix2>) -> Result<Array2<T>>
where
    T: Scalar,
    S: Data<Elem = T>,
{
    check_probs(d_fake)?;
    let mut g = Array2::zeros(d_fake.raw_dim());
    let n = d_fake.nrows() as f64;
    for (i, &p) in d_fake.column(REAL_CLASS).iter().enumerate() {
        let p = p.as_f64();
        if p > PROB_EPS && p < 1.0 - PROB_EPS {
            g[[i, REAL_CLASS]] = T::lit(-1.0 / (n * p));
        }
    }
    Ok(g)
}

/// `loss_g_adv + lambda · split_suv_loss(pred, target)`.
pub fn generator_objective<T, S1, S2, S3, D>(
    pred: &ArrayBase<S1, D>,
    target: &ArrayBase<S2, D>,
    d_fake: &ArrayBase<S3, Ix2>,
    lambda: f64,
    threshold: f64,
) -> Result<f64>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    S3: Data<Elem = T>,
    D: Dimension,
{
    let adv = generator_adv_term(d_fake)?;
    Ok(adv + lambda * split_suv_loss(pred, target, threshold)?)
}

/// `−mean log D(fake)` alone.
pub fn generator_adv_term<T: Scalar, S: Data<Elem = T>>(d_fake: &ArrayBase<S, Ix2>) -> Result<f64> {
    check_probs(d_fake)?;
    Ok(-mean_real_class(d_fake, f64::ln))
}

fn mean_real_class<T: Scalar, S: Data<Elem = T>>(d: &ArrayBase<S, Ix2>, f: impl Fn(f64) -> f64) -> f64 {
    d.column(REAL_CLASS).iter().map(|&p| f(clamp_prob(p.as_f64()))).sum::<f64>() / d.nrows() as f64
}

/// Gradient of [`generator_objective`] with respect to `pred` (the direct
/// reconstruction path; the adversarial path reaches `pred` through the
/// discriminator).
pub fn generator_objective_grad<T, S1, S2, D>(
    pred: &ArrayBase<S1, D>,
    target: &ArrayBase<S2, D>,
    lambda: f64,
    threshold: f64,
) -> Result<Array<T, D>>
where
    T: Scalar,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    let l = T::lit(lambda);
    Ok(split_suv_grad(pred, target, threshold)?.mapv(|g| g * l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const TH: f64 = 0.125;

    #[test]
    fn weighted_two_voxel_example() {
        let t = array![0.0, 1.0];
        let p = array![0.5, 0.5];
        assert_eq!(weighted_l2_loss(&p, &t).unwrap(), 0.125);
        assert_eq!(weighted_l2_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(weighted_l2_loss(&array![3.0, -2.0], &array![0.0, 0.0]).unwrap(), 0.0);
        assert!(weighted_l2_loss(&array![1.0], &array![1.0, 2.0]).is_err());
    }

    #[test]
    fn split_two_voxel_example() {
        let t = array![0.1, 0.5];
        let p = array![0.2, 0.4];
        let parts = split_suv_parts(&p, &t, TH).unwrap();
        assert!((parts.low - 0.001).abs() < 1e-15);
        assert!((parts.high - 0.005).abs() < 1e-15);
        assert!((split_suv_loss(&p, &t, TH).unwrap() - 0.006).abs() < 1e-15);
        assert_eq!(split_suv_loss(&t, &t, TH).unwrap(), 0.0);

        let t = array![0.1, 0.05];
        let p = array![0.3, 0.0];
        let parts = split_suv_parts(&p, &t, TH).unwrap();
        assert_eq!((parts.n_high, parts.high), (0, 0.0));
        assert_eq!(split_suv_loss(&p, &t, TH).unwrap(), parts.low);
    }

    #[test]
    fn adversarial_examples() {
        let half = array![[0.5, 0.5], [0.5, 0.5]];
        let l = adversarial_losses(&half, &half).unwrap();
        assert!((l.loss_d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.loss_g_adv - 2f64.ln()).abs() < 1e-12);

        let perfect = adversarial_losses(&array![[0.0, 1.0]], &array![[1.0, 0.0]]).unwrap();
        assert!(perfect.loss_d < 1e-6);
        let fooled = adversarial_losses(&array![[0.0, 1.0]], &array![[0.0, 1.0]]).unwrap();
        assert!(fooled.loss_g_adv < 1e-6);
    }

    #[test]
    fn generator_objective_examples() {
        let t = array![0.1, 0.5];
        let half = array![[0.5, 0.5]];
        let v = generator_objective(&t, &t, &half, 20.0, TH).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let p = array![0.2, 0.4];
        assert!((generator_objective(&p, &t, &half, 0.0, TH).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(generator_objective(&t, &t, &array![[0.0, 1.0]], 20.0, TH).unwrap() < 1e-6);
    }
}

use ndarray::{Array1, Array2, Zip};
use rand::Rng;

use super::graph::{LayerKind, NetworkGraph};
use crate::dataprep::RngState;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Parameters aligned with `graph.layers`; `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(graph: &NetworkGraph) -> Result<Self> {
        let shapes = graph.param_shapes()?;
        let layers = shapes
            .iter()
            .zip(&graph.layers)
            .map(|(s, l)| {
                s.map(|(r, c)| {
                    let nb = if l.kind == LayerKind::TransposedConv { l.channels_out } else { c };
                    LayerParams { weight: Array2::zeros((r, c)), bias: Array1::zeros(nb) }
                })
            })
            .collect();
        Ok(Params { layers })
    }

    /// He-uniform weights and zero biases; transposed convolutions start as
    /// bilinear interpolation kernels.
    pub fn init(graph: &NetworkGraph, rng: &mut RngState) -> Result<Self> {
        let mut p = Self::zeros(graph)?;
        for (lp, l) in p.layers.iter_mut().zip(&graph.layers) {
            let Some(lp) = lp else { continue };
            if l.kind == LayerKind::TransposedConv {
                lp.weight = bilinear_kernel(lp.weight.nrows(), l.kernel.0, l.channels_out);
            } else {
                let fan_in = lp.weight.nrows() as f64;
                let limit = (6.0 / fan_in).sqrt();
                lp.weight.mapv_inplace(|_| T::lit(rng.gen_range(-limit..limit)));
            }
        }
        Ok(p)
    }

    /// Checks every tensor against the graph's expected shapes.
    pub fn check(&self, graph: &NetworkGraph) -> Result<()> {
        let expected = Self::zeros(graph)?;
        if expected.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!("{} parameter slots for {} layers", self.layers.len(), expected.layers.len())));
        }
        for ((a, b), l) in self.layers.iter().zip(&expected.layers).zip(&graph.layers) {
            let ok = match (a, b) {
                (Some(a), Some(b)) => a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len(),
                (None, None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::ShapeMismatch(format!("parameters of layer {:?}", l.name)));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.layers.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|p| p.weight.iter().chain(p.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn fill(&mut self, v: T) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.fill(v);
            p.bias.fill(v);
        }
    }

    /// `(name, values)` for every tensor, in layer order.
    pub fn named_tensors<'a>(&'a self, graph: &'a NetworkGraph) -> impl Iterator<Item = (String, &'a [T])> + 'a {
        self.layers.iter().zip(&graph.layers).filter_map(|(p, l)| p.as_ref().map(|p| (l, p))).flat_map(|(l, p)| {
            [
                (format!("{}.weight", l.name), p.weight.as_slice().expect("standard layout")),
                (format!("{}.bias", l.name), p.bias.as_slice().expect("standard layout")),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers.iter_mut().flatten().flat_map(|p| {
            [p.weight.as_slice_mut().expect("standard layout"), p.bias.as_slice_mut().expect("standard layout")]
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().flatten().flat_map(|p| {
            [p.weight.as_slice().expect("standard layout"), p.bias.as_slice().expect("standard layout")]
        })
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                Zip::from(&mut a.weight).and(&b.weight).for_each(|x, &y| *x = *x + y);
                Zip::from(&mut a.bias).and(&b.bias).for_each(|x, &y| *x = *x + y);
            }
        }
    }
}

/// Weight of a `k×k` transposed convolution that performs bilinear
/// upsampling independently per channel.
fn bilinear_kernel<T: Scalar>(c_in: usize, k: usize, c_out: usize) -> Array2<T> {
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / factor;
    let mut w = Array2::zeros((c_in, k * k * c_out));
    for ci in 0..c_in.min(c_out) {
        for ky in 0..k {
            for kx in 0..k {
                w[[ci, (ky * k + kx) * c_out + ci]] = T::lit(tap(ky) * tap(kx));
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::rng_from_seed;
    use crate::nn::graph::{build_network, NetworkKind};
    use num_rational::Ratio;

    #[test]
    fn init_matches_static_count_and_is_seeded() {
        let g = build_network(NetworkKind::Fcn4s, 1, (64, 64), Ratio::new(1, 4)).unwrap();
        let a = Params::<f32>::init(&g, &mut rng_from_seed(1)).unwrap();
        let b = Params::<f32>::init(&g, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(), g.count_parameters().unwrap());
        a.check(&g).unwrap();
    }

    #[test]
    fn bilinear_taps() {
        let w: Array2<f64> = bilinear_kernel(1, 4, 1);
        let taps: Vec<f64> = (0..4).map(|i| w[[0, i]] / 0.25).collect();
        assert_eq!(taps, vec![0.25, 0.75, 0.75, 0.25]);
    }
}

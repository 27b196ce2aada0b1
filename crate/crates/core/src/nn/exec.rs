//! Forward evaluation and reverse-mode gradients over a [`NetworkGraph`].
//!
//! Activations are NHWC `Array4`s. Dense and softmax layers produce
//! `(n, 1, 1, k)` tensors.

use ndarray::{Array2, Array4, Axis};

use super::graph::{Activation, LayerKind, LayerSpec, NetworkGraph, Shape3, Source, LEAKY_SLOPE};
use super::ops::{col2im, im2col, matmul, matmul_nt, matmul_tn, ConvGeom};
use super::params::{LayerParams, Params};
use crate::error::{Error, Result};
use crate::Scalar;

/// Every layer output of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    input: Array4<T>,
    outputs: Vec<Array4<T>>,
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn output(&self) -> &Array4<T> {
        self.outputs.last().expect("non-empty graph")
    }

    pub fn into_output(mut self) -> Array4<T> {
        self.outputs.pop().expect("non-empty graph")
    }

    pub fn layer_output(&self, i: usize) -> &Array4<T> {
        &self.outputs[i]
    }
}

fn check_input<T>(g: &NetworkGraph, x: &Array4<T>) -> Result<()> {
    let (_, h, w, c) = x.dim();
    if (h, w, c) != (g.input_size.0, g.input_size.1, g.input_channels) || x.dim().0 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} expects (N, {}, {}, {}), got {:?}",
            g.kind.as_str(),
            g.input_size.0,
            g.input_size.1,
            g.input_channels,
            x.dim()
        )));
    }
    Ok(())
}

fn contiguous<T: Scalar>(a: &Array4<T>) -> std::borrow::Cow<'_, [T]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn conv_geom(l: &LayerSpec, n: usize, x: Shape3, y: Shape3) -> ConvGeom {
    ConvGeom {
        n,
        h_in: x.h,
        w_in: x.w,
        c: x.c,
        h_out: y.h,
        w_out: y.w,
        kh: l.kernel.0,
        kw: l.kernel.1,
        stride: l.stride,
        pad: l.padding,
        dil: l.dilation,
    }
}

fn activate<T: Scalar>(v: &mut [T], act: Activation) {
    match act {
        Activation::Linear => {}
        Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(T::zero())),
        Activation::LeakyRelu => {
            let slope = T::lit(LEAKY_SLOPE);
            v.iter_mut().for_each(|x| {
                if *x < T::zero() {
                    *x = *x * slope
                }
            })
        }
    }
}

/// Multiplies `grad` by the activation derivative, read off the output.
fn activation_grad<T: Scalar>(grad: &mut [T], out: &[T], act: Activation) {
    match act {
        Activation::Linear => {}
        Activation::Relu => grad.iter_mut().zip(out).for_each(|(g, &y)| {
            if y <= T::zero() {
                *g = T::zero()
            }
        }),
        Activation::LeakyRelu => {
            let slope = T::lit(LEAKY_SLOPE);
            grad.iter_mut().zip(out).for_each(|(g, &y)| {
                if y <= T::zero() {
                    *g = *g * slope
                }
            })
        }
    }
}

fn add_bias<T: Scalar>(v: &mut [T], bias: &[T]) {
    let c = bias.len();
    for row in v.chunks_exact_mut(c) {
        row.iter_mut().zip(bias).for_each(|(x, &b)| *x = *x + b);
    }
}

fn bias_grad<T: Scalar>(g: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for row in g.chunks_exact(c) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
    }
    out
}

fn to4<T: Scalar>(v: Vec<T>, n: usize, s: Shape3) -> Array4<T> {
    Array4::from_shape_vec((n, s.h, s.w, s.c), v).expect("layer output size")
}

/// Runs the graph and keeps every intermediate output.
pub fn forward_tape<T: Scalar>(g: &NetworkGraph, params: &Params<T>, x: &Array4<T>) -> Result<Tape<T>> {
    check_input(g, x)?;
    if params.layers.len() != g.layers.len() {
        return Err(Error::ShapeMismatch("parameter set does not belong to this graph".into()));
    }
    let shapes = g.shapes()?;
    let sources = g.sources()?;
    let n = x.dim().0;
    let mut outputs: Vec<Array4<T>> = Vec::with_capacity(g.layers.len());
    let mut pool_argmax = vec![None; g.layers.len()];
    for (i, l) in g.layers.iter().enumerate() {
        let (primary, skip) = sources[i];
        let input = match primary {
            Source::Input => x,
            Source::Layer(j) => &outputs[j],
        };
        let xs = {
            let (_, h, w, c) = input.dim();
            Shape3::new(h, w, c)
        };
        let ys = shapes[i];
        let out = match l.kind {
            LayerKind::Conv => {
                let p = layer_params(params, i, l)?;
                let geo = conv_geom(l, n, xs, ys);
                let xd = contiguous(input);
                let mut y = if geo.is_pointwise() {
                    matmul(&xd, p.weight.as_slice().unwrap(), geo.rows(), geo.cols(), ys.c)
                } else {
                    let cols = im2col(&xd, &geo);
                    matmul(&cols, p.weight.as_slice().unwrap(), geo.rows(), geo.cols(), ys.c)
                };
                add_bias(&mut y, p.bias.as_slice().unwrap());
                activate(&mut y, l.activation);
                to4(y, n, ys)
            }
            LayerKind::TransposedConv => {
                let p = layer_params(params, i, l)?;
                // the matching forward convolution maps ys -> xs
                let geo = ConvGeom { c: ys.c, ..conv_geom(l, n, ys, xs) };
                let xd = contiguous(input);
                let cols = matmul(&xd, p.weight.as_slice().unwrap(), n * xs.h * xs.w, xs.c, geo.cols());
                let mut y = col2im(&cols, &geo);
                add_bias(&mut y, p.bias.as_slice().unwrap());
                activate(&mut y, l.activation);
                to4(y, n, ys)
            }
            LayerKind::MaxPool => {
                let (y, arg) = maxpool(input, ys);
                pool_argmax[i] = Some(arg);
                y
            }
            LayerKind::UpsampleNn => {
                Array4::from_shape_fn((n, ys.h, ys.w, ys.c), |(b, yy, xx, c)| input[[b, yy / 2, xx / 2, c]])
            }
            LayerKind::Concat => {
                let other = &outputs[skip.expect("resolved")];
                ndarray::concatenate(Axis(3), &[input.view(), other.view()]).expect("shapes checked")
            }
            LayerKind::Add => {
                let other = &outputs[skip.expect("resolved")];
                let mut y = input + other;
                activate(y.as_slice_mut().unwrap(), l.activation);
                y
            }
            LayerKind::Dense => {
                let p = layer_params(params, i, l)?;
                let xd = contiguous(input);
                let mut y = matmul(&xd, p.weight.as_slice().unwrap(), n, xs.len(), ys.c);
                add_bias(&mut y, p.bias.as_slice().unwrap());
                activate(&mut y, l.activation);
                to4(y, n, ys)
            }
            LayerKind::Softmax => {
                let mut y = input.as_standard_layout().to_owned();
                for mut row in y.rows_mut() {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    row.mapv_inplace(|v| (v - m).exp());
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                y
            }
            LayerKind::Activation => {
                let mut y = input.as_standard_layout().to_owned();
                activate(y.as_slice_mut().unwrap(), l.activation);
                y
            }
        };
        outputs.push(out);
    }
    Ok(Tape { input: x.clone(), outputs, pool_argmax })
}

/// Final output: `(n, H, W, c_out)` for generators, `(n, 1, 1, 2)` for the
/// discriminator.
pub fn forward<T: Scalar>(g: &NetworkGraph, params: &Params<T>, x: &Array4<T>) -> Result<Array4<T>> {
    Ok(forward_tape(g, params, x)?.into_output())
}

/// Discriminator output flattened to `(n, classes)`.
pub fn forward_probs<T: Scalar>(g: &NetworkGraph, params: &Params<T>, x: &Array4<T>) -> Result<Array2<T>> {
    let y = forward(g, params, x)?;
    let (n, h, w, c) = y.dim();
    Ok(y.into_shape_with_order((n, h * w * c)).expect("contiguous"))
}

fn layer_params<'a, T>(params: &'a Params<T>, i: usize, l: &LayerSpec) -> Result<&'a LayerParams<T>> {
    params.layers[i]
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch(format!("missing parameters for layer {:?}", l.name)))
}

fn maxpool<T: Scalar>(x: &Array4<T>, ys: Shape3) -> (Array4<T>, Vec<usize>) {
    let (n, h, w, c) = x.dim();
    let mut y = Array4::zeros((n, ys.h, ys.w, c));
    let mut arg = Vec::with_capacity(y.len());
    for b in 0..n {
        for oy in 0..ys.h {
            for ox in 0..ys.w {
                for ch in 0..c {
                    let mut best = (T::neg_infinity(), 0);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                            let v = x[[b, iy, ix, ch]];
                            if v > best.0 || best.0 == T::neg_infinity() && dy + dx == 0 {
                                best = (v, ((b * h + iy) * w + ix) * c + ch);
                            }
                        }
                    }
                    y[[b, oy, ox, ch]] = best.0;
                    arg.push(best.1);
                }
            }
        }
    }
    (y, arg)
}

/// Gradients of a scalar objective given `dL/d(output)`.
/// Returns parameter gradients and `dL/d(input)`.
pub fn backward<T: Scalar>(
    g: &NetworkGraph,
    params: &Params<T>,
    tape: &Tape<T>,
    grad_output: &Array4<T>,
) -> Result<(Params<T>, Array4<T>)> {
    if grad_output.dim() != tape.output().dim() {
        return Err(Error::ShapeMismatch(format!(
            "output gradient {:?} vs output {:?}",
            grad_output.dim(),
            tape.output().dim()
        )));
    }
    let shapes = g.shapes()?;
    let sources = g.sources()?;
    let n = tape.input.dim().0;
    let mut grads = Params::zeros(g)?;
    let mut layer_grads: Vec<Option<Array4<T>>> = vec![None; g.layers.len()];
    let mut input_grad = Array4::<T>::zeros(tape.input.dim());
    *layer_grads.last_mut().unwrap() = Some(grad_output.as_standard_layout().to_owned());

    let accumulate = |slot: Source, gx: Array4<T>, layer_grads: &mut Vec<Option<Array4<T>>>, input_grad: &mut Array4<T>| match slot {
        Source::Input => input_grad.zip_mut_with(&gx, |a, &b| *a = *a + b),
        Source::Layer(j) => match &mut layer_grads[j] {
            Some(acc) => acc.zip_mut_with(&gx, |a, &b| *a = *a + b),
            s @ None => *s = Some(gx),
        },
    };

    for i in (0..g.layers.len()).rev() {
        let Some(mut gy) = layer_grads[i].take() else { continue };
        let l = &g.layers[i];
        let (primary, skip) = sources[i];
        let input = match primary {
            Source::Input => &tape.input,
            Source::Layer(j) => &tape.outputs[j],
        };
        let xs = {
            let (_, h, w, c) = input.dim();
            Shape3::new(h, w, c)
        };
        let ys = shapes[i];
        let out = &tape.outputs[i];
        match l.kind {
            LayerKind::Conv => {
                let p = layer_params(params, i, l)?;
                activation_grad(gy.as_slice_mut().unwrap(), out.as_slice().unwrap(), l.activation);
                let gys = gy.as_slice().unwrap();
                let geo = conv_geom(l, n, xs, ys);
                let xd = contiguous(input);
                let cols = if geo.is_pointwise() { xd.into_owned() } else { im2col(&xd, &geo) };
                let gw = matmul_tn(&cols, gys, geo.rows(), geo.cols(), ys.c);
                let gb = bias_grad(gys, ys.c);
                let gcols = matmul_nt(gys, p.weight.as_slice().unwrap(), geo.rows(), ys.c, geo.cols());
                let gx = if geo.is_pointwise() { gcols } else { col2im(&gcols, &geo) };
                store(&mut grads, i, gw, gb);
                accumulate(primary, to4(gx, n, xs), &mut layer_grads, &mut input_grad);
            }
            LayerKind::TransposedConv => {
                let p = layer_params(params, i, l)?;
                activation_grad(gy.as_slice_mut().unwrap(), out.as_slice().unwrap(), l.activation);
                let gys = gy.as_slice().unwrap();
                let geo = ConvGeom { c: ys.c, ..conv_geom(l, n, ys, xs) };
                let gcols = im2col(gys, &geo);
                let xd = contiguous(input);
                let rows = n * xs.h * xs.w;
                let gw = matmul_tn(&xd, &gcols, rows, xs.c, geo.cols());
                let gb = bias_grad(gys, ys.c);
                let gx = matmul_nt(&gcols, p.weight.as_slice().unwrap(), rows, geo.cols(), xs.c);
                store(&mut grads, i, gw, gb);
                accumulate(primary, to4(gx, n, xs), &mut layer_grads, &mut input_grad);
            }
            LayerKind::MaxPool => {
                let arg = tape.pool_argmax[i].as_ref().expect("recorded in forward");
                let mut gx = vec![T::zero(); n * xs.len()];
                for (&src, &v) in arg.iter().zip(gy.iter()) {
                    gx[src] = gx[src] + v;
                }
                accumulate(primary, to4(gx, n, xs), &mut layer_grads, &mut input_grad);
            }
            LayerKind::UpsampleNn => {
                let mut gx = Array4::zeros((n, xs.h, xs.w, xs.c));
                for ((b, yy, xx, c), &v) in gy.indexed_iter() {
                    gx[[b, yy / 2, xx / 2, c]] = gx[[b, yy / 2, xx / 2, c]] + v;
                }
                accumulate(primary, gx, &mut layer_grads, &mut input_grad);
            }
            LayerKind::Concat => {
                let split = xs.c;
                let ga = gy.slice(ndarray::s![.., .., .., ..split]).to_owned();
                let gb = gy.slice(ndarray::s![.., .., .., split..]).to_owned();
                accumulate(primary, ga, &mut layer_grads, &mut input_grad);
                accumulate(Source::Layer(skip.unwrap()), gb, &mut layer_grads, &mut input_grad);
            }
            LayerKind::Add => {
                activation_grad(gy.as_slice_mut().unwrap(), out.as_slice().unwrap(), l.activation);
                accumulate(primary, gy.clone(), &mut layer_grads, &mut input_grad);
                accumulate(Source::Layer(skip.unwrap()), gy, &mut layer_grads, &mut input_grad);
            }
            LayerKind::Dense => {
                let p = layer_params(params, i, l)?;
                activation_grad(gy.as_slice_mut().unwrap(), out.as_slice().unwrap(), l.activation);
                let gys = gy.as_slice().unwrap();
                let xd = contiguous(input);
                let gw = matmul_tn(&xd, gys, n, xs.len(), ys.c);
                let gb = bias_grad(gys, ys.c);
                let gx = matmul_nt(gys, p.weight.as_slice().unwrap(), n, ys.c, xs.len());
                store(&mut grads, i, gw, gb);
                accumulate(primary, to4(gx, n, xs), &mut layer_grads, &mut input_grad);
            }
            LayerKind::Softmax => {
                let mut gx = gy;
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(out.rows()) {
                    let dot = grow.iter().zip(yrow.iter()).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    grow.iter_mut().zip(yrow.iter()).for_each(|(g, &y)| *g = y * (*g - dot));
                }
                accumulate(primary, gx, &mut layer_grads, &mut input_grad);
            }
            LayerKind::Activation => {
                activation_grad(gy.as_slice_mut().unwrap(), out.as_slice().unwrap(), l.activation);
                accumulate(primary, gy, &mut layer_grads, &mut input_grad);
            }
        }
    }
    Ok((grads, input_grad))
}

fn store<T: Scalar>(grads: &mut Params<T>, i: usize, gw: Vec<T>, gb: Vec<T>) {
    let p = grads.layers[i].as_mut().expect("allocated for parametric layers");
    p.weight.as_slice_mut().unwrap().copy_from_slice(&gw);
    p.bias.as_slice_mut().unwrap().copy_from_slice(&gb);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::rng_from_seed;
    use crate::nn::graph::{build_network, NetworkKind};
    use num_rational::Ratio;
    use rand::Rng;
    use crate::nn::graph::LayerSpec;

    fn random_input(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Array4<f64> {
        let mut rng = rng_from_seed(seed);
        Array4::from_shape_fn((n, h, w, c), |_| rng.gen_range(0.0..1.0))
    }

    /// Checks `<dL/dθ, δ>` against a central difference of `L(θ) = <out, r>`
    /// along one random direction `δ` in parameter space, and likewise for
    /// the input.
    fn gradient_check(g: &NetworkGraph, seed: u64) {
        let mut rng = rng_from_seed(seed);
        let params = Params::<f64>::init(g, &mut rng).unwrap();
        let (h, w) = g.input_size;
        let x = random_input(2, h, w, g.input_channels, seed + 1);
        let tape = forward_tape(g, &params, &x).unwrap();
        let r = Array4::from_shape_fn(tape.output().dim(), |_| rng.gen_range(-1.0..1.0));
        let objective = |p: &Params<f64>, x: &Array4<f64>| (forward(g, p, x).unwrap() * &r).sum();
        let (gp, gx) = backward(g, &params, &tape, &r).unwrap();

        let mut dir = params.clone();
        for t in dir.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let analytic: f64 = gp.tensors().zip(dir.tensors()).flat_map(|(a, b)| a.iter().zip(b)).map(|(a, b)| a * b).sum();
        // small step: ReLU and max-pool kinks make larger steps unreliable
        let eps = 1e-7;
        let shifted = |s: f64| {
            let mut p = params.clone();
            for (t, d) in p.tensors_mut().zip(dir.tensors()) {
                t.iter_mut().zip(d).for_each(|(v, dv)| *v += s * dv);
            }
            objective(&p, &x)
        };
        let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        assert!((analytic - numeric).abs() <= 1e-5 * (1.0 + numeric.abs()), "{:?} params: {analytic} vs {numeric}", g.kind);

        let dx = random_input(2, h, w, g.input_channels, seed + 2);
        let analytic_x = (&gx * &dx).sum();
        let numeric_x = (objective(&params, &(&x + &(&dx * eps))) - objective(&params, &(&x - &(&dx * eps)))) / (2.0 * eps);
        assert!((analytic_x - numeric_x).abs() <= 1e-5 * (1.0 + numeric_x.abs()), "{:?} input: {analytic_x} vs {numeric_x}", g.kind);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = Ratio::new(1, 16);
        let c = |l: Vec<LayerSpec>| NetworkGraph::from_layers(NetworkKind::Custom, l, 2, (4, 4), Ratio::new(1, 1)).unwrap();
        gradient_check(&c(vec![LayerSpec::conv("a", 3, 2, 1, Activation::Linear)]), 11);
        gradient_check(&c(vec![LayerSpec::conv("a", 3, 2, 2, Activation::Linear)]), 12);
        gradient_check(&c(vec![LayerSpec::conv("a", 3, 2, 1, Activation::LeakyRelu)]), 13);
        gradient_check(&c(vec![LayerSpec::maxpool("p"), LayerSpec::upsample_nn("u")]), 14);
        gradient_check(&c(vec![LayerSpec::conv("a", 3, 2, 1, Activation::Linear), LayerSpec::concat("c", "a").from("input")]), 15);
        gradient_check(&build_network(NetworkKind::Discriminator, 3, (16, 16), s).unwrap(), 4);
        gradient_check(&build_network(NetworkKind::UNetGen, 2, (16, 16), s).unwrap(), 3);
        gradient_check(&c(vec![LayerSpec::conv("a", 3, 2, 1, Activation::Linear), LayerSpec::upscore("u", 3, 4)]), 16);
        gradient_check(&c(vec![LayerSpec::conv("a", 7, 2, 1, Activation::Relu), LayerSpec::maxpool("p"), LayerSpec::dense("d", 3, Activation::Linear), LayerSpec::softmax("s")]), 17);
        gradient_check(&build_network(NetworkKind::Fcn8s, 1, (32, 32), s).unwrap(), 1);
        gradient_check(&build_network(NetworkKind::Fcn4s, 1, (32, 32), s).unwrap(), 1);
        gradient_check(&build_network(NetworkKind::Fcn2s, 1, (32, 32), s).unwrap(), 2);
    }

    #[test]
    fn output_shapes_and_softmax() {
        let s = Ratio::new(1, 8);
        let fcn = build_network(NetworkKind::Fcn4s, 1, (64, 64), s).unwrap();
        let p = Params::<f32>::init(&fcn, &mut rng_from_seed(0)).unwrap();
        let x = Array4::from_elem((2, 64, 64, 1), 0.3f32);
        let y = forward(&fcn, &p, &x).unwrap();
        assert_eq!(y.dim(), (2, 64, 64, 1));
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(forward(&fcn, &p, &x).unwrap(), y);

        let d = build_network(NetworkKind::Discriminator, 3, (32, 32), s).unwrap();
        let pd = Params::<f32>::init(&d, &mut rng_from_seed(1)).unwrap();
        let xd = Array4::from_shape_fn((3, 32, 32, 3), |(b, y, x, c)| ((b + y * x + c) % 7) as f32 / 7.0);
        let probs = forward_probs(&d, &pd, &xd).unwrap();
        assert_eq!(probs.dim(), (3, 2));
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_parameters_give_constant_output() {
        let g = build_network(NetworkKind::UNetGen, 2, (32, 32), Ratio::new(1, 8)).unwrap();
        let p = Params::<f32>::zeros(&g).unwrap();
        let x = random_input(1, 32, 32, 2, 5).mapv(|v| v as f32);
        let y = forward(&g, &p, &x).unwrap();
        assert!(y.iter().all(|&v| v == y[[0, 0, 0, 0]]));
    }

    #[test]
    fn input_shape_is_checked() {
        let g = build_network(NetworkKind::Fcn8s, 1, (32, 32), Ratio::new(1, 8)).unwrap();
        let p = Params::<f32>::zeros(&g).unwrap();
        assert!(matches!(forward(&g, &p, &Array4::zeros((1, 32, 32, 2))), Err(Error::ShapeMismatch(_))));
    }
}

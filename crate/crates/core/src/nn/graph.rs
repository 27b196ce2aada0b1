//! Declarative layer graphs for the FCN family, the U-Net generator and the
//! patch discriminator, with static shape propagation.

use std::collections::HashMap;
use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    TransposedConv,
    MaxPool,
    UpsampleNn,
    Concat,
    Add,
    Dense,
    Softmax,
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// Negative slope [`LEAKY_SLOPE`].
    LeakyRelu,
    Linear,
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub channels_out: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub activation: Activation,
    /// Primary input; `None` means the preceding layer (or the network input
    /// for the first layer).
    pub input: Option<String>,
    /// Second operand of `Concat`/`Add`.
    pub skip_source: Option<String>,
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            kernel: (1, 1),
            channels_out: 1,
            stride: 1,
            dilation: 1,
            padding: 0,
            activation: Activation::Linear,
            input: None,
            skip_source: None,
        }
    }

    /// `k×k` convolution with "same" padding at stride 1.
    pub fn conv(name: &str, k: usize, channels: usize, dilation: usize, act: Activation) -> Self {
        LayerSpec {
            kernel: (k, k),
            channels_out: channels,
            dilation,
            padding: dilation * (k - 1) / 2,
            activation: act,
            ..Self::base(name, LayerKind::Conv)
        }
    }

    pub fn strided_conv(name: &str, k: usize, channels: usize, stride: usize, act: Activation) -> Self {
        LayerSpec { stride, ..Self::conv(name, k, channels, 1, act) }
    }

    /// Learned `factor`× upsampling: kernel `2·factor`, stride `factor`.
    pub fn upscore(name: &str, channels: usize, factor: usize) -> Self {
        LayerSpec {
            kernel: (2 * factor, 2 * factor),
            channels_out: channels,
            stride: factor,
            padding: factor / 2,
            ..Self::base(name, LayerKind::TransposedConv)
        }
    }

    pub fn maxpool(name: &str) -> Self {
        LayerSpec { kernel: (2, 2), stride: 2, ..Self::base(name, LayerKind::MaxPool) }
    }

    pub fn upsample_nn(name: &str) -> Self {
        LayerSpec { kernel: (2, 2), stride: 2, ..Self::base(name, LayerKind::UpsampleNn) }
    }

    pub fn concat(name: &str, skip: &str) -> Self {
        LayerSpec { skip_source: Some(skip.into()), ..Self::base(name, LayerKind::Concat) }
    }

    pub fn add(name: &str, skip: &str) -> Self {
        LayerSpec { skip_source: Some(skip.into()), ..Self::base(name, LayerKind::Add) }
    }

    pub fn dense(name: &str, out: usize, act: Activation) -> Self {
        LayerSpec { channels_out: out, activation: act, ..Self::base(name, LayerKind::Dense) }
    }

    pub fn softmax(name: &str) -> Self {
        Self::base(name, LayerKind::Softmax)
    }

    pub fn activation(name: &str, act: Activation) -> Self {
        LayerSpec { activation: act, ..Self::base(name, LayerKind::Activation) }
    }

    pub fn from(mut self, input: &str) -> Self {
        self.input = Some(input.to_string());
        self
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::TransposedConv | LayerKind::Dense)
    }
}

/// Activation shape `(height, width, channels)`; dense outputs are `(1, 1, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape3 {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Shape3 { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetworkKind {
    Fcn4s,
    Fcn8s,
    Fcn2s,
    UNetGen,
    Discriminator,
    UNetStandalone,
    /// Hand-assembled graphs (tests, experiments).
    Custom,
}

impl NetworkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetworkKind::Fcn4s => "fcn4s",
            NetworkKind::Fcn8s => "fcn8s",
            NetworkKind::Fcn2s => "fcn2s",
            NetworkKind::UNetGen => "unet-gen",
            NetworkKind::Discriminator => "discriminator",
            NetworkKind::UNetStandalone => "unet",
            NetworkKind::Custom => "custom",
        }
    }

    /// Spatial input sizes must be multiples of this.
    pub fn size_multiple(self) -> usize {
        match self {
            NetworkKind::Fcn4s | NetworkKind::Fcn8s | NetworkKind::Fcn2s => 32,
            NetworkKind::UNetGen | NetworkKind::UNetStandalone => 16,
            NetworkKind::Discriminator => 8,
            NetworkKind::Custom => 1,
        }
    }

    pub fn is_generator(self) -> bool {
        !matches!(self, NetworkKind::Discriminator)
    }
}

impl std::str::FromStr for NetworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fcn4s" | "fcn-4s" => NetworkKind::Fcn4s,
            "fcn8s" | "fcn-8s" => NetworkKind::Fcn8s,
            "fcn2s" | "fcn-2s" => NetworkKind::Fcn2s,
            "unet-gen" | "unetgen" => NetworkKind::UNetGen,
            "discriminator" => NetworkKind::Discriminator,
            "unet" | "unet-standalone" => NetworkKind::UNetStandalone,
            other => return Err(Error::UnknownNetwork(other.to_string())),
        })
    }
}

/// Uniform channel multiplier in `(0, 1]`.
pub type WidthScale = Ratio<u32>;

pub fn scale_channels(c: usize, s: WidthScale) -> usize {
    ((c * *s.numer() as usize) / *s.denom() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub kind: NetworkKind,
    pub layers: Vec<LayerSpec>,
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub width_scale: WidthScale,
}

/// Where a layer reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

impl NetworkGraph {
    /// Validates topology and shapes of a hand-built graph.
    pub fn from_layers(
        kind: NetworkKind,
        layers: Vec<LayerSpec>,
        input_channels: usize,
        input_size: (usize, usize),
        width_scale: WidthScale,
    ) -> Result<Self> {
        let g = NetworkGraph { kind, layers, input_channels, input_size, width_scale };
        g.shapes()?;
        Ok(g)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Resolved `(primary, skip)` sources for every layer.
    pub fn sources(&self) -> Result<Vec<(Source, Option<usize>)>> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let lookup = |name: &str| {
                seen.get(name).copied().ok_or_else(|| {
                    invalid(format!("layer {:?} reads {name:?}, which is not an earlier layer", l.name))
                })
            };
            let primary = match &l.input {
                Some(name) if name == "input" => Source::Input,
                Some(name) => Source::Layer(lookup(name)?),
                None if i == 0 => Source::Input,
                None => Source::Layer(i - 1),
            };
            let skip = match (&l.skip_source, l.kind) {
                (Some(name), LayerKind::Concat | LayerKind::Add) => Some(lookup(name)?),
                (None, LayerKind::Concat | LayerKind::Add) => {
                    return Err(invalid(format!("layer {:?} needs a skip source", l.name)))
                }
                (Some(_), _) => return Err(invalid(format!("layer {:?} cannot take a skip source", l.name))),
                (None, _) => None,
            };
            if seen.insert(&l.name, i).is_some() {
                return Err(invalid(format!("duplicate layer name {:?}", l.name)));
            }
            out.push((primary, skip));
        }
        Ok(out)
    }

    pub fn input_shape(&self) -> Shape3 {
        Shape3::new(self.input_size.0, self.input_size.1, self.input_channels)
    }

    /// Output shape of every layer, computed from the specs alone.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        if self.layers.is_empty() {
            return Err(invalid("graph has no layers"));
        }
        let sources = self.sources()?;
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        for (l, (primary, skip)) in self.layers.iter().zip(sources) {
            let x = match primary {
                Source::Input => self.input_shape(),
                Source::Layer(j) => shapes[j],
            };
            let bad = |why: String| Error::ShapeMismatch(format!("layer {:?}: {why}", l.name));
            if l.kernel.0 == 0 || l.kernel.1 == 0 || l.stride == 0 || l.dilation == 0 || l.channels_out == 0 {
                return Err(bad("kernel, stride, dilation and channels must be >= 1".into()));
            }
            let out = match l.kind {
                LayerKind::Conv => {
                    let span_h = l.dilation * (l.kernel.0 - 1) + 1;
                    let span_w = l.dilation * (l.kernel.1 - 1) + 1;
                    if x.h + 2 * l.padding < span_h || x.w + 2 * l.padding < span_w {
                        return Err(bad(format!("kernel larger than padded input {x}")));
                    }
                    let h = (x.h + 2 * l.padding - span_h) / l.stride + 1;
                    let w = (x.w + 2 * l.padding - span_w) / l.stride + 1;
                    Shape3::new(h, w, l.channels_out)
                }
                LayerKind::TransposedConv => {
                    let h = (x.h - 1) * l.stride + l.kernel.0;
                    let w = (x.w - 1) * l.stride + l.kernel.1;
                    if h < 2 * l.padding + 1 || w < 2 * l.padding + 1 {
                        return Err(bad("padding exceeds output".into()));
                    }
                    Shape3::new(h - 2 * l.padding, w - 2 * l.padding, l.channels_out)
                }
                LayerKind::MaxPool => {
                    if x.h % 2 != 0 || x.w % 2 != 0 {
                        return Err(bad(format!("2x2 pooling needs even sizes, got {x}")));
                    }
                    Shape3::new(x.h / 2, x.w / 2, x.c)
                }
                LayerKind::UpsampleNn => Shape3::new(x.h * 2, x.w * 2, x.c),
                LayerKind::Concat | LayerKind::Add => {
                    let y = shapes[skip.expect("resolved")];
                    if (x.h, x.w) != (y.h, y.w) {
                        return Err(bad(format!("spatial sizes differ: {x} vs {y}")));
                    }
                    if l.kind == LayerKind::Add {
                        if x.c != y.c {
                            return Err(bad(format!("channel counts differ: {x} vs {y}")));
                        }
                        x
                    } else {
                        Shape3::new(x.h, x.w, x.c + y.c)
                    }
                }
                LayerKind::Dense => Shape3::new(1, 1, l.channels_out),
                LayerKind::Softmax | LayerKind::Activation => x,
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape3> {
        Ok(*self.shapes()?.last().expect("non-empty"))
    }

    /// Input shape seen by each layer's primary operand.
    pub fn input_shapes(&self) -> Result<Vec<Shape3>> {
        let shapes = self.shapes()?;
        Ok(self
            .sources()?
            .iter()
            .map(|(p, _)| match p {
                Source::Input => self.input_shape(),
                Source::Layer(j) => shapes[*j],
            })
            .collect())
    }

    /// Parameter tensor shapes `(weight rows, weight cols)` for each layer
    /// that has parameters; biases have `cols` entries.
    pub fn param_shapes(&self) -> Result<Vec<Option<(usize, usize)>>> {
        let ins = self.input_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(ins)
            .map(|(l, x)| match l.kind {
                LayerKind::Conv => Some((l.kernel.0 * l.kernel.1 * x.c, l.channels_out)),
                LayerKind::TransposedConv => Some((x.c, l.kernel.0 * l.kernel.1 * l.channels_out)),
                LayerKind::Dense => Some((x.len(), l.channels_out)),
                _ => None,
            })
            .collect())
    }

    /// Weights plus biases.
    pub fn count_parameters(&self) -> Result<usize> {
        let layers = &self.layers;
        Ok(self
            .param_shapes()?
            .iter()
            .zip(layers)
            .filter_map(|(s, l)| s.map(|(r, c)| r * c + bias_len(l, c)))
            .sum())
    }

    /// Plain-text layer table, one row per layer.
    pub fn manifest(&self) -> Result<String> {
        let shapes = self.shapes()?;
        let params = self.param_shapes()?;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# network {} input {}x{}x{} width_scale {}",
            self.kind.as_str(),
            self.input_size.0,
            self.input_size.1,
            self.input_channels,
            self.width_scale
        );
        let _ = writeln!(s, "name\tkind\tkernel\tstride\tdilation\tactivation\tinput\tskip\toutput\tparams");
        for ((l, shape), p) in self.layers.iter().zip(&shapes).zip(&params) {
            let n = p.map(|(r, c)| r * c + bias_len(l, c)).unwrap_or(0);
            let _ = writeln!(
                s,
                "{}\t{:?}\t{}x{}\t{}\t{}\t{:?}\t{}\t{}\t{}\t{}",
                l.name,
                l.kind,
                l.kernel.0,
                l.kernel.1,
                l.stride,
                l.dilation,
                l.activation,
                l.input.as_deref().unwrap_or("-"),
                l.skip_source.as_deref().unwrap_or("-"),
                shape,
                n
            );
        }
        Ok(s)
    }
}

/// Transposed convolutions carry one bias per output channel, not per column.
fn bias_len(l: &LayerSpec, cols: usize) -> usize {
    match l.kind {
        LayerKind::TransposedConv => l.channels_out,
        _ => cols,
    }
}

/// Instantiates one of the named architectures.
pub fn build_network(
    kind: NetworkKind,
    input_channels: usize,
    input_size: (usize, usize),
    width_scale: WidthScale,
) -> Result<NetworkGraph> {
    if !(width_scale > Ratio::from_integer(0) && width_scale <= Ratio::from_integer(1)) {
        return Err(invalid(format!("width scale must lie in (0, 1], got {width_scale}")));
    }
    if input_channels == 0 {
        return Err(invalid("input_channels must be >= 1"));
    }
    let m = kind.size_multiple();
    let (h, w) = input_size;
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(invalid(format!("{} needs input sizes divisible by {m}, got {h}x{w}", kind.as_str())));
    }
    let ch = |c: usize| scale_channels(c, width_scale);
    let layers = match kind {
        NetworkKind::Fcn4s | NetworkKind::Fcn8s | NetworkKind::Fcn2s => fcn_layers(kind, ch),
        NetworkKind::UNetGen | NetworkKind::UNetStandalone => unet_layers(ch),
        NetworkKind::Discriminator => discriminator_layers(ch),
        NetworkKind::Custom => return Err(Error::UnknownNetwork("custom graphs use NetworkGraph::from_layers".into())),
    };
    NetworkGraph::from_layers(kind, layers, input_channels, input_size, width_scale)
}

/// VGG-16 trunk with the fully connected layers as convolutions, a 1×1
/// score layer and learned upsampling fused with pool skips.
fn fcn_layers(kind: NetworkKind, ch: impl Fn(usize) -> usize) -> Vec<LayerSpec> {
    use Activation::{Linear, Relu};
    let mut l = Vec::new();
    let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
    for (b, &(n, c)) in blocks.iter().enumerate() {
        for i in 1..=n {
            l.push(LayerSpec::conv(&format!("conv{}_{}", b + 1, i), 3, ch(c), 1, Relu));
        }
        l.push(LayerSpec::maxpool(&format!("pool{}", b + 1)));
    }
    l.push(LayerSpec::conv("fc6", 7, ch(4096), 1, Relu));
    l.push(LayerSpec::conv("fc7", 1, ch(4096), 1, Relu));
    l.push(LayerSpec::conv("score_fr", 1, 1, 1, Linear));

    // finest pool fused into the upsampling path
    let finest = match kind {
        NetworkKind::Fcn8s => 3,
        NetworkKind::Fcn4s => 2,
        _ => 1,
    };
    let mut prev = "score_fr".to_string();
    for pool in (finest..=4).rev() {
        let up = format!("upscore_to_pool{pool}");
        let score = format!("score_pool{pool}");
        let fuse = format!("fuse_pool{pool}");
        l.push(LayerSpec::upscore(&up, 1, 2).from(&prev));
        l.push(LayerSpec::conv(&score, 1, 1, 1, Linear).from(&format!("pool{pool}")));
        l.push(LayerSpec::add(&fuse, &score).from(&up));
        prev = fuse;
    }
    // fuse_poolN sits at stride 2^N
    l.push(LayerSpec::upscore("upscore_final", 1, 1 << finest).from(&prev));
    l
}

fn unet_layers(ch: impl Fn(usize) -> usize) -> Vec<LayerSpec> {
    use Activation::{LeakyRelu, Linear};
    let mut l = Vec::new();
    let enc: [(usize, usize); 5] = [(32, 3), (64, 2), (128, 1), (256, 1), (512, 1)];
    for (b, &(c, d)) in enc.iter().enumerate() {
        let n = b + 1;
        l.push(LayerSpec::conv(&format!("conv{n}_1"), 3, ch(c), d, LeakyRelu));
        l.push(LayerSpec::conv(&format!("conv{n}_2"), 3, ch(c), d, LeakyRelu));
        if n < 5 {
            l.push(LayerSpec::maxpool(&format!("pool{n}")));
        }
    }
    let dec: [(usize, usize, &str); 4] = [(256, 1, "conv4_2"), (128, 1, "conv3_2"), (64, 2, "conv2_2"), (32, 3, "conv1_2")];
    for (i, &(c, d, skip)) in dec.iter().enumerate() {
        let up = format!("upsampling{}", i + 1);
        let n = i + 6;
        l.push(LayerSpec::upsample_nn(&format!("{up}_nn")));
        l.push(LayerSpec::concat(&up, skip));
        l.push(LayerSpec::conv(&format!("conv{n}_1"), 3, ch(c), d, LeakyRelu));
        l.push(LayerSpec::conv(&format!("conv{n}_2"), 3, ch(c), d, LeakyRelu));
    }
    l.push(LayerSpec::conv("conv10", 1, 1, 1, Linear));
    l
}

fn discriminator_layers(ch: impl Fn(usize) -> usize) -> Vec<LayerSpec> {
    use Activation::{LeakyRelu, Linear};
    vec![
        LayerSpec::strided_conv("conv1", 3, ch(32), 2, LeakyRelu),
        LayerSpec::strided_conv("conv2", 3, ch(64), 2, LeakyRelu),
        LayerSpec::strided_conv("conv3", 3, ch(128), 2, LeakyRelu),
        LayerSpec::strided_conv("conv4", 3, ch(256), 1, LeakyRelu),
        LayerSpec::dense("dense", 2, Linear),
        LayerSpec::softmax("softmax"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> WidthScale {
        Ratio::from_integer(1)
    }

    fn shape_of(g: &NetworkGraph, name: &str) -> Shape3 {
        g.shapes().unwrap()[g.layer_index(name).unwrap()]
    }

    #[test]
    fn unet_generator_rows() {
        let g = build_network(NetworkKind::UNetGen, 2, (512, 512), one()).unwrap();
        assert_eq!(shape_of(&g, "conv5_2"), Shape3::new(32, 32, 512));
        assert_eq!(shape_of(&g, "upsampling1"), Shape3::new(64, 64, 768));
        assert_eq!(g.output_shape().unwrap(), Shape3::new(512, 512, 1));
    }

    #[test]
    fn discriminator_rows() {
        let g = build_network(NetworkKind::Discriminator, 3, (512, 512), one()).unwrap();
        assert_eq!(shape_of(&g, "conv4"), Shape3::new(64, 64, 256));
        assert_eq!(g.output_shape().unwrap(), Shape3::new(1, 1, 2));
    }

    #[test]
    fn fcn_variants_share_trunk_and_differ_in_skips() {
        let skips = |k| {
            let g = build_network(k, 1, (512, 512), one()).unwrap();
            assert_eq!(g.output_shape().unwrap(), Shape3::new(512, 512, 1));
            let trunk: Vec<_> = g.layers.iter().take_while(|l| l.name != "score_fr").cloned().collect();
            let pools: Vec<String> = g.layers.iter().filter(|l| l.name.starts_with("score_pool")).map(|l| l.name.clone()).collect();
            (trunk, pools)
        };
        let (t4, p4) = skips(NetworkKind::Fcn4s);
        let (t8, p8) = skips(NetworkKind::Fcn8s);
        let (t2, p2) = skips(NetworkKind::Fcn2s);
        assert_eq!(t4, t8);
        assert_eq!(t4, t2);
        assert_eq!(p8, ["score_pool4", "score_pool3"]);
        assert_eq!(p4, ["score_pool4", "score_pool3", "score_pool2"]);
        assert_eq!(p2, ["score_pool4", "score_pool3", "score_pool2", "score_pool1"]);
    }

    #[test]
    fn width_scale_quarters_channels() {
        let full = build_network(NetworkKind::UNetGen, 2, (64, 64), one()).unwrap();
        let quarter = build_network(NetworkKind::UNetGen, 2, (64, 64), Ratio::new(1, 4)).unwrap();
        for ((a, b), l) in full.shapes().unwrap().iter().zip(quarter.shapes().unwrap()).zip(&full.layers) {
            assert_eq!((a.h, a.w), (b.h, b.w));
            if l.name != "conv10" {
                assert_eq!(a.c, 4 * b.c, "{}", l.name);
            }
        }
    }

    #[test]
    fn parameter_counts() {
        let conv = |s| {
            NetworkGraph::from_layers(
                NetworkKind::Custom,
                vec![LayerSpec::conv("c", 3, scale_channels(32, s), 1, Activation::Relu)],
                1,
                (8, 8),
                s,
            )
            .unwrap()
        };
        assert_eq!(conv(one()).count_parameters().unwrap(), 320);
        assert_eq!(conv(Ratio::new(1, 2)).count_parameters().unwrap(), 160);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_network(NetworkKind::Fcn4s, 1, (48, 64), one()).is_err());
        assert!(build_network(NetworkKind::UNetGen, 2, (24, 24), one()).is_err());
        assert!(build_network(NetworkKind::UNetGen, 2, (64, 64), Ratio::new(3, 2)).is_err());
        assert!(matches!("vgg".parse::<NetworkKind>(), Err(Error::UnknownNetwork(_))));
        let cyclic = vec![LayerSpec::conv("a", 3, 4, 1, Activation::Relu).from("b"), LayerSpec::conv("b", 3, 4, 1, Activation::Relu)];
        assert!(NetworkGraph::from_layers(NetworkKind::Custom, cyclic, 1, (8, 8), one()).is_err());
    }

    #[test]
    fn manifest_lists_every_layer() {
        let g = build_network(NetworkKind::Discriminator, 3, (64, 64), Ratio::new(1, 4)).unwrap();
        let m = g.manifest().unwrap();
        assert_eq!(m.lines().count(), g.layers.len() + 2);
        assert!(m.contains("conv4\tConv\t3x3\t1\t1\tLeakyRelu\t-\t-\t8x8x64"));
    }
}

//! Parameterized building blocks and the builder that registers their
//! parameters and topology lines.

use std::fmt;

use edgeseg_tensor::{ConvSpec, Graph, ParamId, ParamStore, Shape5, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result, Scalar};

/// One line of the topology descriptor.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerDesc {
    Conv { name: String, spec: ConvSpec, cin: usize, cout: usize, bias: bool },
    Norm { name: String, channels: usize },
    MaxPool { name: String, kernel: usize, stride: [usize; 3], padding: usize },
}

impl LayerDesc {
    pub fn name(&self) -> &str {
        match self {
            LayerDesc::Conv { name, .. } | LayerDesc::Norm { name, .. } | LayerDesc::MaxPool { name, .. } => name,
        }
    }
}

impl fmt::Display for LayerDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDesc::Conv { name, spec, cin, cout, bias } => write!(
                f,
                "{name} conv k={:?} s={:?} d={:?} p={:?} {cin}->{cout} bias={bias}",
                spec.kernel, spec.stride, spec.dilation, spec.padding
            ),
            LayerDesc::Norm { name, channels } => write!(f, "{name} norm c={channels}"),
            LayerDesc::MaxPool { name, kernel, stride, padding } => {
                write!(f, "{name} maxpool k={kernel} s={stride:?} p={padding}")
            }
        }
    }
}

/// Registers parameters with fan-in scaled normal initialization and records
/// the matching topology lines.
pub struct LayerBuilder<'a, T: Scalar> {
    params: &'a mut ParamStore<T>,
    layers: &'a mut Vec<LayerDesc>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> LayerBuilder<'a, T> {
    pub fn new(params: &'a mut ParamStore<T>, layers: &'a mut Vec<LayerDesc>, seed: u64) -> Self {
        LayerBuilder { params, layers, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, spec: ConvSpec, bias: bool) -> ConvLayer {
        let std = (2.0 / (cin * spec.taps()) as f64).sqrt();
        let [kx, ky, kz] = spec.kernel;
        let rng = &mut self.rng;
        let w = Tensor::from_fn(Shape5::new(cout, cin, kx, ky, kz), |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(std * z)
        });
        let w = self.params.add(format!("{name}.w"), w);
        let b = bias.then(|| self.params.add(format!("{name}.b"), Tensor::zeros(Shape5::new(1, cout, 1, 1, 1))));
        self.layers.push(LayerDesc::Conv { name: name.to_string(), spec, cin, cout, bias });
        ConvLayer { w, b, spec }
    }

    /// `zero_scale` starts the affine scale at 0 instead of 1.
    pub fn norm(&mut self, name: &str, channels: usize, zero_scale: bool) -> NormLayer {
        let s = Shape5::new(1, channels, 1, 1, 1);
        let gamma = if zero_scale { Tensor::zeros(s) } else { Tensor::full(s, T::one()) };
        let gamma = self.params.add(format!("{name}.gamma"), gamma);
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(s));
        self.layers.push(LayerDesc::Norm { name: name.to_string(), channels });
        NormLayer { gamma, beta }
    }

    pub fn max_pool(&mut self, name: &str, kernel: usize, stride: [usize; 3], padding: usize) -> MaxPoolLayer {
        self.layers.push(LayerDesc::MaxPool { name: name.to_string(), kernel, stride, padding });
        MaxPoolLayer { kernel, stride, padding }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl ConvLayer {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.conv(x, self.w, self.b, self.spec)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormLayer {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.norm(x, self.gamma, self.beta)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaxPoolLayer {
    pub kernel: usize,
    pub stride: [usize; 3],
    pub padding: usize,
}

/// Residual bottleneck: 1×1×1 reduce, 3×3×3 (strided or dilated), 1×1×1 expand.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub conv1: ConvLayer,
    pub norm1: NormLayer,
    pub conv2: ConvLayer,
    pub norm2: NormLayer,
    pub conv3: ConvLayer,
    pub norm3: NormLayer,
    pub shortcut: Option<(ConvLayer, NormLayer)>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        b: &mut LayerBuilder<'_, T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        stride: [usize; 3],
        dilation: usize,
    ) -> Self {
        let conv1 = b.conv(&format!("{name}.conv1"), cin, mid, ConvSpec::pointwise(), false);
        let norm1 = b.norm(&format!("{name}.norm1"), mid, false);
        let conv2 =
            b.conv(&format!("{name}.conv2"), mid, mid, ConvSpec::dilated([3; 3], dilation).with_stride(stride), false);
        let norm2 = b.norm(&format!("{name}.norm2"), mid, false);
        let conv3 = b.conv(&format!("{name}.conv3"), mid, cout, ConvSpec::pointwise(), false);
        let norm3 = b.norm(&format!("{name}.norm3"), cout, true);
        let shortcut = (cin != cout || stride != [1; 3]).then(|| {
            let spec = ConvSpec::pointwise().with_stride(stride);
            (b.conv(&format!("{name}.down"), cin, cout, spec, false), b.norm(&format!("{name}.down_norm"), cout, false))
        });
        Bottleneck { conv1, norm1, conv2, norm2, conv3, norm3, shortcut }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.conv1.apply(g, x);
        let h = self.norm1.apply(g, h);
        let h = g.relu(h);
        let h = self.conv2.apply(g, h);
        let h = self.norm2.apply(g, h);
        let h = g.relu(h);
        let h = self.conv3.apply(g, h);
        let h = self.norm3.apply(g, h);
        let s = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.apply(g, x);
                norm.apply(g, s)
            }
            None => x,
        };
        let y = g.add(h, s);
        g.relu(y)
    }
}

/// Residual refinement block: pointwise projection, then an in-plane 3×3×1
/// and a between-slice 1×1×3 convolution on the residual branch.
#[derive(Clone, Debug)]
pub struct Rrb {
    pub proj: ConvLayer,
    pub conv1: ConvLayer,
    pub norm1: NormLayer,
    pub conv2: ConvLayer,
    pub norm2: NormLayer,
}

impl Rrb {
    pub fn build<T: Scalar>(b: &mut LayerBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        Rrb {
            proj: b.conv(&format!("{name}.proj"), cin, cout, ConvSpec::pointwise(), true),
            conv1: b.conv(&format!("{name}.conv1"), cout, cout, ConvSpec::same([3, 3, 1]), false),
            norm1: b.norm(&format!("{name}.norm1"), cout, false),
            conv2: b.conv(&format!("{name}.conv2"), cout, cout, ConvSpec::same([1, 1, 3]), false),
            norm2: b.norm(&format!("{name}.norm2"), cout, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let xp = self.proj.apply(g, x);
        let f = self.conv1.apply(g, xp);
        let f = self.norm1.apply(g, f);
        let f = g.relu(f);
        let f = self.conv2.apply(g, f);
        let f = self.norm2.apply(g, f);
        let y = g.add(xp, f);
        g.relu(y)
    }
}

pub const PAM_KERNELS: [[usize; 3]; 3] = [[3, 3, 3], [5, 5, 3], [7, 7, 3]];

/// Pyramid attention: multi-kernel convolutions of the encoder feature,
/// weighted by a sigmoid map of the upsampled decoder feature, plus a
/// pointwise projection of the encoder feature.
#[derive(Clone, Debug)]
pub struct Pam {
    pub pyramid: [ConvLayer; 3],
    pub attention: ConvLayer,
    pub proj: ConvLayer,
}

impl Pam {
    pub fn build<T: Scalar>(
        b: &mut LayerBuilder<'_, T>,
        name: &str,
        enc_channels: usize,
        dec_channels: usize,
        cout: usize,
    ) -> Self {
        let pyramid = PAM_KERNELS
            .map(|k| b.conv(&format!("{name}.pyr{}{}{}", k[0], k[1], k[2]), enc_channels, cout, ConvSpec::same(k), true));
        Pam {
            pyramid,
            attention: b.conv(&format!("{name}.att"), dec_channels, cout, ConvSpec::pointwise(), true),
            proj: b.conv(&format!("{name}.proj"), enc_channels, cout, ConvSpec::pointwise(), true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, enc: Var, dec_up: Var) -> Result<Var> {
        let (es, ds) = (g.shape(enc), g.shape(dec_up));
        if es.spatial() != ds.spatial() || es.n != ds.n {
            return Err(Error::Contract(format!("PAM inputs differ in shape: encoder {es}, decoder {ds}")));
        }
        let p0 = self.pyramid[0].apply(g, enc);
        let p1 = self.pyramid[1].apply(g, enc);
        let p2 = self.pyramid[2].apply(g, enc);
        let p = g.add(p0, p1);
        let p = g.add(p, p2);
        let a = self.attention.apply(g, dec_up);
        let a = g.sigmoid(a);
        let e = self.proj.apply(g, enc);
        let weighted = g.mul(a, p);
        Ok(g.add(e, weighted))
    }
}

/// Single-channel edge head of one decoder level.
#[derive(Clone, Debug)]
pub struct EdgeHead {
    pub conv: ConvLayer,
}

impl EdgeHead {
    pub fn build<T: Scalar>(b: &mut LayerBuilder<'_, T>, name: &str, channels: usize) -> Self {
        EdgeHead { conv: b.conv(name, channels, 1, ConvSpec::pointwise(), true) }
    }

    /// Returns `(edge, gated)` where `edge = sigmoid(conv(f))` and
    /// `gated = f ⊙ (1 + edge)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> (Var, Var) {
        let e = self.conv.apply(g, f);
        let e = g.sigmoid(e);
        (e, g.gate(f, e))
    }
}

//! The segmentation network: dilated residual encoder, attention decoder with
//! per-level edge heads, and the simple decoder used for encoder pretraining.

mod checkpoint;
mod layers;

use std::fmt;
use std::str::FromStr;

use edgeseg_tensor::{ConvSpec, Graph, ParamStore, Shape5, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edge::LEVEL_FACTORS;
use crate::{Error, Result, Scalar};

pub use checkpoint::{load_encoder_checkpoint, Checkpoint, CheckpointMeta, LoadReport, TensorEntry};
pub use layers::{
    Bottleneck, ConvLayer, EdgeHead, LayerBuilder, LayerDesc, MaxPoolLayer, NormLayer, Pam, Rrb, PAM_KERNELS,
};

/// Required divisibility of the input spatial shape.
pub const INPUT_MULTIPLE: [usize; 3] = [8, 8, 4];

pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Encoder plus the simple decoder, trained with cross-entropy.
    Pretrain,
    /// Encoder plus the attention decoder with edge heads.
    Full,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Pretrain => "pretrain",
            Mode::Full => "full",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "full" => Ok(Mode::Full),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected pretrain or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Scales every channel width; 1.0 is the reference layout.
    pub width_multiplier: f64,
    /// Bottleneck counts of the four encoder stages.
    pub blocks: [usize; 4],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { width_multiplier: 1.0, blocks: [3, 4, 23, 3] }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!("network.width_multiplier must be > 0, got {}", self.width_multiplier)));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config(format!("network.blocks must all be >= 1, got {:?}", self.blocks)));
        }
        Ok(())
    }

    /// Scaled channel count, never below 1.
    pub fn width(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

/// Stage geometry: (bottleneck width, stride of the first block, dilation).
const STAGES: [(usize, [usize; 3], usize); 4] = [(64, [1; 3], 1), (128, [2; 3], 1), (256, [1; 3], 2), (512, [1; 3], 4)];
const EXPANSION: usize = 4;

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvLayer,
    pub stem_norm: NormLayer,
    pub pool: MaxPoolLayer,
    pub stages: Vec<Vec<Bottleneck>>,
}

/// Encoder feature taps used by the decoders.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTaps {
    /// Stem output, 64 channels at stride (2,2,1).
    pub t0: Var,
    /// First stage output, 256 channels at stride (4,4,2).
    pub e1: Var,
    /// Last stage output, 2048 channels at stride (8,8,4).
    pub e4: Var,
}

impl Encoder {
    fn build<T: Scalar>(b: &mut LayerBuilder<'_, T>, cfg: &NetworkConfig) -> Self {
        let stem_ch = cfg.width(64);
        let stem = b.conv(
            "encoder.stem",
            1,
            stem_ch,
            ConvSpec { kernel: [7; 3], stride: [2, 2, 1], dilation: [1; 3], padding: [3; 3] },
            false,
        );
        let stem_norm = b.norm("encoder.stem_norm", stem_ch, false);
        let pool = b.max_pool("encoder.pool", 3, [2; 3], 1);
        let mut cin = stem_ch;
        let mut stages = Vec::new();
        for (si, &(planes, stride, dilation)) in STAGES.iter().enumerate() {
            let (mid, cout) = (cfg.width(planes), cfg.width(planes * EXPANSION));
            let blocks = (0..cfg.blocks[si])
                .map(|bi| {
                    let stride = if bi == 0 { stride } else { [1; 3] };
                    let block =
                        Bottleneck::build(b, &format!("encoder.block{}.{bi}", si + 1), cin, mid, cout, stride, dilation);
                    cin = cout;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        Encoder { stem, stem_norm, pool, stages }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> EncoderTaps {
        let h = self.stem.apply(g, x);
        let h = self.stem_norm.apply(g, h);
        let t0 = g.relu(h);
        let mut h = g.max_pool(t0, self.pool.kernel, self.pool.stride, self.pool.padding);
        let mut e1 = h;
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(g, h);
            }
            if si == 0 {
                e1 = h;
            }
        }
        EncoderTaps { t0, e1, e4: h }
    }
}

/// Attention decoder with three edge-supervised levels.
#[derive(Clone, Debug)]
pub struct FullDecoder {
    pub reduce: ConvLayer,
    pub rrb0: Rrb,
    pub pam1: Pam,
    pub rrb1: Rrb,
    pub pam2: Pam,
    pub rrb2: Rrb,
    pub rrb3: Rrb,
    pub edge_heads: [EdgeHead; 3],
    pub classifier: ConvLayer,
}

impl FullDecoder {
    fn build<T: Scalar>(b: &mut LayerBuilder<'_, T>, cfg: &NetworkConfig) -> Self {
        let (t0_ch, e1_ch, e4_ch) = (cfg.width(64), cfg.width(64 * EXPANSION), cfg.width(512 * EXPANSION));
        let [c0, c1, c2, c3] = [256, 128, 64, 32].map(|c| cfg.width(c));
        let reduce = b.conv("decoder.reduce", e4_ch, c0, ConvSpec::pointwise(), true);
        let rrb0 = Rrb::build(b, "decoder.rrb0", c0, c0);
        let pam1 = Pam::build(b, "decoder.pam1", e1_ch, c0, c1);
        let rrb1 = Rrb::build(b, "decoder.rrb1", c1 + c0, c1);
        let edge1 = EdgeHead::build(b, "decoder.edge1", c1);
        let pam2 = Pam::build(b, "decoder.pam2", t0_ch, c1, c2);
        let rrb2 = Rrb::build(b, "decoder.rrb2", c2 + c1, c2);
        let edge2 = EdgeHead::build(b, "decoder.edge2", c2);
        let rrb3 = Rrb::build(b, "decoder.rrb3", c2, c3);
        let edge3 = EdgeHead::build(b, "decoder.edge3", c3);
        let classifier = b.conv("decoder.classifier", c3 + 3, 1, ConvSpec::pointwise(), true);
        FullDecoder { reduce, rrb0, pam1, rrb1, pam2, rrb2, rrb3, edge_heads: [edge1, edge2, edge3], classifier }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, taps: EncoderTaps) -> Result<OutputVars> {
        let d0 = self.reduce.apply(g, taps.e4);
        let d0 = self.rrb0.forward(g, d0);

        let up = g.upsample(d0, [2, 2, 2]);
        let p = self.pam1.forward(g, taps.e1, up)?;
        let d1 = g.concat(&[p, up]);
        let d1 = self.rrb1.forward(g, d1);
        let (edge1, d1) = self.edge_heads[0].forward(g, d1);

        let up = g.upsample(d1, [2, 2, 2]);
        let p = self.pam2.forward(g, taps.t0, up)?;
        let d2 = g.concat(&[p, up]);
        let d2 = self.rrb2.forward(g, d2);
        let (edge2, d2) = self.edge_heads[1].forward(g, d2);

        let up = g.upsample(d2, [2, 2, 1]);
        let d3 = self.rrb3.forward(g, up);
        let (edge3, d3) = self.edge_heads[2].forward(g, d3);

        let e1_full = g.upsample(edge1, LEVEL_FACTORS[0]);
        let e2_full = g.upsample(edge2, LEVEL_FACTORS[1]);
        let fused = g.concat(&[d3, e1_full, e2_full, edge3]);
        let logits = self.classifier.apply(g, fused);
        let prob = g.sigmoid(logits);
        Ok(OutputVars { prob, edges: Some([edge1, edge2, edge3]) })
    }
}

/// Upsample, convolve, normalize: three stages back to input resolution.
#[derive(Clone, Debug)]
pub struct SimpleDecoder {
    pub stages: [(ConvLayer, NormLayer); 3],
    pub out: ConvLayer,
}

const SIMPLE_UPSAMPLE: [[usize; 3]; 3] = [[2, 2, 2], [2, 2, 2], [2, 2, 1]];

impl SimpleDecoder {
    fn build<T: Scalar>(b: &mut LayerBuilder<'_, T>, cfg: &NetworkConfig) -> Self {
        let widths = [32, 16, 8].map(|c| cfg.width(c));
        let mut cin = cfg.width(512 * EXPANSION);
        let stages = std::array::from_fn(|i| {
            let conv = b.conv(&format!("simple.stage{i}.conv"), cin, widths[i], ConvSpec::same([3; 3]), false);
            let norm = b.norm(&format!("simple.stage{i}.norm"), widths[i], false);
            cin = widths[i];
            (conv, norm)
        });
        let out = b.conv("simple.out", cin, 1, ConvSpec::pointwise(), true);
        SimpleDecoder { stages, out }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, e4: Var) -> OutputVars {
        let mut h = e4;
        for ((conv, norm), factor) in self.stages.iter().zip(SIMPLE_UPSAMPLE) {
            h = g.upsample(h, factor);
            h = conv.apply(g, h);
            h = norm.apply(g, h);
            h = g.relu(h);
        }
        let logits = self.out.apply(g, h);
        OutputVars { prob: g.sigmoid(logits), edges: None }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Full(FullDecoder),
    Pretrain(SimpleDecoder),
}

/// Graph handles of the network outputs.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub prob: Var,
    /// Edge predictions, coarsest first; absent in pretrain mode.
    pub edges: Option<[Var; 3]>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub prob: Tensor<T>,
    pub edges: Option<[Tensor<T>; 3]>,
}

/// Parameters plus the fixed topology that consumes them.
///
/// Forward passes borrow the parameters immutably, so one model may serve
/// concurrent inference forwards from several threads.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: NetworkConfig,
    mode: Mode,
    params: ParamStore<T>,
    layers: Vec<LayerDesc>,
    encoder: Encoder,
    head: Head,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &NetworkConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let (encoder, head) = {
            let mut b = LayerBuilder::new(&mut params, &mut layers, seed);
            let encoder = Encoder::build(&mut b, config);
            let head = match mode {
                Mode::Full => Head::Full(FullDecoder::build(&mut b, config)),
                Mode::Pretrain => Head::Pretrain(SimpleDecoder::build(&mut b, config)),
            };
            (encoder, head)
        };
        Ok(Model { config: config.clone(), mode, params, layers, encoder, head })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Text descriptor of the whole topology; identical descriptors mean
    /// interchangeable parameter sets.
    pub fn topology(&self) -> String {
        let mut s = format!("mode {}\n", self.mode);
        for l in &self.layers {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }

    pub fn topology_hash(&self) -> String {
        hex_digest(self.topology().as_bytes())
    }

    /// Hash over the encoder layers only, shared by both modes.
    pub fn encoder_hash(&self) -> String {
        let mut s = String::new();
        for l in self.layers.iter().filter(|l| l.name().starts_with(ENCODER_PREFIX)) {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        hex_digest(s.as_bytes())
    }

    pub fn check_input_shape(shape: Shape5) -> Result<()> {
        if shape.c != 1 {
            return Err(Error::Shape(format!("network input must have 1 channel, got {shape}")));
        }
        let sp = shape.spatial();
        if (0..3).any(|a| sp[a] == 0 || sp[a] % INPUT_MULTIPLE[a] != 0) {
            return Err(Error::Shape(format!(
                "input spatial shape {sp:?} must be a nonzero multiple of {INPUT_MULTIPLE:?}"
            )));
        }
        Ok(())
    }

    /// Shapes of `(prob, edge maps)` for an input shape.
    pub fn output_shapes(input: Shape5) -> Result<(Shape5, [Shape5; 3])> {
        Self::check_input_shape(input)?;
        let edges = LEVEL_FACTORS.map(|f| input.with_spatial(std::array::from_fn(|a| input.spatial()[a] / f[a])));
        Ok((input, edges))
    }

    /// Records the forward pass on `g`, which must have been created over
    /// [`Model::params`].
    pub fn forward_graph<'p>(&'p self, g: &mut Graph<'p, T>, x: Var) -> Result<OutputVars> {
        Self::check_input_shape(g.shape(x))?;
        let taps = self.encoder.forward(g, x);
        match &self.head {
            Head::Full(d) => d.forward(g, taps),
            Head::Pretrain(d) => Ok(d.forward(g, taps.e4)),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new(&self.params);
        let x = g.input(input.clone());
        let out = self.forward_graph(&mut g, x)?;
        Ok(ForwardOutput {
            prob: g.value(out.prob).clone(),
            edges: out.edges.map(|e| e.map(|v| g.value(v).clone())),
        })
    }

    /// Adds independent `N(0, sigma²)` noise to every parameter.
    pub fn perturb(&mut self, sigma: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap_or_else(|_| panic!("invalid sigma {sigma}"));
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            for v in self.params.get_mut(id).data_mut() {
                *v += T::of(normal.sample(&mut rng));
            }
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use edgeseg_tensor::Gradients;

    fn small() -> NetworkConfig {
        NetworkConfig { width_multiplier: 0.125, blocks: [1, 1, 1, 1] }
    }

    #[test]
    fn encoder_taps_follow_the_stride_arithmetic() {
        let model = Model::<f32>::new(&small(), Mode::Full, 0).unwrap();
        let mut g = Graph::new(model.params());
        let x = g.input(Tensor::zeros(Shape5::new(1, 1, 96, 96, 32)));
        let taps = model.encoder().forward(&mut g, x);
        assert_eq!(g.shape(taps.t0), Shape5::new(1, 8, 48, 48, 32));
        assert_eq!(g.shape(taps.e1), Shape5::new(1, 32, 24, 24, 16));
        assert_eq!(g.shape(taps.e4), Shape5::new(1, 256, 12, 12, 8));
    }

    #[test]
    fn dilation_adds_no_parameters() {
        let mut p1 = ParamStore::<f32>::new();
        let mut p2 = ParamStore::<f32>::new();
        let (mut l1, mut l2) = (Vec::new(), Vec::new());
        Bottleneck::build(&mut LayerBuilder::new(&mut p1, &mut l1, 0), "a", 16, 4, 16, [1; 3], 1);
        Bottleneck::build(&mut LayerBuilder::new(&mut p2, &mut l2, 0), "a", 16, 4, 16, [1; 3], 2);
        assert_eq!(p1.numel(), p2.numel());
        assert_ne!(l1, l2);
    }

    #[test]
    fn block3_dilated_conv_spans_five_voxels() {
        let model = Model::<f32>::new(&small(), Mode::Full, 0).unwrap();
        let spec = model.encoder().stages[2][0].conv2.spec;
        assert_eq!(spec.receptive_extent(), [5; 3]);
        assert_eq!(model.encoder().stages[3][0].conv2.spec.receptive_extent(), [9; 3]);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let model = Model::<f32>::new(&small(), Mode::Full, 0).unwrap();
        for s in [[100, 96, 32], [96, 96, 30], [0, 8, 4]] {
            let err = model.forward(&Tensor::zeros(Shape5::new(1, 1, s[0], s[1], s[2]))).unwrap_err();
            assert!(matches!(err, Error::Shape(_)), "{s:?}");
        }
    }

    #[test]
    fn parameters_are_finite_and_named_uniquely() {
        let model = Model::<f64>::new(&small(), Mode::Full, 3).unwrap();
        for (_, p) in model.params().iter() {
            assert!(p.value.all_finite(), "{}", p.name);
        }
        assert!(model.params().iter().all(|(_, p)| p.name.starts_with("encoder.") || p.name.starts_with("decoder.")));
    }

    #[test]
    fn topology_hash_tracks_architecture_only() {
        let a = Model::<f32>::new(&small(), Mode::Full, 0).unwrap();
        let b = Model::<f32>::new(&small(), Mode::Full, 99).unwrap();
        let c = Model::<f32>::new(&small(), Mode::Pretrain, 0).unwrap();
        let d = Model::<f32>::new(&NetworkConfig { blocks: [1, 2, 1, 1], ..small() }, Mode::Full, 0).unwrap();
        assert_eq!(a.topology_hash(), b.topology_hash());
        assert_ne!(a.topology_hash(), c.topology_hash());
        assert_eq!(a.encoder_hash(), c.encoder_hash());
        assert_ne!(a.encoder_hash(), d.encoder_hash());
    }

    #[test]
    fn rrb_at_init_is_relu_of_projection() {
        let mut params = ParamStore::<f64>::new();
        let mut layers = Vec::new();
        let rrb = Rrb::build(&mut LayerBuilder::new(&mut params, &mut layers, 5), "r", 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let input = Tensor::from_fn(Shape5::new(1, 3, 6, 5, 4), |_| normal.sample(&mut rng));
        let mut g = Graph::new(&params);
        let x = g.input(input);
        let y = rrb.forward(&mut g, x);
        let xp = rrb.proj.apply(&mut g, x);
        assert_eq!(g.shape(y), Shape5::new(1, 4, 6, 5, 4));
        let expect = g.value(xp).map(|v| v.max(0.0));
        assert_eq!(g.value(y), &expect);
    }

    #[test]
    fn rrb_branch_receptive_field_is_three_by_three_by_three() {
        let spec1 = ConvSpec::same([3, 3, 1]);
        let spec2 = ConvSpec::same([1, 1, 3]);
        let ext: Vec<usize> =
            (0..3).map(|a| spec1.receptive_extent()[a] + spec2.receptive_extent()[a] - 1).collect();
        assert_eq!(ext, vec![3, 3, 3]);
    }

    fn toy_pam(params: &mut ParamStore<f64>) -> Pam {
        let mut layers = Vec::new();
        Pam::build(&mut LayerBuilder::new(params, &mut layers, 2), "p", 1, 2, 1)
    }

    fn set(params: &mut ParamStore<f64>, id: edgeseg_tensor::ParamId, f: impl Fn(usize) -> f64) {
        let t = params.get_mut(id);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = f(i);
        }
    }

    #[test]
    fn pam_with_closed_attention_returns_projection() {
        let mut params = ParamStore::new();
        let pam = toy_pam(&mut params);
        set(&mut params, pam.attention.w, |_| 0.0);
        // sigmoid(-inf) is exactly zero in floating point
        set(&mut params, pam.attention.b.unwrap(), |_| -1e4);
        let enc = Tensor::from_fn(Shape5::new(1, 1, 5, 5, 3), |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new(&params);
        let e = g.input(enc);
        let d = g.input(Tensor::full(Shape5::new(1, 2, 5, 5, 3), 1.0));
        let out = pam.forward(&mut g, e, d).unwrap();
        let proj = pam.proj.apply(&mut g, e);
        assert_eq!(g.value(out), g.value(proj));
    }

    #[test]
    fn pam_with_open_attention_and_identity_pyramid_adds_three_times_input() {
        let mut params = ParamStore::new();
        let pam = toy_pam(&mut params);
        for (conv, k) in pam.pyramid.iter().zip(PAM_KERNELS) {
            let centre = (k[0] / 2) + k[0] * ((k[1] / 2) + k[1] * (k[2] / 2));
            set(&mut params, conv.w, |i| if i == centre { 1.0 } else { 0.0 });
        }
        set(&mut params, pam.attention.w, |_| 0.0);
        set(&mut params, pam.attention.b.unwrap(), |_| 1e4);
        set(&mut params, pam.proj.w, |_| 2.0);
        set(&mut params, pam.proj.b.unwrap(), |_| 0.5);
        let enc = Tensor::from_fn(Shape5::new(1, 1, 5, 5, 3), |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new(&params);
        let e = g.input(enc.clone());
        let d = g.input(Tensor::zeros(Shape5::new(1, 2, 5, 5, 3)));
        let out = pam.forward(&mut g, e, d).unwrap();
        for (o, x) in g.value(out).data().iter().zip(enc.data()) {
            let expect = 2.0 * x + 0.5 + 3.0 * x;
            assert!((o - expect).abs() < 1e-12, "{o} vs {expect}");
        }
    }

    #[test]
    fn pam_rejects_spatial_mismatch() {
        let mut params = ParamStore::new();
        let pam = toy_pam(&mut params);
        let mut g = Graph::new(&params);
        let e = g.input(Tensor::zeros(Shape5::new(1, 1, 5, 5, 3)));
        let d = g.input(Tensor::zeros(Shape5::new(1, 2, 4, 5, 3)));
        assert!(matches!(pam.forward(&mut g, e, d), Err(Error::Contract(_))));
    }

    #[test]
    fn edge_head_gates_between_identity_and_double() {
        let mut params = ParamStore::<f64>::new();
        let mut layers = Vec::new();
        let head = EdgeHead::build(&mut LayerBuilder::new(&mut params, &mut layers, 0), "e", 2);
        set(&mut params, head.conv.w, |_| 0.0);
        let f = Tensor::from_fn(Shape5::new(1, 2, 3, 3, 2), |i| i as f64 - 7.0);
        for (bias, factor) in [(-1e4, 1.0), (1e4, 2.0)] {
            set(&mut params, head.conv.b.unwrap(), |_| bias);
            let mut g = Graph::new(&params);
            let x = g.input(f.clone());
            let (e, gated) = head.forward(&mut g, x);
            assert!(g.value(e).data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(g.value(gated), &f.map(|v| v * factor));
        }
    }

    #[test]
    fn forward_is_deterministic_and_in_range() {
        let model = Model::<f32>::new(&small(), Mode::Full, 7).unwrap();
        let input = Tensor::from_fn(Shape5::new(1, 1, 16, 16, 8), |i| ((i * 31) % 17) as f32 / 17.0 - 0.5);
        let a = model.forward(&input).unwrap();
        let b = model.forward(&input).unwrap();
        assert_eq!(a.prob, b.prob);
        let (_, edge_shapes) = Model::<f32>::output_shapes(input.shape()).unwrap();
        for (e, s) in a.edges.as_ref().unwrap().iter().zip(edge_shapes) {
            assert_eq!(e.shape(), s);
            assert!(e.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(a.prob.shape(), input.shape());
    }

    #[test]
    fn simple_decoder_restores_input_resolution() {
        let model = Model::<f32>::new(&small(), Mode::Pretrain, 0).unwrap();
        let out = model.forward(&Tensor::zeros(Shape5::new(1, 1, 16, 16, 8))).unwrap();
        assert_eq!(out.prob.shape(), Shape5::new(1, 1, 16, 16, 8));
        assert!(out.edges.is_none());
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        let mut model = Model::<f64>::new(&small(), Mode::Full, 1).unwrap();
        model.perturb(0.1, 2);
        let input = Tensor::from_fn(Shape5::new(1, 1, 16, 16, 8), |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let mut g = Graph::new(model.params());
        let x = g.input(input);
        let out = model.forward_graph(&mut g, x).unwrap();
        let mut seeds = vec![(out.prob, Tensor::full(g.shape(out.prob), 1.0))];
        for e in out.edges.unwrap() {
            seeds.push((e, Tensor::full(g.shape(e), 1.0)));
        }
        let grads: Gradients<f64> = g.backward(&seeds);
        for (id, grad) in grads.iter() {
            let grad = grad.unwrap_or_else(|| panic!("no gradient for {}", model.params().name(id)));
            assert!(grad.max_abs() > 0.0, "zero gradient for {}", model.params().name(id));
        }
    }
}

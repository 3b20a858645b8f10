//! The enhanced audited model: a tappable convolutional classifier plus a
//! MINT head that reads two of its intermediate activation maps.
//!
//! Parameters are addressed by *slot*. Backbone convolutions take slots in
//! depth order (weight, bias), the classifier follows, and the MINT head is
//! appended after that, so one [`Grads`] store covers the whole model.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{
    dropout_backward, dropout_forward, gap_backward, gap_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward,
    Conv3x3, ConvCache, Grads, Linear, Mode, Param,
};
use crate::tensor::{MapShape, Maps, Real};

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub layers_per_block: usize,
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_true")]
    pub pool_after_block: bool,
}

impl ConvBlockSpec {
    pub fn new(layers_per_block: usize, channels: usize) -> Self {
        Self { layers_per_block, channels, kernel: 3, stride: 1, pool_after_block: true }
    }
}

/// Input image shape, `H×W×C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn map_shape(&self) -> MapShape {
        MapShape::new(self.channels, self.height, self.width)
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub blocks: Vec<ConvBlockSpec>,
    pub num_classes: usize,
    pub input_shape: InputShape,
}

impl BackboneSpec {
    /// Three blocks of two layers with 16, 32 and 64 channels.
    pub fn desk(input_shape: InputShape, num_classes: usize) -> Self {
        Self { blocks: vec![ConvBlockSpec::new(2, 16), ConvBlockSpec::new(2, 32), ConvBlockSpec::new(2, 64)], num_classes, input_shape }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 3 {
            return Err(Error::config("backbone.blocks", format!("need at least 3 blocks, got {}", self.blocks.len())));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let field = format!("backbone.blocks[{i}]");
            if b.layers_per_block < 2 {
                return Err(Error::config(field, "need at least 2 layers per block"));
            }
            if b.channels == 0 {
                return Err(Error::config(field, "channel count must be positive"));
            }
            if b.kernel != 3 || b.stride != 1 {
                return Err(Error::config(field, "only 3×3 kernels with stride 1 are supported"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("backbone.num_classes", "need at least 2 classes"));
        }
        let s = self.input_shape;
        if s.height == 0 || s.width == 0 || s.channels == 0 {
            return Err(Error::config("backbone.input_shape", "dimensions must be positive"));
        }
        let last = self.block_input_shapes().last().copied().expect("≥3 blocks");
        if last.height == 0 || last.width == 0 {
            return Err(Error::config("backbone.input_shape", "input too small for the number of pooling stages"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.layers_per_block).sum()
    }

    /// Flat depth index of `(block, layer)`.
    pub fn depth_of(&self, tap: TapPoint) -> usize {
        self.blocks[..tap.block].iter().map(|b| b.layers_per_block).sum::<usize>() + tap.layer
    }

    /// Spatial shape entering each block (after the previous block's pooling).
    pub fn block_input_shapes(&self) -> Vec<MapShape> {
        let mut shape = self.input_shape.map_shape();
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            out.push(shape);
            shape = MapShape::new(b.channels, shape.height, shape.width);
            if b.pool_after_block {
                shape = MapShape::new(b.channels, shape.height / 2, shape.width / 2);
            }
        }
        out
    }

    /// Output shape of layer `(block, layer)` for a single sample.
    pub fn layer_output_shape(&self, tap: TapPoint) -> MapShape {
        let inp = self.block_input_shapes()[tap.block];
        MapShape::new(self.blocks[tap.block].channels, inp.height, inp.width)
    }

    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

/// Where the two activation maps are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    Entry,
    Middle,
    Output,
}

impl Setup {
    pub const ALL: [Setup; 3] = [Setup::Entry, Setup::Middle, Setup::Output];

    pub fn name(&self) -> &'static str {
        match self {
            Setup::Entry => "entry",
            Setup::Middle => "middle",
            Setup::Output => "output",
        }
    }
}

impl std::str::FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "entry" => Ok(Setup::Entry),
            "middle" => Ok(Setup::Middle),
            "output" => Ok(Setup::Output),
            other => Err(Error::config("setup", format!("unknown setup `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TapPoint {
    pub block: usize,
    pub layer: usize,
}

impl TapPoint {
    pub fn new(block: usize, layer: usize) -> Self {
        Self { block, layer }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapConfig {
    pub setup: Setup,
    /// Ordered by depth.
    pub taps: [TapPoint; 2],
    /// Fingerprint of the backbone spec the taps were resolved against.
    pub spec_fingerprint: String,
}

impl TapConfig {
    pub fn deepest(&self) -> TapPoint {
        self.taps[1]
    }
}

/// Resolves the two tap points of a setup.
///
/// Entry and output take the last two layers of the first and last block.
/// Middle takes the last layer of blocks `⌊(B−1)/3⌋` and `⌈2(B−1)/3⌉`, which
/// for `B ≥ 4` are distinct interior blocks; with three blocks it uses the
/// last layers of blocks 0 and 1.
pub fn resolve_taps(spec: &BackboneSpec, setup: Setup) -> Result<TapConfig> {
    let nb = spec.blocks.len();
    if nb < 3 {
        return Err(Error::Resolution(format!("need at least 3 blocks, spec has {nb}")));
    }
    let last_two = |block: usize| -> Result<[TapPoint; 2]> {
        let layers = spec.blocks[block].layers_per_block;
        if layers < 2 {
            return Err(Error::Resolution(format!("block {block} has {layers} layer(s); two are required")));
        }
        Ok([TapPoint::new(block, layers - 2), TapPoint::new(block, layers - 1)])
    };
    let taps = match setup {
        Setup::Entry => last_two(0)?,
        Setup::Output => last_two(nb - 1)?,
        Setup::Middle => {
            let (a, b) = if nb == 3 {
                (0, 1)
            } else {
                let span = nb - 1;
                (span / 3, (2 * span).div_ceil(3))
            };
            debug_assert!(a < b && b < nb);
            for blk in [a, b] {
                if spec.blocks[blk].layers_per_block == 0 {
                    return Err(Error::Resolution(format!("block {blk} has no layers")));
                }
            }
            [TapPoint::new(a, spec.blocks[a].layers_per_block - 1), TapPoint::new(b, spec.blocks[b].layers_per_block - 1)]
        }
    };
    Ok(TapConfig { setup, taps, spec_fingerprint: spec.fingerprint() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MintHeadSpec {
    pub per_path_conv_channels: Vec<usize>,
    pub dropout: f64,
    pub hidden_dim: usize,
}

impl MintHeadSpec {
    /// One 256-channel convolution per path, dropout 0.4.
    pub fn e1() -> Self {
        Self { per_path_conv_channels: vec![256], dropout: 0.4, hidden_dim: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_path_conv_channels.is_empty() || self.per_path_conv_channels.contains(&0) {
            return Err(Error::config("mint_head.per_path_conv_channels", "need at least one conv layer with positive width"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("mint_head.dropout", "must lie in [0, 1)"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("mint_head.hidden_dim", "must be positive"));
        }
        Ok(())
    }

    /// Length of the concatenated pooled vector.
    pub fn concat_dim(&self) -> usize {
        2 * self.per_path_conv_channels.last().copied().unwrap_or(0)
    }
}

impl Default for MintHeadSpec {
    fn default() -> Self {
        Self::e1()
    }
}

/// The auxiliary auditable data: two batched activation maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AadPair<T> {
    pub map_a: Maps<T>,
    pub map_b: Maps<T>,
}

impl<T: Real> AadPair<T> {
    pub fn batch(&self) -> usize {
        self.map_a.batch
    }

    pub fn select(&self, range: Range<usize>) -> Self {
        Self { map_a: self.map_a.select(range.start, range.end), map_b: self.map_b.select(range.start, range.end) }
    }
}

/// Class logits, row-major `batch × num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub num_classes: usize,
    pub values: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn batch(&self) -> usize {
        self.values.len() / self.num_classes.max(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    fn from_feature_major(m: &Maps<T>) -> Self {
        let (k, n) = (m.shape.numel(), m.batch);
        let mut values = vec![T::zero(); k * n];
        for c in 0..k {
            for i in 0..n {
                values[i * k + c] = m.data[c * n + i];
            }
        }
        Self { num_classes: k, values }
    }

    fn to_feature_major(&self) -> Maps<T> {
        let (k, n) = (self.num_classes, self.batch());
        let mut data = vec![T::zero(); k * n];
        for i in 0..n {
            for c in 0..k {
                data[c * n + i] = self.values[i * k + c];
            }
        }
        Maps { shape: MapShape::new(k, 1, 1), batch: n, data }
    }
}

/// One step of the backbone's flattened op sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BackOp {
    Conv { block: usize, layer: usize },
    Pool { block: usize },
    Gap,
    Classifier,
}

#[derive(Debug, Clone)]
enum OpCache<T> {
    Conv(ConvCache<T>),
    Pool(Vec<u32>),
    Gap,
    Linear,
}

#[derive(Debug, Clone)]
struct OpRecord<T> {
    input: Maps<T>,
    output: Maps<T>,
    cache: OpCache<T>,
}

/// Recorded activations of a run over a contiguous op range.
#[derive(Debug, Clone)]
pub struct BackboneTrace<T> {
    start: usize,
    records: Vec<OpRecord<T>>,
}

/// The audited model: convolution blocks, global average pooling and a
/// linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub spec: BackboneSpec,
    pub convs: Vec<Vec<Conv3x3<T>>>,
    pub classifier: Linear<T>,
}

impl<T: Real> Backbone<T> {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slot = 0;
        let mut in_c = spec.input_shape.channels;
        let mut convs = Vec::with_capacity(spec.blocks.len());
        for (b, block) in spec.blocks.iter().enumerate() {
            let mut layers = Vec::with_capacity(block.layers_per_block);
            for l in 0..block.layers_per_block {
                layers.push(Conv3x3::new(&format!("backbone.block{b}.conv{l}"), in_c, block.channels, slot, &mut rng));
                slot += 2;
                in_c = block.channels;
            }
            convs.push(layers);
        }
        let classifier = Linear::new("backbone.classifier", in_c, spec.num_classes, slot, &mut rng);
        Ok(Self { spec, convs, classifier })
    }

    pub fn num_slots(&self) -> usize {
        2 * self.spec.num_layers() + 2
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::with_capacity(self.num_slots());
        for conv in self.convs.iter().flatten() {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::with_capacity(self.num_slots());
        for conv in self.convs.iter_mut().flatten() {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    fn ops(&self) -> Vec<BackOp> {
        let mut ops = Vec::new();
        for (b, block) in self.spec.blocks.iter().enumerate() {
            for l in 0..block.layers_per_block {
                ops.push(BackOp::Conv { block: b, layer: l });
            }
            if block.pool_after_block {
                ops.push(BackOp::Pool { block: b });
            }
        }
        ops.push(BackOp::Gap);
        ops.push(BackOp::Classifier);
        ops
    }

    fn op_index_of(&self, tap: TapPoint) -> usize {
        self.ops().iter().position(|op| *op == BackOp::Conv { block: tap.block, layer: tap.layer }).expect("tap validated against spec")
    }

    fn check_input(&self, images: &Maps<T>) -> Result<()> {
        let want = self.spec.input_shape.map_shape();
        if images.shape != want {
            return Err(Error::Dimension(format!("expected input maps {want:?}, got {:?}", images.shape)));
        }
        Ok(())
    }

    /// Runs ops `range`, optionally recording caches, and captures the
    /// outputs of the ops listed in `capture`.
    fn run(&self, range: Range<usize>, x: Maps<T>, record: bool, capture: &[usize]) -> (Maps<T>, Option<BackboneTrace<T>>, Vec<Maps<T>>) {
        let ops = self.ops();
        let mut trace = record.then(|| BackboneTrace { start: range.start, records: Vec::with_capacity(range.len()) });
        let mut captured = Vec::with_capacity(capture.len());
        let mut cur = x;
        for idx in range {
            let (out, cache) = match ops[idx] {
                BackOp::Conv { block, layer } => {
                    let (y, c) = self.convs[block][layer].forward(&cur);
                    (y, OpCache::Conv(c))
                }
                BackOp::Pool { .. } => {
                    let (y, arg) = maxpool2_forward(&cur);
                    (y, OpCache::Pool(arg))
                }
                BackOp::Gap => (gap_forward(&cur), OpCache::Gap),
                BackOp::Classifier => (self.classifier.forward(&cur), OpCache::Linear),
            };
            if capture.contains(&idx) {
                captured.push(out.clone());
            }
            match trace.as_mut() {
                Some(t) => {
                    let input = std::mem::replace(&mut cur, out.clone());
                    t.records.push(OpRecord { input, output: out, cache });
                }
                None => cur = out,
            }
        }
        (cur, trace, captured)
    }

    /// Backward over a recorded trace. `dy` is the gradient w.r.t. the last
    /// op's output (if any); `inject` adds extra gradients at the outputs of
    /// specific ops.
    fn backprop(
        &self,
        trace: &BackboneTrace<T>,
        dy: Option<Maps<T>>,
        inject: Vec<(usize, Maps<T>)>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Maps<T>> {
        let ops = self.ops();
        let mut grad = dy;
        for (pos, rec) in trace.records.iter().enumerate().rev() {
            let idx = trace.start + pos;
            for (at, g) in &inject {
                if *at == idx {
                    match grad.as_mut() {
                        Some(cur) => cur.add_assign(g),
                        None => grad = Some(g.clone()),
                    }
                }
            }
            let Some(g) = grad.take() else { continue };
            let first = pos == 0;
            let want_input = !first || need_input_grad;
            grad = match (&ops[idx], &rec.cache) {
                (BackOp::Conv { block, layer }, OpCache::Conv(c)) => {
                    let needs = want_input && !(idx == 0);
                    self.convs[*block][*layer].backward(c, &rec.output, &g, grads, needs)
                }
                (BackOp::Pool { .. }, OpCache::Pool(arg)) => {
                    want_input.then(|| maxpool2_backward(rec.input.shape, rec.input.batch, arg, &g))
                }
                (BackOp::Gap, OpCache::Gap) => want_input.then(|| gap_backward(rec.input.shape, &g)),
                (BackOp::Classifier, OpCache::Linear) => self.classifier.backward(&rec.input, &g, grads, want_input),
                _ => unreachable!("op/cache mismatch"),
            };
        }
        grad
    }

    /// Class logits for a batch of images.
    pub fn forward(&self, images: &Maps<T>) -> Result<Logits<T>> {
        self.check_input(images)?;
        let n_ops = self.ops().len();
        let (out, _, _) = self.run(0..n_ops, images.clone(), false, &[]);
        Ok(Logits::from_feature_major(&out))
    }

    /// Logits plus the outputs of every convolution layer, in depth order.
    /// Test instrumentation for tap equivalence.
    pub fn forward_instrumented(&self, images: &Maps<T>) -> Result<(Logits<T>, Vec<Maps<T>>)> {
        self.check_input(images)?;
        let ops = self.ops();
        let conv_idx: Vec<usize> = ops.iter().enumerate().filter(|(_, o)| matches!(o, BackOp::Conv { .. })).map(|(i, _)| i).collect();
        let (out, _, captured) = self.run(0..ops.len(), images.clone(), false, &conv_idx);
        Ok((Logits::from_feature_major(&out), captured))
    }

    /// Forward + backward of a supervised step: `dlogits` receives the
    /// gradient of the loss w.r.t. the logits and must return nothing else.
    pub fn forward_backward(
        &self,
        images: &Maps<T>,
        dlogits: impl FnOnce(&Logits<T>) -> Result<Logits<T>>,
        grads: &mut Grads<T>,
    ) -> Result<Logits<T>> {
        self.check_input(images)?;
        let n_ops = self.ops().len();
        let (out, trace, _) = self.run(0..n_ops, images.clone(), true, &[]);
        let logits = Logits::from_feature_major(&out);
        let dl = dlogits(&logits)?;
        self.backprop(trace.as_ref().expect("recorded"), Some(dl.to_feature_major()), Vec::new(), grads, false);
        Ok(logits)
    }

    /// Both tapped activation maps from a single forward over the shared prefix.
    pub fn extract_aad(&self, images: &Maps<T>, taps: &TapConfig) -> Result<AadPair<T>> {
        self.check_taps(taps)?;
        self.check_input(images)?;
        let ia = self.op_index_of(taps.taps[0]);
        let ib = self.op_index_of(taps.taps[1]);
        let (_, _, mut cap) = self.run(0..ib + 1, images.clone(), false, &[ia, ib]);
        let map_b = cap.pop().expect("captured");
        let map_a = cap.pop().expect("captured");
        Ok(AadPair { map_a, map_b })
    }

    pub fn check_taps(&self, taps: &TapConfig) -> Result<()> {
        if taps.spec_fingerprint != self.spec.fingerprint() {
            return Err(Error::Resolution("tap config was resolved against a different backbone spec".into()));
        }
        for t in taps.taps {
            if t.block >= self.spec.blocks.len() || t.layer >= self.spec.blocks[t.block].layers_per_block {
                return Err(Error::Resolution(format!("tap {t:?} does not exist in this backbone")));
            }
        }
        if self.spec.depth_of(taps.taps[0]) >= self.spec.depth_of(taps.taps[1]) {
            return Err(Error::Resolution("taps must be distinct and ordered by depth".into()));
        }
        Ok(())
    }

    pub fn aad_shapes(&self, taps: &TapConfig) -> [MapShape; 2] {
        [self.spec.layer_output_shape(taps.taps[0]), self.spec.layer_output_shape(taps.taps[1])]
    }
}

/// Saved state of a MINT head forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace<T> {
    path_inputs: [Maps<T>; 2],
    path_records: [Vec<(ConvCache<T>, Maps<T>)>; 2],
    pooled_shapes: [MapShape; 2],
    concat: Maps<T>,
    hidden_relu: Maps<T>,
    mask: Option<Vec<T>>,
    dropped: Maps<T>,
    pub probs: Vec<T>,
}

/// The MINT model: per-path convolutions, global pooling, concatenation and
/// two linear layers with dropout between, ending in a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct MintHead<T> {
    pub spec: MintHeadSpec,
    pub input_shapes: [MapShape; 2],
    pub paths: [Vec<Conv3x3<T>>; 2],
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub first_slot: usize,
}

impl<T: Real> MintHead<T> {
    pub fn new(spec: MintHeadSpec, input_shapes: [MapShape; 2], first_slot: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slot = first_slot;
        let mut build_path = |p: usize, in_shape: MapShape, rng: &mut ChaCha8Rng| {
            let mut in_c = in_shape.channels;
            let mut convs = Vec::new();
            for (i, &c) in spec.per_path_conv_channels.iter().enumerate() {
                convs.push(Conv3x3::new(&format!("mint.path{p}.conv{i}"), in_c, c, slot, rng));
                slot += 2;
                in_c = c;
            }
            convs
        };
        let pa = build_path(0, input_shapes[0], &mut rng);
        let pb = build_path(1, input_shapes[1], &mut rng);
        let fc1 = Linear::new("mint.fc1", spec.concat_dim(), spec.hidden_dim, slot, &mut rng);
        let fc2 = Linear::new("mint.fc2", spec.hidden_dim, 1, slot + 2, &mut rng);
        Ok(Self { spec, input_shapes, paths: [pa, pb], fc1, fc2, first_slot })
    }

    pub fn num_slots(&self) -> usize {
        4 * self.spec.per_path_conv_channels.len() + 4
    }

    pub fn slots(&self) -> Range<usize> {
        self.first_slot..self.first_slot + self.num_slots()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for conv in self.paths.iter().flatten() {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        out.extend([&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for conv in self.paths.iter_mut().flatten() {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }

    fn check(&self, aad: &AadPair<T>) -> Result<()> {
        let got = [aad.map_a.shape, aad.map_b.shape];
        if got != self.input_shapes {
            return Err(Error::Dimension(format!("MINT head built for {:?}, got AAD shapes {got:?}", self.input_shapes)));
        }
        if aad.map_a.batch != aad.map_b.batch {
            return Err(Error::Dimension("AAD maps carry different batch sizes".into()));
        }
        Ok(())
    }

    /// Membership probabilities, each in `(0, 1)`.
    pub fn forward<R: Rng>(&self, aad: &AadPair<T>, mode: Mode, rng: &mut R) -> Result<Vec<T>> {
        Ok(self.forward_traced(aad, mode, rng)?.probs)
    }

    pub fn forward_traced<R: Rng>(&self, aad: &AadPair<T>, mode: Mode, rng: &mut R) -> Result<HeadTrace<T>> {
        self.check(aad)?;
        let mut pooled = Vec::with_capacity(2);
        let mut records: [Vec<(ConvCache<T>, Maps<T>)>; 2] = [Vec::new(), Vec::new()];
        let mut pooled_shapes = [MapShape::new(0, 0, 0); 2];
        for (p, input) in [&aad.map_a, &aad.map_b].into_iter().enumerate() {
            let mut cur = input.clone();
            for conv in &self.paths[p] {
                let (y, cache) = conv.forward(&cur);
                records[p].push((cache, y.clone()));
                cur = y;
            }
            pooled_shapes[p] = cur.shape;
            pooled.push(gap_forward(&cur));
        }
        let concat = Maps::concat_features(&pooled[0], &pooled[1]);
        let hidden = self.fc1.forward(&concat);
        let hidden_relu = relu_forward(&hidden);
        let (dropped, mask) = dropout_forward(&hidden_relu, self.spec.dropout, mode, rng);
        let logit = self.fc2.forward(&dropped);
        let probs = logit.data.iter().map(|&z| sigmoid(z)).collect();
        Ok(HeadTrace {
            path_inputs: [aad.map_a.clone(), aad.map_b.clone()],
            path_records: records,
            pooled_shapes,
            concat,
            hidden_relu,
            mask,
            dropped,
            probs,
        })
    }

    /// Backward from `dprobs` (gradient w.r.t. each probability). Returns
    /// the gradients w.r.t. both AAD maps when `need_input_grad`.
    pub fn backward(&self, trace: &HeadTrace<T>, dprobs: &[T], grads: &mut Grads<T>, need_input_grad: bool) -> Option<AadPair<T>> {
        let n = trace.probs.len();
        let dz: Vec<T> = trace.probs.iter().zip(dprobs).map(|(&p, &g)| g * p * (T::one() - p)).collect();
        let dz = Maps { shape: MapShape::new(1, 1, 1), batch: n, data: dz };
        let d_dropped = self.fc2.backward(&trace.dropped, &dz, grads, true).expect("input grad");
        let d_relu = dropout_backward(trace.mask.as_deref(), &d_dropped);
        let d_hidden = relu_backward(&trace.hidden_relu, &d_relu);
        let d_concat = self.fc1.backward(&trace.concat, &d_hidden, grads, true).expect("input grad");
        let ca = trace.pooled_shapes[0].channels;
        let split = [d_concat.data[..ca * n].to_vec(), d_concat.data[ca * n..].to_vec()];
        let mut out = Vec::with_capacity(2);
        for (p, g) in split.into_iter().enumerate() {
            let g = Maps { shape: MapShape::new(trace.pooled_shapes[p].channels, 1, 1), batch: n, data: g };
            let mut cur = gap_backward(trace.pooled_shapes[p], &g);
            let convs = &self.paths[p];
            for (i, conv) in convs.iter().enumerate().rev() {
                let (cache, y) = &trace.path_records[p][i];
                let want = i > 0 || need_input_grad;
                match conv.backward(cache, y, &cur, grads, want) {
                    Some(dx) => cur = dx,
                    None => break,
                }
            }
            if need_input_grad {
                debug_assert_eq!(cur.shape, trace.path_inputs[p].shape);
                out.push(cur);
            }
        }
        if !need_input_grad {
            return None;
        }
        let map_b = out.pop().expect("two paths");
        let map_a = out.pop().expect("two paths");
        Some(AadPair { map_a, map_b })
    }
}

impl<T: Real> Maps<T> {
    /// Stacks two `[f, N]` feature matrices into `[fa + fb, N]`.
    fn concat_features(a: &Maps<T>, b: &Maps<T>) -> Maps<T> {
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Maps { shape: MapShape::new(a.shape.numel() + b.shape.numel(), 1, 1), batch: a.batch, data }
    }
}

/// Logistic function kept strictly inside `(0, 1)` at the element type's
/// precision.
pub fn sigmoid<T: Real>(z: T) -> T {
    let p = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    let eps = T::epsilon();
    p.max(eps).min(T::one() - eps)
}

/// Named parameter groups of an enhanced model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub shared: Vec<usize>,
    pub audited_only: Vec<usize>,
    pub mint: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Shared,
    AuditedOnly,
    Mint,
}

/// Audited model plus MINT head, with parameters `w⁺ = w ∪ θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedModel<T> {
    pub backbone: Backbone<T>,
    pub taps: TapConfig,
    pub head: MintHead<T>,
}

/// Saved state of a routed joint forward pass.
#[derive(Debug, Clone)]
pub struct JointForward<T> {
    shared: BackboneTrace<T>,
    audited: Option<BackboneTrace<T>>,
    head: Option<HeadTrace<T>>,
    audited_range: Range<usize>,
    mint_range: Range<usize>,
    batch: usize,
    pub logits: Option<Logits<T>>,
    pub probs: Option<Vec<T>>,
}

impl<T: Real> EnhancedModel<T> {
    pub fn new(spec: BackboneSpec, setup: Setup, head_spec: MintHeadSpec, seed: u64) -> Result<Self> {
        let taps = resolve_taps(&spec, setup)?;
        let backbone = Backbone::new(spec, seed)?;
        let shapes = backbone.aad_shapes(&taps);
        let head = MintHead::new(head_spec, shapes, backbone.num_slots(), seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(Self { backbone, taps, head })
    }

    /// Attaches a fresh head to an existing backbone.
    pub fn with_backbone(backbone: Backbone<T>, taps: TapConfig, head_spec: MintHeadSpec, seed: u64) -> Result<Self> {
        backbone.check_taps(&taps)?;
        let shapes = backbone.aad_shapes(&taps);
        let head = MintHead::new(head_spec, shapes, backbone.num_slots(), seed)?;
        Ok(Self { backbone, taps, head })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads::zeros_like(&self.params())
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn forward_audited(&self, images: &Maps<T>) -> Result<Logits<T>> {
        self.backbone.forward(images)
    }

    pub fn extract_aad(&self, images: &Maps<T>, taps: &TapConfig) -> Result<AadPair<T>> {
        self.backbone.extract_aad(images, taps)
    }

    pub fn forward_mint<R: Rng>(&self, aad: &AadPair<T>, mode: Mode, rng: &mut R) -> Result<Vec<T>> {
        self.head.forward(aad, mode, rng)
    }

    /// Evaluation-mode membership probabilities straight from images.
    pub fn membership_probabilities(&self, images: &Maps<T>) -> Result<Vec<T>> {
        let aad = self.extract_aad(images, &self.taps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward_mint(&aad, Mode::Eval, &mut rng)
    }

    pub fn partition_parameters(&self) -> ParamPartition {
        let deepest = self.backbone.spec.depth_of(self.taps.deepest());
        let n_conv = self.backbone.spec.num_layers();
        let mut shared = Vec::new();
        let mut audited_only = Vec::new();
        for depth in 0..n_conv {
            let slots = [2 * depth, 2 * depth + 1];
            if depth <= deepest {
                shared.extend(slots);
            } else {
                audited_only.extend(slots);
            }
        }
        audited_only.extend([2 * n_conv, 2 * n_conv + 1]);
        ParamPartition { shared, audited_only, mint: self.head.slots().collect() }
    }

    pub fn group_of(&self, slot: usize) -> ParamGroup {
        let p = self.partition_parameters();
        if p.shared.contains(&slot) {
            ParamGroup::Shared
        } else if p.audited_only.contains(&slot) {
            ParamGroup::AuditedOnly
        } else {
            ParamGroup::Mint
        }
    }

    /// One traversal of the shared layers for the whole batch; samples in
    /// `audited_range` continue through the audited-only layers and samples
    /// in `mint_range` are routed through the MINT head.
    pub fn joint_forward<R: Rng>(
        &self,
        images: &Maps<T>,
        audited_range: Range<usize>,
        mint_range: Range<usize>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<JointForward<T>> {
        self.backbone.check_input(images)?;
        let batch = images.batch;
        if audited_range.end > batch || mint_range.end > batch {
            return Err(Error::Dimension(format!("routing ranges exceed batch of {batch}")));
        }
        let bb = &self.backbone;
        let ia = bb.op_index_of(self.taps.taps[0]);
        let ib = bb.op_index_of(self.taps.taps[1]);
        let n_ops = bb.ops().len();
        let (shared_out, shared, _) = bb.run(0..ib + 1, images.clone(), true, &[]);
        let shared = shared.expect("recorded");

        let (audited, logits) = if audited_range.is_empty() {
            (None, None)
        } else {
            let x = shared_out.select(audited_range.start, audited_range.end);
            let (out, trace, _) = bb.run(ib + 1..n_ops, x, true, &[]);
            (trace, Some(Logits::from_feature_major(&out)))
        };

        let (head, probs) = if mint_range.is_empty() {
            (None, None)
        } else {
            let map_a = shared.records[ia].output.select(mint_range.start, mint_range.end);
            let map_b = shared_out.select(mint_range.start, mint_range.end);
            let trace = self.head.forward_traced(&AadPair { map_a, map_b }, mode, rng)?;
            let probs = trace.probs.clone();
            (Some(trace), Some(probs))
        };

        Ok(JointForward { shared, audited, head, audited_range, mint_range, batch, logits, probs })
    }

    /// Backward of a routed pass. `dlogits` is row-major over the audited
    /// samples, `dprobs` covers the MINT samples.
    pub fn joint_backward(&self, fwd: &JointForward<T>, dlogits: Option<&Logits<T>>, dprobs: Option<&[T]>, grads: &mut Grads<T>) {
        let bb = &self.backbone;
        let ia = bb.op_index_of(self.taps.taps[0]);
        let ib = bb.op_index_of(self.taps.taps[1]);
        let tap_shape_b = fwd.shared.records[ib].output.shape;
        let tap_shape_a = fwd.shared.records[ia].output.shape;

        let mut d_deep: Option<Maps<T>> = None;
        if let (Some(trace), Some(dl)) = (fwd.audited.as_ref(), dlogits) {
            if let Some(dx) = bb.backprop(trace, Some(dl.to_feature_major()), Vec::new(), grads, true) {
                let mut full = Maps::zeros(tap_shape_b, fwd.batch);
                full.add_into(fwd.audited_range.start, &dx);
                d_deep = Some(full);
            }
        }
        let mut inject = Vec::new();
        if let (Some(trace), Some(dp)) = (fwd.head.as_ref(), dprobs) {
            let d_aad = self.head.backward(trace, dp, grads, true).expect("input grad");
            let mut fa = Maps::zeros(tap_shape_a, fwd.batch);
            fa.add_into(fwd.mint_range.start, &d_aad.map_a);
            inject.push((ia, fa));
            let mut fb = Maps::zeros(tap_shape_b, fwd.batch);
            fb.add_into(fwd.mint_range.start, &d_aad.map_b);
            match d_deep.as_mut() {
                Some(d) => d.add_assign(&fb),
                None => d_deep = Some(fb),
            }
        }
        if d_deep.is_none() && inject.is_empty() {
            return;
        }
        bb.backprop(&fwd.shared, d_deep, inject, grads, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_3x2() -> BackboneSpec {
        BackboneSpec::desk(InputShape::new(28, 28, 1), 10)
    }

    fn spec_blocks(n: usize) -> BackboneSpec {
        BackboneSpec { blocks: (0..n).map(|_| ConvBlockSpec::new(2, 4)).collect(), num_classes: 3, input_shape: InputShape::new(64, 64, 1) }
    }

    #[test]
    fn entry_and_output_take_last_two_layers() {
        let s = spec_3x2();
        assert_eq!(resolve_taps(&s, Setup::Entry).unwrap().taps, [TapPoint::new(0, 0), TapPoint::new(0, 1)]);
        assert_eq!(resolve_taps(&s, Setup::Output).unwrap().taps, [TapPoint::new(2, 0), TapPoint::new(2, 1)]);
        assert_eq!(resolve_taps(&s, Setup::Middle).unwrap().taps, [TapPoint::new(0, 1), TapPoint::new(1, 1)]);
    }

    #[test]
    fn middle_taps_are_interior_and_distinct_for_larger_backbones() {
        for n in 4..=9 {
            let t = resolve_taps(&spec_blocks(n), Setup::Middle).unwrap();
            let (a, b) = (t.taps[0].block, t.taps[1].block);
            assert!(0 < a && a < b && b < n - 1, "{n} blocks -> {a},{b}");
            assert_eq!(t.taps[0].layer, 1);
        }
    }

    #[test]
    fn single_layer_block_fails_resolution() {
        let mut s = spec_3x2();
        s.blocks[0].layers_per_block = 1;
        assert!(matches!(resolve_taps(&s, Setup::Entry), Err(Error::Resolution(_))));
        s.blocks[0].layers_per_block = 2;
        s.blocks[2].layers_per_block = 1;
        assert!(matches!(resolve_taps(&s, Setup::Output), Err(Error::Resolution(_))));
    }

    #[test]
    fn stale_taps_are_rejected() {
        let a = spec_3x2();
        let mut b = spec_3x2();
        b.blocks[1].channels = 8;
        let taps = resolve_taps(&b, Setup::Entry).unwrap();
        let bb = Backbone::<f32>::new(a, 1).unwrap();
        let x = Maps::zeros(MapShape::new(1, 28, 28), 1);
        assert!(matches!(bb.extract_aad(&x, &taps), Err(Error::Resolution(_))));
    }

    #[test]
    fn e1_head_concatenates_to_512() {
        let shapes = [MapShape::new(64, 7, 7), MapShape::new(64, 7, 7)];
        let head = MintHead::<f32>::new(MintHeadSpec::e1(), shapes, 0, 1).unwrap();
        assert_eq!(head.fc1.in_features, 512);
        assert_eq!(head.spec.concat_dim(), 512);
    }

    #[test]
    fn partition_tracks_deepest_tap() {
        let m = EnhancedModel::<f32>::new(spec_3x2(), Setup::Entry, MintHeadSpec::e1(), 0).unwrap();
        let p = m.partition_parameters();
        assert_eq!(p.shared, vec![0, 1, 2, 3]);
        let m = EnhancedModel::<f32>::new(spec_3x2(), Setup::Output, MintHeadSpec::e1(), 0).unwrap();
        let p = m.partition_parameters();
        assert_eq!(p.shared, (0..12).collect::<Vec<_>>());
        assert_eq!(p.audited_only, vec![12, 13]);
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        for z in [-1e6f32, -50.0, 0.0, 50.0, 1e6] {
            let p = sigmoid(z);
            assert!(p > 0.0 && p < 1.0, "{z} -> {p}");
        }
    }
}

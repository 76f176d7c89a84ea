//! Synthetic frozen backbone, trainable linear modules and a mean-pooled
//! classification head, with exact manual backpropagation.
//!
//! The backbone maps token ids to per-token hidden rows through a seeded
//! embedding table, a sinusoidal position signal and `num_frozen_layers`
//! mixing layers of the form
//!
//! ```text
//! h'_i = tanh(h_i · M + ctx(seq(i)) · C + b)
//! ```
//!
//! where `M` is a random orthonormal matrix, `ctx` is the mean of the
//! sequence's non-pad rows and `b` is a shared bias whose scale
//! (`anisotropy`) makes embeddings of different samples point in broadly
//! the same direction. Pad rows never enter `ctx` or the pooled output, so
//! a sequence's non-pad rows do not depend on how the batch was padded.
//!
//! Trainable modules sit between stages: a module with `position = l` sees
//! the hidden rows after `l` frozen layers. Every module computes
//! `Y = X·W + b` and feeds `X + act(Y)·U` (or `X + Y` when it has no up
//! projection) to the next stage.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng;

pub const PAD_TOKEN: usize = 0;

fn default_anisotropy() -> f64 {
    1.5
}

fn default_context_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_frozen_layers: usize,
    pub seed: u64,
    /// Scale of the shared per-layer bias.
    #[serde(default = "default_anisotropy")]
    pub anisotropy: f64,
    /// Scale of the sequence-context mixing term.
    #[serde(default = "default_context_weight")]
    pub context_weight: f64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 2 {
            return Err(Error::validation("hidden_dim must be at least 2"));
        }
        if self.vocab_size < 2 {
            return Err(Error::validation("vocab_size must be at least 2"));
        }
        if !(self.anisotropy.is_finite() && self.anisotropy >= 0.0) {
            return Err(Error::validation("anisotropy must be finite and non-negative"));
        }
        if !(self.context_weight.is_finite() && self.context_weight >= 0.0) {
            return Err(Error::validation("context_weight must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer {
    pub mix: Matrix,
    pub context: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    embedding: Matrix,
    layers: Vec<FrozenLayer>,
}

impl FrozenBackbone {
    pub fn build(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let n = config.hidden_dim;
        let mut erng = rng::stream(config.seed, &[rng::TAG_EMBED]);
        let embedding = Matrix::random_normal(config.vocab_size, n, 1.0, &mut erng);
        let mut layers = Vec::with_capacity(config.num_frozen_layers);
        for l in 0..config.num_frozen_layers {
            let mut lrng = rng::stream(config.seed, &[rng::TAG_LAYER, l as u64]);
            let mix = linalg::random_orthonormal(n, n, &mut lrng)?;
            let context =
                Matrix::random_normal(n, n, config.context_weight / (n as f64).sqrt(), &mut lrng);
            let bias = Matrix::random_normal(1, n, config.anisotropy, &mut lrng).into_vec();
            layers.push(FrozenLayer { mix, context, bias });
        }
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn layers(&self) -> &[FrozenLayer] {
        &self.layers
    }

    /// Named parameter tensors, for dumps.
    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![("embedding".to_string(), self.embedding.clone())];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.mix"), layer.mix.clone()));
            out.push((format!("layer{l}.context"), layer.context.clone()));
            out.push((
                format!("layer{l}.bias"),
                Matrix::from_fn(1, layer.bias.len(), |_, j| layer.bias[j]),
            ));
        }
        out
    }
}

/// Trainable module kinds. The output width `m` follows from the kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum ModuleKind {
    /// Bottleneck adapter: down-projection, ReLU, up-projection, residual.
    AdapterDown { ratio: f64 },
    /// Low-rank adapter `X + (X·A)·B`.
    Lora { rank_ratio: f64 },
    /// Square query projection, residual.
    QProj,
    /// Square feed-forward down projection, residual.
    FfnDownProj,
}

impl ModuleKind {
    pub fn out_dim(&self, n: usize) -> Result<usize> {
        let m = match *self {
            ModuleKind::AdapterDown { ratio } => {
                if !(ratio.is_finite() && ratio > 0.0) {
                    return Err(Error::validation("adapter ratio must be positive"));
                }
                (n as f64 / ratio).round() as usize
            }
            ModuleKind::Lora { rank_ratio } => {
                if !(rank_ratio.is_finite() && rank_ratio > 0.0) {
                    return Err(Error::validation("lora rank_ratio must be positive"));
                }
                (n as f64 / rank_ratio).round() as usize
            }
            ModuleKind::QProj | ModuleKind::FfnDownProj => n,
        };
        if m == 0 {
            return Err(Error::validation(format!("{self:?} yields zero output width for n={n}")));
        }
        Ok(m)
    }

    fn has_up(&self) -> bool {
        matches!(self, ModuleKind::AdapterDown { .. } | ModuleKind::Lora { .. })
    }

    fn relu(&self) -> bool {
        matches!(self, ModuleKind::AdapterDown { .. })
    }

    pub fn label(&self) -> String {
        match self {
            ModuleKind::AdapterDown { ratio } => format!("adapter{ratio}"),
            ModuleKind::Lora { rank_ratio } => format!("lora{rank_ratio}"),
            ModuleKind::QProj => "qproj".into(),
            ModuleKind::FfnDownProj => "downproj".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub kind: ModuleKind,
    /// Number of frozen layers applied before this module.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableModule {
    pub kind: ModuleKind,
    pub position: usize,
    /// n × m
    pub weight: Matrix,
    /// 1 × m
    pub bias: Matrix,
    /// m × n, adapters and LoRA only
    pub upsample_weight: Option<Matrix>,
}

impl TrainableModule {
    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight_key(index: usize) -> String {
        format!("module{index}.weight")
    }

    pub fn bias_key(index: usize) -> String {
        format!("module{index}.bias")
    }

    pub fn up_key(index: usize) -> String {
        format!("module{index}.up")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// n × classes
    pub weight: Matrix,
    /// 1 × classes
    pub bias: Matrix,
}

pub const HEAD_WEIGHT_KEY: &str = "head.weight";
pub const HEAD_BIAS_KEY: &str = "head.bias";

/// Everything clients update: the inserted modules and the task head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    pub modules: Vec<TrainableModule>,
    pub head: Head,
}

impl TrainableParams {
    pub fn init(
        backbone: &BackboneConfig,
        specs: &[ModuleSpec],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = backbone.hidden_dim;
        if num_classes < 2 {
            return Err(Error::validation("need at least two classes"));
        }
        let mut modules = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            if spec.position > backbone.num_frozen_layers {
                return Err(Error::validation(format!(
                    "module {i} position {} exceeds frozen layer count {}",
                    spec.position, backbone.num_frozen_layers
                )));
            }
            let m = spec.kind.out_dim(n)?;
            let mut r = rng::stream(seed, &[rng::TAG_MODULE, i as u64]);
            let weight = Matrix::random_normal(n, m, 1.0 / (n as f64).sqrt(), &mut r);
            let upsample_weight = spec
                .kind
                .has_up()
                .then(|| Matrix::random_normal(m, n, 1.0 / (m as f64).sqrt(), &mut r));
            modules.push(TrainableModule {
                kind: spec.kind,
                position: spec.position,
                weight,
                bias: Matrix::zeros(1, m),
                upsample_weight,
            });
        }
        let mut hr = rng::stream(seed, &[rng::TAG_HEAD]);
        let head = Head {
            weight: Matrix::random_normal(n, num_classes, 1.0 / (n as f64).sqrt(), &mut hr),
            bias: Matrix::zeros(1, num_classes),
        };
        Ok(Self { modules, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.weight.cols()
    }

    /// Parameter tensors keyed by name, in key order.
    pub fn tensors(&self) -> BTreeMap<String, &Matrix> {
        let mut out = BTreeMap::new();
        for (i, m) in self.modules.iter().enumerate() {
            out.insert(TrainableModule::weight_key(i), &m.weight);
            out.insert(TrainableModule::bias_key(i), &m.bias);
            if let Some(up) = &m.upsample_weight {
                out.insert(TrainableModule::up_key(i), up);
            }
        }
        out.insert(HEAD_WEIGHT_KEY.to_string(), &self.head.weight);
        out.insert(HEAD_BIAS_KEY.to_string(), &self.head.bias);
        out
    }

    pub fn tensor_mut(&mut self, key: &str) -> Option<&mut Matrix> {
        if key == HEAD_WEIGHT_KEY {
            return Some(&mut self.head.weight);
        }
        if key == HEAD_BIAS_KEY {
            return Some(&mut self.head.bias);
        }
        let rest = key.strip_prefix("module")?;
        let (idx, field) = rest.split_once('.')?;
        let module = self.modules.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "weight" => Some(&mut module.weight),
            "bias" => Some(&mut module.bias),
            "up" => module.upsample_weight.as_mut(),
            _ => None,
        }
    }

    /// Overwrites tensors by name; every key must exist with the same shape.
    pub fn load_tensors<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>,
    ) -> Result<()> {
        for (key, value) in tensors {
            let slot = self
                .tensor_mut(key)
                .ok_or_else(|| Error::validation(format!("unknown parameter {key}")))?;
            if slot.shape() != value.shape() {
                return Err(Error::validation(format!(
                    "parameter {key}: expected {:?}, got {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients uploaded by one client in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpdate {
    pub per_module: BTreeMap<String, Matrix>,
    pub round: usize,
    pub client: usize,
}

impl GradientUpdate {
    pub fn get(&self, key: &str) -> Option<&Matrix> {
        self.per_module.get(key)
    }

    /// All entries concatenated in key order.
    pub fn flatten(&self) -> Vec<f64> {
        self.per_module
            .values()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        linalg::l2_norm(&self.flatten())
    }
}

/// Per-token hidden rows of a padded batch, sequence-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBatch {
    /// p × n
    pub embeddings: Matrix,
    /// batch index of the sequence owning each row
    pub token_owner: Vec<usize>,
    pub pad: Vec<bool>,
}

impl HiddenBatch {
    pub fn num_tokens(&self) -> usize {
        self.embeddings.rows()
    }

    /// Non-pad rows of one sequence.
    pub fn rows_of(&self, owner: usize) -> Matrix {
        let idx: Vec<usize> = (0..self.num_tokens())
            .filter(|&r| self.token_owner[r] == owner && !self.pad[r])
            .collect();
        self.embeddings.select_rows(&idx)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    lens: Vec<usize>,
    seq_len: usize,
}

impl Layout {
    fn new(backbone: &FrozenBackbone, seqs: &[&[usize]]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let vocab = backbone.config.vocab_size;
        for (s, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::validation(format!("sequence {s} is empty")));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab || t == PAD_TOKEN) {
                return Err(Error::validation(format!(
                    "sequence {s}: token id {t} is out of vocabulary (valid ids 1..{vocab})"
                )));
            }
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let seq_len = *lens.iter().max().unwrap_or(&0);
        Ok(Self { lens, seq_len })
    }

    fn rows(&self) -> usize {
        self.lens.len() * self.seq_len
    }

    fn owner(&self, row: usize) -> usize {
        row / self.seq_len
    }

    fn is_pad(&self, row: usize) -> bool {
        row % self.seq_len >= self.lens[self.owner(row)]
    }

    /// Mean of the non-pad rows of each sequence (B × n).
    fn seq_means(&self, h: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.lens.len(), h.cols());
        for r in 0..h.rows() {
            if self.is_pad(r) {
                continue;
            }
            let s = self.owner(r);
            let inv = 1.0 / self.lens[s] as f64;
            for (o, v) in out.row_mut(s).iter_mut().zip(h.row(r)) {
                *o += v * inv;
            }
        }
        out
    }
}

fn position_signal(pos: usize, dim: usize, n: usize) -> f64 {
    let freq = 1.0 / 10000f64.powf((2 * (dim / 2)) as f64 / n as f64);
    let angle = pos as f64 * freq;
    0.5 * if dim.is_multiple_of(2) { angle.sin() } else { angle.cos() }
}

fn embed(backbone: &FrozenBackbone, layout: &Layout, seqs: &[&[usize]]) -> Matrix {
    let n = backbone.hidden_dim();
    let mut h = Matrix::zeros(layout.rows(), n);
    for (s, seq) in seqs.iter().enumerate() {
        for i in 0..layout.seq_len {
            let tok = seq.get(i).copied().unwrap_or(PAD_TOKEN);
            let row = h.row_mut(s * layout.seq_len + i);
            for (d, (o, e)) in row.iter_mut().zip(backbone.embedding.row(tok)).enumerate() {
                *o = e + position_signal(i, d, n);
            }
        }
    }
    h
}

fn frozen_forward(layer: &FrozenLayer, layout: &Layout, h: &Matrix) -> Matrix {
    let ctx = layout.seq_means(h).matmul(&layer.context).expect("context shape");
    let mut z = h.matmul(&layer.mix).expect("mix shape");
    for r in 0..z.rows() {
        let c = ctx.row(layout.owner(r));
        for ((zv, cv), bv) in z.row_mut(r).iter_mut().zip(c).zip(&layer.bias) {
            *zv = (*zv + cv + bv).tanh();
        }
    }
    z
}

/// `Y = X·W + b`
pub fn forward_trainable(module: &TrainableModule, x: &Matrix) -> Result<Matrix> {
    if x.cols() != module.weight.rows() {
        return Err(Error::validation(format!(
            "module expects input width {}, got {}",
            module.weight.rows(),
            x.cols()
        )));
    }
    let mut y = x.matmul(&module.weight)?;
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(module.bias.as_slice()) {
            *v += b;
        }
    }
    Ok(y)
}

struct ModuleState {
    pre: Matrix,
    act: Matrix,
    output: Matrix,
}

fn module_forward(module: &TrainableModule, x: &Matrix) -> Result<ModuleState> {
    let pre = forward_trainable(module, x)?;
    let mut act = pre.clone();
    if module.kind.relu() {
        act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let mut output = x.clone();
    match &module.upsample_weight {
        Some(up) => output.add_assign(&act.matmul(up)?)?,
        None => output.add_assign(&act)?,
    }
    Ok(ModuleState { pre, act, output })
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Module(usize),
    Frozen(usize),
}

fn stages(backbone: &FrozenBackbone, params: &TrainableParams) -> Vec<Stage> {
    let layers = backbone.layers.len();
    let mut out = Vec::new();
    for l in 0..=layers {
        out.extend(
            params
                .modules
                .iter()
                .enumerate()
                .filter(|(_, m)| m.position == l)
                .map(|(i, _)| Stage::Module(i)),
        );
        if l < layers {
            out.push(Stage::Frozen(l));
        }
    }
    out
}

enum Step {
    Frozen { layer: usize, output: Matrix },
    Module { index: usize, input: Matrix, pre: Matrix, act: Matrix },
}

struct Forward {
    layout: Layout,
    steps: Vec<Step>,
    pooled: Matrix,
    logits: Matrix,
}

fn check_params(backbone: &FrozenBackbone, params: &TrainableParams) -> Result<()> {
    let n = backbone.hidden_dim();
    for (i, m) in params.modules.iter().enumerate() {
        if m.weight.rows() != n || m.position > backbone.layers.len() {
            return Err(Error::validation(format!("module {i} does not fit the backbone")));
        }
    }
    if params.head.weight.rows() != n {
        return Err(Error::validation("head does not fit the backbone"));
    }
    Ok(())
}

fn forward(backbone: &FrozenBackbone, params: &TrainableParams, seqs: &[&[usize]]) -> Result<Forward> {
    check_params(backbone, params)?;
    let layout = Layout::new(backbone, seqs)?;
    let mut h = embed(backbone, &layout, seqs);
    let mut steps = Vec::new();
    for stage in stages(backbone, params) {
        match stage {
            Stage::Frozen(l) => {
                h = frozen_forward(&backbone.layers[l], &layout, &h);
                steps.push(Step::Frozen {
                    layer: l,
                    output: h.clone(),
                });
            }
            Stage::Module(i) => {
                let st = module_forward(&params.modules[i], &h)?;
                let input = std::mem::replace(&mut h, st.output);
                steps.push(Step::Module {
                    index: i,
                    input,
                    pre: st.pre,
                    act: st.act,
                });
            }
        }
    }
    let pooled = layout.seq_means(&h);
    let mut logits = pooled.matmul(&params.head.weight)?;
    for r in 0..logits.rows() {
        for (v, b) in logits.row_mut(r).iter_mut().zip(params.head.bias.as_slice()) {
            *v += b;
        }
    }
    Ok(Forward {
        layout,
        steps,
        pooled,
        logits,
    })
}

fn to_hidden(layout: &Layout, embeddings: Matrix) -> HiddenBatch {
    let p = layout.rows();
    HiddenBatch {
        embeddings,
        token_owner: (0..p).map(|r| layout.owner(r)).collect(),
        pad: (0..p).map(|r| layout.is_pad(r)).collect(),
    }
}

/// Per-token hidden rows after the whole frozen stack, pad rows included.
pub fn forward_hidden(backbone: &FrozenBackbone, seqs: &[&[usize]]) -> Result<HiddenBatch> {
    let layout = Layout::new(backbone, seqs)?;
    let mut h = embed(backbone, &layout, seqs);
    for layer in &backbone.layers {
        h = frozen_forward(layer, &layout, &h);
    }
    Ok(to_hidden(&layout, h))
}

/// Rows entering trainable module `index` at the given parameters.
pub fn module_input(
    backbone: &FrozenBackbone,
    params: &TrainableParams,
    seqs: &[&[usize]],
    index: usize,
) -> Result<HiddenBatch> {
    check_params(backbone, params)?;
    if index >= params.modules.len() {
        return Err(Error::validation(format!("no trainable module {index}")));
    }
    let layout = Layout::new(backbone, seqs)?;
    let mut h = embed(backbone, &layout, seqs);
    for stage in stages(backbone, params) {
        match stage {
            Stage::Module(i) if i == index => return Ok(to_hidden(&layout, h)),
            Stage::Module(i) => h = module_forward(&params.modules[i], &h)?.output,
            Stage::Frozen(l) => h = frozen_forward(&backbone.layers[l], &layout, &h),
        }
    }
    unreachable!("module {index} is always scheduled")
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn check_labels(labels: &[usize], num_seqs: usize, classes: usize) -> Result<()> {
    if labels.len() != num_seqs {
        return Err(Error::validation(format!(
            "{} labels for {num_seqs} sequences",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::validation(format!("label {l} out of range for {classes} classes")));
    }
    Ok(())
}

/// Cross-entropy of each sequence separately.
pub fn per_sample_losses(
    backbone: &FrozenBackbone,
    params: &TrainableParams,
    seqs: &[&[usize]],
    labels: &[usize],
) -> Result<Vec<f64>> {
    let fwd = forward(backbone, params, seqs)?;
    check_labels(labels, seqs.len(), params.num_classes())?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(s, &y)| cross_entropy(fwd.logits.row(s), y))
        .collect())
}

/// Arg-max class for each sequence.
pub fn predict(backbone: &FrozenBackbone, params: &TrainableParams, seqs: &[&[usize]]) -> Result<Vec<usize>> {
    let fwd = forward(backbone, params, seqs)?;
    Ok((0..seqs.len())
        .map(|s| {
            let row = fwd.logits.row(s);
            (0..row.len())
                .fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect())
}

/// Mean cross-entropy over the batch and its exact gradient with respect to
/// every trainable parameter. Frozen parameters receive nothing.
pub fn loss_and_gradients(
    backbone: &FrozenBackbone,
    params: &TrainableParams,
    seqs: &[&[usize]],
    labels: &[usize],
) -> Result<(f64, GradientUpdate)> {
    let fwd = forward(backbone, params, seqs)?;
    let batch = seqs.len();
    check_labels(labels, batch, params.num_classes())?;
    let layout = &fwd.layout;
    let inv_b = 1.0 / batch as f64;

    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(batch, params.num_classes());
    for (s, &y) in labels.iter().enumerate() {
        let row = fwd.logits.row(s);
        loss += cross_entropy(row, y);
        let probs = softmax_row(row);
        for (c, (d, p)) in dlogits.row_mut(s).iter_mut().zip(probs).enumerate() {
            *d = (p - if c == y { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    loss *= inv_b;

    let mut grads = BTreeMap::new();
    grads.insert(HEAD_WEIGHT_KEY.to_string(), fwd.pooled.t_matmul(&dlogits)?);
    grads.insert(HEAD_BIAS_KEY.to_string(), column_sums(&dlogits));

    // mean pooling over non-pad rows
    let dpooled = dlogits.matmul_t(&params.head.weight)?;
    let n = backbone.hidden_dim();
    let mut dh = Matrix::zeros(layout.rows(), n);
    for r in 0..layout.rows() {
        if layout.is_pad(r) {
            continue;
        }
        let s = layout.owner(r);
        let inv = 1.0 / layout.lens[s] as f64;
        for (d, g) in dh.row_mut(r).iter_mut().zip(dpooled.row(s)) {
            *d = g * inv;
        }
    }

    for step in fwd.steps.iter().rev() {
        match step {
            Step::Frozen { layer, output } => {
                let fl = &backbone.layers[*layer];
                let mut dz = dh;
                for (d, o) in dz.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    *d *= 1.0 - o * o;
                }
                let mut din = dz.matmul_t(&fl.mix)?;
                // context term: ctx_s is the mean of the non-pad inputs of s
                let mut dctx = Matrix::zeros(layout.lens.len(), n);
                for r in 0..layout.rows() {
                    let s = layout.owner(r);
                    for (a, g) in dctx.row_mut(s).iter_mut().zip(dz.row(r)) {
                        *a += g;
                    }
                }
                let dctx = dctx.matmul_t(&fl.context)?;
                for r in 0..layout.rows() {
                    if layout.is_pad(r) {
                        continue;
                    }
                    let s = layout.owner(r);
                    let inv = 1.0 / layout.lens[s] as f64;
                    for (d, g) in din.row_mut(r).iter_mut().zip(dctx.row(s)) {
                        *d += g * inv;
                    }
                }
                dh = din;
            }
            Step::Module {
                index,
                input,
                pre,
                act,
            } => {
                let module = &params.modules[*index];
                let mut dy = match &module.upsample_weight {
                    Some(up) => {
                        grads.insert(TrainableModule::up_key(*index), act.t_matmul(&dh)?);
                        dh.matmul_t(up)?
                    }
                    None => dh.clone(),
                };
                if module.kind.relu() {
                    for (d, y) in dy.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                grads.insert(TrainableModule::weight_key(*index), input.t_matmul(&dy)?);
                grads.insert(TrainableModule::bias_key(*index), column_sums(&dy));
                let mut dx = dh;
                dx.add_assign(&dy.matmul_t(&module.weight)?)?;
                dh = dx;
            }
        }
    }

    Ok((
        loss,
        GradientUpdate {
            per_module: grads,
            round: 0,
            client: 0,
        },
    ))
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Up-projects each hidden row: `X_up = X · W_upᵀ` (p × n_up).
pub fn upsample_forward(w_up: &Matrix, x: &HiddenBatch) -> Result<Matrix> {
    let n = x.embeddings.cols();
    if w_up.cols() != n {
        return Err(Error::validation(format!(
            "up-projection expects input width {}, got {n}",
            w_up.cols()
        )));
    }
    if w_up.rows() <= n {
        return Err(Error::validation(format!(
            "up-projection must widen: n_up = {} <= n = {n}",
            w_up.rows()
        )));
    }
    x.embeddings.matmul_t(w_up)
}

/// Draws a generic up-projection of shape `n_up × n`.
pub fn random_upsample<R: Rng + ?Sized>(n_up: usize, n: usize, rng: &mut R) -> Matrix {
    Matrix::random_normal(n_up, n, 1.0 / (n as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> BackboneConfig {
        BackboneConfig {
            vocab_size: 50,
            hidden_dim: 8,
            num_frozen_layers: 2,
            seed,
            anisotropy: 1.5,
            context_weight: 1.0,
        }
    }

    #[test]
    fn backbone_is_deterministic() {
        let a = FrozenBackbone::build(&cfg(1)).unwrap();
        let b = FrozenBackbone::build(&cfg(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backbone_rejects_tiny_dims() {
        let mut c = cfg(1);
        c.hidden_dim = 1;
        assert!(FrozenBackbone::build(&c).is_err());
        let mut c = cfg(1);
        c.vocab_size = 1;
        assert!(FrozenBackbone::build(&c).is_err());
    }

    #[test]
    fn padding_arithmetic() {
        let bb = FrozenBackbone::build(&cfg(1)).unwrap();
        let single = forward_hidden(&bb, &[&[3]]).unwrap();
        assert_eq!(single.num_tokens(), 1);
        let two = forward_hidden(&bb, &[&[1, 2, 3], &[4, 5, 6, 7, 8]]).unwrap();
        assert_eq!(two.num_tokens(), 10);
        assert_eq!(two.pad.iter().filter(|&&p| p).count(), 2);
    }

    #[test]
    fn identical_sequences_identical_rows() {
        let bb = FrozenBackbone::build(&cfg(1)).unwrap();
        let h = forward_hidden(&bb, &[&[5, 6, 7], &[5, 6, 7]]).unwrap();
        assert_eq!(h.rows_of(0), h.rows_of(1));
    }

    #[test]
    fn non_pad_rows_do_not_depend_on_padding() {
        let bb = FrozenBackbone::build(&cfg(4)).unwrap();
        let alone = forward_hidden(&bb, &[&[9, 10]]).unwrap();
        let padded = forward_hidden(&bb, &[&[9, 10], &[1, 2, 3, 4, 5, 6]]).unwrap();
        assert_eq!(alone.rows_of(0), padded.rows_of(0));
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let bb = FrozenBackbone::build(&cfg(1)).unwrap();
        assert!(forward_hidden(&bb, &[&[50]]).is_err());
        assert!(forward_hidden(&bb, &[&[PAD_TOKEN]]).is_err());
        assert!(forward_hidden(&bb, &[]).is_err());
    }

    #[test]
    fn module_widths_follow_kind() {
        assert_eq!(ModuleKind::AdapterDown { ratio: 2.0 }.out_dim(64).unwrap(), 32);
        assert_eq!(ModuleKind::AdapterDown { ratio: 1.2 }.out_dim(5120).unwrap(), 4267);
        assert_eq!(ModuleKind::Lora { rank_ratio: 2.0 }.out_dim(5120).unwrap(), 2560);
        assert_eq!(ModuleKind::QProj.out_dim(64).unwrap(), 64);
        assert_eq!(ModuleKind::FfnDownProj.out_dim(64).unwrap(), 64);
    }

    #[test]
    fn identity_and_zero_trainable_forward() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap();
        let module = TrainableModule {
            kind: ModuleKind::QProj,
            position: 0,
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
            upsample_weight: None,
        };
        assert_eq!(forward_trainable(&module, &x).unwrap(), x);

        let module = TrainableModule {
            bias: Matrix::from_rows(&[vec![0.5, -1.5]]).unwrap(),
            ..module
        };
        let y = forward_trainable(&module, &Matrix::zeros(3, 2)).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[0.5, -1.5]);
        }
        assert!(forward_trainable(&module, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let bb = FrozenBackbone::build(&cfg(1)).unwrap();
        let mut params = TrainableParams::init(bb.config(), &[], 2, 0).unwrap();
        params.head.weight = Matrix::zeros(8, 2);
        let (loss, _) = loss_and_gradients(&bb, &params, &[&[1, 2], &[3]], &[0, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let bb = FrozenBackbone::build(&cfg(1)).unwrap();
        let params = TrainableParams::init(bb.config(), &[], 2, 0).unwrap();
        assert!(loss_and_gradients(&bb, &params, &[], &[]).is_err());
    }

    #[test]
    fn upsample_validation() {
        let bb = FrozenBackbone::build(&cfg(1)).unwrap();
        let h = forward_hidden(&bb, &[&[1, 2]]).unwrap();
        assert!(upsample_forward(&Matrix::identity(8), &h).is_err());
        let zero = HiddenBatch {
            embeddings: Matrix::zeros(3, 8),
            token_owner: vec![0; 3],
            pad: vec![false; 3],
        };
        let up = upsample_forward(&Matrix::identity(16).leading_cols(8), &zero).unwrap();
        assert_eq!(up, Matrix::zeros(3, 16));
    }

    #[test]
    fn stacked_identity_upsample_copies_rows() {
        let bb = FrozenBackbone::build(&cfg(2)).unwrap();
        let h = forward_hidden(&bb, &[&[1, 2, 3]]).unwrap();
        let w_up = Matrix::from_fn(24, 8, |i, j| if i == j { 1.0 } else { 0.0 });
        let up = upsample_forward(&w_up, &h).unwrap();
        for r in 0..h.num_tokens() {
            assert_eq!(&up.row(r)[..8], h.embeddings.row(r));
            assert!(up.row(r)[8..].iter().all(|&v| v == 0.0));
        }
    }
}

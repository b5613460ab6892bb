//! Decoder-only causal transformer with optionally Bayesian slots.
//!
//! Blocks are pre-LN with learned positional embeddings:
//! `x += attn(ln1(x)); x += ff(ln2(x))`, then `ln_f` and an untied LM head.
//! Parameters live in named slots whose order is fixed by [`ModelConfig::slot_specs`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::fill_keyed_normals;
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::parallel::Exec;
use crate::schedule::{DepthIndex, PriorScale, ScheduleConfig};
use crate::tokenizer::WhitespaceTokenizer;
use crate::variational::softplus_unchecked;

const INIT_STD: f64 = 0.02;
const SLOTS_PER_BLOCK: usize = 12;
const LN1_W: usize = 0;
const LN1_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const PROJ_W: usize = 4;
const PROJ_B: usize = 5;
const LN2_W: usize = 6;
const LN2_B: usize = 7;
const FC1_W: usize = 8;
const FC1_B: usize = 9;
const FC2_W: usize = 10;
const FC2_B: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Filled in from the fitted vocabulary at pretraining time.
    #[serde(default)]
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: 4 blocks of width 32.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            vocab_size,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{k} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model.n_heads ({}) must divide model.d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every slot in canonical order.
    pub fn slot_specs(&self) -> Vec<SlotSpec> {
        let (d, v, f) = (self.d_model, self.vocab_size, self.d_ff);
        let mut specs = vec![
            SlotSpec::new("embed.token", vec![v, d], LayerKind::TokenEmbedding, None),
            SlotSpec::new("embed.pos", vec![self.max_seq_len, d], LayerKind::PositionEmbedding, None),
        ];
        for i in 0..self.n_layers {
            let depth = Some(DepthIndex::new(i + 1, self.n_layers).expect("block depth in range"));
            let p = |s: &str| format!("blocks.{i}.{s}");
            let mut push = |name: String, shape: Vec<usize>, layer| specs.push(SlotSpec::new(name, shape, layer, depth));
            push(p("ln1.weight"), vec![d], LayerKind::LayerNorm);
            push(p("ln1.bias"), vec![d], LayerKind::LayerNorm);
            push(p("attn.qkv.weight"), vec![d, 3 * d], LayerKind::AttnQkv);
            push(p("attn.qkv.bias"), vec![3 * d], LayerKind::AttnQkv);
            push(p("attn.proj.weight"), vec![d, d], LayerKind::AttnProj);
            push(p("attn.proj.bias"), vec![d], LayerKind::AttnProj);
            push(p("ln2.weight"), vec![d], LayerKind::LayerNorm);
            push(p("ln2.bias"), vec![d], LayerKind::LayerNorm);
            push(p("ff.fc1.weight"), vec![d, f], LayerKind::FfFirst);
            push(p("ff.fc1.bias"), vec![f], LayerKind::FfFirst);
            push(p("ff.proj.weight"), vec![f, d], LayerKind::FfProj);
            push(p("ff.proj.bias"), vec![d], LayerKind::FfProj);
        }
        let head_depth = Some(DepthIndex::new(self.n_layers, self.n_layers).expect("head depth in range"));
        specs.push(SlotSpec::new("ln_f.weight", vec![d], LayerKind::LayerNorm, None));
        specs.push(SlotSpec::new("ln_f.bias", vec![d], LayerKind::LayerNorm, None));
        specs.push(SlotSpec::new("lm_head.weight", vec![d, v], LayerKind::LmHead, head_depth));
        specs
    }

    pub fn scalar_count(&self) -> usize {
        self.slot_specs().iter().map(SlotSpec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    TokenEmbedding,
    PositionEmbedding,
    LayerNorm,
    AttnQkv,
    AttnProj,
    FfFirst,
    FfProj,
    LmHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub layer: LayerKind,
    pub depth: Option<DepthIndex>,
}

impl SlotSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, layer: LayerKind, depth: Option<DepthIndex>) -> Self {
        Self {
            name: name.into(),
            shape,
            layer,
            depth,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which layer families become Bayesian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerBayesFlags {
    pub attn_qkv: bool,
    pub ff_first: bool,
    pub lm_head: bool,
    /// Both projection layers: attention output and second feed-forward linear.
    pub proj: bool,
}

impl Default for LayerBayesFlags {
    fn default() -> Self {
        Self {
            attn_qkv: true,
            ff_first: true,
            lm_head: true,
            proj: false,
        }
    }
}

impl LayerBayesFlags {
    pub const NONE: Self = Self {
        attn_qkv: false,
        ff_first: false,
        lm_head: false,
        proj: false,
    };

    pub fn selects(&self, layer: LayerKind) -> bool {
        match layer {
            LayerKind::AttnQkv => self.attn_qkv,
            LayerKind::FfFirst => self.ff_first,
            LayerKind::LmHead => self.lm_head,
            LayerKind::AttnProj | LayerKind::FfProj => self.proj,
            LayerKind::TokenEmbedding | LayerKind::PositionEmbedding | LayerKind::LayerNorm => false,
        }
    }

    /// Parses a comma-separated edit list applied to the defaults.
    ///
    /// `none`, `all` and `default` reset every flag; `attn`, `fc`, `lm-head`
    /// and `proj` switch one family on, or off with a leading `-`.
    /// `none,attn` is attention only; `-lm-head` is the default minus the head.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut flags = Self::default();
        for raw in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match raw {
                "none" => flags = Self::NONE,
                "default" => flags = Self::default(),
                "all" => {
                    flags = Self {
                        proj: true,
                        ..Self::default()
                    }
                }
                _ => {
                    let (on, name) = match raw.as_bytes()[0] {
                        b'-' => (false, &raw[1..]),
                        b'+' => (true, &raw[1..]),
                        _ => (true, raw),
                    };
                    let slot = match name {
                        "attn" | "attn-qkv" => &mut flags.attn_qkv,
                        "fc" | "ff" | "ff-first" => &mut flags.ff_first,
                        "lm-head" | "head" => &mut flags.lm_head,
                        "proj" => &mut flags.proj,
                        _ => return Err(Error::config(format!("flags: unknown layer family {name:?}"))),
                    };
                    *slot = on;
                }
            }
        }
        Ok(flags)
    }
}

/// Trainable posterior and fixed prior of one Bayesian slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesSlot<T> {
    pub mu: Tensor<T>,
    pub rho: Tensor<T>,
    pub prior_mean: Tensor<T>,
    pub prior: PriorScale,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotValue<T> {
    Deterministic(Tensor<T>),
    Bayesian(BayesSlot<T>),
}

impl<T: Element> SlotValue<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            SlotValue::Deterministic(t) => t.shape(),
            SlotValue::Bayesian(b) => b.mu.shape(),
        }
    }

    pub fn is_bayesian(&self) -> bool {
        matches!(self, SlotValue::Bayesian(_))
    }

    fn cast<U: Element>(&self) -> SlotValue<U> {
        match self {
            SlotValue::Deterministic(t) => SlotValue::Deterministic(t.cast()),
            SlotValue::Bayesian(b) => SlotValue::Bayesian(BayesSlot {
                mu: b.mu.cast(),
                rho: b.rho.cast(),
                prior_mean: b.prior_mean.cast(),
                prior: b.prior,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub name: String,
    pub layer: LayerKind,
    pub depth: Option<DepthIndex>,
    pub value: SlotValue<T>,
}

/// Every parameter of a model, in canonical slot order, plus the vocabulary
/// and the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub flags: Option<LayerBayesFlags>,
    pub schedule: Option<ScheduleConfig>,
    slots: Vec<Slot<T>>,
}

pub type BayesianParameterSet<T = crate::Real> = ParameterSet<T>;

impl<T: Element> ParameterSet<T> {
    /// Checks the slots against `config`'s layout.
    pub fn from_slots(
        config: ModelConfig,
        vocab: Vec<String>,
        flags: Option<LayerBayesFlags>,
        schedule: Option<ScheduleConfig>,
        slots: Vec<Slot<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::structural(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let specs = config.slot_specs();
        if specs.len() != slots.len() {
            return Err(Error::structural(format!(
                "expected {} slots, got {}",
                specs.len(),
                slots.len()
            )));
        }
        for (spec, slot) in specs.iter().zip(&slots) {
            if spec.name != slot.name || spec.layer != slot.layer {
                return Err(Error::structural(format!(
                    "slot {} found where {} was expected",
                    slot.name, spec.name
                )));
            }
            let shapes_ok = match &slot.value {
                SlotValue::Deterministic(t) => t.shape() == spec.shape,
                SlotValue::Bayesian(b) => {
                    b.mu.shape() == spec.shape && b.rho.shape() == spec.shape && b.prior_mean.shape() == spec.shape
                }
            };
            if !shapes_ok {
                return Err(Error::structural(format!(
                    "slot {} does not have shape {:?}",
                    slot.name, spec.shape
                )));
            }
            if slot.value.is_bayesian() && slot.depth.is_none() {
                return Err(Error::structural(format!("Bayesian slot {} has no depth", slot.name)));
            }
        }
        Ok(Self {
            config,
            vocab,
            flags,
            schedule,
            slots,
        })
    }

    /// Fresh deterministic parameters: normal weights, zero biases, unit
    /// layer-norm gains. Projection weights are scaled down by `sqrt(2 * n_layers)`.
    pub fn init(config: ModelConfig, vocab: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let proj_std = INIT_STD / ((2 * config.n_layers) as f64).sqrt();
        let slots = config
            .slot_specs()
            .into_iter()
            .map(|spec| {
                let n = spec.len();
                let data = if spec.layer == LayerKind::LayerNorm {
                    let gain = if spec.name.ends_with(".weight") { 1.0 } else { 0.0 };
                    vec![gain; n]
                } else if spec.name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let std = match spec.layer {
                        LayerKind::AttnProj | LayerKind::FfProj => proj_std,
                        _ => INIT_STD,
                    };
                    let mut z = vec![0.0; n];
                    fill_keyed_normals(seed, &spec.name, 0, &mut z);
                    z.iter().map(|x| x * std).collect()
                };
                Slot {
                    value: SlotValue::Deterministic(Tensor::from_f64(spec.shape.clone(), &data).expect("spec shape")),
                    name: spec.name,
                    layer: spec.layer,
                    depth: spec.depth,
                }
            })
            .collect();
        Self::from_slots(config, vocab, None, None, slots)
    }

    pub fn slots(&self) -> &[Slot<T>] {
        &self.slots
    }

    pub(crate) fn slots_mut(&mut self) -> &mut [Slot<T>] {
        &mut self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&Slot<T>> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn tokenizer(&self) -> Result<WhitespaceTokenizer> {
        WhitespaceTokenizer::from_vocab(self.vocab.clone())
    }

    pub fn bayesian_scalars(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.value.is_bayesian())
            .map(|s| s.value.shape().iter().product::<usize>())
            .sum()
    }

    pub fn has_bayesian(&self) -> bool {
        self.slots.iter().any(|s| s.value.is_bayesian())
    }

    pub fn cast<U: Element>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config,
            vocab: self.vocab.clone(),
            flags: self.flags,
            schedule: self.schedule,
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    name: s.name.clone(),
                    layer: s.layer,
                    depth: s.depth,
                    value: s.value.cast(),
                })
                .collect(),
        }
    }
}

/// An all-deterministic parameter set: the anchor for every prior.
#[derive(Debug, Clone, PartialEq)]
pub struct MleCheckpoint<T = crate::Real>(ParameterSet<T>);

impl<T: Element> MleCheckpoint<T> {
    pub fn new(params: ParameterSet<T>) -> Result<Self> {
        if let Some(s) = params.slots.iter().find(|s| s.value.is_bayesian()) {
            return Err(Error::structural(format!("MLE checkpoint slot {} is Bayesian", s.name)));
        }
        Ok(Self(params))
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.0
    }

    pub fn into_params(self) -> ParameterSet<T> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    Sampled,
    /// Every epsilon is zero: Bayesian slots realize to their means.
    Zero,
}

/// One concrete weight per scalar, in canonical slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRealization<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub noise: NoiseMode,
    pub tensors: Vec<Tensor<T>>,
}

/// Draws `w = mu + softplus(rho) * eps` for every Bayesian scalar, with eps
/// keyed by `(seed, slot name, flat index)`.
pub fn realize<T: Element>(params: &ParameterSet<T>, seed: u64) -> WeightRealization<T> {
    realize_with(params, seed, NoiseMode::Sampled, Exec::default())
}

pub fn realize_with<T: Element>(
    params: &ParameterSet<T>,
    seed: u64,
    noise: NoiseMode,
    exec: Exec,
) -> WeightRealization<T> {
    let tensors = exec.map(&params.slots, |slot| match &slot.value {
        SlotValue::Deterministic(t) => t.clone(),
        SlotValue::Bayesian(b) => match noise {
            NoiseMode::Zero => b.mu.clone(),
            NoiseMode::Sampled => {
                let mut eps = vec![0.0; b.mu.len()];
                fill_keyed_normals(seed, &slot.name, 0, &mut eps);
                let data = b
                    .mu
                    .data()
                    .iter()
                    .zip(b.rho.data())
                    .zip(&eps)
                    .map(|((m, r), e)| T::from_f64(m.to_f64() + softplus_unchecked(r.to_f64()) * e))
                    .collect();
                Tensor::new(b.mu.shape().to_vec(), data).expect("realization keeps the slot shape")
            }
        },
    });
    WeightRealization {
        config: params.config,
        seed,
        noise,
        tensors,
    }
}

/// Logits (`len(tokens) x vocab_size`) under a fixed realization.
pub fn forward<T: Element>(realization: &WeightRealization<T>, tokens: &[usize]) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let w: Vec<Var> = realization.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let logits = build_forward(&mut g, &realization.config, &w, tokens)?;
    Ok(g.value(logits).clone())
}

/// Records the forward pass on `g`; `w` holds one node per slot in canonical order.
pub fn build_forward<T: Element>(g: &mut Graph<T>, cfg: &ModelConfig, w: &[Var], tokens: &[usize]) -> Result<Var> {
    if w.len() != SLOTS_PER_BLOCK * cfg.n_layers + 5 {
        return Err(Error::structural(format!("{} weight nodes for a {}-block model", w.len(), cfg.n_layers)));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("forward needs at least one token"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::invalid(format!("token id {bad} >= vocab_size {}", cfg.vocab_size)));
    }
    let (d, dh) = (cfg.d_model, cfg.head_dim());
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = g.embedding(w[0], tokens)?;
    let pos = g.embedding(w[1], &positions)?;
    let mut x = g.add(tok, pos)?;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    for i in 0..cfg.n_layers {
        let b = &w[2 + SLOTS_PER_BLOCK * i..2 + SLOTS_PER_BLOCK * (i + 1)];
        let h = g.layer_norm(x, b[LN1_W], b[LN1_B])?;
        let qkv = g.matmul(h, b[QKV_W])?;
        let qkv = g.add_row(qkv, b[QKV_B])?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let k = g.slice_cols(qkv, d + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, inv_sqrt_dh);
            let s = g.causal_mask_fill(s);
            let p = g.softmax(s);
            heads.push(g.matmul(p, v)?);
        }
        let att = g.concat_cols(&heads)?;
        let att = g.matmul(att, b[PROJ_W])?;
        let att = g.add_row(att, b[PROJ_B])?;
        x = g.add(x, att)?;

        let h = g.layer_norm(x, b[LN2_W], b[LN2_B])?;
        let f = g.matmul(h, b[FC1_W])?;
        let f = g.add_row(f, b[FC1_B])?;
        let f = g.gelu(f);
        let f = g.matmul(f, b[FC2_W])?;
        let f = g.add_row(f, b[FC2_B])?;
        x = g.add(x, f)?;
    }
    let tail = 2 + SLOTS_PER_BLOCK * cfg.n_layers;
    let x = g.layer_norm(x, w[tail], w[tail + 1])?;
    g.matmul(x, w[tail + 2])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCount {
    pub name: String,
    pub bayesian: bool,
    pub scalars: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub deterministic_scalars: usize,
    pub bayesian_scalars: usize,
    /// Deterministic scalars plus two stored values (mu, rho) per Bayesian scalar.
    pub stored_scalars: usize,
    pub slots: Vec<SlotCount>,
}

pub fn parameter_report<T: Element>(params: &ParameterSet<T>) -> ParameterReport {
    let slots: Vec<SlotCount> = params
        .slots
        .iter()
        .map(|s| SlotCount {
            name: s.name.clone(),
            bayesian: s.value.is_bayesian(),
            scalars: s.value.shape().iter().product(),
        })
        .collect();
    let bayesian: usize = slots.iter().filter(|s| s.bayesian).map(|s| s.scalars).sum();
    let deterministic: usize = slots.iter().filter(|s| !s.bayesian).map(|s| s.scalars).sum();
    ParameterReport {
        deterministic_scalars: deterministic,
        bayesian_scalars: bayesian,
        stored_scalars: deterministic + 2 * bayesian,
        slots,
    }
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "deterministic scalars: {}", self.deterministic_scalars)?;
        writeln!(f, "bayesian scalars:      {}", self.bayesian_scalars)?;
        writeln!(f, "stored scalars:        {}", self.stored_scalars)?;
        for s in self.slots.iter().filter(|s| s.bayesian) {
            writeln!(f, "  bayes {:<28} {}", s.name, s.scalars)?;
        }
        Ok(())
    }
}

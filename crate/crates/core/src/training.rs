//! Deterministic pretraining and variational finetuning.
//!
//! The objective is the negative ELBO, `nll + kl_scale * kl_total`: token
//! cross-entropy on reference positions under a reparameterized weight draw,
//! plus the summed analytic KL between every posterior and its prior.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pack_corpus, DialogueSample, PackedExample};
use crate::error::{Error, Result};
use crate::model::{build_forward, MleCheckpoint, ModelConfig, NoiseMode, ParameterSet, SlotValue};
use crate::noise::{derive_seed, fill_keyed_normals, mix64};
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::tokenizer::{Tokenizer, WhitespaceTokenizer, PAD_ID};

const NOISE_SALT: u64 = 0x6e6f_6973_655f_7365;
const SHUFFLE_SALT: u64 = 0x7368_7566_666c_6521;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeightMode {
    /// `kl_scale = 1 / batches per epoch`.
    PerBatchCount,
    /// `kl_scale = kl_weight`.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoupled decay on deterministic tensors and posterior means.
    pub weight_decay: f64,
    pub kl_weight_mode: KlWeightMode,
    pub kl_weight: f64,
    pub mc_samples_per_batch: usize,
    pub seed: u64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `Zero` forces every epsilon to 0 (debugging aid).
    pub noise: NoiseMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 3,
            weight_decay: 0.0,
            kl_weight_mode: KlWeightMode::PerBatchCount,
            kl_weight: 1.0,
            mc_samples_per_batch: 1,
            seed: 0,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            noise: NoiseMode::Sampled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("train.{k} must be > 0, got {v}")));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.mc_samples_per_batch == 0 {
            return Err(Error::config(
                "train.batch_size, train.epochs and train.mc_samples_per_batch must be >= 1",
            ));
        }
        if !(self.weight_decay >= 0.0 && self.kl_weight >= 0.0) {
            return Err(Error::config("train.weight_decay and train.kl_weight must be >= 0"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("train.beta1 and train.beta2 must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn kl_scale(&self, batches_per_epoch: usize) -> f64 {
        match self.kl_weight_mode {
            KlWeightMode::PerBatchCount => 1.0 / batches_per_epoch.max(1) as f64,
            KlWeightMode::Fixed => self.kl_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub nll: f64,
    pub kl_total: f64,
    pub kl_scale: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboSettings {
    pub kl_scale: f64,
    pub mc_samples: usize,
    pub noise: NoiseMode,
}

/// Loss value and the gradient of every trainable tensor. Deterministic
/// slots are keyed by slot name, Bayesian ones by `{name}.mu` and `{name}.rho`.
#[derive(Debug, Clone)]
pub struct ElboEval<T> {
    pub breakdown: ElboBreakdown,
    pub grads: BTreeMap<String, Tensor<T>>,
}

pub fn mu_key(slot: &str) -> String {
    format!("{slot}.mu")
}

pub fn rho_key(slot: &str) -> String {
    format!("{slot}.rho")
}

/// Summed KL over every Bayesian scalar; independent of any data.
pub fn kl_total<T: Element>(params: &ParameterSet<T>) -> f64 {
    params
        .slots()
        .iter()
        .filter_map(|s| match &s.value {
            SlotValue::Bayesian(b) => Some(
                b.mu.data()
                    .iter()
                    .zip(b.rho.data())
                    .zip(b.prior_mean.data())
                    .map(|((m, r), p)| {
                        crate::variational::kl_terms(
                            m.to_f64(),
                            crate::variational::softplus_unchecked(r.to_f64()),
                            p.to_f64(),
                            b.prior.sigma,
                        )
                    })
                    .sum::<f64>(),
            ),
            SlotValue::Deterministic(_) => None,
        })
        .sum()
}

/// Negative ELBO on one batch. Sample `m` of the `mc_samples` weight draws
/// uses the noise stream `derive_seed(noise_seed, m)`, shared by the whole batch.
pub fn elbo_loss<T: Element>(
    params: &ParameterSet<T>,
    batch: &[PackedExample],
    noise_seed: u64,
    settings: &ElboSettings,
) -> Result<ElboEval<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("elbo_loss: empty batch"));
    }
    if settings.mc_samples == 0 {
        return Err(Error::invalid("elbo_loss: mc_samples must be >= 1"));
    }
    let mut g = Graph::new();
    enum Leaf {
        Det(Var),
        Bayes { mu: Var, rho: Var },
    }
    let leaves: Vec<Leaf> = params
        .slots()
        .iter()
        .map(|s| match &s.value {
            SlotValue::Deterministic(t) => Leaf::Det(g.param(s.name.clone(), t.clone())),
            SlotValue::Bayesian(b) => Leaf::Bayes {
                mu: g.param(mu_key(&s.name), b.mu.clone()),
                rho: g.param(rho_key(&s.name), b.rho.clone()),
            },
        })
        .collect();
    let targets: Vec<usize> = batch.iter().flat_map(|e| e.targets.iter().copied()).collect();

    let mut nll_terms = Vec::with_capacity(settings.mc_samples);
    for m in 0..settings.mc_samples {
        let seed = derive_seed(noise_seed, m as u64);
        let mut weights = Vec::with_capacity(leaves.len());
        for (slot, leaf) in params.slots().iter().zip(&leaves) {
            weights.push(match *leaf {
                Leaf::Det(v) => v,
                Leaf::Bayes { mu, rho } => {
                    let mut eps = vec![0.0; g.value(mu).len()];
                    if settings.noise == NoiseMode::Sampled {
                        fill_keyed_normals(seed, &slot.name, 0, &mut eps);
                    }
                    g.reparam(mu, rho, eps)?
                }
            });
        }
        let mut logits = Vec::with_capacity(batch.len());
        for ex in batch {
            logits.push(build_forward(&mut g, &params.config, &weights, &ex.inputs)?);
        }
        let all = g.concat_rows(&logits)?;
        nll_terms.push(g.cross_entropy(all, &targets, PAD_ID)?);
    }
    let mut nll = nll_terms[0];
    for &t in &nll_terms[1..] {
        nll = g.add(nll, t)?;
    }
    if settings.mc_samples > 1 {
        nll = g.scale(nll, 1.0 / settings.mc_samples as f64);
    }

    let mut kl: Option<Var> = None;
    for (slot, leaf) in params.slots().iter().zip(&leaves) {
        if let (Leaf::Bayes { mu, rho }, SlotValue::Bayesian(b)) = (leaf, &slot.value) {
            let term = g.kl_gaussian(*mu, *rho, b.prior_mean.to_f64_vec(), b.prior.sigma)?;
            kl = Some(match kl {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    }
    let loss = match kl {
        Some(kl) => {
            let scaled = g.scale(kl, settings.kl_scale);
            g.add(nll, scaled)?
        }
        None => nll,
    };
    // Reported in f64; graph scalars are rounded to the storage type.
    let nll_value = g.value(nll).item();
    let kl_value = kl_total(params);
    let breakdown = ElboBreakdown {
        nll: nll_value,
        kl_total: kl_value,
        kl_scale: settings.kl_scale,
        loss: nll_value + settings.kl_scale * kl_value,
    };
    let grads = g.backward(loss)?;
    Ok(ElboEval { breakdown, grads })
}

/// AdamW with `f64` moment estimates. Weight decay never touches `rho`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    fn update<T: Element>(&mut self, key: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64, decay: bool) {
        let n = param.len();
        let (m, v) = self
            .moments
            .entry(key.to_owned())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let wd = if decay { lr * self.weight_decay } else { 0.0 };
        for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g.to_f64();
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mut x = p.to_f64();
            x -= wd * x;
            x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            *p = T::from_f64(x);
        }
    }

    pub fn step<T: Element>(
        &mut self,
        params: &mut ParameterSet<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        for slot in params.slots_mut() {
            match &mut slot.value {
                SlotValue::Deterministic(t) => {
                    let g = grads.get(&slot.name).ok_or_else(|| missing_grad(&slot.name))?;
                    self.update(&slot.name, t, g, lr, true);
                }
                SlotValue::Bayesian(b) => {
                    let (mk, rk) = (mu_key(&slot.name), rho_key(&slot.name));
                    let gm = grads.get(&mk).ok_or_else(|| missing_grad(&mk))?;
                    let gr = grads.get(&rk).ok_or_else(|| missing_grad(&rk))?;
                    self.update(&mk, &mut b.mu, gm, lr, true);
                    self.update(&rk, &mut b.rho, gr, lr, false);
                }
            }
        }
        Ok(())
    }
}

fn missing_grad(key: &str) -> Error {
    Error::structural(format!("no gradient for {key}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub nll: f64,
    pub kl_total: f64,
    pub kl_scale: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_nll: f64,
    pub mean_kl_total: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

fn check_finite<T: Element>(params: &ParameterSet<T>, step: usize) -> Result<()> {
    for slot in params.slots() {
        let bad = match &slot.value {
            SlotValue::Deterministic(t) => t.data().iter().any(|v| !v.to_f64().is_finite()),
            SlotValue::Bayesian(b) => b
                .mu
                .data()
                .iter()
                .chain(b.rho.data())
                .any(|v| !v.to_f64().is_finite()),
        };
        if bad {
            return Err(Error::Divergence {
                step,
                message: format!("slot {} became non-finite", slot.name),
            });
        }
    }
    Ok(())
}

/// Minibatch training on pre-packed examples. Batch order is a seeded
/// shuffle per epoch; batch `step` draws its weights from a seed derived
/// from `(cfg.seed, step)`.
pub fn train_examples<T: Element>(
    params: &mut ParameterSet<T>,
    examples: &[PackedExample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let n_batches = examples.len().div_ceil(cfg.batch_size);
    let settings = ElboSettings {
        kl_scale: cfg.kl_scale(n_batches),
        mc_samples: cfg.mc_samples_per_batch,
        noise: cfg.noise,
    };
    let noise_root = mix64(cfg.seed ^ NOISE_SALT);
    let mut opt = AdamW::new(cfg);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ SHUFFLE_SALT, epoch as u64));
        order.shuffle(&mut rng);
        let (mut nll, mut kl, mut loss) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PackedExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let eval = elbo_loss(params, &batch, derive_seed(noise_root, step as u64), &settings)?;
            let b = eval.breakdown;
            if !b.loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    message: format!("non-finite loss (nll {}, kl {})", b.nll, b.kl_total),
                });
            }
            let lr = if cfg.warmup_steps > 0 {
                cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                cfg.learning_rate
            };
            opt.step(params, &eval.grads, lr)?;
            check_finite(params, step)?;
            log.steps.push(StepLog {
                step,
                epoch,
                nll: b.nll,
                kl_total: b.kl_total,
                kl_scale: b.kl_scale,
                loss: b.loss,
            });
            nll += b.nll;
            kl += b.kl_total;
            loss += b.loss;
            step += 1;
        }
        let n = n_batches as f64;
        log.epochs.push(EpochSummary {
            epoch,
            mean_nll: nll / n,
            mean_kl_total: kl / n,
            mean_loss: loss / n,
        });
    }
    Ok(log)
}

/// Trains a fresh deterministic model on `corpus`. The vocabulary is fitted
/// to the corpus and overrides `model_cfg.vocab_size`.
pub fn pretrain_deterministic<T: Element>(
    corpus: &[DialogueSample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(MleCheckpoint<T>, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::Ingestion {
            line: 1,
            message: "corpus contains no dialogues".into(),
        });
    }
    let tok = WhitespaceTokenizer::fit(corpus.iter().flat_map(|s| s.utterances.iter().map(String::as_str)));
    let cfg = ModelConfig {
        vocab_size: tok.vocab_size(),
        ..*model_cfg
    };
    let mut params = ParameterSet::init(cfg, tok.tokens().to_vec(), train_cfg.seed)?;
    let examples = pack_corpus(&tok, corpus, cfg.max_seq_len)?;
    let log = train_examples(&mut params, &examples, train_cfg)?;
    Ok((MleCheckpoint::new(params)?, log))
}

/// Optimizes deterministic tensors and every `(mu, rho)` pair on `corpus`.
pub fn finetune<T: Element>(
    params: &ParameterSet<T>,
    corpus: &[DialogueSample],
    train_cfg: &TrainConfig,
) -> Result<(ParameterSet<T>, TrainLog)> {
    let tok = params.tokenizer()?;
    let examples = pack_corpus(&tok, corpus, params.config.max_seq_len)?;
    let mut out = params.clone();
    let log = train_examples(&mut out, &examples, train_cfg)?;
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerBayesFlags;
    use crate::schedule::{bayesianize, ScheduleConfig, ScheduleKind};
    use crate::variational::softplus_unchecked;

    fn corpus() -> Vec<DialogueSample> {
        ["a b c", "b c d", "c d a", "d a b"]
            .iter()
            .zip(["x y", "y z", "z x", "x z"])
            .map(|(c, r)| DialogueSample::new(vec![c.to_string(), r.to_string()]).unwrap())
            .collect()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 0,
            max_seq_len: 16,
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn memorizes_one_sample() {
        let one = vec![corpus()[0].clone(); 1];
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 1,
            epochs: 200,
            ..TrainConfig::default()
        };
        let (_, log) = pretrain_deterministic::<f32>(&one, &tiny(), &cfg).unwrap();
        assert_eq!(log.steps.len(), 200);
        assert!(log.final_loss().unwrap() < 0.1, "{:?}", log.final_loss());
    }

    #[test]
    fn pretraining_is_reproducible() {
        let (a, la) = pretrain_deterministic::<f32>(&corpus(), &tiny(), &quick()).unwrap();
        let (b, lb) = pretrain_deterministic::<f32>(&corpus(), &tiny(), &quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(matches!(
            pretrain_deterministic::<f32>(&[], &tiny(), &quick()),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn deterministic_model_has_no_kl() {
        let (mle, _) = pretrain_deterministic::<f32>(&corpus(), &tiny(), &quick()).unwrap();
        let tok = mle.params().tokenizer().unwrap();
        let ex = pack_corpus(&tok, &corpus(), 16).unwrap();
        let s = ElboSettings {
            kl_scale: 0.5,
            mc_samples: 1,
            noise: NoiseMode::Sampled,
        };
        let e = elbo_loss(mle.params(), &ex, 0, &s).unwrap();
        assert_eq!(e.breakdown.kl_total, 0.0);
        assert_eq!(e.breakdown.loss, e.breakdown.nll);
        assert!(elbo_loss(mle.params(), &[], 0, &s).is_err());
    }

    #[test]
    fn kl_at_initialization_matches_closed_form() {
        let (mle, _) = pretrain_deterministic::<f32>(&corpus(), &tiny(), &quick()).unwrap();
        let cfg = ScheduleConfig::with_kind(ScheduleKind::BodebG);
        let p = bayesianize(&mle, &LayerBayesFlags::default(), &cfg).unwrap();
        let tok = p.tokenizer().unwrap();
        let ex = pack_corpus(&tok, &corpus(), 16).unwrap();
        let s = ElboSettings {
            kl_scale: 1.0,
            mc_samples: 1,
            noise: NoiseMode::Sampled,
        };
        let mut expected = 0.0;
        for slot in p.slots() {
            if let SlotValue::Bayesian(b) = &slot.value {
                let sp = b.prior.sigma;
                for r in b.rho.data() {
                    let sq = softplus_unchecked(*r as f64);
                    expected += (sp / sq).ln() + sq * sq / (2.0 * sp * sp) - 0.5;
                }
            }
        }
        let a = elbo_loss(&p, &ex[..2], 1, &s).unwrap().breakdown.kl_total;
        let b = elbo_loss(&p, &ex[2..], 9, &s).unwrap().breakdown.kl_total;
        assert_eq!(a, b);
        assert!((a - expected).abs() <= 1e-9 * expected, "{a} vs {expected}");
        assert!((kl_total(&p) - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn zero_noise_zero_kl_matches_deterministic_training() {
        let (mle, _) = pretrain_deterministic::<f32>(&corpus(), &tiny(), &quick()).unwrap();
        let bayes = bayesianize(&mle, &LayerBayesFlags::default(), &ScheduleConfig::default()).unwrap();
        let det_cfg = quick();
        let bayes_cfg = TrainConfig {
            noise: NoiseMode::Zero,
            kl_weight_mode: KlWeightMode::Fixed,
            kl_weight: 0.0,
            ..quick()
        };
        let (det, det_log) = finetune(mle.params(), &corpus(), &det_cfg).unwrap();
        let (fb, bayes_log) = finetune(&bayes, &corpus(), &bayes_cfg).unwrap();
        let trace = |l: &TrainLog| l.steps.iter().map(|s| s.nll.to_bits()).collect::<Vec<_>>();
        assert_eq!(trace(&det_log), trace(&bayes_log));
        for (d, b) in det.slots().iter().zip(fb.slots()) {
            match (&d.value, &b.value) {
                (SlotValue::Deterministic(x), SlotValue::Deterministic(y)) => assert_eq!(x, y),
                (SlotValue::Deterministic(x), SlotValue::Bayesian(y)) => assert_eq!(x, &y.mu),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn divergence_names_the_step() {
        let (mle, _) = pretrain_deterministic::<f32>(&corpus(), &tiny(), &quick()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e38,
            ..quick()
        };
        match finetune(mle.params(), &corpus(), &cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step < 4),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

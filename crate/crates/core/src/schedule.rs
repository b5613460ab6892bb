//! Empirical-Bayes schedules: posterior initializations and priors derived
//! from a maximum-likelihood checkpoint, scaled by module depth.
//!
//! Posterior standard deviations start at `|w_hat| * alpha / pos` (floored),
//! so deeper modules begin tighter around the pretrained value. Priors are
//! centred on `w_hat` with a depth-dependent width: a single Gaussian with
//! `sigma = softplus(1 / pos)`, or a collapsed equal-mean mixture of a slab
//! (`softplus(1)`) and a spike (`softplus(1 / pos^2)`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BayesSlot, LayerBayesFlags, MleCheckpoint, ParameterSet, SlotValue};
use crate::numerics::{Element, Tensor};
use crate::parallel::Exec;
use crate::variational::{inverse_softplus, softplus_unchecked, GaussianPrior, VariationalGaussian};

/// 1-based position of the transformer block a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthIndex {
    pos: usize,
    n_layers: usize,
}

impl DepthIndex {
    pub fn new(pos: usize, n_layers: usize) -> Result<Self> {
        if pos == 0 || pos > n_layers {
            return Err(Error::structural(format!(
                "depth position {pos} outside 1..={n_layers}"
            )));
        }
        Ok(Self { pos, n_layers })
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Depth-scaled posterior, single Gaussian prior.
    BodebG,
    /// Depth-scaled posterior, spike-and-slab mixture prior.
    BodebM,
    /// Posterior width proportional to `|w_hat|` only, unit-variance prior.
    Moped,
    /// Mixture prior, posterior width growing with depth instead of shrinking.
    Opposite,
    /// Mixture prior; weights depth-scaled, biases MOPED-style.
    WeightsOnly,
    /// Mixture prior; biases depth-scaled, weights MOPED-style.
    BiasOnly,
    /// Mixture prior; every posterior width MOPED-style.
    None,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 7] = [
        ScheduleKind::BodebG,
        ScheduleKind::BodebM,
        ScheduleKind::Moped,
        ScheduleKind::Opposite,
        ScheduleKind::WeightsOnly,
        ScheduleKind::BiasOnly,
        ScheduleKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::BodebG => "bodeb-g",
            ScheduleKind::BodebM => "bodeb-m",
            ScheduleKind::Moped => "moped",
            ScheduleKind::Opposite => "opposite",
            ScheduleKind::WeightsOnly => "weights-only",
            ScheduleKind::BiasOnly => "bias-only",
            ScheduleKind::None => "none",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("schedule.kind: unknown schedule {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Posterior-variance penalty.
    pub alpha: f64,
    /// Slab weight of the mixture prior.
    pub eta: f64,
    /// Lower bound on an initial posterior standard deviation.
    pub sigma_floor: f64,
    /// MOPED scale; `None` means "same as alpha".
    #[serde(default)]
    pub moped_delta: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::BodebM,
            alpha: 5e-2,
            eta: 0.5,
            sigma_floor: 1e-6,
            moped_delta: None,
        }
    }
}

impl ScheduleConfig {
    pub fn with_kind(kind: ScheduleKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn moped_delta(&self) -> f64 {
        self.moped_delta.unwrap_or(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("schedule.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("schedule.eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::config(format!(
                "schedule.sigma_floor must be > 0, got {}",
                self.sigma_floor
            )));
        }
        if let Some(d) = self.moped_delta {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::config(format!("schedule.moped_delta must be >= 0, got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorProvenance {
    Gaussian,
    Mixture,
    MopedBaseline,
}

/// The two equal-mean components a mixture prior was collapsed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponents {
    pub slab_sigma: f64,
    pub spike_sigma: f64,
    /// Weight of the slab; the spike carries `1 - eta`.
    pub eta: f64,
}

/// Width of a prior; shared by every scalar of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorScale {
    pub sigma: f64,
    pub provenance: PriorProvenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<MixtureComponents>,
}

/// Fixed prior of one Bayesian scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub mean: f64,
    pub scale: PriorScale,
}

impl PriorSpec {
    pub fn sigma(&self) -> f64 {
        self.scale.sigma
    }

    pub fn as_gaussian(&self) -> Result<GaussianPrior> {
        GaussianPrior::new(self.mean, self.scale.sigma)
    }
}

enum WidthRule {
    Depth,
    Moped,
    Opposite,
}

fn width_rule(kind: ScheduleKind, is_bias: bool) -> WidthRule {
    match (kind, is_bias) {
        (ScheduleKind::BodebG | ScheduleKind::BodebM, _) => WidthRule::Depth,
        (ScheduleKind::Moped | ScheduleKind::None, _) => WidthRule::Moped,
        (ScheduleKind::Opposite, _) => WidthRule::Opposite,
        (ScheduleKind::WeightsOnly, false) | (ScheduleKind::BiasOnly, true) => WidthRule::Depth,
        (ScheduleKind::WeightsOnly, true) | (ScheduleKind::BiasOnly, false) => WidthRule::Moped,
    }
}

/// Initial posterior standard deviation before conversion to `rho`.
pub fn initial_sigma(mle_value: f64, depth: DepthIndex, cfg: &ScheduleConfig, is_bias: bool) -> f64 {
    let factor = match width_rule(cfg.kind, is_bias) {
        WidthRule::Depth => cfg.alpha / depth.pos as f64,
        WidthRule::Moped => cfg.moped_delta(),
        WidthRule::Opposite => cfg.alpha * depth.pos as f64 / depth.n_layers as f64,
    };
    (mle_value.abs() * factor).max(cfg.sigma_floor)
}

/// Posterior initialization for one scalar: mean at the MLE value, width
/// from the schedule.
pub fn init_posterior(
    mle_value: f64,
    depth: DepthIndex,
    cfg: &ScheduleConfig,
    is_bias: bool,
) -> Result<VariationalGaussian> {
    cfg.validate()?;
    let sigma = initial_sigma(mle_value, depth, cfg, is_bias);
    VariationalGaussian::new(mle_value, inverse_softplus(sigma)?)
}

/// Prior width at a given depth; independent of the MLE value.
pub fn prior_scale(depth: DepthIndex, cfg: &ScheduleConfig) -> PriorScale {
    let pos = depth.pos as f64;
    match cfg.kind {
        ScheduleKind::BodebG => PriorScale {
            sigma: softplus_unchecked(1.0 / pos),
            provenance: PriorProvenance::Gaussian,
            components: None,
        },
        ScheduleKind::Moped => PriorScale {
            sigma: 1.0,
            provenance: PriorProvenance::MopedBaseline,
            components: None,
        },
        ScheduleKind::BodebM
        | ScheduleKind::Opposite
        | ScheduleKind::WeightsOnly
        | ScheduleKind::BiasOnly
        | ScheduleKind::None => {
            let slab = softplus_unchecked(1.0);
            let spike = softplus_unchecked(1.0 / (pos * pos));
            // Equal component means: the between-means variance term vanishes.
            let var = cfg.eta * slab * slab + (1.0 - cfg.eta) * spike * spike;
            PriorScale {
                sigma: var.sqrt(),
                provenance: PriorProvenance::Mixture,
                components: Some(MixtureComponents {
                    slab_sigma: slab,
                    spike_sigma: spike,
                    eta: cfg.eta,
                }),
            }
        }
    }
}

pub fn build_prior(mle_value: f64, depth: DepthIndex, cfg: &ScheduleConfig) -> Result<PriorSpec> {
    cfg.validate()?;
    Ok(PriorSpec {
        mean: mle_value,
        scale: prior_scale(depth, cfg),
    })
}

/// Converts every slot selected by `flags` into a variational slot anchored
/// on the MLE values; all other slots are copied unchanged.
pub fn bayesianize<T: Element>(
    mle: &MleCheckpoint<T>,
    flags: &LayerBayesFlags,
    cfg: &ScheduleConfig,
) -> Result<ParameterSet<T>> {
    bayesianize_with(mle, flags, cfg, Exec::default())
}

pub fn bayesianize_with<T: Element>(
    mle: &MleCheckpoint<T>,
    flags: &LayerBayesFlags,
    cfg: &ScheduleConfig,
    exec: Exec,
) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let src = mle.params();
    let converted: Vec<Result<SlotValue<T>>> = exec.map(src.slots(), |slot| {
        let SlotValue::Deterministic(w) = &slot.value else {
            return Err(Error::structural(format!("slot {} of an MLE checkpoint is not deterministic", slot.name)));
        };
        if !flags.selects(slot.layer) {
            return Ok(SlotValue::Deterministic(w.clone()));
        }
        let depth = slot.depth.ok_or_else(|| {
            Error::structural(format!("flagged layer {} has no depth assignment", slot.name))
        })?;
        let is_bias = slot.name.ends_with(".bias");
        let mut rho = Vec::with_capacity(w.len());
        for v in w.data() {
            let sigma = initial_sigma(v.to_f64(), depth, cfg, is_bias);
            rho.push(T::from_f64(inverse_softplus(sigma)?));
        }
        Ok(SlotValue::Bayesian(BayesSlot {
            mu: w.clone(),
            rho: Tensor::new(w.shape().to_vec(), rho)?,
            prior_mean: w.clone(),
            prior: prior_scale(depth, cfg),
        }))
    });
    let mut out = src.clone();
    for (slot, value) in out.slots_mut().iter_mut().zip(converted) {
        slot.value = value?;
    }
    out.flags = Some(*flags);
    out.schedule = Some(*cfg);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const INV_SOFTPLUS_005: f64 = -2.970_628_109_057_377;

    fn d(pos: usize) -> DepthIndex {
        DepthIndex::new(pos, 12).unwrap()
    }

    #[test]
    fn posterior_examples() {
        let cfg = ScheduleConfig::default();
        let q = init_posterior(1.0, d(1), &cfg, false).unwrap();
        assert_eq!(q.mu(), 1.0);
        assert!((q.sigma() - 0.05).abs() < 1e-15);
        assert!((q.rho() - INV_SOFTPLUS_005).abs() < 1e-14);

        let q = init_posterior(-2.0, d(4), &cfg, false).unwrap();
        assert!((q.sigma() - 0.025).abs() < 1e-15);

        let q = init_posterior(0.0, d(3), &cfg, true).unwrap();
        assert!((q.sigma() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn variant_width_rules() {
        let w = 0.8;
        let depth = DepthIndex::new(3, 4).unwrap();
        let mut cfg = ScheduleConfig::default();
        let depth_rule = w * 0.05 / 3.0;
        let moped_rule = w * 0.05;
        let opposite_rule = w * 0.05 * 3.0 / 4.0;
        let cases = [
            (ScheduleKind::BodebG, depth_rule, depth_rule),
            (ScheduleKind::BodebM, depth_rule, depth_rule),
            (ScheduleKind::Moped, moped_rule, moped_rule),
            (ScheduleKind::None, moped_rule, moped_rule),
            (ScheduleKind::Opposite, opposite_rule, opposite_rule),
            (ScheduleKind::WeightsOnly, depth_rule, moped_rule),
            (ScheduleKind::BiasOnly, moped_rule, depth_rule),
        ];
        for (kind, weight_sigma, bias_sigma) in cases {
            cfg.kind = kind;
            assert!((initial_sigma(w, depth, &cfg, false) - weight_sigma).abs() < 1e-15, "{kind}");
            assert!((initial_sigma(w, depth, &cfg, true) - bias_sigma).abs() < 1e-15, "{kind}");
        }
        cfg.kind = ScheduleKind::Moped;
        cfg.moped_delta = Some(0.2);
        assert!((initial_sigma(w, depth, &cfg, false) - 0.16).abs() < 1e-15);
    }

    #[test]
    fn prior_examples() {
        let g = build_prior(0.3, d(1), &ScheduleConfig::with_kind(ScheduleKind::BodebG)).unwrap();
        assert_eq!(g.mean, 0.3);
        assert!((g.sigma() - 1.313_261_687_518_222_8).abs() < 1e-15);

        let m = build_prior(0.3, d(2), &ScheduleConfig::default()).unwrap();
        let c = m.scale.components.unwrap();
        assert!((c.slab_sigma - 1.313_261_687_518_222_8).abs() < 1e-15);
        // mpmath: softplus(1/4) and the collapsed mixture width at eta = 0.5
        assert!((c.spike_sigma - 0.825_939_419_878_843_6).abs() < 1e-15);
        assert!((m.sigma() - 1.097_003_232_723_817_2).abs() < 1e-6);
        let var = c.eta * c.slab_sigma.powi(2) + (1.0 - c.eta) * c.spike_sigma.powi(2);
        assert!((m.sigma().powi(2) - var).abs() < 1e-12);

        let moped = build_prior(-0.7, d(5), &ScheduleConfig::with_kind(ScheduleKind::Moped)).unwrap();
        assert_eq!((moped.mean, moped.sigma()), (-0.7, 1.0));
    }

    #[test]
    fn spike_approaches_ln2_from_above() {
        let cfg = ScheduleConfig::default();
        let mut last = f64::INFINITY;
        for pos in [1, 2, 5, 50, 1000, 100_000] {
            let spike = prior_scale(DepthIndex::new(pos, 100_000).unwrap(), &cfg)
                .components
                .unwrap()
                .spike_sigma;
            assert!(spike > std::f64::consts::LN_2);
            assert!(spike < last);
            last = spike;
        }
        assert!(last - std::f64::consts::LN_2 < 1e-9);
    }

    #[test]
    fn depth_monotonicity() {
        let n = 12;
        let g = ScheduleConfig::with_kind(ScheduleKind::BodebG);
        let eta_values = [0.1, 0.5, 0.9];
        for pos in 1..n {
            let (a, b) = (DepthIndex::new(pos, n).unwrap(), DepthIndex::new(pos + 1, n).unwrap());
            assert!(initial_sigma(0.5, a, &g, false) > initial_sigma(0.5, b, &g, false));
            assert!(prior_scale(a, &g).sigma > prior_scale(b, &g).sigma);
            let ma = prior_scale(a, &ScheduleConfig::default()).components.unwrap();
            let mb = prior_scale(b, &ScheduleConfig::default()).components.unwrap();
            assert!(ma.spike_sigma > mb.spike_sigma);
        }
        // Mixture bounds: never wider than the single Gaussian at the
        // shallowest block, never narrower than sqrt(1 - eta) * spike.
        let top = softplus_unchecked(1.0);
        for eta in eta_values {
            let cfg = ScheduleConfig {
                eta,
                ..ScheduleConfig::default()
            };
            for pos in 1..=n {
                let s = prior_scale(DepthIndex::new(pos, n).unwrap(), &cfg);
                let c = s.components.unwrap();
                assert!(s.sigma <= top);
                if pos >= 2 {
                    assert!(s.sigma < top);
                    assert!(c.spike_sigma < c.slab_sigma);
                }
                assert!(s.sigma > (1.0 - eta).sqrt() * c.spike_sigma);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!("bodeb-x".parse::<ScheduleKind>().is_err());
        assert_eq!("weights-only".parse::<ScheduleKind>().unwrap(), ScheduleKind::WeightsOnly);
        let bad = ScheduleConfig {
            eta: 1.5,
            ..ScheduleConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ScheduleConfig {
            sigma_floor: 0.0,
            ..ScheduleConfig::default()
        };
        assert!(init_posterior(1.0, d(1), &bad, false).is_err());
        assert!(DepthIndex::new(0, 4).is_err());
        assert!(DepthIndex::new(5, 4).is_err());
    }
}

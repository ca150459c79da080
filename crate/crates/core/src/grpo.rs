//! Group-relative advantages, the clipped surrogate objective with a KL
//! penalty, and the parameter updates that act on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format_lang::{is_compliant, Token};
use crate::policy::{backward, logprob_and_grad, trace, PolicyParams, Rollout};

/// Probability floor applied to the reference distribution inside the KL.
pub const KL_PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    /// Plain gradient steps.
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    pub std_floor: f64,
    pub optimizer: OptimizerKind,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            learning_rate: 0.3,
            grad_accum_steps: 2,
            batch_size: 6,
            std_floor: 1e-12,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return fail(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return fail(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return fail(format!("kl_beta must be >= 0, got {}", self.kl_beta));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 {
            return fail("grad_accum_steps and batch_size must be positive".into());
        }
        if self.std_floor.is_nan() || self.std_floor < 0.0 {
            return fail(format!("std_floor must be >= 0, got {}", self.std_floor));
        }
        Ok(())
    }
}

/// Standardised rewards of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    pub group_mean: f64,
    /// Population standard deviation of the raw rewards.
    pub group_std: f64,
}

pub fn compute_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<AdvantageSet> {
    if rewards.len() != cfg.group_size {
        return Err(Error::Config(format!(
            "expected {} rewards, got {}",
            cfg.group_size,
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let values = if std > cfg.std_floor {
        rewards.iter().map(|r| (r - mean) / std).collect()
    } else {
        vec![0.0; rewards.len()]
    };
    Ok(AdvantageSet {
        values,
        group_mean: mean,
        group_std: std,
    })
}

fn check_normalised(dist: &[f64], name: &str) -> Result<()> {
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 || dist.iter().any(|&p| p.is_nan() || p < 0.0) {
        return Err(Error::Domain(format!(
            "{name} distribution is not normalised (sum {total})"
        )));
    }
    Ok(())
}

/// Exact KL(cur ‖ ref) between two categorical distributions.
pub fn token_kl(dist_cur: &[f64], dist_ref: &[f64]) -> Result<f64> {
    if dist_cur.len() != dist_ref.len() {
        return Err(Error::Config("KL operands differ in length".into()));
    }
    check_normalised(dist_cur, "current")?;
    check_normalised(dist_ref, "reference")?;
    Ok(kl_unchecked(dist_cur, dist_ref))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.ln() - qv.max(KL_PROB_FLOOR).ln()))
        .sum()
}

/// ∂KL/∂logits of the current distribution.
fn kl_logit_grad(p: &[f64], q: &[f64], kl: f64) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pv, &qv)| {
            if pv > 0.0 {
                pv * (pv.ln() - qv.max(KL_PROB_FLOOR).ln() - kl)
            } else {
                0.0
            }
        })
        .collect()
}

/// Objective value, mean per-token KL and gradient for one group.
#[derive(Clone, Debug)]
pub struct GroupObjective {
    pub value: f64,
    pub kl_mean: f64,
    pub grad: PolicyParams,
}

/// The group's clipped surrogate minus the KL penalty, averaged per token
/// and over the group, together with its gradient with respect to `params`.
///
/// `params` is the policy being optimised; each rollout supplies the
/// behaviour log-probabilities and the reference distributions, which are
/// treated as constants.
pub fn grpo_objective(
    params: &PolicyParams,
    features: &[f64],
    rollouts: &[Rollout],
    advantages: &AdvantageSet,
    cfg: &GrpoConfig,
) -> Result<GroupObjective> {
    if rollouts.len() != advantages.values.len() {
        return Err(Error::Config(format!(
            "{} rollouts but {} advantages",
            rollouts.len(),
            advantages.values.len()
        )));
    }
    let g = rollouts.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let mut value = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_count = 0usize;
    let mut grad = PolicyParams::zeros(params.dims());

    for (i, (ro, &adv)) in rollouts.iter().zip(&advantages.values).enumerate() {
        if ro.is_empty() {
            continue;
        }
        if ro.logp_old.len() != ro.len() || ro.dist_ref.len() != ro.len() {
            return Err(Error::Config(format!("rollout {i} is missing per-position records")));
        }
        let tr = trace(params, features, &ro.tokens)?;
        let weight = 1.0 / (g * ro.len() as f64);
        let mut dlogits = Vec::with_capacity(ro.len());
        for (t, &tok) in ro.tokens.iter().enumerate() {
            let p = &tr.probs[t];
            let q = &ro.dist_ref[t];
            let ratio = (p[tok.id()].ln() - ro.logp_old[t]).exp();
            if !ratio.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite probability ratio in rollout {i} at position {t}"
                )));
            }
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(lo, hi) * adv;
            // d(surrogate)/d(log π) is ρ·Â when the unclipped branch is active, 0 otherwise.
            let (surrogate, dsur_dlogp) = if unclipped <= clipped {
                (unclipped, ratio * adv)
            } else {
                (clipped, 0.0)
            };
            let kl = kl_unchecked(p, q);
            value += weight * (surrogate - cfg.kl_beta * kl);
            kl_sum += kl;
            kl_count += 1;

            let dkl = kl_logit_grad(p, q, kl);
            let mut dz: Vec<f64> = p
                .iter()
                .zip(&dkl)
                .map(|(pv, dk)| weight * (-dsur_dlogp * pv - cfg.kl_beta * dk))
                .collect();
            dz[tok.id()] += weight * dsur_dlogp;
            dlogits.push(dz);
        }
        grad.add_scaled(1.0, &backward(params, features, &tr, &dlogits));
    }
    if !value.is_finite() {
        return Err(Error::Numerical(format!("objective evaluated to {value}")));
    }
    Ok(GroupObjective {
        value,
        kl_mean: if kl_count > 0 { kl_sum / kl_count as f64 } else { 0.0 },
        grad,
    })
}

/// Gradient ascent on an accumulated gradient: `θ + lr · grad / grad_accum_steps`.
pub fn apply_update(params: &PolicyParams, grad: &PolicyParams, cfg: &GrpoConfig) -> Result<PolicyParams> {
    if !params.same_shape(grad) {
        return Err(Error::Config("gradient shape does not match parameters".into()));
    }
    let mut next = params.clone();
    next.add_scaled(cfg.learning_rate / cfg.grad_accum_steps as f64, grad);
    Ok(next)
}

/// Mean teacher-forced negative log-likelihood of `target` and its gradient.
pub fn sft_loss_and_grad(params: &PolicyParams, features: &[f64], target: &[Token]) -> Result<(f64, PolicyParams)> {
    if !is_compliant(target) {
        return Err(Error::Config("SFT target is not a compliant answer sequence".into()));
    }
    let (logps, mut grad) = logprob_and_grad(params, features, target)?;
    let n = logps.len() as f64;
    let loss = -logps.iter().sum::<f64>() / n;
    grad.scale(-1.0 / n);
    Ok((loss, grad))
}

/// One teacher-forced descent step on a single example. Returns the loss
/// before the step and the updated parameters.
pub fn sft_update(
    params: &PolicyParams,
    features: &[f64],
    target: &[Token],
    cfg: &GrpoConfig,
) -> Result<(f64, PolicyParams)> {
    let (loss, grad) = sft_loss_and_grad(params, features, target)?;
    let mut next = params.clone();
    next.add_scaled(-cfg.learning_rate, &grad);
    Ok((loss, next))
}

/// Stateful optimiser used by the training loop. Always ascends: callers
/// pass the gradient of the quantity to maximise.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: Option<PolicyParams>,
    v: Option<PolicyParams>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            m: None,
            v: None,
        }
    }

    /// Applies one step from a gradient summed over `cfg.grad_accum_steps` micro-batches.
    pub fn ascend(&mut self, params: &PolicyParams, grad: &PolicyParams, cfg: &GrpoConfig) -> Result<PolicyParams> {
        match self.kind {
            OptimizerKind::Sgd => apply_update(params, grad, cfg),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !params.same_shape(grad) {
                    return Err(Error::Config("gradient shape does not match parameters".into()));
                }
                self.step += 1;
                let dims = params.dims();
                let m = self.m.get_or_insert_with(|| PolicyParams::zeros(dims));
                let v = self.v.get_or_insert_with(|| PolicyParams::zeros(dims));
                let scale = 1.0 / cfg.grad_accum_steps as f64;
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let mut next = params.clone();
                for (((w, g), mb), vb) in next
                    .blocks_mut()
                    .into_iter()
                    .zip(grad.blocks())
                    .zip(m.blocks_mut())
                    .zip(v.blocks_mut())
                {
                    for k in 0..w.len() {
                        let gk = g[k] * scale;
                        mb[k] = beta1 * mb[k] + (1.0 - beta1) * gk;
                        vb[k] = beta2 * vb[k] + (1.0 - beta2) * gk * gk;
                        w[k] += cfg.learning_rate * (mb[k] / bc1) / ((vb[k] / bc2).sqrt() + eps);
                    }
                }
                Ok(next)
            }
        }
    }
}

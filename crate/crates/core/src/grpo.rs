//! Group-relative policy optimization: advantages, token ratios, the clipped
//! surrogate with per-step KL penalty, and its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    accumulate_objective_grad_with, evaluate_trajectory, ContextInput, Decoding, PolicyParams, Trajectory,
    TrajectoryEval,
};
use crate::vocab::Vocab;

/// Standard deviations below this collapse the group to zero advantages.
pub const DEGENERATE_STD: f64 = 1e-12;

/// `(r_i − mean) / std` with the population standard deviation.
pub fn normalize_advantages(rewards: &[f64]) -> Vec<f64> {
    assert!(rewards.len() >= 2, "a group needs at least two members");
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// N trajectories for one query, with rewards and advantages. The
/// trajectories' recorded log-probs are the old-policy values.
#[derive(Debug, Clone)]
pub struct Group {
    pub input: ContextInput,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(input: ContextInput, trajectories: Vec<Trajectory>, rewards: Vec<f64>) -> Self {
        let advantages = normalize_advantages(&rewards);
        Group {
            input,
            trajectories,
            rewards,
            advantages,
        }
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoSettings {
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    pub decoding: Decoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateReport {
    pub surrogate: f64,
    pub mean_kl: f64,
    pub grad_norm: f64,
    /// Share of tokens where the clipped ratio differs from the raw one.
    pub clip_frac: f64,
    pub mean_reward: f64,
}

/// Raw and clipped token ratios `(s1, s2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenRatio {
    pub raw: f64,
    pub clipped: f64,
}

pub fn clip_ratio(raw: f64, eps: f64) -> f64 {
    raw.clamp(1.0 - eps, 1.0 + eps)
}

pub fn token_ratios(
    params: &PolicyParams,
    vocab: &Vocab,
    group: &Group,
    settings: &GrpoSettings,
) -> Result<Vec<Vec<TokenRatio>>> {
    group
        .trajectories
        .iter()
        .map(|traj| {
            let lp = crate::policy::logprob(params, vocab, &group.input, settings.decoding, &traj.tokens)?;
            Ok(lp
                .iter()
                .zip(&traj.logprobs)
                .map(|(new, old)| {
                    let raw = (new - old).exp();
                    TokenRatio {
                        raw,
                        clipped: clip_ratio(raw, settings.clip_epsilon),
                    }
                })
                .collect())
        })
        .collect()
}

/// The unclipped branch carries the gradient unless the clipped term is
/// strictly smaller (boundary ties go to the unclipped branch).
fn unclipped_active(ratio: TokenRatio, advantage: f64) -> bool {
    ratio.raw * advantage <= ratio.clipped * advantage
}

struct Accum {
    objective: f64,
    kl_sum: f64,
    tokens: usize,
    clipped: usize,
}

fn surrogate_impl(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    vocab: &Vocab,
    group: &Group,
    settings: &GrpoSettings,
    mut grad: Option<&mut [f64]>,
) -> Result<Accum> {
    let n = group.trajectories.len() as f64;
    let mut acc = Accum {
        objective: 0.0,
        kl_sum: 0.0,
        tokens: 0,
        clipped: 0,
    };
    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        let len = traj.tokens.len();
        if len == 0 {
            return Err(Error::Contract("empty trajectory in group".into()));
        }
        let scale = 1.0 / (n * len as f64);
        let mut step = |eval: &TrajectoryEval| -> Result<Vec<f64>> {
            let mut weights = vec![0.0; len];
            let mut inner = 0.0;
            for t in 0..len {
                let raw = (eval.logprobs[t] - traj.logprobs[t]).exp();
                let ratio = TokenRatio {
                    raw,
                    clipped: clip_ratio(raw, settings.clip_epsilon),
                };
                if ratio.clipped != ratio.raw {
                    acc.clipped += 1;
                }
                inner += (ratio.raw * adv).min(ratio.clipped * adv) - settings.kl_coeff * eval.kl[t];
                acc.kl_sum += eval.kl[t];
                if unclipped_active(ratio, adv) {
                    // d(s1)/dθ = s1 · d log π/dθ
                    weights[t] = scale * adv * raw;
                }
            }
            acc.tokens += len;
            acc.objective += scale * inner;
            Ok(weights)
        };
        let dec = settings.decoding;
        match grad.as_deref_mut() {
            Some(g) => {
                accumulate_objective_grad_with(
                    params,
                    Some(ref_params),
                    vocab,
                    &group.input,
                    dec,
                    &traj.tokens,
                    step,
                    settings.kl_coeff * scale,
                    g,
                )?;
            }
            None => {
                let eval = evaluate_trajectory(params, ref_params, vocab, &group.input, dec, &traj.tokens)?;
                step(&eval)?;
            }
        }
    }
    Ok(acc)
}

fn report(acc: &Accum, group: &Group, grad_norm: f64) -> UpdateReport {
    UpdateReport {
        surrogate: acc.objective,
        mean_kl: acc.kl_sum / acc.tokens.max(1) as f64,
        grad_norm,
        clip_frac: acc.clipped as f64 / acc.tokens.max(1) as f64,
        mean_reward: group.mean_reward(),
    }
}

/// J = (1/N) Σ_i (1/L_i) Σ_t [min(s1·A_i, s2·A_i) − β·KL_t].
pub fn surrogate(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    vocab: &Vocab,
    group: &Group,
    settings: &GrpoSettings,
) -> Result<(f64, UpdateReport)> {
    let acc = surrogate_impl(params, ref_params, vocab, group, settings, None)?;
    Ok((acc.objective, report(&acc, group, 0.0)))
}

/// ∇θ J. Clipped tokens contribute nothing; the KL term differentiates the
/// exact categorical divergence with respect to the current params only.
pub fn surrogate_gradient(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    vocab: &Vocab,
    group: &Group,
    settings: &GrpoSettings,
) -> Result<(Vec<f64>, UpdateReport)> {
    let mut grad = vec![0.0; params.len()];
    let acc = surrogate_impl(params, ref_params, vocab, group, settings, Some(&mut grad))?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((grad, report(&acc, group, norm)))
}

/// Average of per-group gradients and reports, reduced in group order.
pub fn batch_gradient(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    vocab: &Vocab,
    groups: &[Group],
    settings: &GrpoSettings,
) -> Result<(Vec<f64>, UpdateReport)> {
    let b = groups.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut rep = UpdateReport::default();
    for g in groups {
        let (gg, r) = surrogate_gradient(params, ref_params, vocab, g, settings)?;
        for (acc, x) in grad.iter_mut().zip(&gg) {
            *acc += x / b;
        }
        rep.surrogate += r.surrogate / b;
        rep.mean_kl += r.mean_kl / b;
        rep.clip_frac += r.clip_frac / b;
        rep.mean_reward += r.mean_reward / b;
    }
    rep.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((grad, rep))
}

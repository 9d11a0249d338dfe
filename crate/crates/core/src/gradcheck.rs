//! Central-difference verification of the surrogate gradient on small seeded
//! instances.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grpo::{surrogate, surrogate_gradient, token_ratios, Group, GrpoSettings};
use crate::policy::{project, sample_trajectory, ContextInput, Decoding, Dims, Mode, PolicyParams};
use crate::rng::seeded_stream;
use crate::world::{Category, Condition, Instruction, Split, WorldSpec};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Tokens whose raw ratio lies this close to 1 ± ε make an instance ineligible.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub seed: u64,
    pub kl_coeff: f64,
    pub mode: Mode,
    pub grammar_mask: bool,
}

impl InstanceSpec {
    /// Three instances covering both modes, β ∈ {0, 0.04} and the mask switch.
    pub fn defaults() -> [InstanceSpec; 3] {
        [
            InstanceSpec {
                seed: 11,
                kl_coeff: 0.0,
                mode: Mode::Eval,
                grammar_mask: true,
            },
            InstanceSpec {
                seed: 12,
                kl_coeff: 0.04,
                mode: Mode::Reprompt,
                grammar_mask: true,
            },
            InstanceSpec {
                seed: 13,
                kl_coeff: 0.04,
                mode: Mode::Eval,
                grammar_mask: false,
            },
        ]
    }
}

/// A fully materialized instance: current, old and reference params plus one group.
pub struct Instance {
    pub world: WorldSpec,
    pub params: PolicyParams,
    pub ref_params: PolicyParams,
    pub group: Group,
    pub settings: GrpoSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub spec: InstanceSpec,
    pub n_params: usize,
    /// max_i |analytic_i − numeric_i| / ‖numeric‖∞
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub rel_l2_error: f64,
    pub screening_attempts: u32,
    pub passed: bool,
}

fn small_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    c.feature_dim = 8;
    c.hidden_dim = 8;
    c.n_objects = 4;
    c.n_concrete = 6;
    c.n_abstract = 4;
    c
}

fn perturbed(base: &PolicyParams, stream: &mut crate::rng::Stream, scale: f64) -> PolicyParams {
    let noise = Normal::new(0.0, scale).expect("positive scale");
    let mut p = base.clone();
    for x in p.as_mut_slice() {
        *x += noise.sample(stream);
    }
    p
}

const MAX_ATTEMPTS: u32 = 200;

/// Builds the instance for `spec`, redrawing the current-params perturbation
/// until no token ratio sits within [`KINK_MARGIN`] of a clip boundary.
pub fn build_instance(spec: &InstanceSpec) -> Result<(Instance, u32)> {
    let config = small_config(spec.seed);
    let world = WorldSpec::build(&config)?;
    let dims = Dims {
        vocab: world.vocab().len(),
        hidden: config.hidden_dim,
    };
    let mut stream = seeded_stream(spec.seed, "gradcheck");
    let old = PolicyParams::init(dims, &mut stream, 0.5);
    let ref_params = perturbed(&old, &mut stream, 0.1);
    let con = world.vocab().concrete();
    let abs = world.vocab().abstract_descriptors();
    let obj = world.vocab().objects();
    let a = Instruction::new(
        &world,
        0,
        Category::Attribute,
        vec![con.start, con.start + 1],
        vec![abs.start, abs.start + 1],
        Split::Train,
    )?;
    let p0 = vec![obj.start, obj.start + 1];
    let input = match spec.mode {
        Mode::Reprompt => ContextInput::reprompt(&a, &p0),
        Mode::Eval => {
            let x1 = world.generate(&[obj.start, con.start, con.start + 1])?;
            let x2 = world.generate(&[obj.start, con.start + 2])?;
            ContextInput::eval(&world, Condition::full(&a, &p0), &x1, &x2)?
        }
    };
    let settings = GrpoSettings {
        clip_epsilon: config.clip_epsilon,
        kl_coeff: spec.kl_coeff,
        decoding: Decoding {
            grammar_mask: spec.grammar_mask,
            max_think: 3,
            max_answer: 4,
        },
    };
    let ctx = project(&old, &input);
    let trajectories: Vec<_> = (0..4)
        .map(|_| sample_trajectory(&old, world.vocab(), &ctx, settings.decoding, &mut stream))
        .collect();
    let rewards: Vec<f64> = (0..4).map(|_| f64::from(stream.random_range(0u8..3))).collect();
    let rewards = if rewards.iter().all(|&r| r == rewards[0]) {
        vec![2.0, 1.0, 0.0, 1.0]
    } else {
        rewards
    };
    let group = Group::new(input, trajectories, rewards);
    let eps = settings.clip_epsilon;
    for attempt in 1..=MAX_ATTEMPTS {
        let params = perturbed(&old, &mut stream, 0.05);
        let ratios = token_ratios(&params, world.vocab(), &group, &settings)?;
        let near_kink = ratios
            .iter()
            .flatten()
            .any(|r| (r.raw - (1.0 - eps)).abs() < KINK_MARGIN || (r.raw - (1.0 + eps)).abs() < KINK_MARGIN);
        if !near_kink {
            return Ok((
                Instance {
                    world,
                    params,
                    ref_params,
                    group,
                    settings,
                },
                attempt,
            ));
        }
    }
    Err(Error::Invariant(format!(
        "no kink-free instance for seed {} within {MAX_ATTEMPTS} draws",
        spec.seed
    )))
}

/// Central differences over every coordinate of θ.
pub fn numeric_gradient(inst: &Instance) -> Result<Vec<f64>> {
    let mut p = inst.params.clone();
    let n = p.len();
    let mut out = Vec::with_capacity(n);
    let vocab = inst.world.vocab();
    for i in 0..n {
        let x = p.as_slice()[i];
        p.as_mut_slice()[i] = x + FD_STEP;
        let (jp, _) = surrogate(&p, &inst.ref_params, vocab, &inst.group, &inst.settings)?;
        p.as_mut_slice()[i] = x - FD_STEP;
        let (jm, _) = surrogate(&p, &inst.ref_params, vocab, &inst.group, &inst.settings)?;
        p.as_mut_slice()[i] = x;
        out.push((jp - jm) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Compares `analytic` to `numeric`; both error measures must be within `tolerance`.
pub fn compare(spec: InstanceSpec, analytic: &[f64], numeric: &[f64], tolerance: f64, attempts: u32) -> FdReport {
    let scale = numeric
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let mut worst = (0.0, 0);
    let mut diff2 = 0.0;
    let mut num2 = 0.0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = (a - n).abs() / scale;
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
        diff2 += (a - n).powi(2);
        num2 += n * n;
    }
    let rel_l2 = (diff2 / num2.max(f64::MIN_POSITIVE)).sqrt();
    FdReport {
        spec,
        n_params: analytic.len(),
        max_rel_error: worst.0,
        worst_coord: worst.1,
        rel_l2_error: rel_l2,
        screening_attempts: attempts,
        passed: worst.0 <= tolerance && rel_l2 <= tolerance,
    }
}

pub fn fd_verify(spec: &InstanceSpec, tolerance: f64) -> Result<FdReport> {
    fd_verify_with_fault(spec, tolerance, None)
}

/// As [`fd_verify`], optionally adding 1 to one analytic coordinate.
pub fn fd_verify_with_fault(spec: &InstanceSpec, tolerance: f64, fault: Option<usize>) -> Result<FdReport> {
    let (inst, attempts) = build_instance(spec)?;
    let (mut analytic, _) = surrogate_gradient(
        &inst.params,
        &inst.ref_params,
        inst.world.vocab(),
        &inst.group,
        &inst.settings,
    )?;
    if let Some(i) = fault {
        analytic[i] += 1.0;
    }
    let numeric = numeric_gradient(&inst)?;
    Ok(compare(*spec, &analytic, &numeric, tolerance, attempts))
}

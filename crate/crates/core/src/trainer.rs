//! The two-stage loop: a pairwise evaluator trained on verifiable verdicts in
//! two curriculum phases, frozen, then a reprompting policy trained against it.

pub mod eval;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{Datasets, Quadruplet};
use crate::error::{Error, Result};
use crate::grpo::{batch_gradient, Group, GrpoSettings, UpdateReport};
use crate::optim::{update_step, OptimizerSettings, OptimizerState};
use crate::policy::{project, sample_trajectory, ContextInput, Decoding, Dims, PolicyParams};
use crate::rewards::{rlmt_reward_with_baseline, rlvr_reward, EvaluatorJudge, RewardBreakdown};
use crate::rng::seeded_stream;
use crate::world::{naive_concat, WorldSpec};

use eval::{alignment_diagnostics, evaluate_judge, evaluate_winrate, Opponent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    RlvrPhase1,
    RlvrPhase2,
    Rlmt,
}

impl Stage {
    fn stage_name(self) -> &'static str {
        match self {
            Stage::RlvrPhase1 | Stage::RlvrPhase2 => "rlvr",
            Stage::Rlmt => "rlmt",
        }
    }

    fn phase_name(self) -> &'static str {
        match self {
            Stage::RlvrPhase1 => "1",
            Stage::RlvrPhase2 => "2",
            Stage::Rlmt => "1",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Stage::RlvrPhase1 => "rlvr-1",
            Stage::RlvrPhase2 => "rlvr-2",
            Stage::Rlmt => "rlmt",
        }
    }
}

pub const METRICS_HEADER: &str = "step,stage,phase,epoch,mean_reward,format_rate,task_rate,mean_kl,grad_norm,clip_frac,eval_total,eval_id,eval_ood,win_total,infeasible_mass,answer_len";

/// One CSV line; absent values render as empty fields.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub stage: String,
    pub phase: String,
    pub epoch: usize,
    pub mean_reward: Option<f64>,
    pub format_rate: Option<f64>,
    pub task_rate: Option<f64>,
    pub mean_kl: Option<f64>,
    pub grad_norm: Option<f64>,
    pub clip_frac: Option<f64>,
    pub eval_total: Option<f64>,
    pub eval_id: Option<f64>,
    pub eval_ood: Option<f64>,
    pub win_total: Option<f64>,
    pub infeasible_mass: Option<f64>,
    pub answer_len: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stage,
            self.phase,
            self.epoch,
            f(self.mean_reward),
            f(self.format_rate),
            f(self.task_rate),
            f(self.mean_kl),
            f(self.grad_norm),
            f(self.clip_frac),
            f(self.eval_total),
            f(self.eval_id),
            f(self.eval_ood),
            f(self.win_total),
            f(self.infeasible_mass),
            f(self.answer_len),
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: Stage,
    pub epoch: usize,
    /// Position inside the epoch's shuffled order.
    pub cursor: usize,
    pub step: u64,
    pub skip_phase1: bool,
    pub params: PolicyParams,
    /// Anchor of the KL penalty; fixed within a stage.
    pub ref_params: PolicyParams,
    pub optimizer: OptimizerState,
    pub evaluator: Option<PolicyParams>,
    pub metrics: Vec<MetricsRow>,
}

pub fn policy_dims(config: &RunConfig, world: &WorldSpec) -> Dims {
    Dims {
        vocab: world.vocab().len(),
        hidden: config.hidden_dim,
    }
}

/// The untrained policy, reproducible from the seed alone.
pub fn initial_params(config: &RunConfig, world: &WorldSpec) -> PolicyParams {
    PolicyParams::init(
        policy_dims(config, world),
        &mut seeded_stream(config.seed, "init"),
        config.init_scale,
    )
}

impl StageState {
    pub fn initial(config: &RunConfig, world: &WorldSpec, skip_phase1: bool) -> Self {
        let params = initial_params(config, world);
        StageState {
            stage: if skip_phase1 {
                Stage::RlvrPhase2
            } else {
                Stage::RlvrPhase1
            },
            epoch: 0,
            cursor: 0,
            step: 0,
            skip_phase1,
            optimizer: OptimizerState::new(params.len()),
            ref_params: params.clone(),
            params,
            evaluator: None,
            metrics: Vec::new(),
        }
    }

    pub fn stage1_complete(&self, config: &RunConfig) -> bool {
        self.stage == Stage::Rlmt || (self.stage == Stage::RlvrPhase2 && self.epoch >= config.epochs_rlvr_phase2)
    }

    pub fn rlmt_complete(&self, config: &RunConfig) -> bool {
        self.stage == Stage::Rlmt && self.epoch >= config.epochs_rlmt
    }
}

/// Read-only inputs shared by every step.
pub struct TrainContext<'a> {
    pub config: &'a RunConfig,
    pub world: &'a WorldSpec,
    pub data: &'a Datasets,
}

impl TrainContext<'_> {
    fn decoding(&self) -> Decoding {
        Decoding::from_config(self.config)
    }

    fn settings(&self) -> GrpoSettings {
        GrpoSettings {
            clip_epsilon: self.config.clip_epsilon,
            kl_coeff: self.config.kl_coeff,
            decoding: self.decoding(),
        }
    }

    fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::RlvrPhase1 => self.config.epochs_rlvr_phase1,
            Stage::RlvrPhase2 => self.config.epochs_rlvr_phase2,
            Stage::Rlmt => self.config.epochs_rlmt,
        }
    }

    fn lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::RlvrPhase1 => self.config.lr_rlvr_phase1,
            Stage::RlvrPhase2 => self.config.lr_rlvr_phase2,
            Stage::Rlmt => self.config.lr_rlmt,
        }
    }

    fn stage_len(&self, stage: Stage) -> usize {
        match stage {
            Stage::RlvrPhase1 => self.data.curriculum1.len(),
            Stage::RlvrPhase2 => self.data.curriculum2.len(),
            Stage::Rlmt => self.data.train.len(),
        }
    }

    fn order(&self, stage: Stage, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.stage_len(stage)).collect();
        idx.shuffle(&mut seeded_stream(
            self.config.seed,
            &format!("order/{}/{epoch}", stage.label()),
        ));
        idx
    }

    fn eval_row(&self, state: &StageState) -> Result<MetricsRow> {
        let dec = self.decoding();
        let mut row = MetricsRow {
            step: state.step,
            stage: state.stage.stage_name().into(),
            phase: state.stage.phase_name().into(),
            epoch: state.epoch,
            ..MetricsRow::default()
        };
        match state.stage {
            Stage::RlvrPhase1 | Stage::RlvrPhase2 => {
                let t = evaluate_judge(
                    &state.params,
                    self.world,
                    &self.data.catalog,
                    &self.data.test_quadruplets,
                    dec,
                )?;
                row.eval_total = t.total.value;
                row.eval_id = t.id_overall.value;
                row.eval_ood = t.ood_overall.value;
            }
            Stage::Rlmt => {
                let t = evaluate_winrate(
                    &state.params,
                    self.world,
                    &self.data.catalog,
                    &self.data.test_cases,
                    dec,
                    Opponent::Naive,
                )?;
                row.win_total = t.total.value;
                let d = alignment_diagnostics(
                    &state.params,
                    self.world,
                    &self.data.catalog,
                    &self.data.test_cases,
                    dec,
                    None,
                )?;
                row.infeasible_mass = Some(d.infeasible_mass);
                row.answer_len = Some(d.mean_answer_len);
            }
        }
        Ok(row)
    }
}

/// Where a bounded training call stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Complete,
    Paused,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunLimits {
    /// Stop after this many global steps (for mid-phase checkpoints).
    pub stop_at_step: Option<u64>,
}

fn rlvr_group(
    ctx: &TrainContext<'_>,
    params: &PolicyParams,
    q: &Quadruplet,
    stream: &mut crate::rng::Stream,
) -> Result<(Group, Vec<RewardBreakdown>)> {
    let input = ContextInput::eval(ctx.world, q.cond(&ctx.data.catalog)?, &q.first, &q.second)?;
    let pctx = project(params, &input);
    let mut trajs = Vec::with_capacity(ctx.config.group_size);
    let mut rewards = Vec::with_capacity(ctx.config.group_size);
    for _ in 0..ctx.config.group_size {
        let t = sample_trajectory(params, ctx.world.vocab(), &pctx, ctx.decoding(), stream);
        rewards.push(rlvr_reward(ctx.world.vocab(), &t, q.label)?);
        trajs.push(t);
    }
    let scalar = rewards.iter().map(|r| f64::from(r.total())).collect();
    Ok((Group::new(input, trajs, scalar), rewards))
}

fn rlmt_group(
    ctx: &TrainContext<'_>,
    params: &PolicyParams,
    evaluator: &PolicyParams,
    sample: usize,
    stream: &mut crate::rng::Stream,
) -> Result<(Group, Vec<RewardBreakdown>)> {
    let s = &ctx.data.train[sample];
    let a = ctx.data.catalog.get(s.instruction)?;
    let input = ContextInput::reprompt(a, &s.p0);
    let pctx = project(params, &input);
    let baseline = ctx.world.generate(&naive_concat(a, &s.p0))?;
    let judge = EvaluatorJudge {
        params: evaluator,
        decoding: ctx.decoding(),
    };
    let mut trajs = Vec::with_capacity(ctx.config.group_size);
    let mut rewards = Vec::with_capacity(ctx.config.group_size);
    for _ in 0..ctx.config.group_size {
        let t = sample_trajectory(params, ctx.world.vocab(), &pctx, ctx.decoding(), stream);
        let r = rlmt_reward_with_baseline(&t, &judge, ctx.world, a, &s.p0, baseline.clone())?;
        rewards.push(r.reward);
        trajs.push(t);
    }
    let scalar = rewards.iter().map(|r| f64::from(r.total())).collect();
    Ok((Group::new(input, trajs, scalar), rewards))
}

/// One sample → update → resample iteration over the next batch.
fn train_step(ctx: &TrainContext<'_>, state: &mut StageState, order: &[usize]) -> Result<(UpdateReport, f64, f64)> {
    let end = (state.cursor + ctx.config.batch_size).min(order.len());
    let batch = &order[state.cursor..end];
    let mut stream = seeded_stream(
        ctx.config.seed,
        &format!("rollout/{}/{}", state.stage.label(), state.step),
    );
    let mut groups = Vec::with_capacity(batch.len());
    let mut fmt = 0usize;
    let mut task = 0usize;
    let mut n = 0usize;
    for &i in batch {
        let (g, rs) = match state.stage {
            Stage::RlvrPhase1 => rlvr_group(ctx, &state.params, &ctx.data.curriculum1[i], &mut stream)?,
            Stage::RlvrPhase2 => rlvr_group(ctx, &state.params, &ctx.data.curriculum2[i], &mut stream)?,
            Stage::Rlmt => {
                let ev = state
                    .evaluator
                    .as_ref()
                    .ok_or_else(|| Error::Contract("reprompt training needs a frozen evaluator".into()))?;
                rlmt_group(ctx, &state.params, ev, i, &mut stream)?
            }
        };
        for r in &rs {
            fmt += usize::from(r.format_bit);
            task += usize::from(r.task_bit);
            n += 1;
        }
        groups.push(g);
    }
    let (grad, report) = batch_gradient(
        &state.params,
        &state.ref_params,
        ctx.world.vocab(),
        &groups,
        &ctx.settings(),
    )?;
    let settings = OptimizerSettings::from_config(ctx.config);
    let lr = ctx.lr(state.stage);
    update_step(state.params.as_mut_slice(), &grad, &mut state.optimizer, lr, &settings)
        .map_err(|e| Error::NonFinite(format!("{} step {}: {e}", state.stage.label(), state.step)))?;
    state.cursor = end;
    state.step += 1;
    Ok((report, fmt as f64 / n as f64, task as f64 / n as f64))
}

/// Runs the current stage's phases until done or the step limit.
fn run_phases(ctx: &TrainContext<'_>, state: &mut StageState, limits: RunLimits, last: Stage) -> Result<Progress> {
    loop {
        let epochs = ctx.epochs(state.stage);
        if state.epoch >= epochs {
            match state.stage {
                Stage::RlvrPhase1 => {
                    state.stage = Stage::RlvrPhase2;
                    state.epoch = 0;
                    state.cursor = 0;
                    continue;
                }
                s if s == last => return Ok(Progress::Complete),
                _ => return Err(Error::Contract(format!("stage {:?} cannot advance here", state.stage))),
            }
        }
        if state.epoch == 0 && state.cursor == 0 {
            let row = ctx.eval_row(state)?;
            state.metrics.push(row);
        }
        let order = ctx.order(state.stage, state.epoch);
        while state.cursor < order.len() {
            if limits.stop_at_step.is_some_and(|s| state.step >= s) {
                return Ok(Progress::Paused);
            }
            let (rep, fmt, task) = train_step(ctx, state, &order)?;
            let mut row = MetricsRow {
                step: state.step,
                stage: state.stage.stage_name().into(),
                phase: state.stage.phase_name().into(),
                epoch: state.epoch,
                mean_reward: Some(rep.mean_reward),
                format_rate: Some(fmt),
                task_rate: Some(task),
                mean_kl: Some(rep.mean_kl),
                grad_norm: Some(rep.grad_norm),
                clip_frac: Some(rep.clip_frac),
                ..MetricsRow::default()
            };
            if state.cursor == order.len() {
                let e = ctx.eval_row(state)?;
                row.eval_total = e.eval_total;
                row.eval_id = e.eval_id;
                row.eval_ood = e.eval_ood;
                row.win_total = e.win_total;
                row.infeasible_mass = e.infeasible_mass;
                row.answer_len = e.answer_len;
            }
            state.metrics.push(row);
        }
        state.epoch += 1;
        state.cursor = 0;
    }
}

/// Stage 1: curriculum phase 1 (unless skipped) then phase 2.
pub fn train_rlvr(ctx: &TrainContext<'_>, state: &mut StageState, limits: RunLimits) -> Result<Progress> {
    if state.stage == Stage::Rlmt {
        return Err(Error::Contract("evaluator training already finished".into()));
    }
    run_phases(ctx, state, limits, Stage::RlvrPhase2)
}

/// Freezes the end-of-stage-1 params as the evaluator and re-anchors the
/// KL reference for stage 2. Fresh optimizer moments.
pub fn snapshot_evaluator(config: &RunConfig, state: &mut StageState) -> Result<PolicyParams> {
    if !state.stage1_complete(config) || state.stage == Stage::Rlmt {
        return Err(Error::Contract(
            "evaluator snapshot requires a completed first stage".into(),
        ));
    }
    let snap = state.params.clone();
    state.evaluator = Some(snap.clone());
    state.ref_params = snap.clone();
    state.optimizer = OptimizerState::new(snap.len());
    state.stage = Stage::Rlmt;
    state.epoch = 0;
    state.cursor = 0;
    Ok(snap)
}

/// Stage 2 against the frozen evaluator.
pub fn train_rlmt(ctx: &TrainContext<'_>, state: &mut StageState, limits: RunLimits) -> Result<Progress> {
    if state.stage != Stage::Rlmt || state.evaluator.is_none() {
        return Err(Error::Contract("reprompt training needs an evaluator snapshot".into()));
    }
    run_phases(ctx, state, limits, Stage::Rlmt)
}

/// Both stages back to back.
pub fn train_all(ctx: &TrainContext<'_>, skip_phase1: bool) -> Result<StageState> {
    let mut state = StageState::initial(ctx.config, ctx.world, skip_phase1);
    train_rlvr(ctx, &mut state, RunLimits::default())?;
    snapshot_evaluator(ctx.config, &mut state)?;
    train_rlmt(ctx, &mut state, RunLimits::default())?;
    Ok(state)
}

/// On-disk training state, bound to one config and one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub world_hash: String,
    pub evaluator_hash: Option<String>,
    pub state: StageState,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, world: &WorldSpec, state: &StageState) -> Self {
        Checkpoint {
            config_hash: config.hash(),
            world_hash: world.hash(),
            evaluator_hash: state.evaluator.as_ref().map(PolicyParams::hash),
            state: state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Refuses checkpoints written under another config or world, or whose
    /// evaluator no longer matches its recorded hash.
    pub fn load(path: &Path, config: &RunConfig, world: &WorldSpec) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.config_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match the active config {}",
                ck.config_hash,
                config.hash()
            )));
        }
        if ck.world_hash != world.hash() {
            return Err(Error::Checkpoint("world hash does not match".into()));
        }
        if ck.evaluator_hash != ck.state.evaluator.as_ref().map(PolicyParams::hash) {
            return Err(Error::Checkpoint("evaluator snapshot hash mismatch".into()));
        }
        let dims = policy_dims(config, world);
        for p in [
            Some(&ck.state.params),
            Some(&ck.state.ref_params),
            ck.state.evaluator.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            if p.dims() != dims || p.len() != dims.param_count() {
                return Err(Error::Checkpoint("parameter shape does not match the config".into()));
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::Judge;

    fn tiny() -> (RunConfig, WorldSpec, Datasets) {
        let mut c = RunConfig::desk();
        c.epochs_rlvr_phase1 = 1;
        c.epochs_rlvr_phase2 = 1;
        c.epochs_rlmt = 1;
        c.samples_per_category = 4;
        c.test_prompts_per_instruction = 1;
        let w = WorldSpec::build(&c).unwrap();
        let d = Datasets::generate(&w, c.samples_per_category, c.test_prompts_per_instruction).unwrap();
        (c, w, d)
    }

    #[test]
    fn header_is_exact() {
        assert_eq!(
            metrics_csv(&[]),
            "step,stage,phase,epoch,mean_reward,format_rate,task_rate,mean_kl,grad_norm,clip_frac,eval_total,eval_id,eval_ood,win_total,infeasible_mass,answer_len\n"
        );
        let row = MetricsRow {
            step: 3,
            stage: "rlvr".into(),
            phase: "1".into(),
            mean_reward: Some(1.5),
            ..MetricsRow::default()
        };
        assert_eq!(row.to_csv(), "3,rlvr,1,0,1.5,,,,,,,,,,,");
    }

    #[test]
    fn every_update_sees_unit_ratios() {
        let (c, w, d) = tiny();
        let ctx = TrainContext {
            config: &c,
            world: &w,
            data: &d,
        };
        let mut state = StageState::initial(&c, &w, false);
        let order = ctx.order(state.stage, 0);
        for _ in 0..5 {
            let (rep, _, _) = train_step(&ctx, &mut state, &order).unwrap();
            assert_eq!(rep.clip_frac, 0.0);
        }
    }

    #[test]
    fn reference_stays_fixed_within_a_stage() {
        let (c, w, d) = tiny();
        let ctx = TrainContext {
            config: &c,
            world: &w,
            data: &d,
        };
        let mut state = StageState::initial(&c, &w, false);
        let r0 = state.ref_params.clone();
        train_rlvr(&ctx, &mut state, RunLimits::default()).unwrap();
        assert_eq!(state.ref_params, r0);
        assert_ne!(state.params, r0);
    }

    #[test]
    fn snapshot_equals_stage1_params_and_stays_frozen() {
        let (c, w, d) = tiny();
        let ctx = TrainContext {
            config: &c,
            world: &w,
            data: &d,
        };
        let mut state = StageState::initial(&c, &w, false);
        assert!(snapshot_evaluator(&c, &mut state).is_err());
        train_rlvr(&ctx, &mut state, RunLimits::default()).unwrap();
        let end1 = state.params.clone();
        let snap = snapshot_evaluator(&c, &mut state).unwrap();
        assert_eq!(snap, end1);
        let probe: Vec<_> = d.curriculum2.iter().take(20).collect();
        let verdicts = |p: &PolicyParams| -> Vec<_> {
            let j = EvaluatorJudge {
                params: p,
                decoding: Decoding::from_config(&c),
            };
            probe
                .iter()
                .map(|q| j.verdict(&w, &q.first, &q.second, q.cond(&d.catalog).unwrap()).unwrap())
                .collect()
        };
        let before = verdicts(state.evaluator.as_ref().unwrap());
        train_rlmt(&ctx, &mut state, RunLimits::default()).unwrap();
        assert_eq!(state.evaluator.as_ref().unwrap(), &snap);
        assert_eq!(verdicts(state.evaluator.as_ref().unwrap()), before);
    }

    #[test]
    fn resume_mid_phase_matches_straight_through() {
        let (c, w, d) = tiny();
        let ctx = TrainContext {
            config: &c,
            world: &w,
            data: &d,
        };
        let straight = train_all(&ctx, false).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut s = StageState::initial(&c, &w, false);
        assert_eq!(
            train_rlvr(&ctx, &mut s, RunLimits { stop_at_step: Some(7) }).unwrap(),
            Progress::Paused
        );
        Checkpoint::new(&c, &w, &s).save(&path).unwrap();
        let mut s = Checkpoint::load(&path, &c, &w).unwrap().state;
        train_rlvr(&ctx, &mut s, RunLimits::default()).unwrap();
        snapshot_evaluator(&c, &mut s).unwrap();
        Checkpoint::new(&c, &w, &s).save(&path).unwrap();
        let mut s = Checkpoint::load(&path, &c, &w).unwrap().state;
        train_rlmt(&ctx, &mut s, RunLimits::default()).unwrap();
        assert_eq!(metrics_csv(&s.metrics), metrics_csv(&straight.metrics));
        assert_eq!(s.params, straight.params);
    }

    #[test]
    fn tampered_checkpoints_are_refused() {
        let (c, w, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let s = StageState::initial(&c, &w, false);
        let mut ck = Checkpoint::new(&c, &w, &s);
        ck.config_hash = "0".repeat(64);
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path, &c, &w), Err(Error::Checkpoint(_))));
        let mut other = c.clone();
        other.kl_coeff = 0.05;
        Checkpoint::new(&c, &w, &s).save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path, &other, &w), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn skip_phase1_starts_in_phase2() {
        let (c, w, d) = tiny();
        let ctx = TrainContext {
            config: &c,
            world: &w,
            data: &d,
        };
        let mut s = StageState::initial(&c, &w, true);
        train_rlvr(&ctx, &mut s, RunLimits::default()).unwrap();
        assert!(s.metrics.iter().all(|r| r.phase == "2"));
    }
}

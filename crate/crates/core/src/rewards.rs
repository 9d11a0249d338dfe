//! Indicator rewards: format validity, verifiable verdict reward, and the
//! relative reprompt reward scored by a frozen evaluator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{greedy_trajectory, project, ContextInput, Decoding, Mode, PolicyParams, Trajectory, Verdict};
use crate::vocab::{TokenId, Vocab};
use crate::world::{naive_concat, Condition, Image, Instruction, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_bit: u8,
    pub task_bit: u8,
}

impl RewardBreakdown {
    pub fn total(&self) -> u8 {
        self.format_bit + self.task_bit
    }
}

pub fn format_reward(vocab: &Vocab, traj: &Trajectory) -> u8 {
    u8::from(traj.parse(vocab).valid)
}

/// `I(valid format) + I(o = y)`; the task bit requires a valid parse.
pub fn rlvr_reward(vocab: &Vocab, traj: &Trajectory, label: Verdict) -> Result<RewardBreakdown> {
    if traj.mode != Mode::Eval {
        return Err(Error::Contract("verifiable reward needs an EVAL trajectory".into()));
    }
    let parsed = traj.parse(vocab);
    let format_bit = u8::from(parsed.valid);
    let task_bit = u8::from(parsed.valid && parsed.verdict == Some(label));
    Ok(RewardBreakdown { format_bit, task_bit })
}

/// Anything that answers "is the first image better?" under a condition.
pub trait Judge {
    fn verdict(&self, world: &WorldSpec, x1: &Image, x2: &Image, cond: Condition<'_>) -> Result<Verdict>;
}

/// The learned evaluator, decoded greedily so its verdicts are deterministic.
pub struct EvaluatorJudge<'a> {
    pub params: &'a PolicyParams,
    pub decoding: Decoding,
}

impl Judge for EvaluatorJudge<'_> {
    fn verdict(&self, world: &WorldSpec, x1: &Image, x2: &Image, cond: Condition<'_>) -> Result<Verdict> {
        evaluator_verdict(self.params, world, self.decoding, x1, x2, cond)
    }
}

/// Ground-truth stand-in: YES iff the first image has a strictly higher
/// oracle reward.
pub struct OracleJudge;

impl Judge for OracleJudge {
    fn verdict(&self, world: &WorldSpec, x1: &Image, x2: &Image, cond: Condition<'_>) -> Result<Verdict> {
        let r1 = world.oracle_bits(x1, cond)?.total();
        let r2 = world.oracle_bits(x2, cond)?.total();
        Ok(if r1 > r2 { Verdict::Yes } else { Verdict::No })
    }
}

/// Greedy EVAL decode; an unparseable greedy output counts as NO.
pub fn evaluator_verdict(
    params: &PolicyParams,
    world: &WorldSpec,
    decoding: Decoding,
    x1: &Image,
    x2: &Image,
    cond: Condition<'_>,
) -> Result<Verdict> {
    let input = ContextInput::eval(world, cond, x1, x2)?;
    let ctx = project(params, &input);
    let traj = greedy_trajectory(params, world.vocab(), &ctx, decoding);
    Ok(traj.parse(world.vocab()).verdict.unwrap_or(Verdict::No))
}

/// Reward of one reprompt plus the two images it was judged on.
#[derive(Debug, Clone)]
pub struct RelativeReward {
    pub reward: RewardBreakdown,
    pub policy_image: Image,
    pub baseline_image: Image,
}

/// Image of a reprompt answer; blank when the trajectory does not parse.
pub fn reprompt_image(world: &WorldSpec, traj: &Trajectory) -> Result<(Option<Vec<TokenId>>, Image)> {
    let parsed = traj.parse(world.vocab());
    if parsed.valid {
        let img = world.generate(&parsed.answer)?;
        Ok((Some(parsed.answer), img))
    } else {
        Ok((None, Image::blank(world.dim())))
    }
}

/// `R_acc + I(valid format)` with `R_acc = I(judge(x_pol, x_ref; a, p0) = YES)`.
pub fn rlmt_reward(
    traj: &Trajectory,
    judge: &dyn Judge,
    world: &WorldSpec,
    a: &Instruction,
    p0: &[TokenId],
) -> Result<RelativeReward> {
    let baseline = world.generate(&naive_concat(a, p0))?;
    rlmt_reward_with_baseline(traj, judge, world, a, p0, baseline)
}

/// As [`rlmt_reward`] with a precomputed baseline image.
pub fn rlmt_reward_with_baseline(
    traj: &Trajectory,
    judge: &dyn Judge,
    world: &WorldSpec,
    a: &Instruction,
    p0: &[TokenId],
    baseline_image: Image,
) -> Result<RelativeReward> {
    if traj.mode != Mode::Reprompt {
        return Err(Error::Contract("relative reward needs a REPROMPT trajectory".into()));
    }
    let (answer, policy_image) = reprompt_image(world, traj)?;
    let format_bit = u8::from(answer.is_some());
    let task_bit = if format_bit == 1 {
        let v = judge.verdict(world, &policy_image, &baseline_image, Condition::full(a, p0))?;
        u8::from(v == Verdict::Yes)
    } else {
        0
    };
    Ok(RelativeReward {
        reward: RewardBreakdown { format_bit, task_bit },
        policy_image,
        baseline_image,
    })
}

//! Evaluation harnesses: judge accuracy, oracle-scored win rates, and the
//! feasibility diagnostics of the reprompting policy.

use serde::{Deserialize, Serialize};

use crate::dataset::{Catalog, Quadruplet, TestCase};
use crate::error::Result;
use crate::policy::{
    greedy_trajectory, project, sample_trajectory, trajectory_distributions, ContextInput, Decoding, PolicyParams,
};
use crate::rewards::{evaluator_verdict, reprompt_image};
use crate::rng::Stream;
use crate::vocab::{Role, TokenId};
use crate::world::{naive_concat, Difficulty, Image, Instruction, Split, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Cell {
    /// Mean score; `None` when the cell has no members.
    pub value: Option<f64>,
    pub count: usize,
    #[serde(skip)]
    sum: f64,
}

impl Cell {
    fn add(&mut self, score: f64) {
        self.sum += score;
        self.count += 1;
        self.value = Some(self.sum / self.count as f64);
    }
}

/// Accuracy or win rate in the seven ID/OOD × simple/hard cells.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalTable {
    pub total: Cell,
    pub id_overall: Cell,
    pub id_simple: Cell,
    pub id_hard: Cell,
    pub ood_overall: Cell,
    pub ood_simple: Cell,
    pub ood_hard: Cell,
}

impl EvalTable {
    pub fn add(&mut self, split: Split, difficulty: Difficulty, score: f64) {
        self.total.add(score);
        let (overall, simple, hard) = match split {
            Split::TestOod => (&mut self.ood_overall, &mut self.ood_simple, &mut self.ood_hard),
            _ => (&mut self.id_overall, &mut self.id_simple, &mut self.id_hard),
        };
        overall.add(score);
        match difficulty {
            Difficulty::Simple => simple.add(score),
            Difficulty::Hard => hard.add(score),
        }
    }

    pub fn cells(&self) -> [(&'static str, Cell); 7] {
        [
            ("total", self.total),
            ("id_overall", self.id_overall),
            ("id_simple", self.id_simple),
            ("id_hard", self.id_hard),
            ("ood_overall", self.ood_overall),
            ("ood_simple", self.ood_simple),
            ("ood_hard", self.ood_hard),
        ]
    }

    pub fn total(&self) -> f64 {
        self.total.value.unwrap_or(f64::NAN)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.cells()
            .into_iter()
            .find(|(n, _)| *n == name)
            .and_then(|(_, c)| c.value)
    }
}

/// Greedy verdicts against oracle labels.
pub fn evaluate_judge(
    params: &PolicyParams,
    world: &WorldSpec,
    catalog: &Catalog,
    quads: &[Quadruplet],
    dec: Decoding,
) -> Result<EvalTable> {
    let mut t = EvalTable::default();
    for q in quads {
        let v = evaluator_verdict(params, world, dec, &q.first, &q.second, q.cond(catalog)?)?;
        t.add(q.split, q.difficulty, f64::from(u8::from(v == q.label)));
    }
    Ok(t)
}

/// Accuracy of an arbitrary verdict function over the same cells.
pub fn evaluate_verdicts(
    catalog: &Catalog,
    quads: &[Quadruplet],
    mut verdict: impl FnMut(&Quadruplet, &Instruction) -> Result<crate::policy::Verdict>,
) -> Result<EvalTable> {
    let mut t = EvalTable::default();
    for q in quads {
        let v = verdict(q, catalog.get(q.instruction)?)?;
        t.add(q.split, q.difficulty, f64::from(u8::from(v == q.label)));
    }
    Ok(t)
}

pub enum Opponent<'a> {
    Naive,
    Policy(&'a PolicyParams),
}

/// Image of a greedy reprompt; blank if the output does not parse.
pub fn policy_image(
    params: &PolicyParams,
    world: &WorldSpec,
    a: &Instruction,
    p0: &[TokenId],
    dec: Decoding,
) -> Result<(Vec<TokenId>, Image)> {
    let ctx = project(params, &ContextInput::reprompt(a, p0));
    let traj = greedy_trajectory(params, world.vocab(), &ctx, dec);
    let (answer, img) = reprompt_image(world, &traj)?;
    Ok((answer.unwrap_or_default(), img))
}

/// 1 / 0.5 / 0 by strict comparison of oracle totals under (a, p0).
pub fn evaluate_winrate(
    params: &PolicyParams,
    world: &WorldSpec,
    catalog: &Catalog,
    cases: &[TestCase],
    dec: Decoding,
    opponent: Opponent<'_>,
) -> Result<EvalTable> {
    let mut t = EvalTable::default();
    for c in cases {
        let a = catalog.get(c.instruction)?;
        let (_, mine) = policy_image(params, world, a, &c.p0, dec)?;
        let theirs = match opponent {
            Opponent::Naive => world.generate(&naive_concat(a, &c.p0))?,
            Opponent::Policy(p) => policy_image(p, world, a, &c.p0, dec)?.1,
        };
        let r1 = world.oracle_reward(&mine, a, &c.p0)?.total();
        let r2 = world.oracle_reward(&theirs, a, &c.p0)?.total();
        let score = match r1.cmp(&r2) {
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Equal => 0.5,
            std::cmp::Ordering::Less => 0.0,
        };
        t.add(c.split, c.difficulty, score);
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean probability on abstract descriptors at answer-content steps of greedy decodes.
    pub infeasible_mass: f64,
    /// Share of sampled reprompts containing a token the generator cannot render.
    pub emission_rate: Option<f64>,
    pub mean_answer_len: f64,
}

/// Greedy-decode diagnostics; sampled emission rate only when `sampling` is given.
pub fn alignment_diagnostics(
    params: &PolicyParams,
    world: &WorldSpec,
    catalog: &Catalog,
    cases: &[TestCase],
    dec: Decoding,
    sampling: Option<(usize, &mut Stream)>,
) -> Result<Diagnostics> {
    let vocab = world.vocab();
    let abstracts = vocab.abstract_descriptors();
    let mut mass_sum = 0.0;
    let mut mass_n = 0usize;
    let mut len_sum = 0usize;
    for c in cases {
        let a = catalog.get(c.instruction)?;
        let input = ContextInput::reprompt(a, &c.p0);
        let ctx = project(params, &input);
        let traj = greedy_trajectory(params, vocab, &ctx, dec);
        let steps = trajectory_distributions(params, vocab, &input, dec, &traj.tokens)?;
        let answer_steps: Vec<f64> = steps
            .iter()
            .filter(|(answer_slot, _)| *answer_slot)
            .map(|(_, d)| abstracts.clone().map(|t| d.probs[t]).sum())
            .collect();
        if !answer_steps.is_empty() {
            mass_sum += answer_steps.iter().sum::<f64>() / answer_steps.len() as f64;
            mass_n += 1;
        }
        len_sum += traj.parse(vocab).answer.len();
    }
    let emission_rate = match sampling {
        None => None,
        Some((k, stream)) => {
            let mut bad = 0usize;
            let mut total = 0usize;
            for c in cases {
                let a = catalog.get(c.instruction)?;
                let ctx = project(params, &ContextInput::reprompt(a, &c.p0));
                for _ in 0..k {
                    let traj = sample_trajectory(params, vocab, &ctx, dec, stream);
                    let parsed = traj.parse(vocab);
                    let answer = if parsed.valid {
                        parsed.answer
                    } else {
                        traj.tokens.clone()
                    };
                    if answer.iter().any(|&t| vocab.role(t) == Role::AbstractDescriptor) {
                        bad += 1;
                    }
                    total += 1;
                }
            }
            Some(bad as f64 / total.max(1) as f64)
        }
    };
    Ok(Diagnostics {
        infeasible_mass: if mass_n == 0 { 0.0 } else { mass_sum / mass_n as f64 },
        emission_rate,
        mean_answer_len: len_sum as f64 / cases.len().max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::dataset::Datasets;
    use crate::policy::{Dims, Verdict};
    use crate::rewards::{Judge, OracleJudge};
    use crate::rng::seeded_stream;
    use rand::Rng;
    use std::sync::OnceLock;

    fn fixture() -> &'static (RunConfig, WorldSpec, Datasets) {
        static CELL: OnceLock<(RunConfig, WorldSpec, Datasets)> = OnceLock::new();
        CELL.get_or_init(|| {
            let c = RunConfig::desk();
            let w = WorldSpec::build(&c).unwrap();
            let d = Datasets::generate(&w, c.samples_per_category, c.test_prompts_per_instruction).unwrap();
            (c, w, d)
        })
    }

    fn init_params(c: &RunConfig, w: &WorldSpec) -> PolicyParams {
        let dims = Dims {
            vocab: w.vocab().len(),
            hidden: c.hidden_dim,
        };
        PolicyParams::init(dims, &mut seeded_stream(c.seed, "init"), c.init_scale)
    }

    #[test]
    fn oracle_judge_scores_perfectly() {
        let (_, w, d) = fixture();
        let t = evaluate_verdicts(&d.catalog, &d.test_quadruplets, |q, _| {
            OracleJudge.verdict(w, &q.first, &q.second, q.cond(&d.catalog)?)
        })
        .unwrap();
        for (name, cell) in t.cells() {
            assert_eq!(cell.value, Some(1.0), "{name}");
        }
        assert_eq!(t.total.count, 120);
    }

    #[test]
    fn coin_flip_judge_is_near_half() {
        let (_, _, d) = fixture();
        let mut s = seeded_stream(5, "coin");
        let quads: Vec<_> = d.test_quadruplets.iter().cycle().take(400).cloned().collect();
        let t = evaluate_verdicts(&d.catalog, &quads, |_, _| {
            Ok(if s.random_bool(0.5) { Verdict::Yes } else { Verdict::No })
        })
        .unwrap();
        assert!((t.total() - 0.5).abs() <= 0.1, "{}", t.total());
    }

    #[test]
    fn total_is_count_weighted_mean_of_splits() {
        let (c, w, d) = fixture();
        let p = init_params(c, w);
        let t = evaluate_judge(&p, w, &d.catalog, &d.test_quadruplets, Decoding::from_config(c)).unwrap();
        let (i, o) = (t.id_overall, t.ood_overall);
        let mixed =
            (i.value.unwrap() * i.count as f64 + o.value.unwrap() * o.count as f64) / (i.count + o.count) as f64;
        assert!((t.total() - mixed).abs() <= 1e-12);
        for (_, cell) in t.cells() {
            let v = cell.value.unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn empty_cells_are_absent() {
        let (c, w, d) = fixture();
        let p = init_params(c, w);
        let id_only: Vec<_> = d
            .test_quadruplets
            .iter()
            .filter(|q| q.split == Split::TestId)
            .cloned()
            .collect();
        let t = evaluate_judge(&p, w, &d.catalog, &id_only, Decoding::from_config(c)).unwrap();
        assert_eq!(t.ood_overall.value, None);
        assert_eq!(t.ood_hard.count, 0);
        assert!(t.id_overall.value.is_some());
    }

    #[test]
    fn policy_against_itself_is_all_ties() {
        let (c, w, d) = fixture();
        let p = init_params(c, w);
        let t = evaluate_winrate(
            &p,
            w,
            &d.catalog,
            &d.test_cases,
            Decoding::from_config(c),
            Opponent::Policy(&p),
        )
        .unwrap();
        for (name, cell) in t.cells() {
            assert_eq!(cell.value, Some(0.5), "{name}");
        }
    }

    #[test]
    fn untrained_infeasible_mass_is_near_masked_uniform_share() {
        let (c, w, d) = fixture();
        let p = init_params(c, w);
        let dg = alignment_diagnostics(&p, w, &d.catalog, &d.test_cases, Decoding::from_config(c), None).unwrap();
        let v = w.vocab();
        let share = v.n_abstract() as f64 / v.content().len() as f64;
        assert!(
            (dg.infeasible_mass - share).abs() < 0.05,
            "{} vs {share}",
            dg.infeasible_mass
        );
        assert!(dg.mean_answer_len <= c.max_answer_len as f64);
    }
}

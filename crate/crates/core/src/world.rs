//! The frozen generation side: feature table, generator, ground-truth oracle
//! and the Bradley-Terry preference model.

use std::cmp::Ordering;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{hash_hex, RunConfig};
use crate::error::{Error, Result};
use crate::rng::seeded_stream;
use crate::vecmath::{add_assign, dot, norm, normalized};
use crate::vocab::{Role, TokenId, TokenSeq, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub compliance: f64,
    pub consistency: f64,
    pub quality: f64,
}

/// Generator parameters. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    seed: u64,
    dim: usize,
    thresholds: Thresholds,
    bt_scale: f64,
    vocab: Vocab,
    /// Unit feature per content token; empty for structural/verdict ids.
    features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub v: Vec<f64>,
    pub quality: f64,
}

impl Image {
    pub fn blank(dim: usize) -> Self {
        Image {
            v: vec![0.0; dim],
            quality: 0.0,
        }
    }

    pub fn is_blank(&self) -> bool {
        self.v.iter().all(|&x| x == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Material,
    Perspective,
    SemanticEdit,
    Attribute,
    Constraint,
    Conceptual,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Material,
        Category::Perspective,
        Category::SemanticEdit,
        Category::Attribute,
        Category::Constraint,
        Category::Conceptual,
    ];

    pub fn difficulty(self) -> Difficulty {
        match self {
            Category::Material | Category::Perspective | Category::SemanticEdit => Difficulty::Simple,
            _ => Difficulty::Hard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    Simple,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestId,
    TestOod,
}

/// A visual instruction `a`: a target direction realized by 1-3 witness tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: usize,
    pub category: Category,
    pub difficulty: Difficulty,
    pub target: Vec<f64>,
    pub witnesses: TokenSeq,
    pub alias: TokenSeq,
    pub split: Split,
}

impl Instruction {
    pub fn new(
        world: &WorldSpec,
        id: usize,
        category: Category,
        witnesses: TokenSeq,
        alias: TokenSeq,
        split: Split,
    ) -> Result<Self> {
        let target = world.target_of(&witnesses);
        let inst = Instruction {
            id,
            category,
            difficulty: category.difficulty(),
            target,
            witnesses,
            alias,
            split,
        };
        inst.check(world)?;
        Ok(inst)
    }

    /// Structural invariants that do not depend on a bound prompt.
    pub fn check(&self, world: &WorldSpec) -> Result<()> {
        let vocab = world.vocab();
        let bad = |msg: String| Err(Error::Invariant(format!("instruction {}: {msg}", self.id)));
        if self.difficulty != self.category.difficulty() {
            return bad("difficulty does not match category".into());
        }
        if self
            .witnesses
            .iter()
            .any(|&t| !vocab.contains(t) || vocab.role(t) != Role::ConcreteDescriptor)
        {
            return bad("witnesses must be concrete descriptors".into());
        }
        if self.alias.is_empty() || self.alias.iter().any(|&t| !vocab.contains(t)) {
            return bad("alias must be a non-empty token sequence".into());
        }
        match self.difficulty {
            Difficulty::Simple => {
                if self.witnesses.len() != 1 || self.alias != self.witnesses {
                    return bad("simple instruction must alias its single witness".into());
                }
            }
            Difficulty::Hard => {
                if !(2..=3).contains(&self.witnesses.len()) {
                    return bad("hard instruction needs 2 or 3 witnesses".into());
                }
                if self.alias.iter().any(|&t| vocab.is_feasible(t)) {
                    return bad("hard alias must lie outside the feasible set".into());
                }
            }
        }
        if self.category == Category::Constraint {
            for (i, &a) in self.witnesses.iter().enumerate() {
                for &b in &self.witnesses[i + 1..] {
                    if dot(world.feature(a), world.feature(b)) >= 0.0 {
                        return bad("constraint witnesses must conflict pairwise".into());
                    }
                }
            }
        }
        let expect = world.target_of(&self.witnesses);
        if expect != self.target {
            return bad("target does not match witness features".into());
        }
        Ok(())
    }
}

/// Which conditioning inputs a comparison sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub instruction: bool,
    pub prompt: bool,
}

impl ConditionSet {
    pub const FULL: ConditionSet = ConditionSet {
        instruction: true,
        prompt: true,
    };
    pub const PROMPT_ONLY: ConditionSet = ConditionSet {
        instruction: false,
        prompt: true,
    };
}

/// Borrowed conditioning inputs for the oracle and the evaluator.
#[derive(Debug, Clone, Copy)]
pub struct Condition<'a> {
    pub instruction: Option<&'a Instruction>,
    pub prompt: Option<&'a [TokenId]>,
}

impl<'a> Condition<'a> {
    pub fn full(a: &'a Instruction, p0: &'a [TokenId]) -> Self {
        Condition {
            instruction: Some(a),
            prompt: Some(p0),
        }
    }

    pub fn select(set: ConditionSet, a: Option<&'a Instruction>, p0: &'a [TokenId]) -> Self {
        Condition {
            instruction: if set.instruction { a } else { None },
            prompt: if set.prompt { Some(p0) } else { None },
        }
    }
}

/// The three oracle bits. Components outside the condition are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleBits {
    pub compliance: u8,
    pub consistency: u8,
    pub quality: u8,
}

impl OracleBits {
    pub fn total(&self) -> u8 {
        self.compliance + self.consistency + self.quality
    }
}

impl WorldSpec {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::build(config)?;
        let mut stream = seeded_stream(config.seed, "world");
        let d = config.feature_dim;
        let features = vocab
            .tokens()
            .iter()
            .map(|t| {
                if t.role.is_content() {
                    let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut stream)).collect();
                    normalized(&raw)
                } else {
                    Vec::new()
                }
            })
            .collect();
        Ok(WorldSpec {
            seed: config.seed,
            dim: d,
            thresholds: Thresholds {
                compliance: config.theta_compliance,
                consistency: config.theta_consistency,
                quality: config.theta_quality,
            },
            bt_scale: config.bt_scale,
            vocab,
            features,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    pub fn bt_scale(&self) -> f64 {
        self.bt_scale
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn feature(&self, t: TokenId) -> &[f64] {
        &self.features[t]
    }

    /// Normalized sum of witness features, summed in id order.
    pub fn target_of(&self, witnesses: &[TokenId]) -> Vec<f64> {
        let mut ids = witnesses.to_vec();
        ids.sort_unstable();
        let mut sum = vec![0.0; self.dim];
        for t in ids {
            add_assign(&mut sum, &self.features[t]);
        }
        normalized(&sum)
    }

    /// Generator G(p|φ). Infeasible tokens add nothing to the direction and
    /// dilute quality.
    pub fn generate(&self, prompt: &[TokenId]) -> Result<Image> {
        self.vocab.check_prompt(prompt)?;
        let mut feasible: Vec<TokenId> = prompt.iter().copied().filter(|&t| self.vocab.is_feasible(t)).collect();
        feasible.sort_unstable();
        let mut sum = vec![0.0; self.dim];
        for &t in &feasible {
            add_assign(&mut sum, &self.features[t]);
        }
        let quality = if prompt.is_empty() {
            0.0
        } else {
            feasible.len() as f64 / prompt.len() as f64
        };
        Ok(Image {
            v: normalized(&sum),
            quality,
        })
    }

    /// Direction of the plain-prompt image, used as the consistency anchor.
    pub fn anchor(&self, p0: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.generate(p0)?.v)
    }

    pub fn oracle_bits(&self, image: &Image, cond: Condition<'_>) -> Result<OracleBits> {
        let th = self.thresholds;
        let compliance = match cond.instruction {
            Some(a) => u8::from(dot(&image.v, &a.target) >= th.compliance),
            None => 0,
        };
        let consistency = match cond.prompt {
            Some(p0) => u8::from(dot(&image.v, &self.anchor(p0)?) >= th.consistency),
            None => 0,
        };
        Ok(OracleBits {
            compliance,
            consistency,
            quality: u8::from(image.quality >= th.quality),
        })
    }

    /// Oracle reward under the full condition `{a, p0}`.
    pub fn oracle_reward(&self, image: &Image, a: &Instruction, p0: &[TokenId]) -> Result<OracleBits> {
        self.oracle_bits(image, Condition::full(a, p0))
    }

    /// Raw (pre-threshold) component values summed over the condition.
    pub fn oracle_margin(&self, image: &Image, cond: Condition<'_>) -> Result<f64> {
        let mut score = image.quality;
        if let Some(a) = cond.instruction {
            score += dot(&image.v, &a.target);
        }
        if let Some(p0) = cond.prompt {
            score += dot(&image.v, &self.anchor(p0)?);
        }
        Ok(score)
    }

    /// Ordering used to label training pairs: bit-sum first, raw margin to
    /// break bit ties.
    pub fn oracle_compare(&self, x: &Image, y: &Image, cond: Condition<'_>) -> Result<Ordering> {
        let bx = self.oracle_bits(x, cond)?.total();
        let by = self.oracle_bits(y, cond)?.total();
        if bx != by {
            return Ok(bx.cmp(&by));
        }
        let mx = self.oracle_margin(x, cond)?;
        let my = self.oracle_margin(y, cond)?;
        Ok(mx.partial_cmp(&my).unwrap_or(Ordering::Equal))
    }

    pub fn hash(&self) -> String {
        hash_hex(self.to_json().as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&WorldDoc::from(self)).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WorldDoc = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Direct concatenation baseline `[p0; a]`.
pub fn naive_concat(a: &Instruction, p0: &[TokenId]) -> TokenSeq {
    let mut out = p0.to_vec();
    out.extend_from_slice(&a.alias);
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// P(first ≻ second) = σ(κ (r1 − r2)).
pub fn bt_preference(r1: f64, r2: f64, kappa: f64) -> f64 {
    assert!(kappa > 0.0, "bt scale must be positive");
    sigmoid(kappa * (r1 - r2))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldDoc {
    seed: u64,
    d: usize,
    thresholds: Thresholds,
    bt_scale: f64,
    roles: Vec<Role>,
    vocab_counts: [usize; 3],
    features: Vec<Vec<f64>>,
}

impl From<&WorldSpec> for WorldDoc {
    fn from(w: &WorldSpec) -> Self {
        WorldDoc {
            seed: w.seed,
            d: w.dim,
            thresholds: w.thresholds,
            bt_scale: w.bt_scale,
            roles: w.vocab.tokens().iter().map(|t| t.role).collect(),
            vocab_counts: [w.vocab.n_objects(), w.vocab.n_concrete(), w.vocab.n_abstract()],
            features: w.features.clone(),
        }
    }
}

impl TryFrom<WorldDoc> for WorldSpec {
    type Error = Error;

    fn try_from(doc: WorldDoc) -> Result<Self> {
        let [o, c, a] = doc.vocab_counts;
        let vocab = Vocab::from_counts(o, c, a)?;
        let roles: Vec<Role> = vocab.tokens().iter().map(|t| t.role).collect();
        if roles != doc.roles {
            return Err(Error::Invariant("world role table does not match counts".into()));
        }
        if doc.features.len() != vocab.len() {
            return Err(Error::Invariant("feature table size mismatch".into()));
        }
        for (t, f) in doc.features.iter().enumerate() {
            let expect = if vocab.is_content(t) { doc.d } else { 0 };
            if f.len() != expect {
                return Err(Error::Invariant(format!("feature {t} has wrong length")));
            }
            if expect > 0 && (norm(f) - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!("feature {t} is not unit norm")));
            }
        }
        Ok(WorldSpec {
            seed: doc.seed,
            dim: doc.d,
            thresholds: doc.thresholds,
            bt_scale: doc.bt_scale,
            vocab,
            features: doc.features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldSpec {
        WorldSpec::build(&RunConfig::desk()).unwrap()
    }

    fn hard_instruction(w: &WorldSpec) -> Instruction {
        let con = w.vocab().concrete();
        let abs = w.vocab().abstract_descriptors();
        Instruction::new(
            w,
            0,
            Category::Attribute,
            vec![con.start, con.start + 1],
            vec![abs.start, abs.start + 1],
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn features_are_unit_norm() {
        let w = world();
        for t in w.vocab().content() {
            assert!((norm(w.feature(t)) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(world(), world());
    }

    #[test]
    fn small_world_has_distinct_directions() {
        let mut c = RunConfig::desk();
        c.feature_dim = 8;
        let w = WorldSpec::build(&c).unwrap();
        let ids: Vec<_> = w.vocab().content().collect();
        assert_eq!(ids.len(), 34);
        let mut max = 0.0f64;
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                max = max.max(dot(w.feature(a), w.feature(b)).abs());
            }
        }
        assert!(max < 1.0);
    }

    #[test]
    fn degenerate_prompts() {
        let w = world();
        let empty = w.generate(&[]).unwrap();
        assert!(empty.is_blank());
        assert_eq!(empty.quality, 0.0);

        let t = w.vocab().concrete().start;
        let one = w.generate(&[t]).unwrap();
        assert_eq!(one.quality, 1.0);
        for (x, y) in one.v.iter().zip(w.feature(t)) {
            assert!((x - y).abs() < 1e-12);
        }

        let abs = w.vocab().abstract_descriptors().start;
        let img = w.generate(&[abs]).unwrap();
        assert!(img.is_blank());
        assert_eq!(img.quality, 0.0);
    }

    #[test]
    fn structural_token_is_contract_violation() {
        let w = world();
        let err = w.generate(&[crate::vocab::THINK_OPEN]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(w.generate(&[crate::vocab::YES]).is_err());
    }

    #[test]
    fn oracle_rewards_prompt_plus_witnesses() {
        let w = world();
        let a = hard_instruction(&w);
        let p0 = vec![w.vocab().objects().start];
        let mut prompt = p0.clone();
        prompt.extend(&a.witnesses);
        let img = w.generate(&prompt).unwrap();
        // Compute the expected bits independently of oracle_bits.
        let v0 = w.generate(&p0).unwrap().v;
        let expect =
            u8::from(dot(&img.v, &a.target) >= 0.6) + u8::from(dot(&img.v, &v0) >= 0.3) + u8::from(img.quality >= 0.7);
        let bits = w.oracle_reward(&img, &a, &p0).unwrap();
        assert_eq!(bits.total(), expect);
        assert_eq!(bits.total(), bits.compliance + bits.consistency + bits.quality);
    }

    #[test]
    fn blank_image_scores_zero() {
        let w = world();
        let a = hard_instruction(&w);
        let p0 = vec![w.vocab().objects().start];
        let bits = w.oracle_reward(&Image::blank(w.dim()), &a, &p0).unwrap();
        assert_eq!(bits.total(), 0);
    }

    #[test]
    fn bradley_terry_values() {
        assert_eq!(bt_preference(0.3, 0.3, 1.0), 0.5);
        assert!((bt_preference(2.0, 0.0, 1.0) - 0.8808).abs() < 1e-4);
        let p = bt_preference(1.7, -0.4, 2.5) + bt_preference(-0.4, 1.7, 2.5);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn naive_concat_appends_alias() {
        let w = world();
        let a = hard_instruction(&w);
        let obj = w.vocab().objects();
        let p0 = vec![obj.start, obj.start + 1, obj.start + 2];
        let c = naive_concat(&a, &p0);
        assert_eq!(c.len(), 5);
        assert_eq!(&c[..3], &p0[..]);
        assert_eq!(&c[3..], &a.alias[..]);
    }

    #[test]
    fn world_json_round_trip_is_bit_exact() {
        let w = world();
        let text = w.to_json();
        let back = WorldSpec::from_json(&text).unwrap();
        assert_eq!(w, back);
        assert_eq!(text, back.to_json());
    }

    #[test]
    fn hard_alias_must_be_infeasible() {
        let w = world();
        let con = w.vocab().concrete();
        let err = Instruction::new(
            &w,
            0,
            Category::Attribute,
            vec![con.start, con.start + 1],
            vec![con.start],
            Split::Train,
        );
        assert!(err.is_err());
    }
}

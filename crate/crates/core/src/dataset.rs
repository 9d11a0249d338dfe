//! Synthetic proxy-task data: instruction catalog, certified training
//! samples, the two curricula of labeled image pairs, and the ID/OOD test set.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Verdict;
use crate::rng::{seeded_stream, Stream};
use crate::vecmath::dot;
use crate::vocab::{TokenId, TokenSeq};
use crate::world::{Category, Condition, ConditionSet, Difficulty, Image, Instruction, Split, WorldSpec};

/// Simple training instructions, split 3/3/2 over the simple categories.
pub const SIMPLE_PER_SPLIT: usize = 8;
pub const HARD_TRAIN_PER_CATEGORY: usize = 5;
/// Hard instructions per category in each test split.
pub const HARD_TEST_PER_CATEGORY: usize = 4;
const SIMPLE_CATEGORY_COUNTS: [(Category, usize); 3] = [
    (Category::Material, 3),
    (Category::Perspective, 3),
    (Category::SemanticEdit, 2),
];
const HARD_CATEGORIES: [Category; 3] = [Category::Attribute, Category::Constraint, Category::Conceptual];
const PROMPT_DRAWS: usize = 2000;

/// Abstract descriptor → the concrete descriptor it stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub alias: TokenId,
    pub meaning: TokenId,
}

/// Every instruction of the run, indexed by id, and the shared lexicon.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub lexicon: Vec<LexiconEntry>,
    pub instructions: Vec<Instruction>,
}

impl Catalog {
    pub fn get(&self, id: usize) -> Result<&Instruction> {
        self.instructions
            .get(id)
            .filter(|a| a.id == id)
            .ok_or_else(|| Error::Invariant(format!("unknown instruction id {id}")))
    }

    pub fn meaning(&self, alias: TokenId) -> Option<TokenId> {
        self.lexicon.iter().find(|e| e.alias == alias).map(|e| e.meaning)
    }

    pub fn training(&self) -> impl Iterator<Item = &Instruction> {
        self.instructions.iter().filter(|a| a.split == Split::Train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySample {
    pub instruction: usize,
    pub p0: TokenSeq,
    pub category: Category,
    pub difficulty: Difficulty,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Curriculum1,
    Curriculum2,
    Test,
}

/// A labeled image pair. The label says whether `first` is the preferred image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub instruction: usize,
    pub p0: TokenSeq,
    pub condition: ConditionSet,
    pub first_prompt: TokenSeq,
    pub second_prompt: TokenSeq,
    pub first: Image,
    pub second: Image,
    pub label: Verdict,
    pub phase: Phase,
    pub split: Split,
    pub difficulty: Difficulty,
}

impl Quadruplet {
    pub fn cond<'a>(&'a self, catalog: &'a Catalog) -> Result<Condition<'a>> {
        Ok(Condition::select(
            self.condition,
            Some(catalog.get(self.instruction)?),
            &self.p0,
        ))
    }

    /// The same pair presented in the other order.
    pub fn swapped(&self) -> Self {
        Quadruplet {
            first_prompt: self.second_prompt.clone(),
            second_prompt: self.first_prompt.clone(),
            first: self.second.clone(),
            second: self.first.clone(),
            label: self.label.flip(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub instruction: usize,
    pub p0: TokenSeq,
    pub category: Category,
    pub difficulty: Difficulty,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Record {
    Lexicon(LexiconEntry),
    Instruction(Instruction),
    Sample(ProxySample),
    Quadruplet(Quadruplet),
    TestCase(TestCase),
}

fn gen_err(msg: impl Into<String>) -> Error {
    Error::Generation(msg.into())
}

fn sorted(mut v: TokenSeq) -> TokenSeq {
    v.sort_unstable();
    v
}

fn union(p0: &[TokenId], extra: &[TokenId]) -> TokenSeq {
    let mut out = p0.to_vec();
    out.extend_from_slice(extra);
    out
}

/// Solvable binding: the witness-augmented prompt scores 3 and the plain
/// prompt misses the instruction.
pub fn certified(world: &WorldSpec, a: &Instruction, p0: &[TokenId]) -> Result<bool> {
    let solved = world.generate(&union(p0, &a.witnesses))?;
    if world.oracle_reward(&solved, a, p0)?.total() != 3 {
        return Ok(false);
    }
    let plain = world.generate(p0)?;
    Ok(world.oracle_reward(&plain, a, p0)?.compliance == 0)
}

/// 1-4 objects plus 0-2 concrete descriptors outside the witness set, sorted.
fn draw_prompt(world: &WorldSpec, a: &Instruction, stream: &mut Stream) -> TokenSeq {
    let vocab = world.vocab();
    let objects: Vec<TokenId> = vocab.objects().collect();
    let concrete: Vec<TokenId> = vocab.concrete().filter(|t| !a.witnesses.contains(t)).collect();
    let n_obj = stream.random_range(1..=4usize.min(objects.len()));
    let n_con = stream.random_range(0..=2usize.min(concrete.len()));
    let mut p0: TokenSeq = objects.choose_multiple(stream, n_obj).copied().collect();
    p0.extend(concrete.choose_multiple(stream, n_con).copied());
    sorted(p0)
}

/// `n` distinct certified prompts for `a` avoiding `forbidden`, or `None`
/// when the draw budget runs out.
fn certified_prompts(
    world: &WorldSpec,
    a: &Instruction,
    n: usize,
    forbidden: &BTreeSet<TokenSeq>,
    stream: &mut Stream,
) -> Result<Option<Vec<TokenSeq>>> {
    let mut out: Vec<TokenSeq> = Vec::with_capacity(n);
    for _ in 0..PROMPT_DRAWS {
        if out.len() == n {
            break;
        }
        let p0 = draw_prompt(world, a, stream);
        if forbidden.contains(&p0) || out.contains(&p0) {
            continue;
        }
        if certified(world, a, &p0)? {
            out.push(p0);
        }
    }
    Ok((out.len() == n).then_some(out))
}

struct CatalogBuilder<'w> {
    world: &'w WorldSpec,
    instructions: Vec<Instruction>,
    used_aliases: BTreeSet<TokenSeq>,
}

impl CatalogBuilder<'_> {
    /// Adds the first candidate that can host `prompts_needed` certified prompts.
    fn take(
        &mut self,
        category: Category,
        split: Split,
        candidates: &mut Vec<(TokenSeq, TokenSeq)>,
        prompts_needed: usize,
        stream: &mut Stream,
    ) -> Result<()> {
        while let Some((witnesses, alias)) = candidates.pop() {
            if self.used_aliases.contains(&sorted(alias.clone())) {
                continue;
            }
            let a = Instruction::new(self.world, self.instructions.len(), category, witnesses, alias, split)?;
            if certified_prompts(self.world, &a, prompts_needed, &BTreeSet::new(), stream)?.is_some() {
                self.used_aliases.insert(sorted(a.alias.clone()));
                self.instructions.push(a);
                return Ok(());
            }
        }
        Err(gen_err(format!(
            "no certifiable {category:?} instruction left for split {split:?}; enlarge the descriptor pool or relax thresholds"
        )))
    }
}

fn combinations(items: &[TokenId], k: usize) -> Vec<TokenSeq> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > items.len() {
        return out;
    }
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let mut i = k;
        while i > 0 && idx[i - 1] == items.len() - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Builds the lexicon and all instructions: training ones first, then the
/// OOD ones (fresh simple witnesses, fresh abstract combinations).
pub fn gen_catalog(world: &WorldSpec, samples_per_category: usize, stream: &mut Stream) -> Result<Catalog> {
    let vocab = world.vocab();
    let concrete: Vec<TokenId> = vocab.concrete().collect();
    let abstracts: Vec<TokenId> = vocab.abstract_descriptors().collect();
    if concrete.len() < 2 * SIMPLE_PER_SPLIT {
        return Err(gen_err(format!(
            "{} concrete descriptors cannot give disjoint ID and OOD simple witnesses; need at least {}",
            concrete.len(),
            2 * SIMPLE_PER_SPLIT
        )));
    }
    if abstracts.len() < 4 || abstracts.len() > concrete.len() {
        return Err(gen_err("abstract descriptor count must lie in [4, n_concrete]"));
    }
    let mut meanings = concrete.clone();
    meanings.shuffle(stream);
    let lexicon: Vec<LexiconEntry> = abstracts
        .iter()
        .zip(&meanings)
        .map(|(&alias, &meaning)| LexiconEntry { alias, meaning })
        .collect();
    let meaning = |t: TokenId| {
        lexicon
            .iter()
            .find(|e| e.alias == t)
            .expect("lexicon covers aliases")
            .meaning
    };
    let to_witnesses = |alias: &TokenSeq| alias.iter().map(|&t| meaning(t)).collect::<TokenSeq>();

    let mut b = CatalogBuilder {
        world,
        instructions: Vec::new(),
        used_aliases: BTreeSet::new(),
    };
    let mut simple_pool = concrete.clone();
    simple_pool.shuffle(stream);
    let half = simple_pool.len() / 2;
    let as_candidates =
        |ws: &[TokenId]| -> Vec<(TokenSeq, TokenSeq)> { ws.iter().rev().map(|&w| (vec![w], vec![w])).collect() };
    let mut train_simple = as_candidates(&simple_pool[..half]);
    let mut ood_simple = as_candidates(&simple_pool[half..]);
    let simple = |split: Split,
                  b: &mut CatalogBuilder,
                  cands: &mut Vec<(TokenSeq, TokenSeq)>,
                  stream: &mut Stream|
     -> Result<()> {
        for (cat, count) in SIMPLE_CATEGORY_COUNTS {
            let per_inst = samples_per_category.div_ceil(count);
            for _ in 0..count {
                b.take(cat, split, cands, per_inst, stream)?;
            }
        }
        Ok(())
    };
    simple(Split::Train, &mut b, &mut train_simple, stream)?;

    let pairs = combinations(&abstracts, 2);
    let triples = combinations(&abstracts, 3);
    let conflicting = |alias: &TokenSeq| {
        let w = to_witnesses(alias);
        (0..w.len()).all(|i| (i + 1..w.len()).all(|j| dot(world.feature(w[i]), world.feature(w[j])) < 0.0))
    };
    let mut constraint: Vec<(TokenSeq, TokenSeq)> = pairs
        .iter()
        .filter(|p| conflicting(p))
        .map(|p| (to_witnesses(p), p.clone()))
        .collect();
    let mut attribute: Vec<(TokenSeq, TokenSeq)> = pairs
        .iter()
        .filter(|p| !conflicting(p))
        .map(|p| (to_witnesses(p), p.clone()))
        .collect();
    let mut conceptual: Vec<(TokenSeq, TokenSeq)> = triples.iter().map(|p| (to_witnesses(p), p.clone())).collect();
    for c in [&mut constraint, &mut attribute, &mut conceptual] {
        c.shuffle(stream);
    }
    let hard_prompts = samples_per_category.div_ceil(HARD_TRAIN_PER_CATEGORY);
    for (cat, cands) in [
        (Category::Attribute, &mut attribute),
        (Category::Constraint, &mut constraint),
        (Category::Conceptual, &mut conceptual),
    ] {
        for _ in 0..HARD_TRAIN_PER_CATEGORY {
            b.take(cat, Split::Train, cands, hard_prompts, stream)?;
        }
    }
    simple(Split::TestOod, &mut b, &mut ood_simple, stream)?;
    for (cat, cands) in [
        (Category::Attribute, &mut attribute),
        (Category::Constraint, &mut constraint),
        (Category::Conceptual, &mut conceptual),
    ] {
        for _ in 0..HARD_TEST_PER_CATEGORY {
            b.take(cat, Split::TestOod, cands, hard_prompts, stream)?;
        }
    }
    Ok(Catalog {
        lexicon,
        instructions: b.instructions,
    })
}

/// `samples_per_category` certified (a, p0) bindings per category, each
/// instruction reused across several prompts.
pub fn gen_train_set(
    world: &WorldSpec,
    catalog: &Catalog,
    samples_per_category: usize,
    stream: &mut Stream,
) -> Result<Vec<ProxySample>> {
    let mut out = Vec::with_capacity(6 * samples_per_category);
    for cat in Category::ALL {
        let insts: Vec<&Instruction> = catalog.training().filter(|a| a.category == cat).collect();
        if insts.is_empty() {
            return Err(gen_err(format!("no training instruction for {cat:?}")));
        }
        let k = insts.len();
        for (i, a) in insts.iter().enumerate() {
            let n = samples_per_category / k + usize::from(i < samples_per_category % k);
            let prompts = certified_prompts(world, a, n, &BTreeSet::new(), stream)?.ok_or_else(|| {
                gen_err(format!(
                    "instruction {} could not be bound to {n} certified prompts",
                    a.id
                ))
            })?;
            out.extend(prompts.into_iter().map(|p0| ProxySample {
                instruction: a.id,
                p0,
                category: a.category,
                difficulty: a.difficulty,
                split: Split::Train,
            }));
        }
    }
    Ok(out)
}

fn present(world: &WorldSpec, catalog: &Catalog, proto: Quadruplet, stream: &mut Stream) -> Result<Quadruplet> {
    let q = if stream.random_bool(0.5) {
        proto.swapped()
    } else {
        proto
    };
    check_quadruplet(world, catalog, &q)?;
    Ok(q)
}

fn quadruplet(
    world: &WorldSpec,
    a: &Instruction,
    p0: &[TokenId],
    positive: TokenSeq,
    negative: TokenSeq,
    condition: ConditionSet,
    phase: Phase,
    split: Split,
) -> Result<Quadruplet> {
    Ok(Quadruplet {
        instruction: a.id,
        p0: p0.to_vec(),
        condition,
        first: world.generate(&positive)?,
        second: world.generate(&negative)?,
        first_prompt: positive,
        second_prompt: negative,
        label: Verdict::Yes,
        phase,
        split,
        difficulty: a.difficulty,
    })
}

/// Prompt-only pairs: the plain image against one with an object removed or
/// an unrelated object added.
pub fn gen_curriculum1(
    world: &WorldSpec,
    catalog: &Catalog,
    samples: &[ProxySample],
    stream: &mut Stream,
) -> Result<Vec<Quadruplet>> {
    let objects: Vec<TokenId> = world.vocab().objects().collect();
    samples
        .iter()
        .map(|s| {
            let a = catalog.get(s.instruction)?;
            let present_objs: Vec<TokenId> = s.p0.iter().copied().filter(|t| objects.contains(t)).collect();
            let remove = stream.random_bool(0.5) && present_objs.len() > 1;
            let negative = if remove {
                let drop = *present_objs.choose(stream).expect("non-empty");
                let pos = s.p0.iter().position(|&t| t == drop).expect("present");
                let mut n = s.p0.clone();
                n.remove(pos);
                n
            } else {
                let fresh: Vec<TokenId> = objects.iter().copied().filter(|t| !s.p0.contains(t)).collect();
                let add = *fresh
                    .choose(stream)
                    .ok_or_else(|| gen_err("prompt already holds every object"))?;
                sorted(union(&s.p0, &[add]))
            };
            let q = quadruplet(
                world,
                a,
                &s.p0,
                s.p0.clone(),
                negative,
                ConditionSet::PROMPT_ONLY,
                Phase::Curriculum1,
                s.split,
            )?;
            present(world, catalog, q, stream)
        })
        .collect()
}

fn curriculum2_pair(
    world: &WorldSpec,
    catalog: &Catalog,
    instruction: usize,
    p0: &[TokenId],
    phase: Phase,
    split: Split,
    stream: &mut Stream,
) -> Result<Quadruplet> {
    let a = catalog.get(instruction)?;
    let q = quadruplet(
        world,
        a,
        p0,
        union(p0, &a.witnesses),
        p0.to_vec(),
        ConditionSet::FULL,
        phase,
        split,
    )?;
    present(world, catalog, q, stream)
}

/// Full-condition pairs: the certified solution against the plain image.
pub fn gen_curriculum2(
    world: &WorldSpec,
    catalog: &Catalog,
    samples: &[ProxySample],
    stream: &mut Stream,
) -> Result<Vec<Quadruplet>> {
    samples
        .iter()
        .map(|s| {
            curriculum2_pair(
                world,
                catalog,
                s.instruction,
                &s.p0,
                Phase::Curriculum2,
                s.split,
                stream,
            )
        })
        .collect()
}

/// ID cases reuse training instructions with fresh prompts; OOD cases use the
/// held-out instructions. Every test prompt is unseen in training.
pub fn gen_test_set(
    world: &WorldSpec,
    catalog: &Catalog,
    train: &[ProxySample],
    prompts_per_instruction: usize,
    stream: &mut Stream,
) -> Result<Vec<TestCase>> {
    let mut forbidden: BTreeSet<TokenSeq> = train.iter().map(|s| sorted(s.p0.clone())).collect();
    let mut chosen: Vec<(&Instruction, Split)> = Vec::new();
    chosen.extend(
        catalog
            .training()
            .filter(|a| a.difficulty == Difficulty::Simple)
            .map(|a| (a, Split::TestId)),
    );
    for cat in HARD_CATEGORIES {
        let mut pool: Vec<&Instruction> = catalog.training().filter(|a| a.category == cat).collect();
        pool.shuffle(stream);
        pool.truncate(HARD_TEST_PER_CATEGORY);
        pool.sort_by_key(|a| a.id);
        chosen.extend(pool.into_iter().map(|a| (a, Split::TestId)));
    }
    chosen.extend(
        catalog
            .instructions
            .iter()
            .filter(|a| a.split == Split::TestOod)
            .map(|a| (a, Split::TestOod)),
    );
    let mut out = Vec::new();
    for (a, split) in chosen {
        let prompts = certified_prompts(world, a, prompts_per_instruction, &forbidden, stream)?
            .ok_or_else(|| gen_err(format!("instruction {} has too few fresh certified test prompts", a.id)))?;
        for p0 in prompts {
            forbidden.insert(p0.clone());
            out.push(TestCase {
                instruction: a.id,
                p0,
                category: a.category,
                difficulty: a.difficulty,
                split,
            });
        }
    }
    Ok(out)
}

/// Oracle-labeled judge test pairs built like the second curriculum.
pub fn gen_test_quadruplets(
    world: &WorldSpec,
    catalog: &Catalog,
    cases: &[TestCase],
    stream: &mut Stream,
) -> Result<Vec<Quadruplet>> {
    cases
        .iter()
        .map(|c| curriculum2_pair(world, catalog, c.instruction, &c.p0, Phase::Test, c.split, stream))
        .collect()
}

/// Label implied by the stored prompts under the pair's own condition.
pub fn derive_label(world: &WorldSpec, catalog: &Catalog, q: &Quadruplet) -> Result<Option<Verdict>> {
    let cond = q.cond(catalog)?;
    Ok(match world.oracle_compare(&q.first, &q.second, cond)? {
        Ordering::Greater => Some(Verdict::Yes),
        Ordering::Less => Some(Verdict::No),
        Ordering::Equal => None,
    })
}

pub fn check_quadruplet(world: &WorldSpec, catalog: &Catalog, q: &Quadruplet) -> Result<()> {
    let bad = |m: &str| {
        Err(Error::Invariant(format!(
            "quadruplet for instruction {}: {m}",
            q.instruction
        )))
    };
    let a = catalog.get(q.instruction)?;
    if a.difficulty != q.difficulty {
        return bad("difficulty tag does not match the instruction");
    }
    if world.generate(&q.first_prompt)? != q.first || world.generate(&q.second_prompt)? != q.second {
        return bad("stored image does not match its provenance prompt");
    }
    match derive_label(world, catalog, q)? {
        None => bad("oracle does not separate the pair"),
        Some(l) if l != q.label => bad("label disagrees with the oracle"),
        Some(_) => Ok(()),
    }
}

fn check_binding(
    world: &WorldSpec,
    catalog: &Catalog,
    instruction: usize,
    p0: &[TokenId],
    category: Category,
    difficulty: Difficulty,
) -> Result<()> {
    let a = catalog.get(instruction)?;
    let bad = |m: &str| Err(Error::Invariant(format!("binding for instruction {instruction}: {m}")));
    if a.category != category || a.difficulty != difficulty {
        return bad("category tags do not match the instruction");
    }
    if p0.is_empty()
        || p0
            .iter()
            .any(|&t| !world.vocab().contains(t) || !world.vocab().is_feasible(t))
    {
        return bad("prompt must be non-empty and feasible");
    }
    if !certified(world, a, p0)? {
        return bad("binding is not certified solvable");
    }
    Ok(())
}

/// Everything `gen-data` produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub catalog: Catalog,
    pub train: Vec<ProxySample>,
    pub curriculum1: Vec<Quadruplet>,
    pub curriculum2: Vec<Quadruplet>,
    pub test_cases: Vec<TestCase>,
    pub test_quadruplets: Vec<Quadruplet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub world_hash: String,
    pub instructions: usize,
    pub train_samples: usize,
    pub curriculum1: usize,
    pub curriculum2: usize,
    pub test_cases: usize,
    pub test_quadruplets: usize,
    pub train_by_category: BTreeMap<String, usize>,
    pub test_by_split: BTreeMap<String, usize>,
}

const FILES: [&str; 5] = [
    "catalog.jsonl",
    "train.jsonl",
    "curriculum1.jsonl",
    "curriculum2.jsonl",
    "test.jsonl",
];

fn tag<T: Serialize>(x: &T) -> String {
    serde_json::to_value(x)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl Datasets {
    /// Pure function of the world and its seed.
    pub fn generate(world: &WorldSpec, samples_per_category: usize, prompts_per_instruction: usize) -> Result<Self> {
        let seed = world.seed();
        let catalog = gen_catalog(world, samples_per_category, &mut seeded_stream(seed, "data/catalog"))?;
        let train = gen_train_set(
            world,
            &catalog,
            samples_per_category,
            &mut seeded_stream(seed, "data/train"),
        )?;
        let curriculum1 = gen_curriculum1(world, &catalog, &train, &mut seeded_stream(seed, "data/c1"))?;
        let curriculum2 = gen_curriculum2(world, &catalog, &train, &mut seeded_stream(seed, "data/c2"))?;
        let test_cases = gen_test_set(
            world,
            &catalog,
            &train,
            prompts_per_instruction,
            &mut seeded_stream(seed, "data/test"),
        )?;
        let test_quadruplets = gen_test_quadruplets(
            world,
            &catalog,
            &test_cases,
            &mut seeded_stream(seed, "data/test-pairs"),
        )?;
        Ok(Datasets {
            catalog,
            train,
            curriculum1,
            curriculum2,
            test_cases,
            test_quadruplets,
        })
    }

    pub fn manifest(&self, world: &WorldSpec) -> Manifest {
        let mut train_by_category = BTreeMap::new();
        for s in &self.train {
            *train_by_category.entry(tag(&s.category)).or_insert(0) += 1;
        }
        let mut test_by_split = BTreeMap::new();
        for c in &self.test_cases {
            *test_by_split
                .entry(format!("{}/{}", tag(&c.split), tag(&c.difficulty)))
                .or_insert(0) += 1;
        }
        Manifest {
            seed: world.seed(),
            world_hash: world.hash(),
            instructions: self.catalog.instructions.len(),
            train_samples: self.train.len(),
            curriculum1: self.curriculum1.len(),
            curriculum2: self.curriculum2.len(),
            test_cases: self.test_cases.len(),
            test_quadruplets: self.test_quadruplets.len(),
            train_by_category,
            test_by_split,
        }
    }

    pub fn save(&self, dir: &Path, world: &WorldSpec) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let catalog: Vec<Record> = self
            .catalog
            .lexicon
            .iter()
            .map(|e| Record::Lexicon(*e))
            .chain(self.catalog.instructions.iter().cloned().map(Record::Instruction))
            .collect();
        let train: Vec<Record> = self.train.iter().cloned().map(Record::Sample).collect();
        let c1: Vec<Record> = self.curriculum1.iter().cloned().map(Record::Quadruplet).collect();
        let c2: Vec<Record> = self.curriculum2.iter().cloned().map(Record::Quadruplet).collect();
        let test: Vec<Record> = self
            .test_cases
            .iter()
            .cloned()
            .map(Record::TestCase)
            .chain(self.test_quadruplets.iter().cloned().map(Record::Quadruplet))
            .collect();
        for (name, recs) in FILES.iter().zip([catalog, train, c1, c2, test]) {
            save_jsonl(&dir.join(name), &recs)?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest(world))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads and re-validates every record against `world`.
    pub fn load(dir: &Path, world: &WorldSpec) -> Result<Self> {
        let mut lexicon = Vec::new();
        let mut instructions = Vec::new();
        let path = dir.join(FILES[0]);
        for (line, r) in load_jsonl(&path)? {
            let at = |e: Error| record_err(&path, line, e);
            match r {
                Record::Lexicon(e) => lexicon.push(e),
                Record::Instruction(a) => {
                    if a.id != instructions.len() {
                        return Err(at(Error::Invariant("instruction ids must be dense and ordered".into())));
                    }
                    a.check(world).map_err(at)?;
                    instructions.push(a);
                }
                _ => return Err(at(Error::Invariant("unexpected record type in catalog".into()))),
            }
        }
        let catalog = Catalog { lexicon, instructions };
        let mut train = Vec::new();
        let path = dir.join(FILES[1]);
        for (line, r) in load_jsonl(&path)? {
            let at = |e: Error| record_err(&path, line, e);
            let Record::Sample(s) = r else {
                return Err(at(Error::Invariant("expected a sample record".into())));
            };
            check_binding(world, &catalog, s.instruction, &s.p0, s.category, s.difficulty).map_err(at)?;
            train.push(s);
        }
        let quads = |name: &str, phase: Phase| -> Result<Vec<Quadruplet>> {
            let path = dir.join(name);
            let mut out = Vec::new();
            for (line, r) in load_jsonl(&path)? {
                let at = |e: Error| record_err(&path, line, e);
                let Record::Quadruplet(q) = r else {
                    return Err(at(Error::Invariant("expected a quadruplet record".into())));
                };
                if q.phase != phase {
                    return Err(at(Error::Invariant(
                        "quadruplet phase tag does not match its file".into(),
                    )));
                }
                check_quadruplet(world, &catalog, &q).map_err(at)?;
                out.push(q);
            }
            Ok(out)
        };
        let curriculum1 = quads(FILES[2], Phase::Curriculum1)?;
        let curriculum2 = quads(FILES[3], Phase::Curriculum2)?;
        let mut test_cases = Vec::new();
        let mut test_quadruplets = Vec::new();
        let path = dir.join(FILES[4]);
        for (line, r) in load_jsonl(&path)? {
            let at = |e: Error| record_err(&path, line, e);
            match r {
                Record::TestCase(c) => {
                    check_binding(world, &catalog, c.instruction, &c.p0, c.category, c.difficulty).map_err(at)?;
                    test_cases.push(c);
                }
                Record::Quadruplet(q) if q.phase == Phase::Test => {
                    check_quadruplet(world, &catalog, &q).map_err(at)?;
                    test_quadruplets.push(q);
                }
                _ => return Err(at(Error::Invariant("unexpected record type in test file".into()))),
            }
        }
        let seen: BTreeSet<TokenSeq> = train.iter().map(|s| sorted(s.p0.clone())).collect();
        if let Some(c) = test_cases.iter().find(|c| seen.contains(&sorted(c.p0.clone()))) {
            return Err(Error::Invariant(format!(
                "test prompt for instruction {} also appears in training",
                c.instruction
            )));
        }
        Ok(Datasets {
            catalog,
            train,
            curriculum1,
            curriculum2,
            test_cases,
            test_quadruplets,
        })
    }
}

fn record_err(path: &Path, line: usize, e: Error) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

pub fn save_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parsed records with their 1-based line numbers.
pub fn load_jsonl(path: &Path) -> Result<Vec<(usize, Record)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: PathBuf::from(path),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

//! Command-line front end. Every verb writes into one run directory and
//! stamps its outputs with the version, seed, config hash and world hash.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::Datasets;
use crate::error::Error;
use crate::gradcheck::{fd_verify, FdReport, InstanceSpec};
use crate::policy::Decoding;
use crate::rng::seeded_stream;
use crate::trainer::eval::{alignment_diagnostics, evaluate_judge, evaluate_winrate, Diagnostics, EvalTable, Opponent};
use crate::trainer::{
    initial_params, metrics_csv, snapshot_evaluator, train_rlmt, train_rlvr, Checkpoint, MetricsRow, Progress,
    RunLimits, Stage, StageState, TrainContext, METRICS_HEADER,
};
use crate::world::WorldSpec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_ASSERT: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "endoloop",
    version,
    about = "Evaluator-then-reprompter RL loop on a synthetic world"
)]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
    /// JSON config; the desk profile when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Run directory name; defaults to `<unix-time>-<config-hash8>`.
    #[arg(long, global = true, value_name = "TEXT")]
    pub run_id: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    pub ckpt_in: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub ckpt_out: Option<PathBuf>,
    /// Gate on an output metric: `min_<name>=v` or `max_<name>=v`.
    #[arg(long = "assert", global = true, value_name = "K=V", value_parser = parse_assertion)]
    pub asserts: Vec<Assertion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Rlvr,
    Rlmt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OpponentArg {
    Naive,
    Base,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Build and save the synthetic world.
    GenWorld,
    /// Generate the catalog, training set, curricula and test set.
    GenData,
    /// Train one stage, chaining through checkpoints.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        skip_phase1: bool,
    },
    /// Evaluator accuracy on the oracle-labeled test pairs.
    EvalJudge,
    /// Oracle-scored win rate of the reprompter against an opponent.
    EvalWinrate {
        #[arg(long, value_enum)]
        opponent: OpponentArg,
    },
    /// Infeasible-token mass, emission rate and answer length.
    Diagnostics,
    /// Finite-difference check of the surrogate gradient.
    Gradcheck,
    /// Summarize the run directory as text and JSON.
    Report,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub key: String,
    pub bound: Bound,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Min,
    Max,
}

fn parse_assertion(s: &str) -> std::result::Result<Assertion, String> {
    let (key, value) = s.split_once('=').ok_or_else(|| format!("expected k=v, got `{s}`"))?;
    let value: f64 = value.trim().parse().map_err(|_| format!("`{value}` is not a number"))?;
    let (bound, metric) = if let Some(m) = key.strip_prefix("min_") {
        (Bound::Min, m)
    } else if let Some(m) = key.strip_prefix("max_") {
        (Bound::Max, m)
    } else {
        return Err(format!("assertion key `{key}` must start with min_ or max_"));
    };
    Ok(Assertion {
        key: key.to_string(),
        bound,
        metric: metric.to_string(),
        value,
    })
}

impl Assertion {
    fn holds(&self, x: f64) -> bool {
        match self.bound {
            Bound::Min => x >= self.value,
            Bound::Max => x <= self.value,
        }
    }
}

/// Stamp carried by every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub world_hash: String,
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Assertion(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Parses `args` (program name first) and runs the verb; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
        Err(Failure::Assertion(failed)) => {
            for f in failed {
                eprintln!("assertion failed: {f}");
            }
            EXIT_ASSERT
        }
    }
}

struct Run {
    config: RunConfig,
    dir: PathBuf,
}

impl Run {
    fn open(cli: &Cli) -> Outcome<Run> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io { path, source } => {
                    Failure::Usage(format!("cannot read config {}: {source}", path.display()))
                }
                other => other.into(),
            })?,
            None => RunConfig::desk(),
        };
        if let Some(s) = cli.seed {
            config.seed = s;
        }
        config.validate()?;
        let name = match &cli.run_id {
            Some(id) if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." => {
                return Err(Failure::Usage(format!("invalid run id `{id}`")));
            }
            Some(id) => id.clone(),
            None => {
                let secs = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                format!("{secs}-{}", &config.hash()[..8])
            }
        };
        let dir = cli.out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let run = Run { config, dir };
        write_once(&run.path("config.json"), &(run.config.to_json_pretty() + "\n"))?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// The saved world when present (checked against the config), else a fresh build.
    fn world(&self) -> Outcome<WorldSpec> {
        let built = WorldSpec::build(&self.config)?;
        let path = self.path("world.json");
        if path.exists() {
            let saved = WorldSpec::load(&path)?;
            if saved.hash() != built.hash() {
                return Err(Failure::Usage(format!(
                    "{} was built from a different config",
                    path.display()
                )));
            }
            return Ok(saved);
        }
        Ok(built)
    }

    /// The saved datasets when present (re-validated), else regenerated.
    fn data(&self, world: &WorldSpec) -> Outcome<Datasets> {
        let dir = self.path("data");
        if dir.join("manifest.json").exists() {
            return Ok(Datasets::load(&dir, world)?);
        }
        Ok(Datasets::generate(
            world,
            self.config.samples_per_category,
            self.config.test_prompts_per_instruction,
        )?)
    }

    fn provenance(&self, world: &WorldSpec) -> Provenance {
        Provenance {
            version: VERSION.to_string(),
            seed: self.config.seed,
            config_hash: self.config.hash(),
            world_hash: world.hash(),
        }
    }

    fn stamp(&self, world: &WorldSpec) -> Outcome<Provenance> {
        let p = self.provenance(world);
        write_once(&self.path("provenance.json"), &pretty(&p)?)?;
        Ok(p)
    }

    fn checkpoint_in(&self, cli: &Cli, default: &str, world: &WorldSpec) -> Outcome<Checkpoint> {
        let path = cli.ckpt_in.clone().unwrap_or_else(|| self.path(default));
        Ok(Checkpoint::load(&path, &self.config, world)?)
    }
}

fn pretty<T: Serialize>(x: &T) -> Outcome<String> {
    Ok(serde_json::to_string_pretty(x).map_err(Error::from)? + "\n")
}

fn write(path: &Path, text: &str) -> Outcome<()> {
    Ok(std::fs::write(path, text).map_err(|e| Error::io(path, e))?)
}

/// Writes `text` unless the file already holds something else.
fn write_once(path: &Path, text: &str) -> Outcome<()> {
    if path.exists() {
        let old = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if old != text {
            return Err(Failure::Usage(format!(
                "{} already exists with different contents; use another --run-id",
                path.display()
            )));
        }
        return Ok(());
    }
    write(path, text)
}

fn check_assertions(asserts: &[Assertion], metrics: &BTreeMap<String, f64>) -> Outcome<()> {
    let mut failed = Vec::new();
    for a in asserts {
        let Some(&x) = metrics.get(&a.metric) else {
            let known: Vec<&str> = metrics.keys().map(String::as_str).collect();
            return Err(Failure::Usage(format!(
                "unknown assertion metric `{}`; available: {}",
                a.metric,
                known.join(", ")
            )));
        };
        if !a.holds(x) {
            failed.push(format!("{} = {x} violates {}={}", a.metric, a.key, a.value));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assertion(failed))
    }
}

fn table_metrics(prefix: &str, t: &EvalTable, into: &mut BTreeMap<String, f64>) {
    for (name, cell) in t.cells() {
        if let Some(v) = cell.value {
            into.insert(format!("{prefix}{name}"), v);
        }
    }
}

fn print_table(label: &str, t: &EvalTable) {
    let cells: Vec<String> = t
        .cells()
        .iter()
        .map(|(n, c)| format!("{n}={}", c.value.map_or("-".to_string(), |v| format!("{v:.3}"))))
        .collect();
    println!("{label}: {}", cells.join(" "));
}

fn execute(cli: &Cli) -> Outcome<()> {
    let evaluation = matches!(
        cli.verb,
        Verb::EvalJudge | Verb::EvalWinrate { .. } | Verb::Diagnostics | Verb::Gradcheck
    );
    if !cli.asserts.is_empty() && !evaluation {
        return Err(Failure::Usage("--assert applies only to evaluation verbs".into()));
    }
    let run = Run::open(cli)?;
    match &cli.verb {
        Verb::GenWorld => gen_world(&run),
        Verb::GenData => gen_data(&run),
        Verb::Train { stage, skip_phase1 } => train(cli, &run, *stage, *skip_phase1),
        Verb::EvalJudge => eval_judge(cli, &run),
        Verb::EvalWinrate { opponent } => eval_winrate(cli, &run, *opponent),
        Verb::Diagnostics => diagnostics(cli, &run),
        Verb::Gradcheck => gradcheck(cli, &run),
        Verb::Report => report(&run),
    }
}

fn gen_world(run: &Run) -> Outcome<()> {
    let world = run.world()?;
    write_once(&run.path("world.json"), &world.to_json())?;
    run.stamp(&world)?;
    println!("world {} written to {}", world.hash(), run.dir.display());
    Ok(())
}

fn gen_data(run: &Run) -> Outcome<()> {
    let world = run.world()?;
    let data = Datasets::generate(
        &world,
        run.config.samples_per_category,
        run.config.test_prompts_per_instruction,
    )?;
    data.save(&run.path("data"), &world)?;
    run.stamp(&world)?;
    let m = data.manifest(&world);
    println!(
        "{} instructions, {} training samples, {} test cases, {} test pairs",
        m.instructions, m.train_samples, m.test_cases, m.test_quadruplets
    );
    Ok(())
}

fn stage_rows(state: &StageState, stage: &str) -> Vec<MetricsRow> {
    state.metrics.iter().filter(|r| r.stage == stage).cloned().collect()
}

fn train(cli: &Cli, run: &Run, stage: StageArg, skip_phase1: bool) -> Outcome<()> {
    let world = run.world()?;
    let data = run.data(&world)?;
    let ctx = TrainContext {
        config: &run.config,
        world: &world,
        data: &data,
    };
    let (state, name) = match stage {
        StageArg::Rlvr => {
            let mut state = match &cli.ckpt_in {
                Some(p) => {
                    let state = Checkpoint::load(p, &run.config, &world)?.state;
                    if state.stage == Stage::Rlmt {
                        return Err(Failure::Usage("checkpoint is already past the evaluator stage".into()));
                    }
                    if state.skip_phase1 != skip_phase1 {
                        return Err(Failure::Usage("--skip-phase1 does not match the checkpoint".into()));
                    }
                    state
                }
                None => StageState::initial(&run.config, &world, skip_phase1),
            };
            let done = train_rlvr(&ctx, &mut state, RunLimits::default())?;
            debug_assert_eq!(done, Progress::Complete);
            (state, "rlvr")
        }
        StageArg::Rlmt => {
            if skip_phase1 {
                return Err(Failure::Usage("--skip-phase1 applies to --stage rlvr".into()));
            }
            let mut state = run.checkpoint_in(cli, "ckpt-rlvr.json", &world)?.state;
            if state.stage != Stage::Rlmt {
                if !state.stage1_complete(&run.config) {
                    return Err(Failure::Usage("checkpoint has not finished the evaluator stage".into()));
                }
                snapshot_evaluator(&run.config, &mut state)?;
            }
            train_rlmt(&ctx, &mut state, RunLimits::default())?;
            (state, "rlmt")
        }
    };
    let ckpt = cli
        .ckpt_out
        .clone()
        .unwrap_or_else(|| run.path(&format!("ckpt-{name}.json")));
    Checkpoint::new(&run.config, &world, &state).save(&ckpt)?;
    write(
        &run.path(&format!("metrics-{name}.csv")),
        &metrics_csv(&stage_rows(&state, name)),
    )?;
    run.stamp(&world)?;
    let last = state.metrics.last().cloned().unwrap_or_default();
    println!(
        "{name}: {} steps, checkpoint {}, last eval_total={} win_total={}",
        state.step,
        ckpt.display(),
        last.eval_total.map_or("-".into(), |v| format!("{v:.3}")),
        last.win_total.map_or("-".into(), |v| format!("{v:.3}")),
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub provenance: Provenance,
    pub initial: EvalTable,
    pub trained: EvalTable,
}

fn eval_judge(cli: &Cli, run: &Run) -> Outcome<()> {
    let world = run.world()?;
    let data = run.data(&world)?;
    let state = run.checkpoint_in(cli, "ckpt-rlvr.json", &world)?.state;
    let judge = state.evaluator.as_ref().unwrap_or(&state.params);
    let dec = Decoding::from_config(&run.config);
    let initial = evaluate_judge(
        &initial_params(&run.config, &world),
        &world,
        &data.catalog,
        &data.test_quadruplets,
        dec,
    )?;
    let trained = evaluate_judge(judge, &world, &data.catalog, &data.test_quadruplets, dec)?;
    let out = TableReport {
        provenance: run.stamp(&world)?,
        initial,
        trained,
    };
    write(&run.path("eval-judge.json"), &pretty(&out)?)?;
    print_table("judge untrained", &initial);
    print_table("judge trained", &trained);
    let mut m = BTreeMap::new();
    table_metrics("init_", &initial, &mut m);
    table_metrics("", &trained, &mut m);
    check_assertions(&cli.asserts, &m)
}

fn eval_winrate(cli: &Cli, run: &Run, opponent: OpponentArg) -> Outcome<()> {
    let world = run.world()?;
    let data = run.data(&world)?;
    let state = run.checkpoint_in(cli, "ckpt-rlmt.json", &world)?.state;
    let dec = Decoding::from_config(&run.config);
    let base = initial_params(&run.config, &world);
    let (opp, name) = match opponent {
        OpponentArg::Naive => (Opponent::Naive, "naive"),
        OpponentArg::Base => (Opponent::Policy(&base), "base"),
    };
    let initial = evaluate_winrate(&base, &world, &data.catalog, &data.test_cases, dec, opp)?;
    let opp = match opponent {
        OpponentArg::Naive => Opponent::Naive,
        OpponentArg::Base => Opponent::Policy(&base),
    };
    let trained = evaluate_winrate(&state.params, &world, &data.catalog, &data.test_cases, dec, opp)?;
    let out = TableReport {
        provenance: run.stamp(&world)?,
        initial,
        trained,
    };
    write(&run.path(&format!("eval-winrate-{name}.json")), &pretty(&out)?)?;
    print_table(&format!("untrained vs {name}"), &initial);
    print_table(&format!("trained vs {name}"), &trained);
    let mut m = BTreeMap::new();
    table_metrics("init_", &initial, &mut m);
    table_metrics("", &trained, &mut m);
    check_assertions(&cli.asserts, &m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub provenance: Provenance,
    pub samples_per_context: usize,
    pub initial: Diagnostics,
    pub trained: Diagnostics,
    /// trained / initial infeasible mass
    pub mass_ratio: f64,
}

fn diagnostics_metrics(prefix: &str, d: &Diagnostics, into: &mut BTreeMap<String, f64>) {
    into.insert(format!("{prefix}infeasible_mass"), d.infeasible_mass);
    into.insert(format!("{prefix}mean_answer_len"), d.mean_answer_len);
    if let Some(e) = d.emission_rate {
        into.insert(format!("{prefix}emission_rate"), e);
    }
}

fn diagnostics(cli: &Cli, run: &Run) -> Outcome<()> {
    let world = run.world()?;
    let data = run.data(&world)?;
    let state = run.checkpoint_in(cli, "ckpt-rlmt.json", &world)?.state;
    let dec = Decoding::from_config(&run.config);
    let k = run.config.diagnostic_samples;
    let base = initial_params(&run.config, &world);
    let mut s0 = seeded_stream(run.config.seed, "diagnostics/initial");
    let initial = alignment_diagnostics(&base, &world, &data.catalog, &data.test_cases, dec, Some((k, &mut s0)))?;
    let mut s1 = seeded_stream(run.config.seed, "diagnostics/trained");
    let trained = alignment_diagnostics(
        &state.params,
        &world,
        &data.catalog,
        &data.test_cases,
        dec,
        Some((k, &mut s1)),
    )?;
    let out = DiagnosticsReport {
        provenance: run.stamp(&world)?,
        samples_per_context: k,
        initial,
        trained,
        mass_ratio: trained.infeasible_mass / initial.infeasible_mass,
    };
    write(&run.path("diagnostics.json"), &pretty(&out)?)?;
    println!(
        "infeasible mass {:.4} -> {:.4} (ratio {:.3}); emission rate {:.3} -> {:.3}; answer length {:.2} -> {:.2}",
        initial.infeasible_mass,
        trained.infeasible_mass,
        out.mass_ratio,
        initial.emission_rate.unwrap_or(f64::NAN),
        trained.emission_rate.unwrap_or(f64::NAN),
        initial.mean_answer_len,
        trained.mean_answer_len,
    );
    let mut m = BTreeMap::new();
    diagnostics_metrics("init_", &initial, &mut m);
    diagnostics_metrics("", &trained, &mut m);
    m.insert("mass_ratio".into(), out.mass_ratio);
    check_assertions(&cli.asserts, &m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub provenance: Provenance,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub instances: Vec<FdReport>,
}

fn gradcheck(cli: &Cli, run: &Run) -> Outcome<()> {
    let world = run.world()?;
    let instances = InstanceSpec::defaults()
        .iter()
        .map(|s| fd_verify(s, GRADCHECK_TOLERANCE))
        .collect::<crate::Result<Vec<_>>>()?;
    let worst = instances
        .iter()
        .map(|r| r.max_rel_error.max(r.rel_l2_error))
        .fold(0.0f64, f64::max);
    for r in &instances {
        println!(
            "seed {} beta {} {:?}: max rel error {:.3e}, rel l2 {:.3e} over {} params",
            r.spec.seed, r.spec.kl_coeff, r.spec.mode, r.max_rel_error, r.rel_l2_error, r.n_params
        );
    }
    println!("max relative error {worst:.3e}");
    let out = GradcheckReport {
        provenance: run.stamp(&world)?,
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_error: worst,
        instances,
    };
    write(&run.path("gradcheck.json"), &pretty(&out)?)?;
    let mut asserts = cli.asserts.clone();
    if !asserts.iter().any(|a| a.metric == "rel_error") {
        asserts.push(Assertion {
            key: "max_rel_error".into(),
            bound: Bound::Max,
            metric: "rel_error".into(),
            value: GRADCHECK_TOLERANCE,
        });
    }
    check_assertions(&asserts, &BTreeMap::from([("rel_error".to_string(), worst)]))
}

/// Published reference rows; shown for comparison only.
const PUBLISHED_JUDGE: [(&str, [f64; 7]); 3] = [
    ("zero-shot", [0.41, 0.44, 0.40, 0.47, 0.38, 0.35, 0.40]),
    ("phase-1 only", [0.49, 0.48, 0.45, 0.50, 0.50, 0.65, 0.40]),
    ("full curriculum", [0.92, 0.96, 1.00, 0.93, 0.88, 0.85, 0.90]),
];
const PUBLISHED_VS_BASE: [f64; 7] = [0.85, 0.85, 0.78, 0.90, 0.85, 0.87, 0.84];
const PUBLISHED_LABEL: &str = "published, not reproduced";
const CELL_NAMES: [&str; 7] = [
    "total",
    "id_overall",
    "id_simple",
    "id_hard",
    "ood_overall",
    "ood_simple",
    "ood_hard",
];

/// Epoch-boundary rows of a metrics CSV: the ones carrying evaluation cells.
fn read_curve(path: &Path) -> Outcome<Vec<BTreeMap<String, String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Failure::Runtime(Error::Invariant(format!(
            "{}: unexpected header",
            path.display()
        ))));
    }
    let names: Vec<&str> = METRICS_HEADER.split(',').collect();
    let mut out = Vec::new();
    for line in lines {
        let row: BTreeMap<String, String> = names
            .iter()
            .zip(line.split(','))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let evaluated = ["eval_total", "win_total"]
            .iter()
            .any(|k| row.get(*k).is_some_and(|v| !v.is_empty()));
        if evaluated {
            out.push(row);
        }
    }
    Ok(out)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Outcome<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text).map_err(Error::from)?))
}

fn row_text(label: &str, values: impl IntoIterator<Item = Option<f64>>) -> String {
    let cells: String = values
        .into_iter()
        .map(|v| format!("{:>11}", v.map_or("-".to_string(), |x| format!("{x:.3}"))))
        .collect();
    format!("  {label:<44}{cells}")
}

fn table_values(t: &EvalTable) -> Vec<Option<f64>> {
    t.cells().iter().map(|(_, c)| c.value).collect()
}

fn report(run: &Run) -> Outcome<()> {
    let world = run.world()?;
    let prov = run.stamp(&world)?;
    let judge: Option<TableReport> = read_json(&run.path("eval-judge.json"))?;
    let naive: Option<TableReport> = read_json(&run.path("eval-winrate-naive.json"))?;
    let base: Option<TableReport> = read_json(&run.path("eval-winrate-base.json"))?;
    let diag: Option<DiagnosticsReport> = read_json(&run.path("diagnostics.json"))?;
    let mut curves = Vec::new();
    for stage in ["rlvr", "rlmt"] {
        let p = run.path(&format!("metrics-{stage}.csv"));
        if p.exists() {
            curves.push((stage, read_curve(&p)?));
        }
    }
    for (name, stamp) in [
        ("eval-judge.json", judge.as_ref().map(|t| &t.provenance)),
        ("eval-winrate-naive.json", naive.as_ref().map(|t| &t.provenance)),
        ("eval-winrate-base.json", base.as_ref().map(|t| &t.provenance)),
        ("diagnostics.json", diag.as_ref().map(|d| &d.provenance)),
    ] {
        if stamp.is_some_and(|s| *s != prov) {
            return Err(Failure::Usage(format!(
                "{name} was produced under a different config or world"
            )));
        }
    }

    let mut text = String::new();
    let mut line = |s: String| {
        text.push_str(&s);
        text.push('\n');
    };
    line(format!(
        "endoloop {}  seed {}  config {}  world {}",
        prov.version,
        prov.seed,
        &prov.config_hash[..12],
        &prov.world_hash[..12]
    ));
    line(String::new());
    let header: String = CELL_NAMES
        .iter()
        .map(|n| format!("{:>11}", n.replace("_overall", "").replace('_', "-")))
        .collect();
    line("Evaluator accuracy on oracle-labeled test pairs".into());
    line(format!("  {:<44}{header}", ""));
    if let Some(j) = &judge {
        line(row_text("untrained", table_values(&j.initial)));
        line(row_text("trained", table_values(&j.trained)));
    }
    for (label, vals) in PUBLISHED_JUDGE {
        line(row_text(&format!("{label} ({PUBLISHED_LABEL})"), vals.map(Some)));
    }
    line(String::new());
    line("Reprompter win rate, oracle-scored (tie = 0.5)".into());
    line(format!("  {:<44}{header}", ""));
    if let Some(t) = &naive {
        line(row_text("untrained vs naive concatenation", table_values(&t.initial)));
        line(row_text("trained vs naive concatenation", table_values(&t.trained)));
    }
    if let Some(t) = &base {
        line(row_text("trained vs untrained policy", table_values(&t.trained)));
    }
    line(row_text(
        &format!("vs base ({PUBLISHED_LABEL})"),
        PUBLISHED_VS_BASE.map(Some),
    ));
    if let Some(d) = &diag {
        line(String::new());
        line("Alignment diagnostics (untrained -> trained)".into());
        line(format!(
            "  infeasible mass      {:.4} -> {:.4}  (ratio {:.3})",
            d.initial.infeasible_mass, d.trained.infeasible_mass, d.mass_ratio
        ));
        line(format!(
            "  emission rate        {:.3} -> {:.3}",
            d.initial.emission_rate.unwrap_or(f64::NAN),
            d.trained.emission_rate.unwrap_or(f64::NAN)
        ));
        line(format!(
            "  mean answer length   {:.2} -> {:.2}",
            d.initial.mean_answer_len, d.trained.mean_answer_len
        ));
    }
    const CURVE_COLS: [&str; 10] = [
        "step",
        "phase",
        "epoch",
        "task_rate",
        "eval_total",
        "eval_id",
        "eval_ood",
        "win_total",
        "infeasible_mass",
        "answer_len",
    ];
    for (stage, rows) in &curves {
        line(String::new());
        line(format!("Training curve, {stage} (evaluation rows)"));
        line(format!("  {}", CURVE_COLS.map(|c| format!("{c:>16}")).concat()));
        for r in rows {
            let cells: String = CURVE_COLS
                .iter()
                .map(|c| {
                    let v = r.get(*c).map(String::as_str).unwrap_or("");
                    match v.parse::<f64>() {
                        Ok(x) if v.contains('.') || v.contains('e') => format!("{x:>16.4}"),
                        _ => format!("{:>16}", if v.is_empty() { "-" } else { v }),
                    }
                })
                .collect();
            line(format!("  {cells}"));
        }
    }
    let published = json!({
        "label": PUBLISHED_LABEL,
        "cells": CELL_NAMES,
        "judge": PUBLISHED_JUDGE.iter().map(|(k, v)| json!({"row": k, "values": v})).collect::<Vec<_>>(),
        "vs_base": PUBLISHED_VS_BASE,
    });
    let doc = json!({
        "provenance": prov,
        "judge": judge.map(|t| json!({"initial": t.initial, "trained": t.trained})),
        "winrate_naive": naive.map(|t| json!({"initial": t.initial, "trained": t.trained})),
        "winrate_base": base.map(|t| json!({"initial": t.initial, "trained": t.trained})),
        "diagnostics": diag.map(|d| json!({"initial": d.initial, "trained": d.trained, "mass_ratio": d.mass_ratio})),
        "curves": curves.iter().map(|(s, rows)| json!({"stage": s, "rows": rows})).collect::<Vec<_>>(),
        "published": published,
    });
    write(&run.path("report.txt"), &text)?;
    write(&run.path("report.json"), &pretty(&doc)?)?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assertion_keys_parse() {
        let a = parse_assertion("min_total=0.7").unwrap();
        assert_eq!((a.bound, a.metric.as_str(), a.value), (Bound::Min, "total", 0.7));
        let b = parse_assertion("max_mass_ratio=0.5").unwrap();
        assert_eq!((b.bound, b.metric.as_str()), (Bound::Max, "mass_ratio"));
        assert!(parse_assertion("total=0.7").is_err());
        assert!(parse_assertion("min_total").is_err());
        assert!(parse_assertion("min_total=abc").is_err());
    }

    #[test]
    fn assertions_gate_and_reject_unknown_metrics() {
        let m = BTreeMap::from([("total".to_string(), 0.75)]);
        let ok = [parse_assertion("min_total=0.7").unwrap()];
        assert!(check_assertions(&ok, &m).is_ok());
        let bad = [parse_assertion("min_total=0.8").unwrap()];
        assert!(matches!(check_assertions(&bad, &m), Err(Failure::Assertion(_))));
        let unknown = [parse_assertion("min_nope=0").unwrap()];
        assert!(matches!(check_assertions(&unknown, &m), Err(Failure::Usage(_))));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["endoloop", "--no-such-flag", "gen-world"]), EXIT_USAGE);
        assert_eq!(run(["endoloop", "train"]), EXIT_USAGE);
        assert_eq!(run(["endoloop", "eval-winrate", "--opponent", "nobody"]), EXIT_USAGE);
        assert_eq!(run(["endoloop", "--help"]), EXIT_OK);
    }

    #[test]
    fn assert_on_generation_verb_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(
            run(["endoloop", "gen-world", "--out", out, "--assert", "min_total=1"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn published_rows_cover_all_cells() {
        for (_, v) in PUBLISHED_JUDGE {
            assert_eq!(v.len(), CELL_NAMES.len());
        }
        assert_eq!(PUBLISHED_JUDGE[2].1[0], 0.92);
        assert_eq!(PUBLISHED_VS_BASE[0], 0.85);
    }
}

use std::path::Path;

use endoloop::dataset::Datasets;
use endoloop::trainer::{
    snapshot_evaluator, train_all, train_rlmt, train_rlvr, Checkpoint, Progress, RunLimits, StageState, TrainContext,
};
use endoloop::world::WorldSpec;
use endoloop::RunConfig;

fn tiny(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    c.epochs_rlvr_phase1 = 1;
    c.epochs_rlvr_phase2 = 1;
    c.epochs_rlmt = 2;
    c.samples_per_category = 4;
    c.test_prompts_per_instruction = 1;
    c
}

fn full_run(c: &RunConfig) -> String {
    let w = WorldSpec::build(c).unwrap();
    let d = Datasets::generate(&w, c.samples_per_category, c.test_prompts_per_instruction).unwrap();
    let ctx = TrainContext {
        config: c,
        world: &w,
        data: &d,
    };
    let state = train_all(&ctx, false).unwrap();
    serde_json::to_string(&Checkpoint::new(c, &w, &state)).unwrap()
}

#[test]
fn same_seed_same_bytes() {
    let c = tiny(3);
    assert_eq!(full_run(&c), full_run(&c));
}

#[test]
fn seed_changes_world_data_and_weights() {
    let (a, b) = (tiny(1), tiny(2));
    let (wa, wb) = (WorldSpec::build(&a).unwrap(), WorldSpec::build(&b).unwrap());
    assert_ne!(wa.hash(), wb.hash());
    assert_ne!(full_run(&a), full_run(&b));
}

fn pause_and_reload(path: &Path, c: &RunConfig, w: &WorldSpec, s: &StageState) -> StageState {
    Checkpoint::new(c, w, s).save(path).unwrap();
    Checkpoint::load(path, c, w).unwrap().state
}

#[test]
fn pausing_in_every_phase_does_not_change_the_result() {
    let c = tiny(4);
    let w = WorldSpec::build(&c).unwrap();
    let d = Datasets::generate(&w, c.samples_per_category, c.test_prompts_per_instruction).unwrap();
    let ctx = TrainContext {
        config: &c,
        world: &w,
        data: &d,
    };
    let straight = serde_json::to_string(&Checkpoint::new(&c, &w, &train_all(&ctx, false).unwrap())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut s = StageState::initial(&c, &w, false);
    let mut stop = 0u64;
    loop {
        stop += 5;
        let limits = RunLimits {
            stop_at_step: Some(stop),
        };
        if train_rlvr(&ctx, &mut s, limits).unwrap() == Progress::Complete {
            break;
        }
        s = pause_and_reload(&path, &c, &w, &s);
    }
    s = pause_and_reload(&path, &c, &w, &s);
    snapshot_evaluator(&c, &mut s).unwrap();
    loop {
        stop += 5;
        let limits = RunLimits {
            stop_at_step: Some(stop),
        };
        if train_rlmt(&ctx, &mut s, limits).unwrap() == Progress::Complete {
            break;
        }
        s = pause_and_reload(&path, &c, &w, &s);
    }
    assert_eq!(serde_json::to_string(&Checkpoint::new(&c, &w, &s)).unwrap(), straight);
}

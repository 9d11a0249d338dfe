use endoloop::dataset::Datasets;
use endoloop::world::WorldSpec;
use endoloop::{Error, RunConfig};

fn small() -> (WorldSpec, Datasets) {
    let mut c = RunConfig::desk();
    c.samples_per_category = 6;
    c.test_prompts_per_instruction = 1;
    let world = WorldSpec::build(&c).unwrap();
    let data = Datasets::generate(&world, c.samples_per_category, c.test_prompts_per_instruction).unwrap();
    (world, data)
}

fn replace_line(path: &std::path::Path, line: usize, f: impl Fn(&str) -> String) {
    let text = std::fs::read_to_string(path).unwrap();
    let out: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i + 1 == line { f(l) } else { l.to_owned() })
        .collect();
    std::fs::write(path, out.join("\n") + "\n").unwrap();
}

#[test]
fn save_load_round_trip_is_lossless() {
    let (world, data) = small();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path(), &world).unwrap();
    let back = Datasets::load(dir.path(), &world).unwrap();
    assert_eq!(back, data);
    let again = tempfile::tempdir().unwrap();
    back.save(again.path(), &world).unwrap();
    for f in [
        "catalog.jsonl",
        "train.jsonl",
        "curriculum1.jsonl",
        "curriculum2.jsonl",
        "test.jsonl",
        "manifest.json",
    ] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn malformed_json_reports_its_line() {
    let (world, data) = small();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path(), &world).unwrap();
    let path = dir.path().join("train.jsonl");
    replace_line(&path, 3, |l| l[..l.len() / 2].to_owned());
    match Datasets::load(dir.path(), &world) {
        Err(Error::Record { path: p, line, .. }) => {
            assert_eq!(line, 3);
            assert!(p.ends_with("train.jsonl"));
        }
        other => panic!("expected a record error, got {other:?}"),
    }
}

#[test]
fn well_formed_but_invalid_record_reports_its_line() {
    let (world, data) = small();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path(), &world).unwrap();
    let path = dir.path().join("train.jsonl");
    replace_line(&path, 2, |l| {
        let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
        v["instruction"] = serde_json::json!(100_000);
        v.to_string()
    });
    let err = Datasets::load(dir.path(), &world).unwrap_err();
    assert!(matches!(err, Error::Record { line: 2, .. }), "{err}");
}

#[test]
fn data_from_another_world_is_rejected() {
    let (world, data) = small();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path(), &world).unwrap();
    let mut c = RunConfig::desk();
    c.seed = 1;
    let other = WorldSpec::build(&c).unwrap();
    assert!(Datasets::load(dir.path(), &other).is_err());
}

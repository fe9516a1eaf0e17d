use super::*;

const FULL: &str = include_str!("../../../../configs/full.toml");
const TINY: &str = include_str!("../../../../configs/tiny.toml");

#[test]
fn shipped_files_match_the_built_in_profiles() {
    let full = ExperimentConfig::parse(FULL, Path::new("full.toml")).unwrap();
    let tiny = ExperimentConfig::parse(TINY, Path::new("tiny.toml")).unwrap();
    assert_eq!(full, ExperimentConfig::profile(Profile::Full));
    assert_eq!(tiny, ExperimentConfig::profile(Profile::Tiny));
    let s = full.dataset.splits;
    assert_eq!((s.train, s.val, s.test, s.clean_test), (20_000, 4_000, 1_000, 1_000));
    let s = tiny.dataset.splits;
    assert_eq!((s.train, s.val, s.test, s.clean_test), (500, 100, 100, 100));
}

#[test]
fn every_reference_model_is_defined() {
    let cfg = ExperimentConfig::profile(Profile::Full);
    let names: Vec<&str> = cfg.models.keys().map(String::as_str).collect();
    let mut expected = MODEL_NAMES.to_vec();
    expected.sort();
    assert_eq!(names, expected);
    assert_eq!(cfg.models["rfcd_ed2"], ModelSpec::named("rfcd_ed2").unwrap());

    let mut cfg = cfg;
    cfg.models.remove("tm_st");
    let err = ExperimentConfig::parse(&cfg.to_toml(), Path::new("x.toml")).unwrap_err();
    assert!(err.to_string().contains("tm_st"), "{err}");
}

#[test]
fn unknown_keys_are_rejected() {
    let text = format!("{TINY}\n[extra]\nx = 1\n");
    assert!(matches!(
        ExperimentConfig::parse(&text, Path::new("t.toml")),
        Err(ConfigError::Parse { .. })
    ));
    let text = TINY.replace("[train]\n", "[train]\nmomentum = 0.9\n");
    assert!(ExperimentConfig::parse(&text, Path::new("t.toml")).is_err());
}

#[test]
fn hash_ignores_layout_but_not_values() {
    let cfg = ExperimentConfig::profile(Profile::Tiny);
    let reparsed = ExperimentConfig::parse(&cfg.to_toml(), Path::new("t.toml")).unwrap();
    assert_eq!(reparsed.hash(), cfg.hash());
    let mut other = cfg.clone();
    other.train.seed = 1;
    assert_ne!(other.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
}

#[test]
fn grid_and_dataset_sections_resolve() {
    let cfg = ExperimentConfig::profile(Profile::Tiny);
    let grid = cfg.grid_spec().unwrap();
    assert_eq!(grid.base, cfg.models["fcd_s"]);
    assert_eq!(grid.cells(1e-3).len(), 2);
    let spec = cfg.dataset_spec("bundled");
    assert_eq!(spec.splits, cfg.dataset.splits);
    assert!(cfg.model("nope").is_err());
    assert!("huge".parse::<Profile>().is_err());
    assert_eq!("tiny".parse::<Profile>().unwrap(), Profile::Tiny);
}

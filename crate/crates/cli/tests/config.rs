use std::path::Path;

use ckg_cli::config::{BackendKind, RunConfig};
use ckg_cli::error::CliError;

const BASE: &str = "interactions = \"ui.tsv\"\nia = \"ia.tsv\"\n";

fn parse(extra: &str) -> Result<RunConfig, CliError> {
    RunConfig::parse(&format!("{BASE}{extra}"), Path::new("/data"))
}

#[test]
fn defaults_and_overrides() {
    let cfg =
        parse("dim = 32\nmu = -0.5\nbackend = \"replay\"\ntranscript = \"t.jsonl\"\n").unwrap();
    assert_eq!(cfg.train.dim, 32);
    assert_eq!(cfg.train.layers, 3);
    assert_eq!(cfg.run.mu, -0.5);
    assert_eq!(cfg.run.backend, BackendKind::Replay);
    assert_eq!(cfg.interactions_path(), Path::new("/data/ui.tsv"));
    assert_eq!(cfg.ii_path(), None);
    assert_eq!(cfg.split_seed(), cfg.train.seed);
}

#[test]
fn rejects_unknown_and_nested_keys() {
    assert!(
        matches!(parse("learning_rat = 0.1\n"), Err(CliError::Config(m)) if m.contains("learning_rat"))
    );
    assert!(matches!(
        parse("[train]\ndim = 4\n"),
        Err(CliError::Config(_))
    ));
}

#[test]
fn validation_errors() {
    for bad in [
        "dim = 0\n",
        "split = [0.5, 0.1, 0.1]\n",
        "backend = \"replay\"\n",
        "mu_add = 2.0\n",
        "dim = \"x\"\n",
    ] {
        assert!(matches!(parse(bad), Err(CliError::Config(_))), "{bad}");
    }
    assert!(matches!(
        RunConfig::parse("dim = 4\n", Path::new(".")),
        Err(CliError::Config(_))
    ));
}

#[test]
fn hash_tracks_content() {
    let a = parse("").unwrap();
    assert_eq!(a.hash(), parse("").unwrap().hash());
    assert_ne!(a.hash(), parse("tau = 0.3\n").unwrap().hash());
    assert_eq!(a.hash().len(), 16);
}

#[test]
fn toml_round_trip() {
    let a = parse("epochs = 7\nllm_budget = 10\n").unwrap();
    let b = RunConfig::parse(&a.to_toml(), Path::new("/data")).unwrap();
    assert_eq!(a, b);
}

use std::path::PathBuf;

use mfg_fluct::experiments::{run_clt, run_experiment, CltSystem, ExperimentConfig, ExperimentKind};
use mfg_fluct::model_lq::ModelParams;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_validate() {
    let mut kinds = Vec::new();
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "baseline_params.json" {
            let p: ModelParams = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            assert_eq!(p, ModelParams::baseline());
            continue;
        }
        let cfg = ExperimentConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.params, ModelParams::baseline());
        kinds.push(cfg.experiment);
    }
    assert_eq!(kinds.len(), 7);
    assert!(kinds.contains(&ExperimentKind::Clt));
}

fn small_clt(system: CltSystem) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_path(&configs_dir().join("clt.json")).unwrap();
    cfg.n_ladder = vec![400];
    cfg.replications = 400;
    cfg.dt_steps = 100;
    cfg.base_seed = 3;
    cfg.system = Some(system);
    cfg
}

#[test]
fn clt_verdict_agrees_between_nash_and_mean_field_systems() {
    for system in [CltSystem::Nash, CltSystem::Mkv] {
        let (r, samples) = run_clt(&small_clt(system)).unwrap();
        assert_eq!(samples.len(), 400);
        assert!(r.identities.max_abs_constant <= 1e-12);
        // Loose bounds: at M = 400 the covariance estimate alone is ~10% noisy.
        assert!(r.comparison.max_cov_rel_err() < 0.35, "{system:?}: {:?}", r.comparison);
        assert!(r.comparison.ks_passes(0.01) >= 5, "{system:?}");
        assert!(r.control_rejected, "{system:?}");
    }
}

#[test]
fn clt_outputs_include_samples_table() {
    let out = run_experiment(&small_clt(CltSystem::Nash)).unwrap();
    let samples = out.samples_csv.unwrap();
    assert!(samples.starts_with("schema,replication,time,testfn_label,value\n"));
    // 400 replications × 2 times × 4 test functions.
    assert_eq!(samples.lines().count(), 1 + 400 * 2 * 4);
    assert_eq!(out.csv.lines().count(), 1 + 2 * 6);
}

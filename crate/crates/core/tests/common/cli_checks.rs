//! End-to-end command checks on a throwaway output directory.

use std::fs;
use std::path::Path;

use vpfl::cli::{self, CliError};
use vpfl::config::ExperimentConfig;

pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("hard_train_identities", "4"),
        ("hard_test_identities", "2"),
        ("hard_variations", "3"),
        ("easy_train_identities", "4"),
        ("easy_test_identities", "2"),
        ("easy_variations", "3"),
        ("clients_per_dataset", "2"),
        ("base_width", "4"),
        ("max_width", "4"),
        ("style_dim", "4"),
        ("disc_width", "2"),
        ("embed_width", "2"),
        ("rounds", "2"),
        ("local_steps", "2"),
        ("batch_size", "2"),
        ("eval_every", "1"),
        ("prior_steps", "3"),
        ("prior_batch_size", "2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn outputs(cfg: &ExperimentConfig) -> Vec<(String, Vec<u8>)> {
    let mut all = files(&cli::data_dir(cfg));
    all.extend(files(&cli::prior_dir(cfg)));
    // timing.csv holds wall-clock times only.
    all.extend(files(&cli::run_dir(cfg)).into_iter().filter(|(n, _)| n != "timing.csv"));
    all.iter_mut().for_each(|(n, _)| n.insert_str(0, "/"));
    all
}

fn pipeline(cfg: &ExperimentConfig) {
    cli::cmd_gen_data(cfg).unwrap();
    cli::cmd_pretrain_prior(cfg).unwrap();
    cli::cmd_train(cfg).unwrap();
}

/// Same config and seed, run twice from scratch, gives byte-identical outputs.
pub fn repeated_runs_are_byte_identical() {
    for strategy in ["vpfl", "fused"] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&dir.path().join("out"));
        cfg.set("strategy", strategy).unwrap();
        pipeline(&cfg);
        let oa = outputs(&cfg);
        fs::remove_dir_all(&cfg.out_dir).unwrap();
        pipeline(&cfg);
        let ob = outputs(&cfg);
        assert!(oa.iter().any(|(n, _)| n == "/history.csv"));
        assert!(oa.iter().any(|(n, _)| n == "/metrics.json"));
        if strategy == "vpfl" {
            assert!(oa.iter().any(|(n, _)| n == "/checkpoint.vpfl"));
        }
        assert_eq!(oa.len(), ob.len());
        for ((na, da), (nb, db)) in oa.iter().zip(&ob) {
            assert_eq!(na, nb);
            assert!(da == db, "{strategy}: {na} differs between identical runs");
        }
    }
}

/// A different seed changes the data and the trained model.
pub fn seed_changes_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = tiny_config(a.path());
    let mut cb = tiny_config(b.path());
    cb.set("seed", "2").unwrap();
    cli::cmd_gen_data(&ca).unwrap();
    cli::cmd_gen_data(&cb).unwrap();
    assert_ne!(files(&cli::data_dir(&ca)), files(&cli::data_dir(&cb)));
}

/// Generated files parse back and agree with the summaries.
pub fn outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let g = cli::cmd_gen_data(&cfg).unwrap();
    assert_eq!(g.clients.len(), 4);
    assert_eq!(g.tests.len(), 2);
    let (shards, tests) = cli::load_data(&cli::data_dir(&cfg)).unwrap();
    assert_eq!(shards.iter().map(|s| s.len()).sum::<usize>(), 2 * 4 * 3);
    assert_eq!(tests.iter().map(|t| t.samples.len()).sum::<usize>(), 2 * 2 * 3);

    let p = cli::cmd_pretrain_prior(&cfg).unwrap();
    let sheet = cli::ppm::Rgb8::decode(&fs::read(&p.samples).unwrap()).unwrap();
    assert!(sheet.width > 64 && sheet.height == sheet.width);

    cfg.set("strategy", "local_only").unwrap();
    cfg.set("client", "1").unwrap();
    let (run, m) = cli::cmd_train(&cfg).unwrap();
    assert!(run.ends_with("local_only_c2"));
    assert_eq!(m, cli::load_run_metrics(&run).unwrap());
    let hist = fs::read_to_string(run.join(cli::HISTORY_FILE)).unwrap();
    assert_eq!(hist.lines().next().unwrap(), vpfl::federation::HISTORY_HEADER);
    let evals = cli::cmd_eval(&cfg, &run.join(cli::CHECKPOINT_FILE)).unwrap();
    assert_eq!(evals, m.splits);
    for s in &m.splits {
        assert!(s.metrics.vr_far1 >= s.metrics.vr_far01);
    }

    let csv = dir.path().join("report.csv");
    let (table, rows) = cli::cmd_report(&[run.clone()], Some(&csv)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(table.lines().count(), 2 + table.contains("note:") as usize);
    assert_eq!(cli::parse_report_csv(&fs::read_to_string(&csv).unwrap()).unwrap(), rows);

    let bad = fs::read_to_string(run.join(cli::METRICS_FILE)).unwrap().replacen("\"schema\": 1", "\"schema\": 7", 1);
    fs::write(run.join(cli::METRICS_FILE), bad).unwrap();
    assert!(matches!(cli::cmd_report(&[run], None), Err(CliError::Config(_))));

    cfg.set("client", "9").unwrap();
    let e = cli::cmd_train(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

/// Training without data or prior names the step that was skipped.
pub fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let e = cli::cmd_train(&cfg).unwrap_err();
    assert!(e.to_string().contains("gen-data"), "{e}");
    cli::cmd_gen_data(&cfg).unwrap();
    let e = cli::cmd_train(&cfg).unwrap_err();
    assert!(e.to_string().contains("pretrain-prior"), "{e}");
}

/// Default settings give eight clients; a zero-step prior is legal.
pub fn defaults_and_untrained_prior() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir.path().join("full");
    let g = cli::cmd_gen_data(&cfg).unwrap();
    assert_eq!(g.clients.iter().map(|c| c.0).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
    let manifest = fs::read_to_string(&g.manifest).unwrap();
    assert_eq!((0..8).filter(|k| manifest.contains(&format!("client{k}.vpfd"))).count(), 8);

    let mut cfg = tiny_config(&dir.path().join("tiny"));
    cfg.set("steps", "0").unwrap();
    cfg.set("rounds", "1").unwrap();
    cli::cmd_gen_data(&cfg).unwrap();
    assert_eq!(cli::cmd_pretrain_prior(&cfg).unwrap().steps, 0);
    assert!(cli::load_prior(&cfg).unwrap().is_some());
    cli::cmd_train(&cfg).unwrap();
}

pub const ALL: &[(&str, fn())] = &[
    ("repeated_runs_are_byte_identical", repeated_runs_are_byte_identical),
    ("seed_changes_outputs", seed_changes_outputs),
    ("outputs_are_consistent", outputs_are_consistent),
    ("missing_inputs_are_reported", missing_inputs_are_reported),
    ("defaults_and_untrained_prior", defaults_and_untrained_prior),
];

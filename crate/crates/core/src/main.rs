use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use vpfl::cli::{self, CliError};
use vpfl::config::{ExperimentConfig, KEYS};

fn command() -> Command {
    let mut root = Command::new("vpfl")
        .about("Federated thermal-to-visible face hallucination on procedural faces")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value config file applied before command-line overrides"),
        )
        .arg(
            Arg::new("json_summary")
                .long("json-summary")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("print a machine-readable summary on stdout"),
        );
    for (section, key, help) in KEYS {
        let long: &'static str = Box::leak(key.replace('_', "-").into_boxed_str());
        let mut arg = Arg::new(*key)
            .long(long)
            .global(true)
            .value_name("VALUE")
            .help(format!("[{section}] {help}"))
            .help_heading("Config overrides");
        if long != *key {
            arg = arg.alias(*key);
        }
        if *key == "prior_steps" {
            arg = arg.alias("steps");
        }
        root = root.arg(arg);
    }
    root.subcommand(Command::new("gen-data").about("render the corpus and write client shards"))
        .subcommand(Command::new("pretrain-prior").about("pretrain the visible-face decoder"))
        .subcommand(Command::new("train").about("train one strategy and write its run directory"))
        .subcommand(
            Command::new("eval").about("evaluate a checkpoint on the test splits").arg(
                Arg::new("checkpoint")
                    .long("checkpoint")
                    .required(true)
                    .value_name("FILE"),
            ),
        )
        .subcommand(
            Command::new("report")
                .about("comparison table over run directories")
                .arg(Arg::new("runs").num_args(1..).required(true).value_name("RUN_DIR"))
                .arg(Arg::new("output").long("output").value_name("CSV")),
        )
}

fn load_config(m: &ArgMatches) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        cfg.apply_text(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
    }
    cfg.apply_env()?;
    for (_, key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string(value).expect("serializable summary"));
    } else {
        print!("{}", human());
    }
}

fn run() -> Result<(), CliError> {
    let matches = command().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let json = sub.get_flag("json_summary");
    match name {
        "report" => {
            let runs: Vec<PathBuf> = sub.get_many::<String>("runs").unwrap().map(PathBuf::from).collect();
            let out = sub.get_one::<String>("output").map(PathBuf::from);
            let (table, rows) = cli::cmd_report(&runs, out.as_deref())?;
            let summary: Vec<_> = rows
                .iter()
                .map(|r| serde_json::json!({ "label": r.label, "strategy": r.strategy, "metrics": r.metrics }))
                .collect();
            emit(json, &summary, || table);
        }
        _ => {
            let cfg = load_config(sub)?;
            match name {
                "gen-data" => {
                    let s = cli::cmd_gen_data(&cfg)?;
                    emit(json, &s, || {
                        let mut t = format!("wrote {}\n", s.manifest);
                        for (id, n) in &s.clients {
                            t.push_str(&format!("  client {id}: {n} pairs\n"));
                        }
                        for (split, n) in &s.tests {
                            t.push_str(&format!("  test {split}: {n} pairs\n"));
                        }
                        t
                    });
                }
                "pretrain-prior" => {
                    let s = cli::cmd_pretrain_prior(&cfg)?;
                    emit(json, &s, || {
                        format!(
                            "prior trained for {} steps on {} images\n  {}\n  {}\n",
                            s.steps, s.images, s.checkpoint, s.samples
                        )
                    });
                }
                "train" => {
                    let (dir, m) = cli::cmd_train(&cfg)?;
                    emit(json, &m, || {
                        let rows = cli::report_rows(std::slice::from_ref(&m));
                        format!("{}\n{}", dir.display(), cli::format_table(&rows))
                    });
                }
                "eval" => {
                    let ckpt = PathBuf::from(sub.get_one::<String>("checkpoint").unwrap());
                    let splits = cli::cmd_eval(&cfg, &ckpt)?;
                    emit(json, &splits, || {
                        splits
                            .iter()
                            .map(|s| {
                                let m = &s.metrics;
                                format!(
                                    "{:<12} rank1 {:6.2}  vr@1% {:6.2}  deg {:6.2}  psnr {:6.2}  ssim {:.4}\n",
                                    s.split, m.rank1, m.vr_far1, m.deg, m.psnr, m.ssim
                                )
                            })
                            .collect()
                    });
                }
                _ => unreachable!("unknown subcommand {name}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

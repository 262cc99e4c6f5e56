//! `ktd`: synthetic data, the three transfer and distillation stages,
//! trajectory training, evaluation, sweeps and complexity reports.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands::Context;
use crate::error::CliError;

const SUBCOMMANDS: [(&str, &str); 8] = [
    ("synth", "Generate the synthetic triage, pre-training and longitudinal datasets"),
    ("pretrain", "Pre-train the multi-head AP network on the multi-label findings"),
    ("finetune", "Transfer AP weights and fine-tune the RF teacher"),
    ("distill", "Distil the RF teacher into the compact MS student"),
    ("traj", "Train and test trajectory classifiers on MS features"),
    ("eval", "Accuracy, AUROC and ROC points of a checkpoint on the test split"),
    ("sweep", "Distillation grid over alpha, T and student loss"),
    ("complexity", "Parameter and MAC counts of the configured networks"),
];

fn cli() -> Command {
    let mut cmd = Command::new("ktd")
        .about("Knowledge transfer and distillation toolkit")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .global(true)
                .help("TOML config file; flags override its keys"),
        )
        .arg(
            Arg::new("print-config")
                .long("print-config")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("Print the resolved config and exit"),
        );
    for (key, default) in config::leaf_keys() {
        let id: &'static str = Box::leak(key.into_boxed_str());
        cmd = cmd.arg(
            Arg::new(id)
                .long(id)
                .value_name("VALUE")
                .global(true)
                .help_heading("Config keys")
                .help(format!("default: {default}")),
        );
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    config::leaf_keys()
        .into_iter()
        .filter_map(|(key, _)| m.get_one::<String>(&key).map(|v| (key, v.clone())))
        .collect()
}

fn run(m: &ArgMatches) -> Result<(), CliError> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let cfg = config::resolve(file.as_deref(), &overrides(sub))?;
    if sub.get_flag("print-config") {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let command = SUBCOMMANDS.iter().find(|(n, _)| *n == name).expect("known subcommand").0;
    let ctx = Context::new(cfg, command)?;
    ctx.run.log(&format!("run directory {}", ctx.run.path.display()))?;
    match command {
        "synth" => commands::synth(&ctx),
        "pretrain" => commands::pretrain(&ctx),
        "finetune" => commands::finetune(&ctx),
        "distill" => commands::distill(&ctx),
        "traj" => commands::traj(&ctx),
        "eval" => commands::eval(&ctx),
        "sweep" => commands::sweep(&ctx),
        _ => commands::complexity(&ctx),
    }?;
    println!("{}", ctx.run.path.display());
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

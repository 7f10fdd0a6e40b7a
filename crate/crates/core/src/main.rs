use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kdaug::harness::{
    init_for_seed, load_params_file, pretrain_teacher, run_sweep, write_sweep_outputs,
    ExperimentConfig,
};
use kdaug::smallnet::save_params;
use kdaug::trainer::{evaluate, train};
use kdaug::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "kdaug", version, about = "Augmentation sweeps with top-K distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; a file or a directory depending on the verb.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a teacher without distillation and save its parameters.
    PretrainTeacher(Common),
    /// Train one student with the `train` section of the config.
    Train(Common),
    /// Run the RA vs RA+KD magnitude sweep.
    Sweep(Common),
    /// Report the test error of a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Parameter file to evaluate.
        #[arg(long)]
        params: PathBuf,
    },
}

struct Loaded {
    cfg: ExperimentConfig,
    base: PathBuf,
}

fn load(common: &Common) -> Result<Loaded> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        if let Some(t) = cfg.teacher.as_mut().and_then(|t| t.train.as_mut()) {
            t.seed = seed;
        }
    }
    let base = common
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok(Loaded { cfg, base })
}

fn teacher_path(l: &Loaded) -> Result<PathBuf> {
    l.cfg
        .teacher
        .as_ref()
        .map(|t| l.base.join(&t.path))
        .ok_or_else(|| Error::Config("no `teacher` section".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainTeacher(common) => {
            let l = load(&common)?;
            let out = match common.out {
                Some(p) => p,
                None => teacher_path(&l)?,
            };
            let (train_set, test_set) = l.cfg.teacher_datasets(&l.base)?;
            let report = pretrain_teacher(&train_set, &test_set, &l.cfg.teacher_train_config(), &out)?;
            println!("teacher test error {:.6} -> {}", report.test_error, out.display());
        }
        Command::Train(common) => {
            let l = load(&common)?;
            let (train_set, test_set) = l.cfg.datasets(&l.base)?;
            let shape = train_set
                .input_shape()
                .ok_or_else(|| Error::Dataset("empty training set".into()))?;
            let teacher = if l.cfg.train.uses_teacher() {
                Some(load_params_file(&teacher_path(&l)?)?)
            } else {
                None
            };
            let init = init_for_seed(shape, train_set.classes(), l.cfg.train.seed)?;
            let (params, history) = train(teacher.as_ref(), &init, &train_set, &test_set, &l.cfg.train)?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("model.akdw"));
            fs::write(&out, save_params(&params)?)?;
            fs::write(out.with_extension("history.json"), serde_json::to_string_pretty(&history)?)?;
            let last = history.last().expect("at least one epoch");
            println!("test error {:.6} -> {}", last.test_error, out.display());
        }
        Command::Sweep(common) => {
            let l = load(&common)?;
            let (train_set, test_set) = l.cfg.datasets(&l.base)?;
            let mut sweep = l.cfg.sweep_config()?;
            sweep.teacher_path = sweep.teacher_path.map(|p| l.base.join(p));
            let result = run_sweep(&sweep, &train_set, &test_set)?;
            let dir = common.out.unwrap_or_else(|| PathBuf::from("sweep-out"));
            write_sweep_outputs(&result, &dir)?;
            print!("{}", result.gain_csv());
            println!("wrote {}", dir.display());
        }
        Command::Eval { common, params } => {
            let l = load(&common)?;
            let (_, test_set) = l.cfg.datasets(&l.base)?;
            let model = load_params_file(&params)?;
            let err = evaluate(&model, &test_set)?;
            println!("test error {err:.6}");
            if let Some(out) = common.out {
                fs::write(out, format!("{{\"test_error\": {err:.6}}}\n"))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

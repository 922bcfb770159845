use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use lrsv::backend::TrainedBackend;
use lrsv::data;
use lrsv::eval::{self, DcfParams, ScoredTrials, TrialSet};
use lrsv::experiment::{
    self, file_stem, format_relative, format_systems, CorpusSource, ExperimentConfig, FrontEnd, FrontEndKind, Metrics,
    Pipeline,
};

#[derive(Parser)]
#[command(
    name = "lrsv",
    version,
    about = "Speaker verification experiments with a linear-regression back-end"
)]
struct Cli {
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for corpora, models, trial lists, scores and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,

    /// Replaces the config's front-end list (repeatable).
    #[arg(long = "front-end")]
    front_end: Vec<String>,

    /// Replaces the config's back-end list (repeatable).
    #[arg(long = "back-end")]
    back_end: Vec<String>,

    /// Replaces the number of runs per condition.
    #[arg(long)]
    n_runs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the configured synthetic corpus to <out-dir>/corpus.
    Synth(ConfigArgs),
    /// Trains the configured front-ends into <out-dir>/models.
    TrainFrontend(ConfigArgs),
    /// Fits the configured back-ends on top of previously trained front-ends.
    TrainBackend(ConfigArgs),
    /// Writes trial and enrollment lists for every condition and run.
    Trials(ConfigArgs),
    /// Scores the written trial lists with the saved models.
    Score(ConfigArgs),
    /// Runs the full experiment, or computes metrics of one score file.
    Evaluate(EvaluateArgs),
    /// Compares back-ends and reports the relative EER improvement of LR+cosine.
    Compare(ConfigArgs),
    /// Fuses the configured front-ends by score averaging.
    Fuse(ConfigArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: Option<ConfigArgs>,

    /// Score file to evaluate instead of running an experiment.
    #[arg(long, requires = "trials", conflicts_with = "config")]
    scores: Option<PathBuf>,

    /// Trial list labeling the score file.
    #[arg(long, requires = "scores")]
    trials: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg =
        ExperimentConfig::load(&args.config).with_context(|| format!("loading config {}", args.config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_runs {
        cfg.n_runs = n;
    }
    if !args.front_end.is_empty() {
        cfg.front_end = args.front_end.iter().map(|s| s.parse()).collect::<lrsv::Result<_>>()?;
    }
    if !args.back_end.is_empty() {
        cfg.back_end = args.back_end.iter().map(|s| s.parse()).collect::<lrsv::Result<_>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

fn load_front_end(pipe: &mut Pipeline, out: &Path, kind: FrontEndKind) -> Result<()> {
    let dir = models_dir(out).join(kind.name());
    let fe = FrontEnd::load(&dir).with_context(|| {
        format!(
            "loading {kind} front-end from {} (run train-frontend first)",
            dir.display()
        )
    })?;
    pipe.install_front_end(fe)?;
    Ok(())
}

fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let CorpusSource::Synth(spec) = &cfg.corpus else {
        bail!("`synth` needs a config whose corpus is {{\"synth\": ...}}");
    };
    let dir = out.join("corpus");
    let index = data::synth_corpus(spec, &dir)?;
    println!(
        "wrote {} utterances of {} speakers to {}",
        index.len(),
        index.speakers().len(),
        dir.join("index.txt").display()
    );
    Ok(())
}

fn train_frontend(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut pipe = Pipeline::new(cfg, Some(models_dir(out)))?;
    for &kind in &cfg.front_end {
        let (_, emb) = pipe.front_end(kind)?;
        println!(
            "{kind}: {}-dimensional embeddings, {} development segments, {} evaluation segments",
            emb.dev.nrows(),
            emb.dev.ncols(),
            emb.eval.len()
        );
    }
    Ok(())
}

fn train_backend(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut pipe = Pipeline::new(cfg, Some(models_dir(out)))?;
    for &fe in &cfg.front_end {
        load_front_end(&mut pipe, out, fe)?;
        for &be in &cfg.back_end {
            pipe.back_end(fe, be)?;
            println!(
                "{fe}/{be}: saved to {}",
                models_dir(out).join(fe.name()).join(be.name()).display()
            );
        }
    }
    Ok(())
}

fn trials(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut pipe = Pipeline::new(cfg, None)?;
    let dir = out.join("trials");
    let n = experiment::write_trial_designs(&mut pipe, &dir)?;
    println!("wrote {n} trial lists to {}", dir.display());
    Ok(())
}

fn score(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut pipe = Pipeline::new(cfg, None)?;
    let trials_dir = out.join("trials");
    for &fe in &cfg.front_end {
        load_front_end(&mut pipe, out, fe)?;
        for &be in &cfg.back_end {
            let dir = models_dir(out).join(fe.name()).join(be.name());
            let backend = TrainedBackend::load(be, &dir)
                .with_context(|| format!("loading {be} back-end from {} (run train-backend first)", dir.display()))?;
            pipe.install_back_end(fe, backend);
        }
    }
    let mut written = 0;
    for &fe in &cfg.front_end {
        for &be in &cfg.back_end {
            let backend = pipe.back_end(fe, be)?.clone();
            let emb = pipe.front_end(fe)?.1.clone();
            for c in &cfg.conditions {
                for r in 0..cfg.n_runs {
                    let design = experiment::read_trial_design(&trials_dir, &c.name, r)
                        .with_context(|| format!("reading trials of {} run {r} (run `trials` first)", c.name))?;
                    let scored = experiment::score_design(&backend, &emb, &design)?;
                    let path = out
                        .join("scores")
                        .join(fe.name())
                        .join(be.name())
                        .join(file_stem(&c.name))
                        .join(format!("run{r:03}.scores"));
                    scored.write(&path)?;
                    written += 1;
                }
            }
        }
    }
    println!("wrote {written} score files under {}", out.join("scores").display());
    Ok(())
}

fn evaluate_file(scores: &Path, trials: &Path, out: &Path) -> Result<()> {
    let trial_set = TrialSet::read(trials)?;
    let scored = ScoredTrials::read(scores, &trial_set)?;
    let metrics = Metrics::compute(&scored, &DcfParams::DCF08, &DcfParams::DCF10)?;
    let det = out.join("det.csv");
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(&det, eval::det_csv(&eval::det_curve(&scored)?))
        .with_context(|| format!("writing {}", det.display()))?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    info!("DET points written to {}", det.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Evaluate(EvaluateArgs {
            scores: Some(scores),
            trials: Some(trials),
            ..
        }) => evaluate_file(scores, trials, out),
        Command::Evaluate(EvaluateArgs { config: None, .. }) => {
            bail!("evaluate needs --config, or --scores with --trials")
        }
        Command::Evaluate(EvaluateArgs { config: Some(args), .. }) => {
            let cfg = load_config(args, cli.seed)?;
            let report = experiment::run_experiment(&cfg, Some(out))?;
            print!("{}", format_systems(&report.systems));
            println!("report: {}", out.join("report.json").display());
            Ok(())
        }
        Command::Compare(args) => {
            let cfg = load_config(args, cli.seed)?;
            let report = experiment::run_comparison(&cfg, Some(out))?;
            print!("{}", format_systems(&report.systems));
            if !report.relative_improvement.is_empty() {
                println!();
                print!("{}", format_relative(&report.relative_improvement));
            }
            println!("report: {}", out.join("compare.json").display());
            Ok(())
        }
        Command::Fuse(args) => {
            let cfg = load_config(args, cli.seed)?;
            let report = experiment::run_fusion(&cfg, Some(out))?;
            for e in &report.entries {
                let mut rows = e.systems.clone();
                rows.push(e.fused.clone());
                print!("{}", format_systems(&rows));
            }
            println!("report: {}", out.join("fusion.json").display());
            Ok(())
        }
        Command::Synth(args) => synth(&load_config(args, cli.seed)?, out),
        Command::TrainFrontend(args) => train_frontend(&load_config(args, cli.seed)?, out),
        Command::TrainBackend(args) => train_backend(&load_config(args, cli.seed)?, out),
        Command::Trials(args) => trials(&load_config(args, cli.seed)?, out),
        Command::Score(args) => score(&load_config(args, cli.seed)?, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use lrsv::backend::BackendKind;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn back_end_override_rejects_unknown_names() {
        assert!("plda_cosine".parse::<BackendKind>().is_err());
        assert_eq!("lr_cosine".parse::<BackendKind>().unwrap(), BackendKind::LrCosine);
    }
}

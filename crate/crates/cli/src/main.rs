use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ewclab::checkpoint::{load_fisher, load_params, save_fisher, save_params};
use ewclab::config::RunConfig;
use ewclab::evalanalysis::report::{self, write_trace};
use ewclab::evalanalysis::{evaluate, EvalReport};
use ewclab::fisher::FisherVector;
use ewclab::pipeline::{
    self, arith_fisher, embed_checkpoints, general_fishers, Datasets, RunLayout, SweepSummary, ARITH_TASK,
    GENERAL_TASK,
};
use ewclab::training::{select_lambda, EwcConfig};
use ewclab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ewclab", version, about = "Arithmetic injection with elastic weight consolidation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixed EWC strength.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Encoder block for vital parameters and t-SNE.
    #[arg(long, global = true)]
    layer: Option<usize>,
    /// Output directory, replacing the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate arithmetic and grammar datasets.
    GenData,
    /// Pretrain on the grammar corpora.
    Pretrain,
    /// Estimate a diagonal Fisher vector.
    Fisher {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `A`, `B`, `general` (mean over corpora) or `arithmetic`.
        #[arg(long)]
        task: String,
    },
    /// Train on arithmetic from a general checkpoint.
    TrainArith {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "plain")]
        ewc: bool,
        #[arg(long)]
        plain: bool,
        /// Fisher file for EWC; estimated from the checkpoint when absent.
        #[arg(long)]
        fisher: Option<PathBuf>,
    },
    /// Independent EWC runs over a λ grid.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fisher: Option<PathBuf>,
        /// Comma-separated grid replacing the configured one.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Embed one layer's neurons across checkpoints, given as `label=path`.
    Tsne {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
    },
    /// Every step in order.
    Pipeline,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(l) = common.lambda {
        cfg.ewc.lambda = Some(l);
    }
    if let Some(layer) = common.layer {
        cfg.analysis.layer = layer;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

fn fisher_for(cfg: &RunConfig, data: &Datasets, general: &ewclab::model::ModelParams, path: Option<&Path>) -> Result<FisherVector> {
    match path {
        Some(p) => load_fisher(p),
        None => Ok(general_fishers(cfg, general, data, cfg.seeds[0])?.1),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let layout = RunLayout::for_config(&cfg);
    layout.create()?;
    cfg.save(&layout.config())?;
    let seed = cfg.seeds[0];
    match cli.command {
        Command::GenData => {
            let data = Datasets::generate(&cfg)?;
            data.write(&cfg, &layout.data())?;
            println!("data written to {}", layout.data().display());
        }
        Command::Pretrain => {
            let data = Datasets::read_or_generate(&cfg, &layout.data())?;
            for &s in &cfg.seeds {
                let (params, trace) = pipeline::pretrain(&cfg, &data, s)?;
                let path = layout.general_ckpt(s);
                save_params(&path, &params)?;
                write_trace(&layout.traces(), &format!("pretrain_seed{s}"), &trace)?;
                println!("{}", path.display());
            }
        }
        Command::Fisher { checkpoint, task } => {
            let params = load_params(&checkpoint)?;
            let data = Datasets::read_or_generate(&cfg, &layout.data())?;
            let fisher = match task.as_str() {
                ARITH_TASK => arith_fisher(&cfg, &params, &data, seed)?,
                GENERAL_TASK => general_fishers(&cfg, &params, &data, seed)?.1,
                other => {
                    let (parts, _) = general_fishers(&cfg, &params, &data, seed)?;
                    let pos = data
                        .corpora
                        .iter()
                        .position(|(g, _)| g.name() == other)
                        .ok_or_else(|| Error::InvalidInput(format!("unknown task {other}")))?;
                    parts.into_iter().nth(pos).expect("one fisher per corpus")
                }
            };
            let path = layout.fisher(seed, &fisher.task_label);
            save_fisher(&path, &fisher, &params)?;
            println!("{}", path.display());
        }
        Command::TrainArith {
            checkpoint,
            ewc,
            plain,
            fisher,
        } => {
            if ewc == plain {
                return Err(Error::Config("pass exactly one of --ewc or --plain".into()));
            }
            let general = load_params(&checkpoint)?;
            let data = Datasets::read_or_generate(&cfg, &layout.data())?;
            let (params, trace, path, name) = if ewc {
                let lambda = cfg
                    .ewc
                    .lambda
                    .ok_or_else(|| Error::Config("--ewc needs a lambda from --lambda or the config".into()))?;
                let f = fisher_for(&cfg, &data, &general, fisher.as_deref())?;
                let ewc_cfg = EwcConfig::new(lambda, general.clone(), f)?;
                let (p, t) = pipeline::train_arith(&cfg, &general, &data, seed, Some(&ewc_cfg))?;
                (p, t, layout.ewc_ckpt(seed, lambda), format!("ewc_seed{seed}_lambda{lambda:e}"))
            } else {
                let (p, t) = pipeline::train_arith(&cfg, &general, &data, seed, None)?;
                (p, t, layout.plain_ckpt(seed), format!("plain_seed{seed}"))
            };
            save_params(&path, &params)?;
            write_trace(&layout.traces(), &name, &trace)?;
            println!("{}", path.display());
        }
        Command::Sweep {
            checkpoint,
            fisher,
            grid,
        } => {
            let general = load_params(&checkpoint)?;
            let data = Datasets::read_or_generate(&cfg, &layout.data())?;
            let f = fisher_for(&cfg, &data, &general, fisher.as_deref())?;
            let grid = grid.unwrap_or_else(|| cfg.ewc.grid.clone());
            let runs = pipeline::sweep(&cfg, &general, &f, &data, seed, &grid)?;
            for r in &runs {
                write_trace(&layout.traces(), &format!("sweep_seed{seed}_lambda{:e}", r.lambda), &r.trace)?;
            }
            let summary = SweepSummary::new(seed, &runs, &general, &f, None);
            report::write_json(&layout.reports().join("sweep.json"), &summary)?;
            match select_lambda(&runs) {
                Ok(l) => println!("selected lambda {l:e}"),
                Err(_) => println!("no lambda converged"),
            }
        }
        Command::Eval { checkpoint } => {
            let params = load_params(&checkpoint)?;
            let data = Datasets::read_or_generate(&cfg, &layout.data())?;
            let run = evaluate(&params, &data.arith_eval, &data.heldout_named(), cfg.analysis.ln_rmse_mode)?;
            let rep = EvalReport::from_runs(std::slice::from_ref(&run))?;
            let path = layout.reports().join(format!("eval_{}.json", stem(&checkpoint)));
            report::write_report_json(&path, &rep)?;
            print!("ln_rmse {}", run.ln_rmse);
            for (task, loss) in &run.heldout {
                print!(" heldout_{task} {loss}");
            }
            println!();
        }
        Command::Tsne { checkpoints } => {
            let mut ckpts = BTreeMap::new();
            for spec in &checkpoints {
                let (label, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidInput(format!("expected label=path, got {spec}")))?;
                ckpts.insert(label.to_string(), load_params(Path::new(path))?);
            }
            let res = embed_checkpoints(&cfg, &ckpts, &layout.reports())?;
            println!("kl {} -> {}", res.kl_initial, res.kl_final);
        }
        Command::Pipeline => {
            let out = pipeline::run_pipeline(&cfg)?;
            print!("{}", out.table_main);
            println!("lambda {:e} runtime {:.1}s", out.lambda, out.runtime_secs);
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": one_line(message) });
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", &e.to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

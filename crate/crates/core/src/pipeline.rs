//! End-to-end experiment: pretrain on the general corpora, estimate Fisher
//! information, sweep λ, train arithmetic with and without EWC, evaluate,
//! and export every artifact into a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_fisher, save_params};
use crate::config::RunConfig;
use crate::datagen::{
    gen_arith_dataset, gen_text_corpus, read_arith_jsonl, read_corpus_jsonl, write_arith_jsonl, write_corpus_jsonl,
    ArithInstance, Grammar,
};
use crate::error::{Error, Result};
use crate::evalanalysis::report::{self, write_trace};
use crate::evalanalysis::{collect_layer_points, evaluate, tsne, EvalReport, RunEval, TsneResult};
use crate::fisher::{estimate_diag_fisher, sensitivity_compare, top_n_vital, FisherVector, SensitivityTable};
use crate::model::{build_model, ModelParams, TokenSeq};
use crate::training::{
    converged, lambda_sweep, select_lambda, train, train_ewc, weighted_displacement, EwcConfig, LossTrace, OptConfig,
    SweepRun, CONVERGENCE_WINDOW,
};
use crate::util::{derive_seed, par_map};

pub const ARITH_TASK: &str = "arithmetic";
pub const GENERAL_TASK: &str = "general";

/// Paths inside `<output_dir>/<run_name>/`.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn for_config(cfg: &RunConfig) -> Self {
        RunLayout::new(cfg.run_dir())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn general_ckpt(&self, seed: u64) -> PathBuf {
        self.checkpoints().join(format!("general_seed{seed}.ckpt"))
    }

    pub fn plain_ckpt(&self, seed: u64) -> PathBuf {
        self.checkpoints().join(format!("plain_seed{seed}.ckpt"))
    }

    pub fn ewc_ckpt(&self, seed: u64, lambda: f64) -> PathBuf {
        self.checkpoints().join(format!("ewc_seed{seed}_lambda{lambda:e}.ckpt"))
    }

    pub fn fisher(&self, seed: u64, task: &str) -> PathBuf {
        self.checkpoints().join(format!("fisher_{task}_seed{seed}.ckpt"))
    }

    pub fn create(&self) -> Result<()> {
        for dir in [self.data(), self.checkpoints(), self.traces(), self.reports()] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

/// Every dataset a run needs, generated from the config seeds.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub arith_train: Vec<ArithInstance>,
    pub arith_eval: Vec<ArithInstance>,
    pub corpora: Vec<(Grammar, Vec<TokenSeq>)>,
    pub heldout: Vec<(Grammar, Vec<TokenSeq>)>,
}

impl Datasets {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let corpora = |specs: &[crate::datagen::CorpusSpec]| -> Result<Vec<_>> {
            specs.iter().map(|s| Ok((s.grammar, gen_text_corpus(s)?))).collect()
        };
        Ok(Datasets {
            arith_train: gen_arith_dataset(d.arith.n, &d.arith.dist, d.arith.seed)?,
            arith_eval: gen_arith_dataset(d.arith_eval.n, &d.arith_eval.dist, d.arith_eval.seed)?,
            corpora: corpora(&d.corpora)?,
            heldout: corpora(&d.heldout)?,
        })
    }

    fn files(cfg: &RunConfig, dir: &Path) -> (PathBuf, PathBuf, Vec<PathBuf>, Vec<PathBuf>) {
        let names = |prefix: &str, specs: &[crate::datagen::CorpusSpec]| {
            specs
                .iter()
                .enumerate()
                .map(|(i, s)| dir.join(format!("{prefix}_{i}_{}.jsonl", s.grammar.name())))
                .collect()
        };
        (
            dir.join("arith_train.jsonl"),
            dir.join("arith_eval.jsonl"),
            names("corpus", &cfg.data.corpora),
            names("heldout", &cfg.data.heldout),
        )
    }

    pub fn write(&self, cfg: &RunConfig, dir: &Path) -> Result<()> {
        let (train, eval, corpora, heldout) = Datasets::files(cfg, dir);
        write_arith_jsonl(&train, &self.arith_train)?;
        write_arith_jsonl(&eval, &self.arith_eval)?;
        for (path, (_, c)) in corpora.iter().zip(&self.corpora).chain(heldout.iter().zip(&self.heldout)) {
            write_corpus_jsonl(path, c)?;
        }
        Ok(())
    }

    pub fn read(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let (train, eval, corpora, heldout) = Datasets::files(cfg, dir);
        let read = |paths: &[PathBuf], specs: &[crate::datagen::CorpusSpec]| -> Result<Vec<_>> {
            paths
                .iter()
                .zip(specs)
                .map(|(p, s)| Ok((s.grammar, read_corpus_jsonl(p)?)))
                .collect()
        };
        Ok(Datasets {
            arith_train: read_arith_jsonl(&train)?,
            arith_eval: read_arith_jsonl(&eval)?,
            corpora: read(&corpora, &cfg.data.corpora)?,
            heldout: read(&heldout, &cfg.data.heldout)?,
        })
    }

    /// Files from `dir` when present, otherwise freshly generated.
    pub fn read_or_generate(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        if dir.join("arith_train.jsonl").exists() {
            Datasets::read(cfg, dir)
        } else {
            Datasets::generate(cfg)
        }
    }

    pub fn general_train(&self) -> Vec<TokenSeq> {
        self.corpora.iter().flat_map(|(_, c)| c.iter().cloned()).collect()
    }

    pub fn arith_seqs(&self) -> Vec<TokenSeq> {
        self.arith_train.iter().map(|x| x.seq.clone()).collect()
    }

    pub fn heldout_named(&self) -> Vec<(&str, &[TokenSeq])> {
        self.heldout.iter().map(|(g, c)| (g.name(), c.as_slice())).collect()
    }
}

fn with_seed(opt: &OptConfig, seed: u64) -> OptConfig {
    OptConfig { seed, ..opt.clone() }
}

fn tagged(mut trace: LossTrace, dataset: &str) -> LossTrace {
    trace.meta.dataset_id = dataset.to_string();
    trace
}

/// Pretrain a fresh model on all general corpora.
pub fn pretrain(cfg: &RunConfig, data: &Datasets, seed: u64) -> Result<(ModelParams, LossTrace)> {
    let model_cfg = crate::model::ModelConfig {
        seed,
        ..cfg.model.clone()
    };
    let init = build_model(&model_cfg)?;
    let (params, trace) = train(&init, &data.general_train(), &with_seed(&cfg.pretrain, seed))?;
    Ok((params, tagged(trace, "general")))
}

/// Fisher of each general corpus at `params`, plus their mean under
/// [`GENERAL_TASK`].
pub fn general_fishers(
    cfg: &RunConfig,
    params: &ModelParams,
    data: &Datasets,
    seed: u64,
) -> Result<(Vec<FisherVector>, FisherVector)> {
    let parts = data
        .corpora
        .iter()
        .enumerate()
        .map(|(i, (g, c))| estimate_diag_fisher(params, c, cfg.ewc.fisher_samples, derive_seed(seed, i as u64), g.label()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FisherVector> = parts.iter().collect();
    let mean = FisherVector::mean_of(&refs, GENERAL_TASK)?;
    Ok((parts, mean))
}

pub fn arith_fisher(cfg: &RunConfig, params: &ModelParams, data: &Datasets, seed: u64) -> Result<FisherVector> {
    estimate_diag_fisher(
        params,
        &data.arith_seqs(),
        cfg.ewc.fisher_samples,
        derive_seed(seed, 100),
        ARITH_TASK,
    )
}

/// Arithmetic training from `general`, with EWC when `ewc` is given.
pub fn train_arith(
    cfg: &RunConfig,
    general: &ModelParams,
    data: &Datasets,
    seed: u64,
    ewc: Option<&EwcConfig>,
) -> Result<(ModelParams, LossTrace)> {
    let opt = with_seed(&cfg.opt, seed);
    let seqs = data.arith_seqs();
    let (params, trace) = match ewc {
        Some(e) => train_ewc(general, &seqs, &opt, e)?,
        None => train(general, &seqs, &opt)?,
    };
    Ok((params, tagged(trace, "arithmetic")))
}

pub fn sweep(
    cfg: &RunConfig,
    general: &ModelParams,
    fisher: &FisherVector,
    data: &Datasets,
    seed: u64,
    grid: &[f64],
) -> Result<Vec<SweepRun>> {
    let runs = lambda_sweep(
        general,
        &data.arith_seqs(),
        &with_seed(&cfg.opt, seed),
        general,
        fisher,
        grid,
    )?;
    Ok(runs
        .into_iter()
        .map(|r| SweepRun {
            trace: tagged(r.trace, "arithmetic"),
            ..r
        })
        .collect())
}

/// Largest displacement from `anchor` among coordinates whose Fisher score
/// exceeds the median.
pub fn drift_above_median(params: &ModelParams, anchor: &ModelParams, fisher: &FisherVector) -> f64 {
    let mut sorted = fisher.values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
    params
        .flatten()
        .iter()
        .zip(anchor.flatten())
        .zip(&fisher.values)
        .filter(|(_, f)| **f > median)
        .map(|((p, a), _)| (p - a).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub initial_ce: f64,
    pub final_ce: f64,
    pub peak_ewc: f64,
    pub final_ewc: f64,
    /// `Σ F_i (θ_i − θ*_i)²` at the end of training.
    pub final_displacement: f64,
    pub converged: bool,
    /// Above-median-Fisher drift relative to plain training, when known.
    pub drift_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seed: u64,
    pub points: Vec<SweepPoint>,
    pub selected_lambda: Option<f64>,
}

impl SweepSummary {
    pub fn new(
        seed: u64,
        runs: &[SweepRun],
        general: &ModelParams,
        fisher: &FisherVector,
        plain: Option<&ModelParams>,
    ) -> Self {
        let anchor = general.flatten();
        let plain_drift = plain.map(|p| drift_above_median(p, general, fisher));
        let points = runs
            .iter()
            .map(|r| SweepPoint {
                lambda: r.lambda,
                initial_ce: r.trace.records.first().map_or(f64::NAN, |x| x.ce_loss),
                final_ce: r.trace.final_ce(CONVERGENCE_WINDOW),
                peak_ewc: r.trace.ewc().fold(0.0, f64::max),
                final_ewc: r.trace.final_ewc(CONVERGENCE_WINDOW),
                final_displacement: weighted_displacement(&r.params.flatten(), &anchor, &fisher.values),
                converged: converged(&r.trace),
                drift_ratio: plain_drift.map(|d| drift_above_median(&r.params, general, fisher) / d),
            })
            .collect();
        SweepSummary {
            seed,
            points,
            selected_lambda: select_lambda(runs).ok(),
        }
    }

    /// Points ordered from the largest λ down.
    pub fn descending(&self) -> Vec<&SweepPoint> {
        let mut v: Vec<&SweepPoint> = self.points.iter().collect();
        v.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
        v
    }
}

/// Everything the pipeline measured, also written under `reports/`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub lambda: f64,
    pub sweep: Option<SweepSummary>,
    /// Per seed, per model (`base`, `plain-arith`, `ewc-arith`).
    pub runs: BTreeMap<u64, BTreeMap<String, RunEval>>,
    pub reports: BTreeMap<String, EvalReport>,
    pub table_main: String,
    pub sensitivity: SensitivityTable,
    pub tsne_kl: [f64; 3],
    pub runtime_secs: f64,
}

pub const MODEL_ROWS: [&str; 3] = ["base", "plain-arith", "ewc-arith"];

fn sweep_svg(runs: &[SweepRun]) -> String {
    let series: Vec<(String, Vec<f64>)> = runs
        .iter()
        .map(|r| (format!("lambda={:e}", r.lambda), r.trace.ce().collect()))
        .collect();
    let refs: Vec<(&str, Vec<f64>)> = series.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    report::line_svg("CE loss per lambda", "ce loss", &refs)
}

struct SeedStart {
    general: ModelParams,
    pretrain_trace: LossTrace,
    parts: Vec<FisherVector>,
    fisher: FisherVector,
}

/// Run the full experiment and write its artifacts.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let layout = RunLayout::for_config(cfg);
    layout.create()?;
    cfg.save(&layout.config())?;
    let data = Datasets::generate(cfg)?;
    data.write(cfg, &layout.data())?;

    // pretraining and Fisher estimation, per seed
    let starts = par_map(&cfg.seeds, |_, &seed| -> Result<SeedStart> {
        let (general, pretrain_trace) = pretrain(cfg, &data, seed)?;
        let (parts, fisher) = general_fishers(cfg, &general, &data, seed)?;
        Ok(SeedStart {
            general,
            pretrain_trace,
            parts,
            fisher,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    for (seed, s) in cfg.seeds.iter().zip(&starts) {
        save_params(&layout.general_ckpt(*seed), &s.general)?;
        save_fisher(&layout.fisher(*seed, GENERAL_TASK), &s.fisher, &s.general)?;
        for part in &s.parts {
            save_fisher(&layout.fisher(*seed, &part.task_label), part, &s.general)?;
        }
        write_trace(&layout.traces(), &format!("pretrain_seed{seed}"), &s.pretrain_trace)?;
    }

    // plain arithmetic training, per seed
    let plains = par_map(&starts, |i, s| train_arith(cfg, &s.general, &data, cfg.seeds[i], None))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    // λ sweep on the first seed
    let first_seed = cfg.seeds[0];
    let (sweep_runs, summary) = if cfg.ewc.grid.is_empty() {
        (Vec::new(), None)
    } else {
        let runs = sweep(cfg, &starts[0].general, &starts[0].fisher, &data, first_seed, &cfg.ewc.grid)?;
        let summary = SweepSummary::new(first_seed, &runs, &starts[0].general, &starts[0].fisher, Some(&plains[0].0));
        for r in &runs {
            write_trace(&layout.traces(), &format!("sweep_seed{first_seed}_lambda{:e}", r.lambda), &r.trace)?;
        }
        report::write_svg(&layout.reports().join("sweep.svg"), &sweep_svg(&runs))?;
        report::write_json(&layout.reports().join("sweep.json"), &summary)?;
        (runs, Some(summary))
    };
    let lambda = match cfg.ewc.lambda {
        Some(l) => l,
        None => select_lambda(&sweep_runs)?,
    };

    // EWC arithmetic training at the chosen λ; the sweep already holds the
    // first seed's run when λ is on the grid
    let ewcs = par_map(&starts, |i, s| -> Result<(ModelParams, LossTrace)> {
        if i == 0 {
            if let Some(r) = sweep_runs.iter().find(|r| r.lambda == lambda) {
                return Ok((r.params.clone(), r.trace.clone()));
            }
        }
        let ewc = EwcConfig::new(lambda, s.general.clone(), s.fisher.clone())?;
        train_arith(cfg, &s.general, &data, cfg.seeds[i], Some(&ewc))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    // evaluation
    let heldout = data.heldout_named();
    let mode = cfg.analysis.ln_rmse_mode;
    let mut runs: BTreeMap<u64, BTreeMap<String, RunEval>> = BTreeMap::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let (plain, plain_trace) = &plains[i];
        let (ewc, ewc_trace) = &ewcs[i];
        save_params(&layout.plain_ckpt(seed), plain)?;
        save_params(&layout.ewc_ckpt(seed, lambda), ewc)?;
        write_trace(&layout.traces(), &format!("plain_seed{seed}"), plain_trace)?;
        write_trace(&layout.traces(), &format!("ewc_seed{seed}_lambda{lambda:e}"), ewc_trace)?;
        let models = [&starts[i].general, plain, ewc];
        let evals = par_map(&models, |_, m| evaluate(m, &data.arith_eval, &heldout, mode))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        runs.insert(seed, MODEL_ROWS.iter().map(|n| n.to_string()).zip(evals).collect());
    }
    let mut reports = BTreeMap::new();
    for name in MODEL_ROWS {
        let per_seed: Vec<RunEval> = runs.values().map(|m| m[name].clone()).collect();
        let rep = EvalReport::from_runs(&per_seed)?;
        report::write_report_json(&layout.reports().join(format!("eval_{name}.json")), &rep)?;
        report::write_csv(
            &layout.reports().join(format!("samples_{name}.csv")),
            &report::samples_csv(&rep.samples),
        )?;
        reports.insert(name.to_string(), rep);
    }
    let rows: Vec<(&str, &EvalReport)> = MODEL_ROWS.iter().map(|n| (*n, &reports[*n])).collect();
    let table_main = report::table_main_csv(&rows)?;
    report::write_csv(&layout.reports().join("table_main.csv"), &table_main)?;

    // vital arithmetic parameters and their general-task sensitivity,
    // all scored at the plain arithmetic model
    let layer = cfg.analysis.layer;
    let plain0 = &plains[0].0;
    let arith_f = arith_fisher(cfg, plain0, &data, first_seed)?;
    save_fisher(&layout.fisher(first_seed, ARITH_TASK), &arith_f, plain0)?;
    let (parts_at_plain, _) = general_fishers(cfg, plain0, &data, derive_seed(first_seed, 7))?;
    let vital = top_n_vital(&arith_f, plain0, layer, cfg.analysis.vital_n.min(plain0.layer_range(layer)?.len()))?;
    let mut by_task: Vec<(&str, &FisherVector)> = vec![(ARITH_TASK, &arith_f)];
    by_task.extend(parts_at_plain.iter().map(|f| (f.task_label.as_str(), f)));
    let sensitivity = sensitivity_compare(&vital, &by_task)?;
    report::write_csv(
        &layout.reports().join(format!("sensitivity_layer{layer}.csv")),
        &report::sensitivity_csv(&sensitivity),
    )?;

    // parameter-space embedding
    let mut ckpts = BTreeMap::new();
    ckpts.insert(GENERAL_TASK.to_string(), starts[0].general.clone());
    ckpts.insert("plain-arith".to_string(), plain0.clone());
    ckpts.insert("ewc-arith".to_string(), ewcs[0].0.clone());
    let emb = embed_checkpoints(cfg, &ckpts, &layout.reports())?;

    Ok(PipelineOutcome {
        lambda,
        sweep: summary,
        runs,
        reports,
        table_main,
        sensitivity,
        tsne_kl: [emb.kl_initial, emb.kl_post_exaggeration, emb.kl_final],
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// t-SNE of one layer's neurons across labeled checkpoints, exported as
/// CSV and SVG under `dir`.
pub fn embed_checkpoints(
    cfg: &RunConfig,
    ckpts: &BTreeMap<String, ModelParams>,
    dir: &Path,
) -> Result<TsneResult> {
    let layer = cfg.analysis.layer;
    let points = collect_layer_points(ckpts, layer)?;
    let result = tsne(&points, &cfg.analysis.tsne)?;
    report::write_csv(
        &dir.join(format!("embedding_layer{layer}.csv")),
        &report::embedding_csv(&result.embedding, &points.labels, layer)?,
    )?;
    report::write_svg(
        &dir.join(format!("embedding_layer{layer}.svg")),
        &report::scatter_svg(&format!("Encoder layer {layer} parameter space"), &result.embedding, &points.labels)?,
    )?;
    Ok(result)
}

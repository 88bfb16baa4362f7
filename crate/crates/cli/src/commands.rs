//! The five commands. Each returns a serialisable result that also knows how
//! to render itself as a text table; printing is left to the caller.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cmfusion::autograd::fault::{self, Fault};
use cmfusion::checkpoint::Checkpoint;
use cmfusion::data::{load_dataset, save_dataset, DatasetSplit};
use cmfusion::gradcheck::check_graph_loss;
use cmfusion::metrics::{format_table, render, EvaluationReport};
use cmfusion::model::{CmRobertaModel, ModelConfig};
use cmfusion::synth::{SyntheticSpec, Synthesizer};
use cmfusion::train::{cross_entropy, evaluate, fit_observed, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::{default_lld_dim, RunConfig, SynthConfig};
use crate::error::{CliError, CliResult};
use crate::variants::Variant;

pub const CHECKPOINT_FILE: &str = "checkpoint.cmf";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const ABLATION_REPORT_FILE: &str = "ablation_report.json";
pub const GRADCHECK_REPORT_FILE: &str = "gradcheck_report.json";
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn require(path: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.clone()
        .ok_or_else(|| CliError::config(format!("config does not name a {what} dataset")))
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, Default)]
pub struct SynthArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub path: PathBuf,
    pub dialogues: usize,
    pub utterances: usize,
    pub class_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub spec: SyntheticSpec,
    pub label_names: Vec<String>,
    pub splits: Vec<SplitSummary>,
}

impl SynthOutput {
    pub fn table(&self) -> String {
        let mut headers = vec!["split".to_string(), "dialogues".into(), "utterances".into()];
        headers.extend(self.label_names.iter().cloned());
        let body: Vec<Vec<String>> = self
            .splits
            .iter()
            .map(|s| {
                let mut row = vec![s.split.clone(), s.dialogues.to_string(), s.utterances.to_string()];
                row.extend(s.class_counts.iter().map(|c| c.to_string()));
                row
            })
            .collect();
        render(&headers, &body)
    }
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` under `args.out`.
pub fn cmd_synth(args: &SynthArgs) -> CliResult<SynthOutput> {
    let mut cfg = match &args.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.spec.seed = seed;
    }
    let synth = Synthesizer::new(cfg.spec.clone())?;
    let sizes = cfg.sizes();
    create_dir(&args.out)?;
    let mut splits = Vec::new();
    for (index, (name, n)) in SPLIT_NAMES.iter().zip([sizes.train, sizes.val, sizes.test]).enumerate() {
        let split = synth.split(index as u64, n)?;
        let path = args.out.join(format!("{name}.jsonl"));
        save_dataset(&split, &path)?;
        splits.push(SplitSummary {
            split: name.to_string(),
            path,
            dialogues: split.len(),
            utterances: split.n_utterances(),
            class_counts: split.class_counts(),
        });
    }
    Ok(SynthOutput {
        label_names: synth.header().label_names,
        spec: cfg.spec,
        splits,
    })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub report: TrainReport,
    /// Best-epoch model on the validation split.
    pub validation: EvaluationReport,
    pub test: Option<EvaluationReport>,
    pub checkpoint: PathBuf,
}

impl TrainOutput {
    pub fn table(&self) -> String {
        let mut rows = vec![(format!("{} (val)", self.variant), &self.validation)];
        if let Some(t) = &self.test {
            rows.push((format!("{} (test)", self.variant), t));
        }
        format!(
            "best epoch {} of {} ({:?}), best validation loss {:.6}\n{}",
            self.report.best_epoch,
            self.report.stopped_epoch,
            self.report.stop_reason,
            self.report.best_val_loss,
            format_table(&rows)
        )
    }
}

struct Splits {
    train: DatasetSplit,
    val: DatasetSplit,
    test: Option<DatasetSplit>,
}

fn load_splits(cfg: &RunConfig) -> CliResult<Splits> {
    let train = load_dataset(require(&cfg.data.train, "train")?)?;
    let val = load_dataset(require(&cfg.data.val, "validation")?)?;
    let test = cfg.data.test.as_ref().map(load_dataset).transpose()?;
    for other in std::iter::once(&val).chain(test.as_ref()) {
        if other.header != train.header {
            return Err(CliError::data(format!(
                "dataset headers disagree: train has {}x{} features and {} classes, another split has {}x{} and {}",
                train.header.d_audio_in,
                train.header.d_text_in,
                train.header.n_classes,
                other.header.d_audio_in,
                other.header.d_text_in,
                other.header.n_classes
            )));
        }
    }
    Ok(Splits { train, val, test })
}

struct Trained {
    model: CmRobertaModel,
    model_config: ModelConfig,
    train_config: TrainConfig,
    report: TrainReport,
    checkpoint: Checkpoint,
}

fn train_one(cfg: &RunConfig, splits: &Splits, variant: Variant, seed: u64, progress: bool) -> CliResult<Trained> {
    let model_config = cfg.model_config(&splits.train.header, variant, seed)?;
    let train_config = cfg.train_config(seed)?;
    let mut model = CmRobertaModel::new(model_config.clone())?;
    let outcome = fit_observed(&mut model, &splits.train, &splits.val, &train_config, |r| {
        if progress {
            eprintln!(
                "[{variant} seed {seed}] epoch {:>3}  train {:.6}  val {:.6}  val-F1 {:.4}",
                r.epoch, r.train_loss, r.val_loss, r.val_weighted_f1
            );
        }
    })?;
    let mut checkpoint = Checkpoint::capture(&model);
    checkpoint.train_config = Some(train_config.clone());
    checkpoint.epochs_completed = outcome.report.stopped_epoch;
    checkpoint.best_epoch = outcome.report.best_epoch;
    checkpoint.adam = Some(outcome.adam);
    Ok(Trained {
        model,
        model_config,
        train_config,
        report: outcome.report,
        checkpoint,
    })
}

/// Trains one model, then writes `checkpoint.cmf` and `train_report.json`.
pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutput> {
    let cfg = RunConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.effective_seed());
    let variant = args.variant.unwrap_or(cfg.variant);
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let splits = load_splits(&cfg)?;
    let trained = train_one(&cfg, &splits, variant, seed, args.progress)?;
    let exec = trained.train_config.exec;
    let validation = evaluate(&trained.model, &splits.val, exec)?;
    let test = splits
        .test
        .as_ref()
        .map(|t| evaluate(&trained.model, t, exec))
        .transpose()?;
    create_dir(&out_dir)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    trained.checkpoint.save(&checkpoint)?;
    let output = TrainOutput {
        variant,
        seed,
        model: trained.model_config,
        train: trained.train_config,
        report: trained.report,
        validation,
        test,
        checkpoint,
    };
    write_json(&out_dir.join(TRAIN_REPORT_FILE), &output)?;
    Ok(output)
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Directory for `eval_report.json`; defaults to the checkpoint's directory.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub report: EvaluationReport,
}

impl EvalOutput {
    pub fn table(&self) -> String {
        let name = self
            .checkpoint
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| "model".to_string(), |n| n.to_string_lossy().into_owned());
        format_table(&[(name, &self.report)])
    }
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalOutput> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let split = load_dataset(&args.data)?;
    let (m, h) = (&checkpoint.model_config, &split.header);
    for (name, want, got) in [
        ("d_audio_in", m.d_audio_in, h.d_audio_in),
        ("d_text_in", m.d_text_in, h.d_text_in),
        ("n_classes", m.n_classes, h.n_classes),
    ] {
        if want != got {
            return Err(CliError::data(format!(
                "checkpoint expects {name} = {want} but {} has {got}",
                args.data.display()
            )));
        }
    }
    let model = checkpoint.to_model()?;
    let exec = checkpoint.train_config.as_ref().map(|t| t.exec).unwrap_or_default();
    let report = evaluate(&model, &split, exec)?;
    let output = EvalOutput {
        checkpoint: args.checkpoint.clone(),
        dataset: args.data.clone(),
        report,
    };
    let out_dir = match &args.out {
        Some(d) => d.clone(),
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    create_dir(&out_dir)?;
    write_json(&out_dir.join(EVAL_REPORT_FILE), &output)?;
    Ok(output)
}

// ---------------------------------------------------------------- ablate

#[derive(Clone, Debug, Default)]
pub struct AblateArgs {
    pub config: PathBuf,
    /// Defaults to every registered variant.
    pub variants: Option<Vec<Variant>>,
    pub out: Option<PathBuf>,
    /// First seed; the run uses `n_seeds` consecutive seeds from here.
    pub seed: Option<u64>,
    pub n_seeds: Option<usize>,
    pub progress: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub weighted_f1: f64,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: String,
    pub mean_weighted_f1: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub sd_weighted_f1: f64,
    pub mean_class_f1: Vec<f64>,
    pub runs: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    /// Split the scores come from: "test" when configured, else "val".
    pub evaluated_on: String,
    pub seeds: Vec<u64>,
    pub label_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationOutput {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn table(&self) -> String {
        let mut headers = vec!["variant".to_string()];
        headers.extend(self.label_names.iter().cloned());
        headers.push("w-average F1".into());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.variant.id().to_string()];
                cells.extend(r.mean_class_f1.iter().map(|f| format!("{:.2}", 100.0 * f)));
                cells.push(format!("{:.2} ± {:.2}", 100.0 * r.mean_weighted_f1, 100.0 * r.sd_weighted_f1));
                cells
            })
            .collect();
        format!(
            "mean over seeds {:?} on the {} split, values in percent\n{}",
            self.seeds,
            self.evaluated_on,
            render(&headers, &body)
        )
    }
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Order-preserving map over independent jobs; parallel when the crate is
/// built with the `parallel` feature.
fn run_jobs<T, R, F>(jobs: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(f).collect()
    }
}

/// Trains every requested variant on the same seeds and scores it.
pub fn cmd_ablate(args: &AblateArgs) -> CliResult<AblationOutput> {
    let cfg = RunConfig::load(&args.config)?;
    let mut variants = args.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    variants.sort();
    variants.dedup();
    let n_seeds = args.n_seeds.unwrap_or(cfg.n_seeds);
    if n_seeds == 0 {
        return Err(CliError::config("n_seeds must be positive"));
    }
    let first = args.seed.unwrap_or(cfg.effective_seed());
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| first + i).collect();
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let splits = load_splits(&cfg)?;
    for &v in &variants {
        cfg.model_config(&splits.train.header, v, first)?;
    }
    let (eval_split, evaluated_on) = match &splits.test {
        Some(t) => (t, "test"),
        None => (&splits.val, "val"),
    };

    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = run_jobs(&jobs, |&(v, s)| -> CliResult<(SeedResult, EvaluationReport)> {
        let trained = train_one(&cfg, &splits, v, s, args.progress)?;
        let report = evaluate(&trained.model, eval_split, trained.train_config.exec)?;
        Ok((
            SeedResult {
                seed: s,
                weighted_f1: report.weighted_f1,
                best_epoch: trained.report.best_epoch,
                stopped_epoch: trained.report.stopped_epoch,
            },
            report,
        ))
    });
    let mut results = results.into_iter();
    let mut rows = Vec::new();
    for &v in &variants {
        let mut runs = Vec::new();
        let mut class_sum = vec![0.0; splits.train.header.n_classes];
        for _ in &seeds {
            let (run, report) = results.next().expect("one result per job")?;
            for (acc, m) in class_sum.iter_mut().zip(&report.per_class) {
                *acc += m.f1;
            }
            runs.push(run);
        }
        let f1s: Vec<f64> = runs.iter().map(|r| r.weighted_f1).collect();
        let (mean, sd) = mean_sd(&f1s);
        rows.push(AblationRow {
            variant: v,
            description: v.description().to_string(),
            mean_weighted_f1: mean,
            sd_weighted_f1: sd,
            mean_class_f1: class_sum.iter().map(|s| s / seeds.len() as f64).collect(),
            runs,
        });
    }
    let output = AblationOutput {
        evaluated_on: evaluated_on.to_string(),
        seeds,
        label_names: splits.train.header.label_names.clone(),
        rows,
    };
    create_dir(&out_dir)?;
    write_json(&out_dir.join(ABLATION_REPORT_FILE), &output)?;
    Ok(output)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, Default)]
pub struct GradcheckArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Corrupts one backward rule; used to show the check can fail.
    pub inject_fault: Option<Fault>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutput {
    pub passed: bool,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub eps: f64,
    pub worst_param: Option<String>,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Diagnostic only: the maximum over entries of magnitude at least 1e-6.
    pub max_rel_error_significant: f64,
    pub entries_checked: usize,
    pub kink_adjusted: usize,
    pub model: ModelConfig,
    pub utterances: usize,
    pub seconds: f64,
}

impl GradcheckOutput {
    pub fn table(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!(
            "{verdict}: max relative error {:.3e} (tolerance {:.0e}, step {:.0e})\n\
             worst entry {}[{}]: analytic {:.6e}, numeric {:.6e}\n\
             max relative error over entries of magnitude >= 1e-6: {:.3e}\n\
             {} entries checked, {} with shortened steps, {:.1} s\n",
            self.max_rel_error,
            self.tolerance,
            self.eps,
            self.worst_param.as_deref().unwrap_or("-"),
            self.worst_index.map_or("-".into(), |i| i.to_string()),
            self.worst_analytic,
            self.worst_numeric,
            self.max_rel_error_significant,
            self.entries_checked,
            self.kink_adjusted,
            self.seconds
        )
    }
}

/// Central-difference check of the full network on a tiny configuration.
///
/// The width is capped at `gradcheck.max_d_model` and the dialogue length at
/// `gradcheck.max_utterances` whatever the run config says.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<GradcheckOutput> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let gc = &cfg.gradcheck;
    let seed = args.seed.unwrap_or(cfg.effective_seed());
    let d_model = cfg.model.d_model.min(gc.max_d_model) & !1;
    let utterances = gc.max_utterances.max(1);
    let base = ModelConfig {
        d_audio_in: gc.d_audio_in,
        d_text_in: gc.d_text_in,
        d_model,
        n_sca_layers: cfg.model.n_sca_layers,
        ff_inner: None,
        n_classes: gc.n_classes,
        audio_lld_dim: default_lld_dim(gc.d_audio_in),
        share_encoders: cfg.model.share_encoders,
        seed,
        ..ModelConfig::default()
    };
    let model_config = cfg.variant.apply(&base);
    model_config.validate()?;
    let model = CmRobertaModel::new(model_config.clone())?;
    let spec = SyntheticSpec {
        d_audio: gc.d_audio_in,
        d_text: gc.d_text_in,
        n_classes: gc.n_classes,
        min_utterances: utterances,
        max_utterances: utterances,
        seed,
        ..SyntheticSpec::default()
    };
    let dialogue = Synthesizer::new(spec)?.split(0, 1)?.dialogues.remove(0);
    let labels: Vec<i64> = dialogue.labels.iter().map(|&l| l as i64).collect();
    let mask = vec![true; utterances];

    let started = Instant::now();
    let _guard = args.inject_fault.map(fault::inject);
    let report = check_graph_loss(model.params(), gc.eps, cfg.train.exec, |g, store| {
        let mut m = model.clone();
        *m.params_mut() = store.clone();
        let out = m.forward(g, &dialogue.audio, &dialogue.text, &mask)?;
        cross_entropy(g, out.logits, &labels, &mask)
    })?;
    let output = GradcheckOutput {
        passed: report.passes(gc.tolerance),
        max_rel_error: report.max_rel_error,
        tolerance: gc.tolerance,
        eps: gc.eps,
        worst_param: report.worst_param,
        worst_index: report.worst_index,
        worst_analytic: report.worst_analytic,
        worst_numeric: report.worst_numeric,
        max_rel_error_significant: report.max_rel_error_significant,
        entries_checked: report.entries_checked,
        kink_adjusted: report.kink_adjusted,
        model: model_config,
        utterances,
        seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_json(&dir.join(GRADCHECK_REPORT_FILE), &output)?;
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_and_sample_sd() {
        // mean 2.5, squared deviations 2.25 + 0.25 + 0.25 + 2.25 = 5, / 3
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s, (5.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
        assert_eq!(mean_sd(&[]), (0.0, 0.0));
    }
}

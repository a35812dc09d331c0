//! Experiment runner behind the `bce3s` binary.
//!
//! Every command writes plain CSV/text artifacts into the output directory
//! and is byte-for-byte deterministic for a fixed config and seed. Exit
//! codes: 0 success, 2 bad config or input, 3 divergence, 4 failed gradient
//! check.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{AblationVariant, EtfSimConfig, ExperimentConfig};
use crate::data::{generate_dataset, subset_split, Dataset, SubsetSplit};
use crate::dump::{self, checkpoint_path, write_file};
use crate::error::{Error, Result};
use crate::geometry::{self, MetricReport, SeparabilityMatrix, Summary};
use crate::grads::{self, grad_uniform_rows, project_rows_tangent, ActivationKind};
use crate::losses::{self, Family};
use crate::rng::{self, tags};
use crate::train::{self, EvalReport, History, Model, RunResult};
use crate::vecops::{axpy, norm, Matrix};

#[derive(Debug, Parser)]
#[command(name = "bce3s", version, about = "Tripartite synergistic learning experiments on synthetic long-tailed data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config (data, training, ablation, etf-sim).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the long-tailed train set and balanced test set.
    GenData,
    /// Train (stage 1 and optional stage 2) and evaluate.
    Train,
    /// Run a grid of loss variants over shared seeds.
    Ablation,
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        /// Maximum relative error.
        #[arg(long)]
        tol: Option<f64>,
        /// Number of seeds (0..N).
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Compute geometry metrics from a feature dump and a classifier dump.
    Metrics {
        /// File with a sample block (e.g. a checkpoint).
        #[arg(long)]
        features: PathBuf,
        /// File with a classifier block; defaults to the feature file.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Optimize only the uniform loss over unit vectors and log the
    /// distance to the simplex ETF.
    EtfSim {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        inits: Option<usize>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn load_ctx(g: &GlobalArgs) -> Result<Ctx> {
    let mut cfg = ExperimentConfig::load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.etf_sim.seed = s;
        cfg.ablation.seeds = vec![s];
    }
    let out = g.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok(Ctx {
        cfg,
        out,
        quiet: g.quiet,
    })
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = load_ctx(&cli.global)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Ablation => cmd_ablation(&ctx),
        Command::Gradcheck { tol, seeds } => {
            let mut gc = ctx.cfg.gradcheck.clone();
            if let Some(t) = tol {
                gc.tol = *t;
            }
            if let Some(n) = seeds {
                gc.seeds = *n;
            }
            let mut settings = gc.settings();
            if let Some(s) = cli.global.seed {
                settings.seeds = vec![s];
            }
            cmd_gradcheck(&ctx, &settings)
        }
        Command::Metrics { features, classifier } => {
            cmd_metrics(&ctx, features, classifier.as_deref().unwrap_or(features))
        }
        Command::EtfSim {
            classes,
            dim,
            steps,
            lr,
            inits,
        } => {
            let mut e = ctx.cfg.etf_sim.clone();
            e.classes = classes.unwrap_or(e.classes);
            e.dim = dim.unwrap_or(e.dim);
            e.steps = steps.unwrap_or(e.steps);
            e.lr = lr.unwrap_or(e.lr);
            e.inits = inits.unwrap_or(e.inits);
            e.validate()?;
            cmd_etf_sim(&ctx, &e)
        }
    }
}

fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let ds = generate_dataset(&ctx.cfg.data)?;
    let k = ds.num_classes();
    write_file(&ctx.out.join("train.dump"), &dump::format_samples(&ds.train, k)?)?;
    write_file(&ctx.out.join("test.dump"), &dump::format_samples(&ds.test, k)?)?;
    let mut counts = String::from("class,train_count\n");
    for (c, n) in ds.train_counts.iter().enumerate() {
        let _ = writeln!(counts, "{c},{n}");
    }
    write_file(&ctx.out.join("counts.csv"), &counts)?;
    ctx.say(format!(
        "{} classes, {} train samples (head {}, tail {}), {} test samples",
        k,
        ds.train.len(),
        ds.train_counts[0],
        ds.train_counts[k - 1],
        ds.test.len()
    ));
    ctx.say(format!(
        "per-class counts: {}",
        ds.train_counts.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    ));
    Ok(())
}

fn prepare(cfg: &ExperimentConfig) -> Result<(Dataset, SubsetSplit)> {
    let ds = generate_dataset(&cfg.data)?;
    let split = subset_split(&ds.train_counts, cfg.split)?;
    Ok((ds, split))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// History CSV with one row per epoch.
pub fn history_csv(h: &History) -> String {
    let mut s = String::from("epoch,loss_total,loss_sc,loss_ss,loss_cc,lr,acc_all,acc_many,acc_medium,acc_few\n");
    for r in &h.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss_total,
            r.loss_sc,
            r.loss_ss,
            r.loss_cc,
            r.lr,
            r.acc_all,
            opt(r.acc_many),
            opt(r.acc_medium),
            opt(r.acc_few)
        );
    }
    s
}

/// Mean/std of each metric at every logged epoch.
pub fn metric_history_csv(h: &History) -> String {
    let mut s = String::from(
        "epoch,compactness_mean,compactness_std,feat_sep_mean,feat_sep_std,clf_sep_mean,clf_sep_std\n",
    );
    let pair = |x: Option<Summary>| x.map_or_else(|| ",".to_string(), |v| format!("{},{}", v.mean, v.std));
    for (e, m) in &h.metrics {
        let _ = writeln!(
            s,
            "{e},{},{},{}",
            pair(m.compactness_summary),
            pair(m.feature_separability_summary),
            pair(Some(m.classifier_separability_summary))
        );
    }
    s
}

pub fn metrics_csv(m: &MetricReport) -> String {
    let mut s = String::from("class,compactness,feat_sep,clf_sep\n");
    for (k, clf) in m.classifier_separability.iter().enumerate() {
        let _ = writeln!(
            s,
            "{k},{},{},{clf}",
            opt(m.compactness[k]),
            opt(m.feature_separability[k])
        );
    }
    s
}

pub fn metrics_summary(m: &MetricReport) -> String {
    let fmt = |name: &str, x: Option<Summary>| match x {
        Some(v) => format!("{name}: {:.3} ± {:.3}", v.mean, v.std),
        None => format!("{name}: n/a"),
    };
    format!(
        "{}\n{}\n{}\nskipped zero-vector pairs: {}\n",
        fmt("compactness", m.compactness_summary),
        fmt("feature separability", m.feature_separability_summary),
        fmt("classifier separability", Some(m.classifier_separability_summary)),
        m.skipped_pairs
    )
}

pub fn matrix_csv(s: &SeparabilityMatrix) -> String {
    let k = s.num_classes();
    let mut out = String::from("class");
    for j in 0..k {
        let _ = write!(out, ",{j}");
    }
    out.push('\n');
    for j in 0..k {
        let _ = write!(out, "{j}");
        for v in s.row(j) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Aligned accuracy table with `Many`, `Med.`, `Few` and `All` columns.
pub fn accuracy_table(rows: &[(String, [Option<f64>; 4])]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$} {:>7} {:>7} {:>7} {:>7}\n", "Method", "Many", "Med.", "Few", "All");
    for (name, v) in rows {
        let _ = writeln!(
            s,
            "{name:<width$} {:>7} {:>7} {:>7} {:>7}",
            pct(v[0]),
            pct(v[1]),
            pct(v[2]),
            pct(v[3])
        );
    }
    s
}

fn eval_row(e: &EvalReport) -> [Option<f64>; 4] {
    [e.acc_many, e.acc_medium, e.acc_few, Some(e.acc_all)]
}

/// Feature dump of the training set plus the classifier block.
pub fn checkpoint_text(model: &Model, ds: &Dataset) -> Result<String> {
    Ok(dump::format_samples(&model.features(&ds.train), ds.num_classes())? + &dump::format_classifier(&model.classifier))
}

fn write_metrics(dir: &Path, prefix: &str, m: &MetricReport, s: &SeparabilityMatrix) -> Result<()> {
    write_file(&dir.join(format!("{prefix}metrics.csv")), &metrics_csv(m))?;
    write_file(&dir.join(format!("{prefix}metrics_summary.txt")), &metrics_summary(m))?;
    write_file(&dir.join(format!("{prefix}separability_matrix.csv")), &matrix_csv(s))
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (ds, split) = prepare(cfg)?;
    ctx.say(format!(
        "training on {} samples, {} classes, loss {} (lambda_ss {}, lambda_cc {})",
        ds.train.len(),
        ds.num_classes(),
        cfg.loss.family,
        cfg.loss.lambda_ss,
        cfg.loss.lambda_cc
    ));
    let res = train::run(&ds, &split, &cfg.model, &cfg.train, &cfg.loss)?;
    let out = &ctx.out;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    write_file(&out.join("history.csv"), &history_csv(&res.history_stage1))?;
    write_file(&out.join("metric_history.csv"), &metric_history_csv(&res.history_stage1))?;
    let base = out.join("model.ckpt");
    write_file(&checkpoint_path(&base, 1), &checkpoint_text(&res.model_stage1, &ds)?)?;
    if let (Some(m2), Some(h2)) = (&res.model_stage2, &res.history_stage2) {
        write_file(&out.join("history.s2.csv"), &history_csv(h2))?;
        write_file(&checkpoint_path(&base, 2), &checkpoint_text(m2, &ds)?)?;
    }
    for (prefix, model) in [("s1_", Some(&res.model_stage1)), ("s2_", res.model_stage2.as_ref())] {
        if let Some(m) = model {
            let feats = m.features(&ds.train);
            let report = geometry::metric_report(&feats, &m.classifier)?;
            let matrix = geometry::separability_matrix(&m.classifier)?;
            write_metrics(out, prefix, &report, &matrix)?;
        }
    }
    let table = accuracy_table(&[(final_label(&res), eval_row(&res.eval))]);
    let mut per_class = String::from("class,train_count,subset,accuracy\n");
    for (k, a) in res.eval.per_class_accuracy.iter().enumerate() {
        let _ = writeln!(
            per_class,
            "{k},{},{:?},{}",
            ds.train_counts[k],
            split.subset_of(k),
            opt(*a)
        );
    }
    write_file(&out.join("per_class_accuracy.csv"), &per_class)?;
    write_file(&out.join("eval.txt"), &table)?;
    ctx.say(table);
    Ok(())
}

fn final_label(res: &RunResult) -> String {
    if res.model_stage2.is_some() {
        "stage 2".into()
    } else {
        "stage 1".into()
    }
}

/// One finished ablation run.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub outcome: std::result::Result<(EvalReport, Summary), String>,
}

/// Runs every (variant, seed) pair; failures are recorded per run.
pub fn run_ablation(cfg: &ExperimentConfig, variants: &[AblationVariant], seeds: &[u64]) -> Vec<AblationRun> {
    let jobs: Vec<(&AblationVariant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(v, seed)| {
            let outcome = (|| -> Result<(EvalReport, Summary)> {
                let mut c = cfg.clone();
                c.data.seed = seed;
                c.train.seed = seed;
                c.train.metric_every = 0;
                c.loss = v.loss_config(&cfg.loss, cfg.ablation.lambda_ss, cfg.ablation.lambda_cc);
                let (ds, split) = prepare(&c)?;
                let res = train::run(&ds, &split, &c.model, &c.train, &c.loss)?;
                let clf = &res.model_stage1.classifier;
                let sep = Summary::of(geometry::classifier_separability(clf)?).expect("K >= 2");
                Ok((res.eval, sep))
            })()
            .map_err(|e| e.to_string());
            AblationRun {
                variant: v.name(),
                seed,
                outcome,
            }
        })
        .collect()
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cmd_ablation(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let variants = cfg.ablation.resolved_variants();
    let runs = run_ablation(cfg, &variants, &cfg.ablation.seeds);
    let mut csv = String::from("variant,seed,status,many,medium,few,all,clf_sep_std_stage1\n");
    for r in &runs {
        match &r.outcome {
            Ok((e, sep)) => {
                let _ = writeln!(
                    csv,
                    "{},{},ok,{},{},{},{},{}",
                    r.variant,
                    r.seed,
                    opt(e.acc_many),
                    opt(e.acc_medium),
                    opt(e.acc_few),
                    e.acc_all,
                    sep.std
                );
            }
            Err(msg) => {
                let _ = writeln!(csv, "{},{},\"failed: {}\",,,,,", r.variant, r.seed, msg.replace('"', "'"));
            }
        }
    }
    let mut rows = Vec::new();
    let mut summary = String::from("variant,runs_ok,many,medium,few,all\n");
    for v in &variants {
        let name = v.name();
        let ok: Vec<&EvalReport> = runs
            .iter()
            .filter(|r| r.variant == name)
            .filter_map(|r| r.outcome.as_ref().ok().map(|(e, _)| e))
            .collect();
        let row = [
            mean_of(ok.iter().map(|e| e.acc_many)),
            mean_of(ok.iter().map(|e| e.acc_medium)),
            mean_of(ok.iter().map(|e| e.acc_few)),
            mean_of(ok.iter().map(|e| Some(e.acc_all))),
        ];
        let _ = writeln!(
            summary,
            "{name},{},{},{},{},{}",
            ok.len(),
            opt(row[0]),
            opt(row[1]),
            opt(row[2]),
            opt(row[3])
        );
        rows.push((name, row));
    }
    write_file(&ctx.out.join("ablation_runs.csv"), &csv)?;
    write_file(&ctx.out.join("ablation_summary.csv"), &summary)?;
    let table = accuracy_table(&rows);
    write_file(&ctx.out.join("ablation_table.txt"), &table)?;
    ctx.say(table);
    for r in &runs {
        if let Err(msg) = &r.outcome {
            eprintln!("warning: {} seed {} failed: {msg}", r.variant, r.seed);
        }
    }
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, settings: &grads::GradCheckSettings) -> Result<()> {
    let reports = grads::gradcheck_suite(settings)?;
    let mut text = String::from("op,seed,max_rel_err,max_abs_err,worst_index,status\n");
    for r in grads::worst_per_op(&reports) {
        let _ = writeln!(
            text,
            "{},{},{:.3e},{:.3e},{},{}",
            r.op,
            r.seed.map_or_else(String::new, |s| s.to_string()),
            r.max_rel_err,
            r.max_abs_err,
            r.worst_index,
            if r.passed(settings.tol) { "pass" } else { "FAIL" }
        );
    }
    write_file(&ctx.out.join("gradcheck.csv"), &text)?;
    ctx.say(text.trim_end());
    grads::suite_verdict(&reports, settings.tol)
}

fn cmd_metrics(ctx: &Ctx, features: &Path, classifier: &Path) -> Result<()> {
    let samples = dump::read_samples(features)?;
    let clf = dump::read_classifier(classifier)?;
    if samples.num_classes != clf.num_classes() {
        return Err(Error::config(format!(
            "feature dump declares {} classes, classifier has {}",
            samples.num_classes,
            clf.num_classes()
        )));
    }
    if samples.dim != clf.dim() {
        return Err(Error::DimensionMismatch {
            expected: clf.dim(),
            got: samples.dim,
        });
    }
    let report = geometry::metric_report(&samples.samples, &clf)?;
    let matrix = geometry::separability_matrix(&clf)?;
    write_metrics(&ctx.out, "", &report, &matrix)?;
    ctx.say(metrics_summary(&report).trim_end());
    Ok(())
}

/// Trajectory of one uniform-learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformTrajectory {
    /// `(loss, max pairwise cosine deviation)` before each step and after the last.
    pub points: Vec<(f64, f64)>,
    pub final_weights: Matrix,
}

impl UniformTrajectory {
    pub fn final_deviation(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.1)
    }
}

/// Projected gradient descent on the mean BCE uniform loss over `K` unit
/// vectors in `R^d`, from Gaussian initializations.
pub fn simulate_uniform_learning(cfg: &EtfSimConfig) -> Result<Vec<UniformTrajectory>> {
    cfg.validate()?;
    (0..cfg.inits)
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, &[tags::ETF, i as u64]);
            let mut w = Matrix::zeros(cfg.classes, cfg.dim);
            for k in 0..cfg.classes {
                loop {
                    let v: Vec<f64> = (0..cfg.dim)
                        .map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
                        .collect();
                    let n = norm(&v);
                    if n > 1e-12 {
                        w.row_mut(k).iter_mut().zip(&v).for_each(|(o, x)| *o = x / n);
                        break;
                    }
                }
            }
            let mut points = Vec::with_capacity(cfg.steps + 1);
            let measure = |w: &Matrix| {
                (
                    losses::uniform_mean_rows(w, Family::Bce, cfg.include_positive),
                    geometry::max_pairwise_cos_deviation(w),
                )
            };
            for _ in 0..cfg.steps {
                points.push(measure(&w));
                let g = project_rows_tangent(&w, &grad_uniform_rows(&w, ActivationKind::SigmoidBce, cfg.include_positive));
                for k in 0..cfg.classes {
                    axpy(-cfg.lr, g.row(k), w.row_mut(k));
                    let n = norm(w.row(k));
                    w.row_mut(k).iter_mut().for_each(|x| *x /= n);
                }
            }
            points.push(measure(&w));
            Ok(UniformTrajectory {
                points,
                final_weights: w,
            })
        })
        .collect()
}

fn cmd_etf_sim(ctx: &Ctx, cfg: &EtfSimConfig) -> Result<()> {
    if cfg.dim + 1 < cfg.classes {
        eprintln!(
            "warning: dim {} < classes - 1 = {}; a simplex ETF is not realizable, reporting the best deviation reached",
            cfg.dim,
            cfg.classes - 1
        );
    }
    let runs = simulate_uniform_learning(cfg)?;
    let mut csv = String::from("init,step,loss,max_cos_deviation\n");
    for (i, r) in runs.iter().enumerate() {
        for (t, (l, d)) in r.points.iter().enumerate() {
            let _ = writeln!(csv, "{i},{t},{l},{d}");
        }
    }
    write_file(&ctx.out.join("etf_sim.csv"), &csv)?;
    let worst = runs.iter().map(UniformTrajectory::final_deviation).fold(0.0, f64::max);
    ctx.say(format!(
        "K={} d={} steps={} lr={}: worst final max|cos + 1/(K-1)| over {} inits = {:.3e}",
        cfg.classes, cfg.dim, cfg.steps, cfg.lr, cfg.inits, worst
    ));
    Ok(())
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dagerc_core::corpus::Corpus;
use dagerc_core::daggraph::{build_variant, export_dot, DagVariant};
use dagerc_core::model::{loss_and_grad_with, param_count, Ablation, Model, ModelConfig};
use dagerc_core::numerics::{grad_check, GradCheckOptions, ParamSet};
use dagerc_core::pipeline::{
    evaluate, sweep_ablations, sweep_layers, sweep_variants, train_with, variant_stats, Prepared, TrainConfig,
};
use dagerc_core::synth::{xor_corpus, SynthConfig};
use dagerc_core::{metrics::EvalReport, ConvDag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "dagerc", version, about = "Conversation DAGs and DAG-ERC training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the DAG of every conversation and write it as JSON lines or DOT.
    BuildDag {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        dag: DagArgs,
        #[arg(long, value_enum, default_value_t = DagFormat::Json)]
        format: DagFormat,
        /// Only this conversation.
        #[arg(long)]
        conversation: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Attach hashed bag-of-words features.
    Featurize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        d_feat: usize,
        #[arg(long, default_value_t = 0)]
        salt: i64,
        /// Replace features that are already present.
        #[arg(long)]
        overwrite: bool,
    },
    /// Write the synthetic same-speaker XOR corpus.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2000)]
        dialogs: usize,
        #[arg(long, default_value_t = 8)]
        length: usize,
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long, default_value_t = 32)]
        d_feat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per seed, keeping the best validation epoch.
    Train {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
        /// Model file; with several seeds, `-seed{N}` is inserted before the extension.
        #[arg(long)]
        out: PathBuf,
        /// Write the run logs as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        dag: DagArgs,
        #[arg(long)]
        json: bool,
        /// Write per-conversation forward traces (attention, states, probabilities) as JSON lines.
        #[arg(long)]
        trace_dump: Option<PathBuf>,
    },
    /// Accuracy on utterances with and without an emotional shift.
    ShiftReport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        dag: DagArgs,
    },
    /// Train one model per depth.
    SweepLayers {
        #[command(flatten)]
        data: SplitData,
        #[command(flatten)]
        opts: TrainOpts,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
        depths: Vec<usize>,
    },
    /// Train the full model and each single ablation.
    SweepAblations {
        #[command(flatten)]
        data: SplitData,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Compare DAG variants: predecessor statistics and, unless --stats-only, trained scores.
    SweepVariants {
        /// Corpora to count over with --stats-only.
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        stats_only: bool,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Compare model gradients with central finite differences on a random instance.
    GradCheck {
        #[arg(long, default_value_t = 4)]
        utterances: usize,
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long, default_value_t = 8)]
        d_h: usize,
        #[arg(long, default_value_t = 6)]
        d_feat: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = AblationArg::Full)]
        ablation: AblationArg,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 32)]
        entries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DagFormat {
    Json,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoRelTrans,
    NoNodal,
    NoContextual,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::FULL,
            AblationArg::NoRelTrans => Ablation::NO_RELATION_TRANSFORM,
            AblationArg::NoNodal => Ablation::NO_NODAL_UNIT,
            AblationArg::NoContextual => Ablation::NO_CONTEXTUAL_UNIT,
        }
    }
}

#[derive(Args)]
struct DagArgs {
    #[arg(long, default_value_t = 1)]
    omega: usize,
    /// `ours:W`, `sequence`, `single_local:W` or `common:K`; defaults to `ours:<omega>`.
    #[arg(long)]
    variant: Option<DagVariant>,
}

impl DagArgs {
    fn variant(&self) -> DagVariant {
        self.variant.unwrap_or(DagVariant::Ours { omega: self.omega })
    }
}

#[derive(Args)]
struct TrainData {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
}

#[derive(Args)]
struct SplitData {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

impl SplitData {
    fn load(&self) -> Result<(Corpus, Corpus, Corpus)> {
        Ok((load(&self.train)?, load(&self.val)?, load(&self.test)?))
    }
}

/// Config file plus flag overrides.
#[derive(Args)]
struct TrainOpts {
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    omega: Option<usize>,
    #[arg(long)]
    variant: Option<DagVariant>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    quiet: bool,
}

impl TrainOpts {
    fn resolve(&self, train: &Corpus) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set!(epochs => epochs, lr => lr, batch_size => batch_size, d_h => model.d_h,
             layers => model.n_layers, dropout => model.dropout, weight_decay => weight_decay,
             omega => omega);
        if self.variant.is_some() {
            cfg.variant = self.variant;
        }
        if let Some(a) = self.ablation {
            cfg.model.ablation = a.into();
        }
        cfg.model.d_feat = train
            .d_feat()
            .context("training corpus has no features; run `dagerc featurize` first")?;
        cfg.model.n_classes = train.n_classes();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(path: &Path) -> Result<Corpus> {
    Corpus::load(path, None).with_context(|| format!("loading corpus {}", path.display()))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn seeded_path(path: &Path, seed: u64, n_seeds: usize) -> PathBuf {
    if n_seeds == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    path.with_file_name(name)
}

fn print_report(report: &EvalReport, json: bool) -> Result<()> {
    if json {
        println!("{}", report.to_json()?);
    } else {
        println!("{report}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildDag {
            input,
            dag,
            format,
            conversation,
            output,
        } => {
            let corpus = load(&input)?;
            let variant = dag.variant();
            let mut text = String::new();
            let mut found = false;
            for conv in corpus.conversations() {
                if conversation.as_deref().is_some_and(|id| id != conv.id()) {
                    continue;
                }
                found = true;
                let d = build_variant(conv, variant)?;
                match format {
                    DagFormat::Json => {
                        let mut v: serde_json::Value = serde_json::from_str(&d.to_dump_json())?;
                        v["id"] = conv.id().into();
                        text += &serde_json::to_string(&v)?;
                        text.push('\n');
                    }
                    DagFormat::Dot => text += &export_dot(&d, conv)?,
                }
            }
            if let (Some(id), false) = (&conversation, found) {
                bail!("no conversation with id `{id}`");
            }
            write_out(output.as_deref(), &text)
        }
        Command::Featurize {
            input,
            output,
            d_feat,
            salt,
            overwrite,
        } => {
            let corpus = load(&input)?.with_hashed_features(d_feat, salt, overwrite)?;
            corpus.save(&output)?;
            eprintln!(
                "featurized {} utterances in {} conversations (d_feat={d_feat})",
                corpus.n_utterances(),
                corpus.conversations().len()
            );
            Ok(())
        }
        Command::Synth {
            output,
            dialogs,
            length,
            speakers,
            d_feat,
            seed,
        } => {
            let corpus = xor_corpus(&SynthConfig {
                n_dialogs: dialogs,
                length,
                n_speakers: speakers,
                d_feat,
                salt: 0,
                seed,
            })?;
            corpus.save(&output)?;
            Ok(())
        }
        Command::Train {
            data,
            test,
            opts,
            out,
            log,
        } => {
            let (train_set, val_set) = (load(&data.train)?, load(&data.val)?);
            let test_set = test.as_deref().map(load).transpose()?;
            let cfg = opts.resolve(&train_set)?;
            let counts = param_count(&cfg.model)?;
            eprintln!("{} parameters, DAG {}", counts.total, cfg.dag_variant());
            let mut logs = Vec::new();
            let mut test_metrics = Vec::new();
            for &seed in &cfg.seeds {
                let (model, mut run_log) = train_with(&cfg, seed, &train_set, &val_set, |e| {
                    if !opts.quiet {
                        eprintln!(
                            "seed {seed} epoch {:>3}  loss {:>12.4}  val {:.4}  ({:.2}s)",
                            e.epoch, e.train_loss, e.val_metric, e.seconds
                        );
                    }
                })?;
                let path = seeded_path(&out, seed, cfg.seeds.len());
                model.save(&path)?;
                println!(
                    "seed {seed}: best epoch {} val {:.4} -> {}",
                    run_log.best_epoch,
                    run_log.best_val_metric,
                    path.display()
                );
                if let Some(t) = &test_set {
                    let report = evaluate(&model, t, cfg.dag_variant())?;
                    let m = cfg.select_metric.read(&report)?;
                    println!("seed {seed}: test {} {m:.4}", report.headline_name());
                    run_log.test_metric = Some(m);
                    test_metrics.push(m);
                }
                logs.push(run_log);
            }
            if test_metrics.len() > 1 {
                let mean = test_metrics.iter().sum::<f64>() / test_metrics.len() as f64;
                println!("mean test over {} seeds: {mean:.4}", test_metrics.len());
            }
            if let Some(p) = log {
                fs::write(&p, serde_json::to_string_pretty(&logs)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Command::Eval {
            model,
            input,
            dag,
            json,
            trace_dump,
        } => {
            let model = Model::load(&model)?;
            let corpus = load(&input)?;
            let report = evaluate(&model, &corpus, dag.variant())?;
            print_report(&report, json)?;
            if let Some(p) = trace_dump {
                let data = Prepared::new(&corpus, dag.variant(), model.config().d_feat)?;
                let mut text = String::new();
                for ((conv, f), d) in corpus.conversations().iter().zip(&data.features).zip(&data.dags) {
                    let trace = model.forward(f, d)?;
                    text += &serde_json::to_string(&serde_json::json!({"id": conv.id(), "trace": trace}))?;
                    text.push('\n');
                }
                fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Command::ShiftReport { model, input, dag } => {
            let model = Model::load(&model)?;
            let corpus = load(&input)?;
            let s = evaluate(&model, &corpus, dag.variant())?.shift;
            println!("{:<10} {:>8} {:>9}", "group", "count", "accuracy");
            println!("{:<10} {:>8} {:>9.4}", "shift", s.n_shift, s.acc_shift);
            println!("{:<10} {:>8} {:>9.4}", "no-shift", s.n_noshift, s.acc_noshift);
            println!("{:<10} {:>8}", "excluded", s.n_excluded);
            Ok(())
        }
        Command::SweepLayers { data, opts, depths } => {
            let (tr, va, te) = data.load()?;
            let cfg = opts.resolve(&tr)?;
            let rows = sweep_layers(&cfg, &tr, &va, &te, &depths)?;
            println!("{:>6} {:>12} {:>9} {:>9} {:>9}", "layers", "train loss", "val", "test", "test acc");
            for r in rows {
                println!(
                    "{:>6} {:>12.4} {:>9.4} {:>9.4} {:>9.4}",
                    r.n_layers, r.final_train_loss, r.best_val_metric, r.test_metric, r.test_accuracy
                );
            }
            Ok(())
        }
        Command::SweepAblations { data, opts } => {
            let (tr, va, te) = data.load()?;
            let cfg = opts.resolve(&tr)?;
            println!("{:<14} {:>9} {:>9} {:>9}", "model", "params", "test", "delta");
            for r in sweep_ablations(&cfg, &tr, &va, &te)? {
                println!("{:<14} {:>9} {:>9.4} {:>+9.4}", r.name, r.n_params, r.test_metric, r.delta);
            }
            Ok(())
        }
        Command::SweepVariants {
            input,
            stats_only,
            train,
            val,
            test,
            opts,
        } => {
            let rows = if stats_only {
                if input.is_empty() {
                    bail!("--stats-only needs at least one --input corpus");
                }
                let corpora = input.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
                variant_stats(&corpora.iter().collect::<Vec<_>>(), opts.omega.unwrap_or(1))?
            } else {
                let (Some(tr), Some(va), Some(te)) = (train, val, test) else {
                    bail!("training needs --train, --val and --test (or pass --stats-only)");
                };
                let (tr, va, te) = SplitData { train: tr, val: va, test: te }.load()?;
                let cfg = opts.resolve(&tr)?;
                sweep_variants(&cfg, &tr, &va, &te)?
            };
            println!("{:<22} {:>8} {:>10} {:>9} {:>9}", "variant", "dags", "# preds", "same %", "test");
            for r in rows {
                let edges = r.stats.relation_histogram.iter().sum::<usize>().max(1) as f64;
                let test = r.test_metric.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
                println!(
                    "{:<22} {:>8} {:>10.2} {:>9.1} {:>9}",
                    r.variant.to_string(),
                    r.stats.n_dags,
                    r.stats.avg_preds,
                    100.0 * r.stats.relation_histogram[1] as f64 / edges,
                    test
                );
            }
            Ok(())
        }
        Command::GradCheck {
            utterances,
            speakers,
            d_h,
            d_feat,
            layers,
            classes,
            ablation,
            eps,
            tol,
            entries,
            seed,
        } => {
            if utterances == 0 || speakers == 0 {
                bail!("--utterances and --speakers must be positive");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let names: Vec<String> = (0..utterances).map(|_| format!("s{}", rng.gen_range(0..speakers))).collect();
            let dag: ConvDag = dagerc_core::daggraph::build_dag_from_speakers(&names, 1)?;
            let features: Vec<Vec<f64>> = (0..utterances)
                .map(|_| (0..d_feat).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let labels: Vec<usize> = (0..utterances).map(|_| rng.gen_range(0..classes)).collect();
            let model = Model::new(ModelConfig {
                d_feat,
                d_h,
                n_layers: layers,
                n_classes: classes,
                dropout: 0.0,
                ablation: ablation.into(),
                seed,
            })?;
            let mut params = model.params().clone();
            let report = grad_check(
                &mut params,
                |p: &ParamSet| loss_and_grad_with(&model, p, &features, &dag, &labels, None),
                &GradCheckOptions {
                    eps,
                    tol,
                    entries_per_param: entries,
                    seed,
                },
            )?;
            println!("{:<24} {:>7} {:>12}", "parameter", "checked", "max rel err");
            for c in &report.params {
                let mark = if c.passed { "" } else { "  FAIL" };
                println!("{:<24} {:>7} {:>12.3e}{mark}", c.name, c.checked, c.max_rel_error);
            }
            println!("max relative error {:.3e} (tol {tol:e})", report.max_rel_error);
            if !report.passed {
                bail!("gradient check failed");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Training, evaluation and experiment sweeps.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::daggraph::{build_variant, dag_stats, ConvDag, DagStats, DagVariant};
use crate::metrics::EvalReport;
use crate::model::{param_count, Ablation, Model, ModelConfig};
use crate::numerics::{Gradients, Init, ParamId, ParamSet, Tape};
use crate::{Error, Result};

/// Validation metric used to pick the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    /// Micro-F1 excluding neutral if the corpus has a neutral class, else weighted F1.
    #[default]
    Auto,
    WeightedF1,
    MicroF1Excl,
    Accuracy,
}

impl SelectMetric {
    pub fn read(self, report: &EvalReport) -> Result<f64> {
        match self {
            SelectMetric::Auto => Ok(report.headline()),
            SelectMetric::WeightedF1 => Ok(report.weighted_f1),
            SelectMetric::Accuracy => Ok(report.accuracy),
            SelectMetric::MicroF1Excl => report
                .micro_f1_excl
                .ok_or_else(|| Error::invalid("micro_f1_excl needs a corpus with a neutral class")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Used when `variant` is unset.
    pub omega: usize,
    pub variant: Option<DagVariant>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub select_metric: SelectMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            omega: 1,
            variant: None,
            lr: 5e-4,
            batch_size: 8,
            epochs: 60,
            seeds: vec![0],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            select_metric: SelectMetric::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dag_variant().validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn dag_variant(&self) -> DagVariant {
        self.variant.unwrap_or(DagVariant::Ours { omega: self.omega })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Adam with bias correction and optional L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    ids: Vec<ParamId>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: zeros.clone(),
            v: zeros,
            ids,
        }
    }

    pub fn from_config(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            ..Self::new(params, cfg.lr)
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        if grads.len() != self.ids.len() || params.len() != self.ids.len() {
            return Err(Error::Dimension {
                context: "optimizer parameter count".into(),
                expected: self.ids.len(),
                found: grads.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id);
            let value = params.value_mut(id).data_mut();
            if g.len() != value.len() {
                return Err(Error::Dimension {
                    context: format!("gradient of parameter {k}"),
                    expected: value.len(),
                    found: g.len(),
                });
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..value.len() {
                let gj = g[j] + self.weight_decay * value[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                value[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Features, labels and cached DAGs of a corpus.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<Vec<usize>>,
    pub dags: Vec<ConvDag>,
}

impl Prepared {
    pub fn new(corpus: &Corpus, variant: DagVariant, d_feat: usize) -> Result<Self> {
        if let Some(d) = corpus.d_feat() {
            if d != d_feat {
                return Err(Error::Dimension {
                    context: "corpus feature size vs model d_feat".into(),
                    expected: d_feat,
                    found: d,
                });
            }
        }
        let mut out = Self {
            features: Vec::new(),
            labels: Vec::new(),
            dags: Vec::new(),
        };
        for conv in corpus.conversations() {
            out.features.push(conv.features()?.into_iter().map(<[f64]>::to_vec).collect());
            out.labels.push(conv.labels()?);
            out.dags.push(build_variant(conv, variant)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.dags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dags.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub test_metric: Option<f64>,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn check_compatible(a: &Corpus, b: &Corpus, model: &ModelConfig) -> Result<()> {
    if a.label_set() != b.label_set() {
        return Err(Error::invalid("train and validation corpora have different label sets"));
    }
    if a.n_classes() != model.n_classes {
        return Err(Error::Dimension {
            context: "corpus classes vs model n_classes".into(),
            expected: model.n_classes,
            found: a.n_classes(),
        });
    }
    Ok(())
}

/// Per-conversation dropout stream, independent of batch composition.
fn dropout_rng(seed: u64, epoch: usize, conversation: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | conversation as u64);
    rng
}

pub fn predict_all(model: &Model, data: &Prepared) -> Result<Vec<Vec<usize>>> {
    data.features
        .iter()
        .zip(&data.dags)
        .map(|(f, d)| model.predict(f, d))
        .collect()
}

pub fn evaluate_prepared(model: &Model, corpus: &Corpus, data: &Prepared) -> Result<EvalReport> {
    EvalReport::compute(corpus, &predict_all(model, data)?)
}

/// Eval-mode report of `model` on `corpus` with DAGs of `variant`.
pub fn evaluate(model: &Model, corpus: &Corpus, variant: DagVariant) -> Result<EvalReport> {
    let data = Prepared::new(corpus, variant, model.config().d_feat)?;
    evaluate_prepared(model, corpus, &data)
}

/// Trains with `seed` (which also seeds initialization) and returns the
/// model restored to its best validation epoch.
pub fn train(config: &TrainConfig, seed: u64, train_set: &Corpus, val_set: &Corpus) -> Result<(Model, RunLog)> {
    train_with(config, seed, train_set, val_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &TrainConfig,
    seed: u64,
    train_set: &Corpus,
    val_set: &Corpus,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, RunLog)> {
    config.validate()?;
    check_compatible(train_set, val_set, &config.model)?;
    let variant = config.dag_variant();
    let d_feat = config.model.d_feat;
    let train_data = Prepared::new(train_set, variant, d_feat)?;
    let val_data = Prepared::new(val_set, variant, d_feat)?;
    if train_data.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }

    let mut model = Model::new(ModelConfig {
        seed,
        ..config.model.clone()
    })?;
    let mut adam = Adam::from_config(model.params(), config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(u64::MAX);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    let mut log = RunLog {
        seed,
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_metric: f64::NEG_INFINITY,
        test_metric: None,
    };
    let mut best: Option<ParamSet> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(model.params());
            for &c in batch {
                let mut rng = dropout_rng(seed, epoch, c);
                let (loss, g) = model.loss_and_grad(
                    &train_data.features[c],
                    &train_data.dags[c],
                    &train_data.labels[c],
                    Some(&mut rng),
                )?;
                if !loss.is_finite() || !g.is_finite() {
                    return Err(Error::Diverged { epoch: epoch + 1, loss });
                }
                epoch_loss += loss;
                grads.add_assign(&g)?;
            }
            adam.step(model.params_mut(), &grads)?;
        }
        let report = evaluate_prepared(&model, val_set, &val_data)?;
        let val_metric = config.select_metric.read(&report)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: epoch_loss,
            val_metric,
            val_accuracy: report.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        if val_metric > log.best_val_metric {
            log.best_val_metric = val_metric;
            log.best_epoch = epoch + 1;
            best = Some(model.params().clone());
        }
        log.epochs.push(entry);
    }
    if let Some(best) = best {
        *model.params_mut() = best;
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRun {
    pub log: RunLog,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedRun>,
    /// Arithmetic mean of the per-seed test metrics.
    pub mean_test_metric: f64,
}

/// Trains once per configured seed and evaluates each best checkpoint on `test`.
pub fn run_seeds(config: &TrainConfig, train_set: &Corpus, val_set: &Corpus, test: &Corpus) -> Result<MultiSeedReport> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (model, mut log) = train(config, seed, train_set, val_set)?;
        let report = evaluate(&model, test, config.dag_variant())?;
        log.test_metric = Some(config.select_metric.read(&report)?);
        runs.push(SeedRun { log, test: report });
    }
    let mean_test_metric = mean(runs.iter().filter_map(|r| r.log.test_metric));
    Ok(MultiSeedReport {
        runs,
        mean_test_metric,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub n_layers: usize,
    pub final_train_loss: f64,
    pub best_val_metric: f64,
    pub test_metric: f64,
    pub test_accuracy: f64,
}

impl LayerRow {
    pub fn is_finite(&self) -> bool {
        [self.final_train_loss, self.best_val_metric, self.test_metric, self.test_accuracy]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One run per depth with the first configured seed, sorted by depth.
pub fn sweep_layers(
    config: &TrainConfig,
    train_set: &Corpus,
    val_set: &Corpus,
    test: &Corpus,
    depths: &[usize],
) -> Result<Vec<LayerRow>> {
    if depths.is_empty() {
        return Err(Error::invalid("layer list must not be empty"));
    }
    let mut depths = depths.to_vec();
    depths.sort_unstable();
    depths.dedup();
    let seed = config.seeds.first().copied().unwrap_or(0);
    let mut rows = Vec::with_capacity(depths.len());
    for n_layers in depths {
        let cfg = TrainConfig {
            model: ModelConfig {
                n_layers,
                ..config.model.clone()
            },
            ..config.clone()
        };
        let (model, log) = train(&cfg, seed, train_set, val_set)?;
        let report = evaluate(&model, test, cfg.dag_variant())?;
        let row = LayerRow {
            n_layers,
            final_train_loss: log.epochs.last().map_or(f64::NAN, |e| e.train_loss),
            best_val_metric: log.best_val_metric,
            test_metric: cfg.select_metric.read(&report)?,
            test_accuracy: report.accuracy,
        };
        if !row.is_finite() {
            return Err(Error::NonFinite(format!("layer sweep at depth {n_layers}")));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    pub n_params: usize,
    pub test_metric: f64,
    /// Relative to the full model (first row).
    pub delta: f64,
}

/// Trains the full model and each single ablation with identical seeds.
pub fn sweep_ablations(config: &TrainConfig, train_set: &Corpus, val_set: &Corpus, test: &Corpus) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::with_capacity(4);
    for (name, ablation) in Ablation::table_rows() {
        let cfg = TrainConfig {
            model: ModelConfig {
                ablation,
                ..config.model.clone()
            },
            ..config.clone()
        };
        let report = run_seeds(&cfg, train_set, val_set, test)?;
        let full = rows.first().map_or(report.mean_test_metric, |r| r.test_metric);
        rows.push(AblationRow {
            name: name.to_string(),
            ablation,
            n_params: param_count(&cfg.model)?.total,
            test_metric: report.mean_test_metric,
            delta: report.mean_test_metric - full,
        });
    }
    Ok(rows)
}

/// The DAG variants compared in the structure study, in table order.
pub fn variant_table(omega: usize) -> Vec<DagVariant> {
    vec![
        DagVariant::Sequence,
        DagVariant::SingleLocal { omega },
        DagVariant::Common { kappa: 2 },
        DagVariant::Common { kappa: 4 },
        DagVariant::Common { kappa: 6 },
        DagVariant::Ours { omega: 1 },
        DagVariant::Ours { omega: 2 },
        DagVariant::Ours { omega: 3 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: DagVariant,
    pub stats: DagStats,
    pub test_metric: Option<f64>,
}

/// Predecessor statistics of every variant over `corpora`.
pub fn variant_stats(corpora: &[&Corpus], omega: usize) -> Result<Vec<VariantRow>> {
    variant_table(omega)
        .into_iter()
        .map(|variant| {
            let dags = corpora
                .iter()
                .flat_map(|c| c.conversations())
                .map(|conv| build_variant(conv, variant))
                .collect::<Result<Vec<_>>>()?;
            Ok(VariantRow {
                variant,
                stats: dag_stats(&dags)?,
                test_metric: None,
            })
        })
        .collect()
}

/// Statistics plus a trained test metric for every variant.
pub fn sweep_variants(config: &TrainConfig, train_set: &Corpus, val_set: &Corpus, test: &Corpus) -> Result<Vec<VariantRow>> {
    let mut rows = variant_stats(&[train_set, val_set, test], config.omega)?;
    for row in &mut rows {
        let cfg = TrainConfig {
            variant: Some(row.variant),
            ..config.clone()
        };
        row.test_metric = Some(run_seeds(&cfg, train_set, val_set, test)?.mean_test_metric);
    }
    Ok(rows)
}

/// Softmax regression on single-utterance features. It never sees context,
/// so it bounds what the features alone explain.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    params: ParamSet,
    w: ParamId,
    b: ParamId,
}

impl LinearBaseline {
    pub fn fit(corpus: &Corpus, epochs: usize, lr: f64, seed: u64) -> Result<Self> {
        let d_feat = corpus
            .d_feat()
            .ok_or_else(|| Error::invalid("baseline needs a featurized corpus"))?;
        let mut samples = Vec::with_capacity(corpus.n_utterances());
        for conv in corpus.conversations() {
            for (f, l) in conv.features()?.into_iter().zip(conv.labels()?) {
                samples.push((f.to_vec(), l));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let w = params.add("baseline.W", corpus.n_classes(), d_feat, Init::FanIn, &mut rng)?;
        let b = params.add("baseline.b", corpus.n_classes(), 1, Init::Zeros, &mut rng)?;
        let mut adam = Adam::new(&params, lr);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(64) {
                let mut tape = Tape::new();
                let mut terms = Vec::with_capacity(batch.len());
                for &k in batch {
                    let (f, l) = &samples[k];
                    let x = tape.constant(f.clone())?;
                    let logits = tape.linear(&params, w, x, Some(b))?;
                    let p = tape.softmax(logits)?;
                    terms.push(tape.cross_entropy(p, *l)?);
                }
                let total = tape.sum(&terms)?;
                let grads = tape.backward(total, &params)?;
                adam.step(&mut params, &grads)?;
            }
        }
        Ok(Self { params, w, b })
    }

    pub fn predict(&self, feature: &[f64]) -> Result<usize> {
        let logits = crate::numerics::linear(self.params.value(self.w), feature, Some(self.params.value(self.b).data()))?;
        Ok(crate::model::argmax(&logits))
    }

    pub fn accuracy(&self, corpus: &Corpus) -> Result<f64> {
        let (mut hit, mut n) = (0usize, 0usize);
        for conv in corpus.conversations() {
            for (f, l) in conv.features()?.into_iter().zip(conv.labels()?) {
                hit += usize::from(self.predict(f)? == l);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("baseline accuracy on an empty corpus"));
        }
        Ok(hit as f64 / n as f64)
    }
}

//! Training under a fixed or dynamic token regime, the train-regime ×
//! inference-count accuracy matrix, and the token-proportion ablation.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::cost::decimal;
use crate::decoder::{accuracy, loss, Accuracy, Decoder, DecoderConfig, VisionLanguageModel};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::projector::{token_side, ProjectorConfig, ProjectorDims, ProjectorRegistry};
use crate::rng::SeedRng;
use crate::schedule::{plan_epoch, EpochPlan, TokenSchedule};
use crate::synth::{SynthConfig, SynthCorpus, PROMPT_LEN};
use crate::tensor::Tape;

const DATA_STREAM: u64 = 0xDA7A;
const DECODER_INIT_STREAM: u64 = 0xDEC0;

/// How the per-batch token count is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Regime {
    Fixed(usize),
    Dynamic(TokenSchedule),
}

impl Regime {
    pub fn schedule(&self) -> Result<TokenSchedule> {
        match self {
            Regime::Fixed(n) => TokenSchedule::fixed(*n),
            Regime::Dynamic(s) => Ok(s.clone()),
        }
    }

    pub fn max_count(&self) -> usize {
        match self {
            Regime::Fixed(n) => *n,
            Regime::Dynamic(s) => s.counts().iter().copied().max().unwrap_or(0),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Fixed(n) => write!(f, "fixed-{n}"),
            Regime::Dynamic(_) => f.write_str("dynamic"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `fixed` or `dynamic`.
    pub regime: String,
    pub fixed_count: usize,
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub schedule_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub projector: String,
    pub gate: String,
    pub c_text: usize,
    /// Projector hidden width; 0 means `c_text`.
    pub hidden: usize,
    pub blocks: usize,
    pub eval_counts: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: "dynamic".into(),
            fixed_count: 256,
            counts: vec![64, 144, 256],
            probs: vec![0.2, 0.3, 0.5],
            steps: 1000,
            batch_size: 8,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            init_seed: 0,
            data_seed: 0,
            schedule_seed: 0,
            corpus: None,
            projector: "adaptive".into(),
            gate: "sigmoid".into(),
            c_text: 64,
            hidden: 0,
            blocks: 2,
            eval_counts: vec![64, 100, 144, 196, 256],
        }
    }
}

impl TrainConfig {
    pub fn regime(&self) -> Result<Regime> {
        match self.regime.as_str() {
            "fixed" => {
                token_side(self.fixed_count)?;
                Ok(Regime::Fixed(self.fixed_count))
            }
            "dynamic" => Ok(Regime::Dynamic(TokenSchedule::new(&self.counts, &self.probs)?)),
            other => Err(Error::Unknown {
                kind: "regime",
                name: other.to_string(),
            }),
        }
    }

    pub fn with_regime(mut self, regime: &Regime) -> Self {
        match regime {
            Regime::Fixed(n) => {
                self.regime = "fixed".into();
                self.fixed_count = *n;
            }
            Regime::Dynamic(s) => {
                self.regime = "dynamic".into();
                self.counts = s.counts().to_vec();
                self.probs = s.probs().to_vec();
            }
        }
        self
    }

    /// Sets the init, data and schedule seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self.data_seed = seed;
        self.schedule_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.regime()?;
        let hp_ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if !hp_ok {
            return Err(Error::contract("invalid optimizer hyperparameters"));
        }
        if self.batch_size == 0 || self.c_text == 0 || self.blocks == 0 {
            return Err(Error::contract("batch_size, c_text and blocks must be positive"));
        }
        for &n in &self.eval_counts {
            token_side(n)?;
        }
        self.gate.parse::<crate::projector::GateKind>()?;
        Ok(())
    }

    pub fn projector_config(&self, grid: &SynthConfig) -> Result<ProjectorConfig> {
        let mut dims = ProjectorDims::new(grid.channels, self.c_text);
        if self.hidden > 0 {
            dims = dims.with_hidden(self.hidden);
        }
        let mut cfg = ProjectorConfig::new(&self.projector, dims);
        cfg.gate = self.gate.parse()?;
        Ok(cfg)
    }

    /// Fresh model for grids described by `grid`.
    pub fn build_model(&self, grid: &SynthConfig) -> Result<VisionLanguageModel> {
        let projector = ProjectorRegistry::default().build(&self.projector_config(grid)?, self.init_seed)?;
        let vocab = grid.vocab();
        let mut dcfg = DecoderConfig::new(vocab.size(), grid.height * grid.width + PROMPT_LEN + 1);
        dcfg.c_text = self.c_text;
        dcfg.blocks = self.blocks;
        let seed = SeedRng::stream(self.init_seed, DECODER_INIT_STREAM).below(usize::MAX) as u64;
        Ok(VisionLanguageModel {
            projector,
            decoder: Decoder::init(dcfg, seed)?,
            vocab,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Adam with bias correction and a constant step size.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, sets: &[&ParamSet]) -> Self {
        let moments = sets
            .iter()
            .map(|s| {
                s.tensors()
                    .iter()
                    .map(|t| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
                    .collect()
            })
            .collect();
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            moments,
        }
    }

    /// One update from the accumulated gradients; gradients are then zeroed.
    pub fn step(&mut self, sets: &mut [&mut ParamSet]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (set, moments) in sets.iter_mut().zip(&mut self.moments) {
            for (t, (m, v)) in set.tensors_mut().iter_mut().zip(moments.iter_mut()) {
                let g = t.grad().map(<[f64]>::to_vec).unwrap_or_default();
                if g.is_empty() {
                    continue;
                }
                for (i, w) in t.data_mut().iter_mut().enumerate() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
            set.zero_grad();
        }
    }
}

/// Epoch-wise shuffled batches over a corpus.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: SeedRng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            rng: SeedRng::stream(seed, DATA_STREAM),
            order: (0..len).collect(),
            cursor: len,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub count: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub regime: String,
    pub config: TrainConfig,
    pub losses: Vec<StepRecord>,
    pub plan: EpochPlan,
    pub vision_tokens: u64,
    pub wall_time: Duration,
    pub model: VisionLanguageModel,
}

impl RunReport {
    /// CSV with header `step,N,loss`.
    pub fn write_metrics<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "N", "loss"])?;
        for r in &self.losses {
            out.write_record([r.step.to_string(), r.count.to_string(), r.loss.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("metrics", e))
    }

    /// Mean loss over `window` steps ending at `step` (inclusive).
    pub fn smoothed_loss(&self, step: usize, window: usize) -> Option<f64> {
        let end = step.checked_add(1)?.min(self.losses.len());
        let start = end.checked_sub(window.max(1))?;
        let w = &self.losses[start..end];
        Some(w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64)
    }

    /// Writes `config.toml`, `metrics.csv`, `plan.csv`, `projector.ckpt`
    /// and `decoder.ckpt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
            let mut buf = Vec::new();
            f(&mut buf)?;
            let path = dir.join(name);
            std::fs::write(&path, buf).map_err(|e| Error::io(path, e))
        };
        write("config.toml", &|b| {
            b.extend_from_slice(self.config.to_toml().as_bytes());
            Ok(())
        })?;
        write("metrics.csv", &|b| self.write_metrics(b))?;
        write("plan.csv", &|b| self.plan.write_csv(b))?;
        save_model(&self.model, dir)
    }
}

pub fn save_model(model: &VisionLanguageModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.projector.save(&dir.join("projector.ckpt"))?;
    model.decoder.save(&dir.join("decoder.ckpt"))
}

pub fn load_model(dir: &Path, grid: &SynthConfig) -> Result<VisionLanguageModel> {
    let projector = ProjectorRegistry::default().load(&dir.join("projector.ckpt"))?;
    let decoder = Decoder::load(&dir.join("decoder.ckpt"))?;
    let vocab = grid.vocab();
    if decoder.config().vocab != vocab.size() {
        return Err(Error::format(
            "checkpoint",
            format!("decoder vocabulary {} does not match corpus ({})", decoder.config().vocab, vocab.size()),
        ));
    }
    Ok(VisionLanguageModel {
        projector,
        decoder,
        vocab,
    })
}

fn check_fits(count: usize, grid: &SynthConfig) -> Result<()> {
    let n = token_side(count)?;
    if n > grid.height.min(grid.width) {
        return Err(Error::UnsupportedUpsampling {
            n,
            height: grid.height,
            width: grid.width,
        });
    }
    Ok(())
}

/// Trains one model on `corpus`. Every batch uses a single token count from
/// the epoch plan.
pub fn train(config: &TrainConfig, corpus: &SynthCorpus) -> Result<RunReport> {
    train_with(config, corpus, |_| {})
}

/// [`train`] with a per-step callback.
pub fn train_with(config: &TrainConfig, corpus: &SynthCorpus, mut on_step: impl FnMut(&StepRecord)) -> Result<RunReport> {
    config.validate()?;
    let regime = config.regime()?;
    let schedule = regime.schedule()?;
    for &n in schedule.counts().iter().chain(&config.eval_counts) {
        check_fits(n, &corpus.config)?;
    }
    if corpus.is_empty() && config.steps > 0 {
        return Err(Error::contract("cannot train on an empty corpus"));
    }
    let start = Instant::now();
    let mut model = config.build_model(&corpus.config)?;
    let plan = if config.steps == 0 {
        EpochPlan {
            counts: Vec::new(),
            seed: config.schedule_seed,
        }
    } else {
        plan_epoch(&schedule, config.steps, config.schedule_seed)?
    };
    let mut sampler = BatchSampler::new(corpus.len(), config.data_seed);
    let mut adam = Adam::new(config, &[model.projector.params(), model.decoder.params()]);
    let mut losses = Vec::with_capacity(config.steps);
    let mut vision_tokens = 0u64;
    for (step, &count) in plan.counts.iter().enumerate() {
        let idx = sampler.next_batch(config.batch_size);
        let samples: Vec<_> = idx.iter().map(|&i| &corpus.samples[i]).collect();
        let targets: Vec<usize> = samples.iter().map(|s| s.answer).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let logits = model.logits(&mut tape, &bound, &samples, count)?;
        let l = loss(&mut tape, logits, &targets)?;
        let value = tape.value(l)[0];
        let grads = tape.backward(l)?;
        model.projector.params_mut().accumulate(&bound.projector, &grads)?;
        model.decoder.params_mut().accumulate(&bound.decoder, &grads)?;
        let grad_norm = model
            .projector
            .params()
            .grad_norm()
            .hypot(model.decoder.params().grad_norm());
        if !value.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: value,
                grad_norm,
            });
        }
        adam.step(&mut [model.projector.params_mut(), model.decoder.params_mut()]);
        vision_tokens += (count * samples.len()) as u64;
        let rec = StepRecord { step, count, loss: value };
        on_step(&rec);
        losses.push(rec);
    }
    Ok(RunReport {
        regime: regime.to_string(),
        config: config.clone(),
        losses,
        plan,
        vision_tokens,
        wall_time: start.elapsed(),
        model,
    })
}

/// Accuracy at each inference count.
pub fn evaluate(model: &VisionLanguageModel, corpus: &SynthCorpus, counts: &[usize]) -> Result<Vec<(usize, Accuracy)>> {
    counts
        .iter()
        .map(|&n| accuracy(model, corpus, n).map(|a| (n, a)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    pub train_regime: String,
    pub infer_count: usize,
    pub seed: u64,
    pub result: std::result::Result<Accuracy, String>,
}

/// Train-regime × inference-count accuracies, one block per seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OodMatrix {
    pub cells: Vec<MatrixCell>,
}

impl OodMatrix {
    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| c.result.is_ok())
    }

    pub fn get(&self, regime: &str, count: usize, seed: u64) -> Option<&Accuracy> {
        self.cells
            .iter()
            .find(|c| c.train_regime == regime && c.infer_count == count && c.seed == seed)
            .and_then(|c| c.result.as_ref().ok())
    }

    /// Max minus min overall accuracy of one regime across its eval counts.
    pub fn spread(&self, regime: &str, seed: u64) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.train_regime == regime && c.seed == seed)
            .map(|c| c.result.as_ref().map(|a| a.overall).ok())
            .collect::<Option<_>>()?;
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        (!accs.is_empty()).then_some(max - min)
    }

    /// CSV with header
    /// `train_regime,infer_N,accuracy,seed,coarse_accuracy,fine_accuracy,status`.
    /// Failed cells have empty accuracies and the error as status.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "train_regime",
            "infer_N",
            "accuracy",
            "seed",
            "coarse_accuracy",
            "fine_accuracy",
            "status",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.cells {
            let (acc, coarse, fine, status) = match &c.result {
                Ok(a) => (a.overall.to_string(), opt(a.coarse), opt(a.fine), "ok".to_string()),
                Err(e) => (String::new(), String::new(), String::new(), format!("incomplete: {e}")),
            };
            out.write_record([
                c.train_regime.clone(),
                c.infer_count.to_string(),
                acc,
                c.seed.to_string(),
                coarse,
                fine,
                status,
            ])?;
        }
        out.flush().map_err(|e| Error::io("matrix", e))
    }
}

/// Trains every `(seed, regime)` pair and evaluates it at every count.
/// A failed run leaves its row's cells marked incomplete; `on_run` sees each
/// successful report.
pub fn ood_matrix(
    base: &TrainConfig,
    regimes: &[Regime],
    seeds: &[u64],
    train_corpus: &SynthCorpus,
    eval_corpus: &SynthCorpus,
    eval_counts: &[usize],
    mut on_run: impl FnMut(&RunReport) -> Result<()>,
) -> Result<OodMatrix> {
    for &n in eval_counts {
        check_fits(n, &eval_corpus.config)?;
    }
    let mut matrix = OodMatrix::default();
    for &seed in seeds {
        for regime in regimes {
            let cfg = base.clone().with_regime(regime).with_seed(seed);
            let run = train(&cfg, train_corpus).and_then(|r| on_run(&r).map(|_| r));
            for &n in eval_counts {
                let result = match &run {
                    Ok(r) => accuracy(&r.model, eval_corpus, n).map_err(|e| e.to_string()),
                    Err(e) => Err(e.to_string()),
                };
                matrix.cells.push(MatrixCell {
                    train_regime: regime.to_string(),
                    infer_count: n,
                    seed,
                    result,
                });
            }
        }
    }
    Ok(matrix)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// Weights as written, e.g. `2:3:5`.
    pub proportion: String,
    pub expected_tokens: Ratio<i128>,
    /// Exact vision tokens consumed by the run.
    pub vision_tokens: u64,
    pub seed: u64,
    pub accuracies: Vec<(usize, Accuracy)>,
}

/// One dynamic run per weight vector over `counts`, evaluated at `counts`.
pub fn proportion_ablation(
    base: &TrainConfig,
    counts: &[usize],
    weights: &[Vec<u64>],
    seed: u64,
    train_corpus: &SynthCorpus,
    eval_corpus: &SynthCorpus,
    mut on_run: impl FnMut(&str, &RunReport) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(weights.len());
    for w in weights {
        let schedule = TokenSchedule::from_ratios(counts, w)?;
        let label = w.iter().map(u64::to_string).collect::<Vec<_>>().join(":");
        let cfg = base.clone().with_regime(&Regime::Dynamic(schedule.clone())).with_seed(seed);
        let run = train(&cfg, train_corpus)?;
        on_run(&label, &run)?;
        rows.push(AblationRow {
            proportion: label,
            expected_tokens: schedule.expected_tokens_exact(),
            vision_tokens: run.vision_tokens,
            seed,
            accuracies: evaluate(&run.model, eval_corpus, counts)?,
        });
    }
    Ok(rows)
}

/// CSV with header `proportion,expected_tokens,vision_tokens,seed,infer_N,accuracy`.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["proportion", "expected_tokens", "vision_tokens", "seed", "infer_N", "accuracy"])?;
    for r in rows {
        for (n, a) in &r.accuracies {
            out.write_record([
                r.proportion.clone(),
                decimal(&r.expected_tokens, 4),
                r.vision_tokens.to_string(),
                r.seed.to_string(),
                n.to_string(),
                a.overall.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("ablation", e))
}

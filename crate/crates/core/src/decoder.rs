//! A small pre-LayerNorm transformer decoder that reads
//! `[vision tokens ‖ prompt embeddings ‖ BOS]` and predicts the answer token
//! from the final position.
//!
//! Positions are learned and absolute; vision tokens occupy positions
//! `0..N`, so the text positions move with `N`.

use crate::checkpoint::{self, Manifest};
use crate::error::{Error, Result};
use crate::params::{uniform_matrix, Bound, ParamSet};
use crate::projector::{token_side, FeatureGrid, Projector};
use crate::rng::SeedRng;
use crate::synth::{SynthCorpus, SynthSample, TaskKind, Vocab};
use crate::tensor::{Tape, Tensor, Var};

pub const DECODER_LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub c_text: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub max_positions: usize,
}

impl DecoderConfig {
    pub fn new(vocab: usize, max_positions: usize) -> Self {
        Self {
            c_text: 64,
            blocks: 2,
            ffn_mult: 4,
            vocab,
            max_positions,
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new()
            .with("model", "decoder")
            .with("c_text", self.c_text)
            .with("blocks", self.blocks)
            .with("ffn_mult", self.ffn_mult)
            .with("vocab", self.vocab)
            .with("max_positions", self.max_positions)
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(Self {
            c_text: m.parse("c_text")?,
            blocks: m.parse("blocks")?,
            ffn_mult: m.parse("ffn_mult")?,
            vocab: m.parse("vocab")?,
            max_positions: m.parse("max_positions")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff1: usize,
    ff1_b: usize,
    ff2: usize,
    ff2_b: usize,
}

/// Decoder parameters plus the index layout used to find them on a tape.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    params: ParamSet,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
    head_b: usize,
}

/// One homogeneous batch: every sample's vision tokens have the same count.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub vision: Vec<Var>,
    pub prompts: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

impl Decoder {
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        let DecoderConfig {
            c_text: d,
            blocks,
            ffn_mult,
            vocab,
            max_positions,
        } = config;
        if d == 0 || blocks == 0 || ffn_mult == 0 || vocab == 0 || max_positions == 0 {
            return Err(Error::contract(format!("invalid decoder config {config:?}")));
        }
        let f = d * ffn_mult;
        let mut rng = SeedRng::new(seed);
        let mut p = ParamSet::new();
        let tok_emb = p.push("tok_emb", uniform_matrix(&mut rng, vocab, d, d));
        let pos_emb = p.push("pos_emb", uniform_matrix(&mut rng, max_positions, d, d));
        let mut block_idx = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let mut add = |name: &str, t: Tensor| p.push(format!("block{b}.{name}"), t);
            block_idx.push(BlockIdx {
                ln1_g: add("ln1_g", Tensor::full(vec![d], 1.0)),
                ln1_b: add("ln1_b", Tensor::zeros(vec![d])),
                wq: add("wq", uniform_matrix(&mut rng, d, d, d)),
                wk: add("wk", uniform_matrix(&mut rng, d, d, d)),
                wv: add("wv", uniform_matrix(&mut rng, d, d, d)),
                wo: add("wo", uniform_matrix(&mut rng, d, d, d)),
                ln2_g: add("ln2_g", Tensor::full(vec![d], 1.0)),
                ln2_b: add("ln2_b", Tensor::zeros(vec![d])),
                ff1: add("ff1", uniform_matrix(&mut rng, d, f, d)),
                ff1_b: add("ff1_b", Tensor::zeros(vec![f])),
                ff2: add("ff2", uniform_matrix(&mut rng, f, d, f)),
                ff2_b: add("ff2_b", Tensor::zeros(vec![d])),
            });
        }
        let lnf_g = p.push("lnf_g", Tensor::full(vec![d], 1.0));
        let lnf_b = p.push("lnf_b", Tensor::zeros(vec![d]));
        let head = p.push("head", uniform_matrix(&mut rng, vocab, d, d));
        let head_b = p.push("head_b", Tensor::zeros(vec![vocab]));
        Ok(Self {
            config,
            params: p,
            tok_emb,
            pos_emb,
            blocks: block_idx,
            lnf_g,
            lnf_b,
            head,
            head_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save_params(path, &self.config.manifest(), &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (m, tensors) = checkpoint::load(path)?;
        let mut d = Self::init(DecoderConfig::from_manifest(&m)?, 0)?;
        if m.require("params")? != d.params.names().join(",") {
            return Err(Error::format("decoder checkpoint", "parameter list mismatch"));
        }
        d.params.load_values(tensors)?;
        Ok(d)
    }

    /// Embeds `[vision ‖ prompt ‖ BOS]` with absolute positions.
    fn embed(&self, tape: &mut Tape, p: &Bound, vision: Var, text: &[usize]) -> Result<Var> {
        let n = tape.shape(vision)[0];
        let len = n + text.len();
        if len > self.config.max_positions {
            return Err(Error::contract(format!(
                "sequence of {len} exceeds {} positions",
                self.config.max_positions
            )));
        }
        if tape.shape(vision)[1..] != [self.config.c_text] {
            return Err(Error::dim("decoder input", tape.shape(vision), &[n, self.config.c_text]));
        }
        let text_emb = tape.gather_rows(p.var(self.tok_emb), text.to_vec())?;
        let x = tape.concat_rows(&[vision, text_emb])?;
        let pos = tape.gather_rows(p.var(self.pos_emb), (0..len).collect::<Vec<_>>())?;
        tape.add(x, pos)
    }

    fn attention_scale(&self) -> f64 {
        1.0 / (self.config.c_text as f64).sqrt()
    }

    fn ffn(&self, tape: &mut Tape, p: &Bound, b: &BlockIdx, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, p.var(b.ln2_g), p.var(b.ln2_b), DECODER_LN_EPS)?;
        let h = tape.matmul(h, p.var(b.ff1))?;
        let h = tape.add_row(h, p.var(b.ff1_b))?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, p.var(b.ff2))?;
        let h = tape.add_row(h, p.var(b.ff2_b))?;
        tape.add(x, h)
    }

    /// Causal block over every position.
    fn block(&self, tape: &mut Tape, p: &Bound, b: &BlockIdx, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, p.var(b.ln1_g), p.var(b.ln1_b), DECODER_LN_EPS)?;
        let q = tape.matmul(h, p.var(b.wq))?;
        let k = tape.matmul(h, p.var(b.wk))?;
        let v = tape.matmul(h, p.var(b.wv))?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, self.attention_scale());
        let a = tape.masked_softmax(s, 0)?;
        let o = tape.matmul(a, v)?;
        let o = tape.matmul(o, p.var(b.wo))?;
        let x = tape.add(x, o)?;
        self.ffn(tape, p, b, x)
    }

    /// Causal block evaluated for the final position only; equals the last
    /// row of [`block`](Self::block).
    fn block_last(&self, tape: &mut Tape, p: &Bound, b: &BlockIdx, x: Var) -> Result<Var> {
        let s_len = tape.shape(x)[0];
        let h = tape.layer_norm(x, p.var(b.ln1_g), p.var(b.ln1_b), DECODER_LN_EPS)?;
        let h_last = tape.slice_rows(h, s_len - 1, s_len)?;
        let x_last = tape.slice_rows(x, s_len - 1, s_len)?;
        let q = tape.matmul(h_last, p.var(b.wq))?;
        let k = tape.matmul(h, p.var(b.wk))?;
        let v = tape.matmul(h, p.var(b.wv))?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, self.attention_scale());
        let a = tape.softmax_rows(s)?;
        let o = tape.matmul(a, v)?;
        let o = tape.matmul(o, p.var(b.wo))?;
        let y = tape.add(x_last, o)?;
        self.ffn(tape, p, b, y)
    }

    fn head(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, p.var(self.lnf_g), p.var(self.lnf_b), DECODER_LN_EPS)?;
        let l = tape.matmul_nt(h, p.var(self.head))?;
        tape.add_row(l, p.var(self.head_b))
    }

    /// Logits at the final position of one sequence (`1×vocab`).
    pub fn sequence_logits(&self, tape: &mut Tape, p: &Bound, vision: Var, text: &[usize]) -> Result<Var> {
        let mut x = self.embed(tape, p, vision, text)?;
        let (last, rest) = self.blocks.split_last().expect("at least one block");
        for b in rest {
            x = self.block(tape, p, b, x)?;
        }
        let y = self.block_last(tape, p, last, x)?;
        self.head(tape, p, y)
    }

    /// Logits at every position (`S×vocab`), running all blocks in full.
    pub fn all_position_logits(&self, tape: &mut Tape, p: &Bound, vision: Var, text: &[usize]) -> Result<Var> {
        let mut x = self.embed(tape, p, vision, text)?;
        for b in &self.blocks {
            x = self.block(tape, p, b, x)?;
        }
        self.head(tape, p, x)
    }

    /// `B×vocab` logits read at each sequence's final (BOS) position.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &SequenceBatch, bos: usize) -> Result<Var> {
        let Some(&first) = batch.vision.first() else {
            return Err(Error::contract("empty batch"));
        };
        if batch.prompts.len() != batch.vision.len() {
            return Err(Error::contract("prompt count differs from vision count"));
        }
        let n = tape.shape(first)[0];
        if let Some(&v) = batch.vision.iter().find(|&&v| tape.shape(v)[0] != n) {
            return Err(Error::contract(format!(
                "heterogeneous batch: {} and {} vision tokens",
                n,
                tape.shape(v)[0]
            )));
        }
        let mut rows = Vec::with_capacity(batch.vision.len());
        for (&v, prompt) in batch.vision.iter().zip(&batch.prompts) {
            let mut text = prompt.clone();
            text.push(bos);
            rows.push(self.sequence_logits(tape, p, v, &text)?);
        }
        tape.concat_rows(&rows)
    }
}

/// Mean negative log-likelihood over the batch.
///
/// For a single answer token this is `-ln P(r | vision, text)`; longer
/// answers appear as additional rows of `logits` with one target each.
pub fn loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// Projector plus decoder.
#[derive(Debug, Clone)]
pub struct VisionLanguageModel {
    pub projector: Box<dyn Projector>,
    pub decoder: Decoder,
    pub vocab: Vocab,
}

/// Tape handles for both halves of a [`VisionLanguageModel`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub projector: Bound,
    pub decoder: Bound,
}

impl VisionLanguageModel {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let bind = |ps: &ParamSet, tape: &mut Tape| {
            if trainable {
                ps.bind(tape)
            } else {
                ps.bind_constant(tape)
            }
        };
        BoundModel {
            projector: bind(self.projector.params(), tape),
            decoder: bind(self.decoder.params(), tape),
        }
    }

    /// Records `B×vocab` logits for `samples` at token count `count`.
    pub fn logits(&self, tape: &mut Tape, bound: &BoundModel, samples: &[&SynthSample], count: usize) -> Result<Var> {
        let n = token_side(count)?;
        let mut batch = SequenceBatch {
            vision: Vec::with_capacity(samples.len()),
            prompts: Vec::with_capacity(samples.len()),
            targets: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            let g = s.grid.record(tape);
            batch.vision.push(self.projector.forward(tape, &bound.projector, g, n)?);
            batch.prompts.push(s.prompt.clone());
            batch.targets.push(s.answer);
        }
        self.decoder.forward(tape, &bound.decoder, &batch, self.vocab.bos())
    }

    /// Highest-scoring answer token; prompt and control tokens are never predicted.
    pub fn predict(&self, sample: &SynthSample, count: usize) -> Result<usize> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let logits = self.logits(&mut tape, &bound, &[sample], count)?;
        Ok(argmax(&tape.value(logits)[..self.vocab.classes]))
    }

    /// Vision tokens for a single grid, for inspection.
    pub fn project(&self, grid: &FeatureGrid, count: usize) -> Result<Tensor> {
        Ok(self.projector.project(grid, count)?.values)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Per-kind accuracy breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Accuracy {
    pub overall: f64,
    pub coarse: Option<f64>,
    pub fine: Option<f64>,
    pub samples: usize,
}

/// Argmax accuracy over `corpus` at inference token count `count`.
pub fn accuracy(model: &VisionLanguageModel, corpus: &SynthCorpus, count: usize) -> Result<Accuracy> {
    let side = token_side(count)?;
    if side > corpus.config.height.min(corpus.config.width) {
        return Err(Error::UnsupportedUpsampling {
            n: side,
            height: corpus.config.height,
            width: corpus.config.width,
        });
    }
    let (mut hits, mut totals) = ([0usize; 2], [0usize; 2]);
    for s in &corpus.samples {
        let k = match s.kind {
            TaskKind::Coarse => 0,
            TaskKind::Fine => 1,
        };
        totals[k] += 1;
        hits[k] += usize::from(model.predict(s, count)? == s.answer);
    }
    let frac = |h: usize, t: usize| (t > 0).then(|| h as f64 / t as f64);
    Ok(Accuracy {
        overall: frac(hits[0] + hits[1], totals[0] + totals[1]).unwrap_or(0.0),
        coarse: frac(hits[0], totals[0]),
        fine: frac(hits[1], totals[1]),
        samples: corpus.len(),
    })
}

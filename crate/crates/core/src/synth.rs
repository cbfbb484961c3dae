//! Synthetic vision-language tasks whose difficulty is set by spatial
//! granularity.
//!
//! Every grid cell carries `channels - coord_channels` pattern channels and
//! `coord_channels` noise-free coordinate channels (normalised row and
//! column in `[-1, 1]`), standing in for the positional content of encoder
//! features. With `marker_amplitude > 0` a last channel flags the cells of
//! planted patches, so a patch can be located without knowing its class.
//!
//! * **coarse**: every cell is `coarse_amplitude·p_k + noise`; the answer is
//!   `k`, recoverable from the global mean.
//! * **fine**: background noise plus a faint scene pattern over the whole
//!   grid, and one `patch_size²` patch per quadrant with an independent class.
//!   The prompt names a quadrant; the answer is the class planted there.
//!   Pooling to a single token mixes all four patches and the scene, so the
//!   answer is not recoverable at `N = 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_records, write_records, Manifest};
use crate::error::{Error, Result};
use crate::projector::{adaptive_avg_pool, FeatureGrid};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: &str = "synth-v1";

/// Number of prompt-token ids reserved after the answer tokens.
pub const PROMPT_TOKENS: usize = 8;
pub const PROMPT_LEN: usize = 2;

const SHUFFLE_STREAM: u64 = 0xC0;
const SAMPLE_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Coarse,
    Fine,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Coarse => "coarse",
            TaskKind::Fine => "fine",
        }
    }
}

/// Token ids: `0..K` answers, then the prompt tokens, then BOS and PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub classes: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.classes + PROMPT_TOKENS + 2
    }

    pub fn task(&self, kind: TaskKind) -> usize {
        self.classes
            + match kind {
                TaskKind::Coarse => 0,
                TaskKind::Fine => 1,
            }
    }

    pub fn quadrant(&self, q: usize) -> usize {
        assert!(q < 4);
        self.classes + 2 + q
    }

    pub fn whole_image(&self) -> usize {
        self.classes + 6
    }

    pub fn bos(&self) -> usize {
        self.classes + PROMPT_TOKENS
    }

    pub fn pad(&self) -> usize {
        self.classes + PROMPT_TOKENS + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub coord_channels: usize,
    pub classes: usize,
    pub noise_std: f64,
    pub coarse_amplitude: f64,
    pub fine_amplitude: f64,
    pub scene_amplitude: f64,
    pub marker_amplitude: f64,
    pub patch_size: usize,
    pub pattern_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            channels: 16,
            coord_channels: 2,
            classes: 8,
            noise_std: 0.9,
            coarse_amplitude: 0.5,
            fine_amplitude: 1.0,
            scene_amplitude: 0.3,
            marker_amplitude: 3.0,
            patch_size: 2,
            pattern_seed: 0x9A77_E2B5,
        }
    }
}

impl SynthConfig {
    pub fn pattern_channels(&self) -> usize {
        self.channels - self.coord_channels - self.marker_channels()
    }

    pub fn marker_channels(&self) -> usize {
        usize::from(self.marker_amplitude > 0.0)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            classes: self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.height >= 2
            && self.width >= 2
            && self.height.is_multiple_of(2)
            && self.width.is_multiple_of(2)
            && self.coord_channels <= 2
            && self.channels > self.coord_channels + self.marker_channels()
            && self.marker_amplitude >= 0.0
            && self.classes >= 2
            && self.patch_size >= 1
            && self.patch_size <= self.height / 2
            && self.patch_size <= self.width / 2
            && self.noise_std >= 0.0;
        if !ok {
            return Err(Error::contract(format!("invalid synthetic config {self:?}")));
        }
        Ok(())
    }

    fn write_manifest(&self, m: &mut Manifest) {
        m.set("height", self.height)
            .set("width", self.width)
            .set("channels", self.channels)
            .set("coord_channels", self.coord_channels)
            .set("classes", self.classes)
            .set("noise_std", self.noise_std)
            .set("coarse_amplitude", self.coarse_amplitude)
            .set("fine_amplitude", self.fine_amplitude)
            .set("scene_amplitude", self.scene_amplitude)
            .set("marker_amplitude", self.marker_amplitude)
            .set("patch_size", self.patch_size)
            .set("pattern_seed", self.pattern_seed);
    }

    fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(Self {
            height: m.parse("height")?,
            width: m.parse("width")?,
            channels: m.parse("channels")?,
            coord_channels: m.parse("coord_channels")?,
            classes: m.parse("classes")?,
            noise_std: m.parse("noise_std")?,
            coarse_amplitude: m.parse("coarse_amplitude")?,
            fine_amplitude: m.parse("fine_amplitude")?,
            scene_amplitude: m.parse("scene_amplitude")?,
            marker_amplitude: m.parse("marker_amplitude")?,
            patch_size: m.parse("patch_size")?,
            pattern_seed: m.parse("pattern_seed")?,
        })
    }
}

/// `K` sign patterns over the pattern channels, pairwise Hamming distance
/// at least a quarter of the width.
pub fn class_patterns(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let p = cfg.pattern_channels();
    let min_dist = (p / 4).max(1);
    let mut rng = SeedRng::new(cfg.pattern_seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    let mut attempts = 0;
    while out.len() < cfg.classes {
        let cand: Vec<f64> = (0..p)
            .map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
            .collect();
        let far = out
            .iter()
            .all(|q| q.iter().zip(&cand).filter(|(a, b)| a != b).count() >= min_dist);
        attempts += 1;
        if far || attempts > 10_000 {
            out.push(cand);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub grid: FeatureGrid,
    pub prompt: Vec<usize>,
    pub answer: usize,
    pub kind: TaskKind,
    /// Queried quadrant (fine tasks).
    pub quadrant: Option<usize>,
}

/// Sample generator with precomputed class patterns.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: SynthConfig,
    patterns: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let patterns = class_patterns(&cfg);
        Ok(Self { cfg, patterns })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn patterns(&self) -> &[Vec<f64>] {
        &self.patterns
    }

    fn base_grid(&self, rng: &mut SeedRng) -> Vec<f64> {
        let SynthConfig {
            height: h,
            width: w,
            channels: c,
            coord_channels: cc,
            noise_std,
            ..
        } = self.cfg;
        let p = self.cfg.pattern_channels();
        let mut data = vec![0.0; h * w * c];
        for r in 0..h {
            for col in 0..w {
                let cell = &mut data[(r * w + col) * c..(r * w + col + 1) * c];
                for v in &mut cell[..p] {
                    *v = noise_std * rng.normal();
                }
                let coords = [
                    2.0 * (r as f64 + 0.5) / h as f64 - 1.0,
                    2.0 * (col as f64 + 0.5) / w as f64 - 1.0,
                ];
                cell[p..p + cc].copy_from_slice(&coords[..cc]);
            }
        }
        data
    }

    fn add_pattern(&self, data: &mut [f64], class: usize, amp: f64, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
        let (w, c) = (self.cfg.width, self.cfg.channels);
        for r in rows {
            for col in cols.clone() {
                let cell = &mut data[(r * w + col) * c..];
                for (v, &s) in cell.iter_mut().zip(&self.patterns[class]) {
                    *v += amp * s;
                }
            }
        }
    }

    pub fn sample(&self, kind: TaskKind, rng: &mut SeedRng) -> SynthSample {
        let cfg = &self.cfg;
        let vocab = cfg.vocab();
        let mut data = self.base_grid(rng);
        let (answer, prompt, quadrant) = match kind {
            TaskKind::Coarse => {
                let k = rng.below(cfg.classes);
                self.add_pattern(&mut data, k, cfg.coarse_amplitude, 0..cfg.height, 0..cfg.width);
                (k, vec![vocab.task(kind), vocab.whole_image()], None)
            }
            TaskKind::Fine => {
                let scene = rng.below(cfg.classes);
                self.add_pattern(&mut data, scene, cfg.scene_amplitude, 0..cfg.height, 0..cfg.width);
                let (qh, qw, ps) = (cfg.height / 2, cfg.width / 2, cfg.patch_size);
                let mut classes = [0; 4];
                for (q, class) in classes.iter_mut().enumerate() {
                    *class = rng.below(cfg.classes);
                    let r = (q / 2) * qh + rng.below(qh - ps + 1);
                    let c = (q % 2) * qw + rng.below(qw - ps + 1);
                    self.add_pattern(&mut data, *class, cfg.fine_amplitude, r..r + ps, c..c + ps);
                    if cfg.marker_amplitude > 0.0 {
                        for rr in r..r + ps {
                            for cc in c..c + ps {
                                data[(rr * cfg.width + cc + 1) * cfg.channels - 1] = cfg.marker_amplitude;
                            }
                        }
                    }
                }
                let q = rng.below(4);
                (classes[q], vec![vocab.task(kind), vocab.quadrant(q)], Some(q))
            }
        };
        SynthSample {
            grid: FeatureGrid::new(cfg.height, cfg.width, cfg.channels, data).expect("config validated"),
            prompt,
            answer,
            kind,
            quadrant,
        }
    }

    /// Sample `index` of the corpus with the given seed; pure in `(seed, index)`.
    pub fn sample_at(&self, kind: TaskKind, seed: u64, index: usize) -> SynthSample {
        self.sample(kind, &mut SeedRng::stream(seed, SAMPLE_STREAM_BASE + index as u64))
    }

    fn best_class(&self, v: &[f64]) -> (usize, f64) {
        self.patterns
            .iter()
            .enumerate()
            .map(|(k, p)| (k, p.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
    }

    /// Nearest-pattern classifier with access to the full grid. Coarse: the
    /// channel-wise global mean. Fine: subtract the global mean, then take
    /// the best (cell, class) correlation inside the queried quadrant.
    pub fn oracle_predict(&self, s: &SynthSample) -> usize {
        let g = &s.grid;
        let p = self.cfg.pattern_channels();
        let mut mean = vec![0.0; p];
        for cell in g.data().chunks(g.channels()) {
            for (m, v) in mean.iter_mut().zip(cell) {
                *m += v / g.len() as f64;
            }
        }
        match s.quadrant {
            None => self.best_class(&mean).0,
            Some(q) => {
                let (qh, qw) = (g.height() / 2, g.width() / 2);
                let mut best = (0, f64::NEG_INFINITY);
                let mut centred = vec![0.0; p];
                for r in (q / 2) * qh..(q / 2 + 1) * qh {
                    for c in (q % 2) * qw..(q % 2 + 1) * qw {
                        for ((d, v), m) in centred.iter_mut().zip(g.cell(r, c)).zip(&mean) {
                            *d = v - m;
                        }
                        let cand = self.best_class(&centred);
                        if cand.1 > best.1 {
                            best = cand;
                        }
                    }
                }
                best.0
            }
        }
    }

    /// The same nearest-pattern rule on the grid pooled to a single token.
    pub fn pooled_oracle_predict(&self, s: &SynthSample) -> usize {
        let pooled = adaptive_avg_pool(&s.grid, 1).expect("n = 1 always fits");
        self.best_class(&pooled.values.data()[..self.cfg.pattern_channels()]).0
    }
}

pub fn gen_sample(generator: &Generator, kind: TaskKind, rng: &mut SeedRng) -> SynthSample {
    generator.sample(kind, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub samples: Vec<SynthSample>,
    pub seed: u64,
    pub mix: f64,
    pub version: String,
    pub config: SynthConfig,
}

/// `size` samples, `⌊mix·size⌋` of them coarse, in a seeded shuffled order.
pub fn gen_corpus(cfg: &SynthConfig, size: usize, mix: f64, seed: u64) -> Result<SynthCorpus> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::contract(format!("coarse fraction {mix} outside [0, 1]")));
    }
    let generator = Generator::new(cfg.clone())?;
    let coarse = (mix * size as f64).floor() as usize;
    let mut kinds: Vec<TaskKind> = (0..size)
        .map(|i| if i < coarse { TaskKind::Coarse } else { TaskKind::Fine })
        .collect();
    SeedRng::stream(seed, SHUFFLE_STREAM).shuffle(&mut kinds);
    let samples = kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| generator.sample_at(kind, seed, i))
        .collect();
    Ok(SynthCorpus {
        samples,
        seed,
        mix,
        version: GENERATOR_VERSION.to_string(),
        config: cfg.clone(),
    })
}

impl SynthCorpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new()
            .with("version", &self.version)
            .with("seed", self.seed)
            .with("size", self.samples.len())
            .with("mix", self.mix);
        self.config.write_manifest(&mut m);
        m
    }

    /// Manifest, then per sample a grid record `[H, W, C]` and a meta record
    /// `[kind, answer, quadrant or -1, prompt...]`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records = Vec::with_capacity(2 * self.samples.len());
        for s in &self.samples {
            records.push(s.grid.values().clone());
            let mut meta = vec![
                match s.kind {
                    TaskKind::Coarse => 0.0,
                    TaskKind::Fine => 1.0,
                },
                s.answer as f64,
                s.quadrant.map_or(-1.0, |q| q as f64),
            ];
            meta.extend(s.prompt.iter().map(|&t| t as f64));
            records.push(Tensor::new(vec![meta.len()], meta)?);
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_records(&mut w, &self.manifest(), &records)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (m, records) = read_records(&mut BufReader::new(file))?;
        let version = m.require("version")?.to_string();
        if version != GENERATOR_VERSION {
            return Err(Error::format("corpus", format!("unsupported version {version}")));
        }
        let config = SynthConfig::from_manifest(&m)?;
        let size: usize = m.parse("size")?;
        if records.len() != 2 * size {
            return Err(Error::format("corpus", format!("{} records for {size} samples", records.len())));
        }
        let mut samples = Vec::with_capacity(size);
        for pair in records.chunks(2) {
            let grid = FeatureGrid::from_tensor(pair[0].clone(), config.height, config.width)?;
            let meta = pair[1].data();
            let bad = || Error::format("corpus", "bad sample metadata");
            if meta.len() < 3 {
                return Err(bad());
            }
            let kind = match meta[0] as i64 {
                0 => TaskKind::Coarse,
                1 => TaskKind::Fine,
                _ => return Err(bad()),
            };
            samples.push(SynthSample {
                grid,
                kind,
                answer: meta[1] as usize,
                quadrant: (meta[2] >= 0.0).then_some(meta[2] as usize),
                prompt: meta[3..].iter().map(|&t| t as usize).collect(),
            });
        }
        Ok(Self {
            samples,
            seed: m.parse("seed")?,
            mix: m.parse("mix")?,
            version,
            config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> SynthConfig {
        SynthConfig {
            noise_std: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn coarse_without_noise_is_separable_by_global_mean() {
        let g = Generator::new(noiseless()).unwrap();
        let mut rng = SeedRng::new(4);
        for _ in 0..50 {
            let s = g.sample(TaskKind::Coarse, &mut rng);
            assert_eq!(g.pooled_oracle_predict(&s), s.answer);
            assert_eq!(g.oracle_predict(&s), s.answer);
        }
    }

    #[test]
    fn fine_without_noise_is_separable_on_the_full_grid() {
        let g = Generator::new(noiseless()).unwrap();
        let mut rng = SeedRng::new(5);
        for _ in 0..50 {
            let s = g.sample(TaskKind::Fine, &mut rng);
            assert_eq!(g.oracle_predict(&s), s.answer);
        }
    }

    #[test]
    fn fine_patch_is_diluted_by_single_token_pooling() {
        // zero noise, zero scene: the pooled pattern channels are the sum of
        // four patches, each weighted by patch cells / total cells
        let cfg = SynthConfig {
            noise_std: 0.0,
            scene_amplitude: 0.0,
            ..SynthConfig::default()
        };
        let g = Generator::new(cfg.clone()).unwrap();
        let s = g.sample(TaskKind::Fine, &mut SeedRng::new(6));
        let pooled = adaptive_avg_pool(&s.grid, 1).unwrap();
        let dilution = (cfg.patch_size * cfg.patch_size) as f64 / 576.0;
        let mut expect = vec![0.0; cfg.pattern_channels()];
        let patterns = g.patterns();
        let mut rng = SeedRng::new(6);
        let _ = g.base_grid(&mut rng);
        let _scene = rng.below(cfg.classes);
        for _ in 0..4 {
            let k = rng.below(cfg.classes);
            let _ = (rng.below(11), rng.below(11));
            for (e, p) in expect.iter_mut().zip(&patterns[k]) {
                *e += dilution * cfg.fine_amplitude * p;
            }
        }
        for (a, b) in pooled.values.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // a single planted patch contributes at most 4/576 of its amplitude, far
        // below the per-class margin between patterns
        assert!(dilution * cfg.fine_amplitude < 0.01);
    }

    #[test]
    fn samples_are_deterministic() {
        let g = Generator::new(SynthConfig::default()).unwrap();
        assert_eq!(g.sample_at(TaskKind::Fine, 3, 7), g.sample_at(TaskKind::Fine, 3, 7));
        assert_ne!(g.sample_at(TaskKind::Fine, 3, 7), g.sample_at(TaskKind::Fine, 3, 8));
    }

    #[test]
    fn corpus_split_and_file_roundtrip() {
        let cfg = SynthConfig {
            height: 6,
            width: 6,
            channels: 4,
            patch_size: 1,
            ..SynthConfig::default()
        };
        let c = gen_corpus(&cfg, 10, 1.0, 1).unwrap();
        assert!(c.samples.iter().all(|s| s.kind == TaskKind::Coarse));
        let c = gen_corpus(&cfg, 40, 0.5, 2).unwrap();
        assert_eq!(c.samples.iter().filter(|s| s.kind == TaskKind::Coarse).count(), 20);
        assert!(gen_corpus(&cfg, 4, 1.5, 2).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.corpus");
        c.save(&path).unwrap();
        assert_eq!(SynthCorpus::load(&path).unwrap(), c);
        assert_eq!(gen_corpus(&cfg, 40, 0.5, 2).unwrap(), c);
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocab { classes: 8 };
        assert_eq!(v.size(), 18);
        assert_eq!(v.bos(), 16);
        assert_eq!(v.pad(), 17);
        assert_eq!(v.quadrant(3), 13);
    }
}

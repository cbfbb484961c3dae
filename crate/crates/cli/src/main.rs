use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dyntok::config::ExperimentConfig;
use dyntok::cost::{decimal, regime_cost, Tiling};
use dyntok::decoder::accuracy;
use dyntok::gradsuite;
use dyntok::plot::{accuracy_svg, read_matrix_csv};
use dyntok::schedule::TokenSchedule;
use dyntok::synth::{gen_corpus, SynthCorpus};
use dyntok::trainer::{load_model, ood_matrix, proportion_ablation, train_with, write_ablation_csv, Regime};

/// Dynamic vision-token training harness.
#[derive(Parser)]
#[command(name = "dyntok", version)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, env = "DYNTOK_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file.
    GenData(GenData),
    /// Train one model.
    Train(Train),
    /// Evaluate a checkpoint at one token count; prints one CSV record.
    Eval(Eval),
    /// Finite-difference check of every differentiable component.
    Gradcheck(Gradcheck),
    /// Train every regime for every seed and evaluate at every token count.
    OodMatrix(OodMatrix),
    /// One dynamic run per token-count proportion.
    ProportionAblation(Ablation),
    /// Vision-token cost of each regime against a fixed reference.
    Cost(Cost),
    /// Accuracy-vs-token-count chart from a matrix CSV.
    Plot(Plot),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display())),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArg,
    /// `train` or `eval` section of the data config.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    size: Option<usize>,
    /// Coarse fraction.
    #[arg(long)]
    mix: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; defaults to `<run-root>/<split>.corpus`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOverrides {
    /// `fixed` or `dynamic`.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    fixed_count: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Projector kind (adaptive, naive, attn).
    #[arg(long)]
    projector: Option<String>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let t = &mut cfg.train;
        if let Some(r) = &self.regime {
            t.regime = r.clone();
        }
        if let Some(n) = self.fixed_count {
            t.fixed_count = n;
        }
        if let Some(s) = self.steps {
            t.steps = s;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if let Some(lr) = self.lr {
            t.lr = lr;
        }
        if let Some(p) = &self.projector {
            t.projector = p.clone();
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Sets the init, data and schedule seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus file; generated from the config when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run directory name under the run root.
    #[arg(long, default_value = "train")]
    run: String,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    config: ConfigArg,
    /// Run directory holding `projector.ckpt` and `decoder.ckpt`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus file; the config's eval corpus when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Inference token count.
    #[arg(long = "n")]
    count: usize,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct OodMatrix {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "ood-matrix")]
    run: String,
}

#[derive(Args)]
struct Ablation {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "proportion-ablation")]
    run: String,
}

#[derive(Args)]
struct Cost {
    #[command(flatten)]
    config: ConfigArg,
    /// Token counts of the dynamic schedule.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    /// Probabilities of the dynamic schedule.
    #[arg(long, value_delimiter = ',')]
    probs: Option<Vec<f64>>,
    /// Fixed reference token count.
    #[arg(long, default_value_t = 256)]
    reference: usize,
    #[arg(long, default_value_t = 1)]
    images: u64,
    /// Tile layouts `IxJ`, each weighted equally; adds a thumbnail per image.
    #[arg(long, value_delimiter = ',')]
    tiles: Option<Vec<String>>,
}

#[derive(Args)]
struct Plot {
    /// Matrix CSV; defaults to `<run-root>/ood-matrix/matrix.csv`.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Output SVG; defaults to `accuracy.svg` next to the matrix.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "accuracy vs inference token count")]
    title: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.run_root;
    match cli.command {
        Command::GenData(a) => gen_data(&root, a),
        Command::Train(a) => train_cmd(&root, a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::OodMatrix(a) => ood_cmd(&root, a),
        Command::ProportionAblation(a) => ablation_cmd(&root, a),
        Command::Cost(a) => cost_cmd(a),
        Command::Plot(a) => plot_cmd(&root, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(root: &Path, a: GenData) -> Result<()> {
    let cfg = a.config.load()?;
    let d = &cfg.data;
    let (size, seed) = match a.split.as_str() {
        "train" => (d.train_size, d.train_seed),
        "eval" => (d.eval_size, d.eval_seed),
        other => bail!("unknown split `{other}` (expected train or eval)"),
    };
    let corpus = gen_corpus(
        &cfg.grid,
        a.size.unwrap_or(size),
        a.mix.unwrap_or(d.mix),
        a.seed.unwrap_or(seed),
    )?;
    let out = match a.out {
        Some(p) => p,
        None => {
            create_dir(root)?;
            root.join(format!("{}.corpus", a.split))
        }
    };
    corpus.save(&out)?;
    let coarse = corpus.samples.iter().filter(|s| s.quadrant.is_none()).count();
    println!(
        "{},{},{},{}",
        out.display(),
        corpus.len(),
        coarse,
        corpus.len() - coarse
    );
    Ok(())
}

fn load_or_generate(path: Option<&Path>, make: impl FnOnce() -> dyntok::Result<SynthCorpus>) -> Result<SynthCorpus> {
    Ok(match path {
        Some(p) => SynthCorpus::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => make()?,
    })
}

fn train_cmd(root: &Path, a: Train) -> Result<()> {
    let mut cfg = a.config.load()?;
    a.overrides.apply(&mut cfg)?;
    if let Some(s) = a.seed {
        cfg.train = cfg.train.clone().with_seed(s);
    }
    let corpus_path = a.corpus.or_else(|| cfg.train.corpus.clone());
    let corpus = load_or_generate(corpus_path.as_deref(), || cfg.train_corpus())?;
    let dir = root.join(&a.run);
    create_dir(&dir)?;
    write_file(&dir.join("experiment.toml"), cfg.to_toml())?;
    let steps = cfg.train.steps;
    let report = train_with(&cfg.train, &corpus, |r| {
        if (r.step + 1) % 100 == 0 || r.step + 1 == steps {
            eprintln!("step {} N={} loss={:.4}", r.step + 1, r.count, r.loss);
        }
    })?;
    report.save(&dir)?;
    let mut rows = String::from("train_regime,infer_N,accuracy,coarse_accuracy,fine_accuracy\n");
    if !cfg.train.eval_counts.is_empty() {
        let eval = cfg.eval_corpus()?;
        for &n in &cfg.train.eval_counts {
            let acc = accuracy(&report.model, &eval, n)?;
            rows.push_str(&format!(
                "{},{n},{},{},{}\n",
                report.regime,
                acc.overall,
                opt(acc.coarse),
                opt(acc.fine)
            ));
        }
        write_file(&dir.join("eval.csv"), &rows)?;
    }
    println!(
        "run={} regime={} steps={} vision_tokens={} final_loss={} wall_time_s={:.1}",
        dir.display(),
        report.regime,
        report.losses.len(),
        report.vision_tokens,
        report.losses.last().map_or(String::from("-"), |r| format!("{:.4}", r.loss)),
        report.wall_time.as_secs_f64()
    );
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn eval_cmd(a: Eval) -> Result<()> {
    let cfg = a.config.load()?;
    let corpus = load_or_generate(a.corpus.as_deref(), || cfg.eval_corpus())?;
    let model = load_model(&a.checkpoint, &corpus.config)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let acc = accuracy(&model, &corpus, a.count)?;
    println!(
        "{},{},{},{},{}",
        a.checkpoint.display(),
        a.count,
        acc.overall,
        opt(acc.coarse),
        opt(acc.fine)
    );
    Ok(())
}

fn gradcheck_cmd(a: Gradcheck) -> Result<()> {
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let reports = gradsuite::run(&seeds)?;
    println!("component,max_rel_error,seeds,status");
    for r in &reports {
        println!(
            "{},{:e},{},{}",
            r.component,
            r.max_rel_error,
            r.seeds,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn ood_cmd(root: &Path, a: OodMatrix) -> Result<()> {
    let mut cfg = a.config.load()?;
    a.overrides.apply(&mut cfg)?;
    if let Some(s) = a.seeds {
        cfg.experiment.seeds = s;
    }
    let dir = root.join(&a.run);
    create_dir(&dir)?;
    write_file(&dir.join("experiment.toml"), cfg.to_toml())?;
    let (train_c, eval_c) = (cfg.train_corpus()?, cfg.eval_corpus()?);
    let matrix = ood_matrix(
        &cfg.train,
        &cfg.regimes()?,
        &cfg.experiment.seeds,
        &train_c,
        &eval_c,
        &cfg.train.eval_counts,
        |r| {
            eprintln!(
                "trained {} seed {} in {:.1}s",
                r.regime,
                r.config.init_seed,
                r.wall_time.as_secs_f64()
            );
            r.save(&dir.join(format!("{}-seed{}", r.regime, r.config.init_seed)))
        },
    )?;
    let mut csv = Vec::new();
    matrix.write_csv(&mut csv)?;
    write_file(&dir.join("matrix.csv"), &csv)?;
    let svg = accuracy_svg(&read_matrix_csv(csv.as_slice())?, "accuracy vs inference token count")?;
    write_file(&dir.join("accuracy.svg"), svg)?;
    print!("{}", String::from_utf8_lossy(&csv));
    if !matrix.is_complete() {
        bail!("matrix incomplete; see {}", dir.join("matrix.csv").display());
    }
    Ok(())
}

fn ablation_cmd(root: &Path, a: Ablation) -> Result<()> {
    let mut cfg = a.config.load()?;
    a.overrides.apply(&mut cfg)?;
    let e = &cfg.experiment;
    let dir = root.join(&a.run);
    create_dir(&dir)?;
    write_file(&dir.join("experiment.toml"), cfg.to_toml())?;
    let (train_c, eval_c) = (cfg.train_corpus()?, cfg.eval_corpus()?);
    let rows = proportion_ablation(
        &cfg.train,
        &e.ablation_counts,
        &e.ablation_weights,
        a.seed.unwrap_or(e.ablation_seed),
        &train_c,
        &eval_c,
        |label, r| {
            eprintln!("trained {label} in {:.1}s", r.wall_time.as_secs_f64());
            r.save(&dir.join(label.replace(':', "-")))
        },
    )?;
    let mut csv = Vec::new();
    write_ablation_csv(&rows, &mut csv)?;
    write_file(&dir.join("ablation.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn cost_cmd(a: Cost) -> Result<()> {
    let cfg = a.config.load()?;
    let counts = a.counts.unwrap_or(cfg.train.counts);
    let probs = a.probs.unwrap_or(cfg.train.probs);
    let dynamic = Regime::Dynamic(TokenSchedule::new(&counts, &probs)?);
    let tiling = a.tiles.map(|t| parse_tiles(&t)).transpose()?;
    let reference = Regime::Fixed(a.reference);
    let mut regimes = vec![dynamic];
    regimes.extend(cfg.experiment.fixed_counts.iter().map(|&n| Regime::Fixed(n)));
    println!("regime,images,tokens_per_image,total_tokens,reference,reduction_percent");
    for r in &regimes {
        let c = regime_cost(r, a.images, tiling.as_ref(), &reference)?;
        println!(
            "{},{},{},{},{},{}",
            c.regime,
            c.images,
            decimal(&c.tokens_per_image, 4),
            decimal(&c.total_tokens, 4),
            c.reference,
            decimal(&c.reduction_percent(), 4)
        );
    }
    Ok(())
}

fn parse_tiles(specs: &[String]) -> Result<Tiling> {
    let layouts = specs
        .iter()
        .map(|s| {
            let (i, j) = s
                .split_once(['x', 'X'])
                .with_context(|| format!("tile layout `{s}` is not IxJ"))?;
            Ok(((i.trim().parse()?, j.trim().parse()?), 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tiling {
        layouts,
        thumbnail: true,
        max_tiles: dyntok::cost::DEFAULT_MAX_TILES,
    })
}

fn plot_cmd(root: &Path, a: Plot) -> Result<()> {
    let matrix = a.matrix.unwrap_or_else(|| root.join("ood-matrix").join("matrix.csv"));
    let file = fs::File::open(&matrix).with_context(|| format!("reading {}", matrix.display()))?;
    let points = read_matrix_csv(file)?;
    if points.is_empty() {
        bail!("no rows in {}", matrix.display());
    }
    let svg = accuracy_svg(&points, &a.title)?;
    let out = a
        .out
        .unwrap_or_else(|| matrix.with_file_name("accuracy.svg"));
    write_file(&out, svg)?;
    println!("{}", out.display());
    Ok(())
}

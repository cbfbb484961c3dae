//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! The training criteria use `configs/ood.toml` at the workspace root.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dyntok::config::ExperimentConfig;
use dyntok::cost::{tile_grids, tile_tokens, TileSpec};
use dyntok::gradsuite;
use dyntok::projector::{adaptive_avg_pool, adaptive_bins, FeatureGrid};
use dyntok::rng::SeedRng;
use dyntok::schedule::{plan_epoch, TokenSchedule};
use dyntok::trainer::{ood_matrix, proportion_ablation, write_ablation_csv, OodMatrix, Regime};
use num_rational::Ratio;

const COUNTS: [usize; 3] = [64, 144, 256];

struct Outcome {
    ok: bool,
    detail: String,
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        ok: false,
        detail: detail.into(),
    }
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

struct Runner {
    failures: usize,
}

impl Runner {
    fn run(&mut self, id: &str, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            fail(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let in_time = took <= budget;
        let ok = out.ok && in_time;
        if !ok {
            self.failures += 1;
        }
        let timing = if in_time {
            format!("{:.1}s", took.as_secs_f64())
        } else {
            format!("{:.1}s, over the {:.0}s budget", took.as_secs_f64(), budget.as_secs_f64())
        };
        println!(
            "{} [{id}] {name}: {} ({timing})",
            if ok { "PASS" } else { "FAIL" },
            out.detail
        );
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dyntok"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn cost_arithmetic() -> Outcome {
    let out = cli(&["cost", "--counts", "64,144,256", "--probs", "0.2,0.3,0.5", "--reference", "256"]);
    if !out.status.success() {
        return fail(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let Some(row) = text.lines().find(|l| l.starts_with("dynamic,")) else {
        return fail("no dynamic row");
    };
    let cols: Vec<&str> = row.split(',').collect();
    check(
        cols[2] == "184.0" && cols[5] == "28.125",
        format!("expected tokens {} reduction {}%", cols[2], cols[5]),
    )
}

fn tiling_formula() -> Outcome {
    let mut checked = 0;
    for (i, j) in tile_grids(12) {
        for base in COUNTS {
            let got = tile_tokens(&TileSpec::new(i, j, base)).expect("within the tile limit");
            if got != ((i * j + 1) * base) as u64 {
                return fail(format!("{i}x{j} base {base} gave {got}"));
            }
            checked += 1;
        }
    }
    let grids = tile_grids(12).len();
    let brute = (1..=12).flat_map(|i| (1..=12).map(move |j| (i, j))).filter(|(i, j)| i * j <= 12).count();
    check(grids == brute, format!("{checked} (grid, base) cases exact over {grids} grids"))
}

fn gradient_suite() -> Outcome {
    let reports = gradsuite::run(&[1, 2, 3, 4, 5]).expect("suite runs");
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.component.clone()).collect();
    check(
        failed.is_empty() && reports.iter().all(|r| r.seeds >= 5),
        format!(
            "{} components, worst relative error {worst:.2e}{}",
            reports.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(" ")) }
        ),
    )
}

fn pooling_invariants() -> Outcome {
    let mut cases = 0;
    for h in 1..=32 {
        for w in 1..=32 {
            let mut rng = SeedRng::new((h * 64 + w) as u64);
            let grid = FeatureGrid::new(h, w, 1, rng.normal_vec(h * w, 1.0)).expect("valid grid");
            let total: f64 = grid.data().iter().sum();
            for n in 1..=h.min(w) {
                let bins = adaptive_bins(h, w, n).expect("n fits");
                let mut owner = vec![0u8; h * w];
                for b in bins.iter() {
                    for c in b.cells(w) {
                        owner[c] += 1;
                    }
                }
                if owner.iter().any(|&k| k != 1) {
                    return fail(format!("bins do not tile {h}x{w} at n={n}"));
                }
                let p = adaptive_avg_pool(&grid, n).expect("n fits");
                let weighted: f64 = p.bin_map.iter().zip(p.values.data()).map(|(b, v)| b.len() as f64 * v).sum();
                if (weighted - total).abs() > 1e-10 * total.abs().max(1.0) {
                    return fail(format!("mean not preserved for {h}x{w} at n={n}"));
                }
                if h % n == 0 && w % n == 0 {
                    let (kh, kw) = (h / n, w / n);
                    for (k, v) in p.values.data().iter().enumerate() {
                        let (i, j) = (k / n, k % n);
                        let s: f64 = (i * kh..(i + 1) * kh)
                            .flat_map(|r| (j * kw..(j + 1) * kw).map(move |c| (r, c)))
                            .map(|(r, c)| grid.cell(r, c)[0])
                            .sum();
                        if (v - s / (kh * kw) as f64).abs() > 1e-12 {
                            return fail(format!("fixed-window mismatch for {h}x{w} at n={n}"));
                        }
                    }
                }
                cases += 1;
            }
        }
    }
    let bins = adaptive_bins(27, 27, 8).expect("8 fits in 27");
    let widths: Vec<usize> = bins[..8].iter().map(|b| b.c1 - b.c0).collect();
    let oracle: Vec<usize> = (0..8usize).map(|j| (j + 1) * 27 / 8 - j * 27 / 8).collect();
    check(
        widths == oracle && widths == [3, 3, 4, 3, 3, 4, 3, 4],
        format!("{cases} (H, W, n) cases; 27->8 bin widths {widths:?}"),
    )
}

fn scheduler_fidelity() -> Outcome {
    let s = TokenSchedule::new(&COUNTS, &[0.2, 0.3, 0.5]).expect("valid schedule");
    let draws = 100_000;
    let plan = plan_epoch(&s, draws, 7).expect("nonempty plan");
    let freqs: Vec<f64> = COUNTS
        .iter()
        .map(|&n| plan.counts.iter().filter(|&&c| c == n).count() as f64 / draws as f64)
        .collect();
    let close = freqs.iter().zip([0.2, 0.3, 0.5]).all(|(f, p)| (f - p).abs() <= 0.01);
    let fixed = TokenSchedule::new(&COUNTS, &[0.0, 0.0, 1.0]).expect("valid schedule");
    let degenerate = plan_epoch(&fixed, 1000, 3).expect("nonempty plan").counts.iter().all(|&c| c == 256);
    let replay = plan_epoch(&s, 1000, 9).ok() == plan_epoch(&s, 1000, 9).ok();
    check(
        close && degenerate && replay,
        format!("frequencies {freqs:.4?}; degenerate exact: {degenerate}; replay identical: {replay}"),
    )
}

struct OodRun {
    matrix: OodMatrix,
    seeds: Vec<u64>,
    counts: Vec<usize>,
    dir: PathBuf,
}

fn ood_run(cfg: &ExperimentConfig, dir: &Path) -> OodRun {
    let train_c = cfg.train_corpus().expect("train corpus");
    let eval_c = cfg.eval_corpus().expect("eval corpus");
    let regimes = vec![
        Regime::Fixed(256),
        Regime::Dynamic(TokenSchedule::new(&cfg.train.counts, &cfg.train.probs).expect("valid schedule")),
    ];
    let matrix = ood_matrix(
        &cfg.train,
        &regimes,
        &cfg.experiment.seeds,
        &train_c,
        &eval_c,
        &cfg.train.eval_counts,
        |r| {
            eprintln!("trained {} seed {} in {:.1}s", r.regime, r.config.init_seed, r.wall_time.as_secs_f64());
            r.save(&dir.join(format!("{}-seed{}", r.regime, r.config.init_seed)))
        },
    )
    .expect("matrix runs");
    let mut csv = Vec::new();
    matrix.write_csv(&mut csv).expect("in-memory csv");
    std::fs::write(dir.join("matrix.csv"), csv).expect("writable run dir");
    OodRun {
        matrix,
        seeds: cfg.experiment.seeds.clone(),
        counts: cfg.train.eval_counts.clone(),
        dir: dir.to_path_buf(),
    }
}

fn ood_direction(run: &OodRun) -> Outcome {
    if !run.matrix.is_complete() {
        return fail("matrix has failed cells");
    }
    let m = &run.matrix;
    let mut ok = true;
    let mut notes = Vec::new();
    for &seed in &run.seeds {
        let acc = |regime: &str, n: usize| m.get(regime, n, seed).expect("complete").overall;
        let drop = acc("fixed-256", 256) - acc("fixed-256", 64);
        let (sd, sf) = (m.spread("dynamic", seed).expect("complete"), m.spread("fixed-256", seed).expect("complete"));
        let (d64, f64_) = (acc("dynamic", 64), acc("fixed-256", 64));
        let (a, b, c) = (drop >= 0.05, sd < sf, d64 >= f64_);
        ok &= a && b && c;
        notes.push(format!(
            "seed {seed}: (a) fixed drop {:.1}pt {} (b) spread dyn {:.3} vs fixed {:.3} {} (c) N=64 dyn {:.3} vs fixed {:.3} {}",
            100.0 * drop,
            mark(a),
            sd,
            sf,
            mark(b),
            d64,
            f64_,
            mark(c)
        ));
    }
    check(ok, notes.join("; "))
}

fn mark(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "NO"
    }
}

fn fine_vs_coarse(run: &OodRun) -> Outcome {
    let m = &run.matrix;
    let mut ok = true;
    let mut notes = Vec::new();
    for &seed in &run.seeds {
        let (lo, hi) = (m.get("dynamic", 64, seed), m.get("dynamic", 256, seed));
        let (Some(lo), Some(hi)) = (lo, hi) else {
            return fail(format!("missing dynamic cells for seed {seed}"));
        };
        let fine = hi.fine.unwrap_or(0.0) - lo.fine.unwrap_or(0.0);
        let coarse = hi.coarse.unwrap_or(0.0) - lo.coarse.unwrap_or(0.0);
        ok &= fine > coarse;
        notes.push(format!("seed {seed}: fine gain {:+.3} vs coarse gain {:+.3}", fine, coarse));
    }
    check(ok, notes.join("; "))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn determinism(run: &OodRun, config: &Path, scratch: &Path) -> Outcome {
    // a saved checkpoint re-evaluates to the matrix cell bit for bit
    let seed = run.seeds[0];
    let ckpt = run.dir.join(format!("dynamic-seed{seed}"));
    let n = *run.counts.last().expect("eval counts");
    let out = cli(&[
        "eval",
        "--config",
        config.to_str().expect("utf-8 path"),
        "--checkpoint",
        ckpt.to_str().expect("utf-8 path"),
        "--n",
        &n.to_string(),
    ]);
    if !out.status.success() {
        return fail(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let line = String::from_utf8_lossy(&out.stdout);
    let reeval: f64 = line.trim().split(',').nth(2).and_then(|v| v.parse().ok()).expect("accuracy column");
    let cell = run.matrix.get("dynamic", n, seed).expect("complete").overall;
    let eval_same = reeval.to_bits() == cell.to_bits();

    // two short training runs with the same config produce identical files
    let root = scratch.to_str().expect("utf-8 path");
    let train = |name: &str| {
        cli(&[
            "--run-root",
            root,
            "train",
            "--config",
            config.to_str().expect("utf-8 path"),
            "--steps",
            "60",
            "--run",
            name,
        ])
    };
    for name in ["first", "second"] {
        let out = train(name);
        if !out.status.success() {
            return fail(String::from_utf8_lossy(&out.stderr).into_owned());
        }
    }
    let files = ["projector.ckpt", "decoder.ckpt", "metrics.csv", "plan.csv", "config.toml", "eval.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| read(&scratch.join("first").join(f)) != read(&scratch.join("second").join(f)))
        .collect();
    check(
        eval_same && differing.is_empty(),
        format!(
            "re-eval of dynamic seed {seed} at N={n} {}; rerun files {}",
            if eval_same { "identical" } else { "DIFFERS" },
            if differing.is_empty() { "identical".to_string() } else { format!("differ: {}", differing.join(" ")) }
        ),
    )
}

fn ablation_shape(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let e = &cfg.experiment;
    let weights = vec![vec![5, 3, 2], vec![1, 1, 1], vec![2, 3, 5]];
    let train_c = cfg.train_corpus().expect("train corpus");
    let eval_c = cfg.eval_corpus().expect("eval corpus");
    let mut plan_totals = Vec::new();
    let rows = proportion_ablation(&cfg.train, &COUNTS, &weights, e.ablation_seed, &train_c, &eval_c, |label, r| {
        eprintln!("trained {label} in {:.1}s", r.wall_time.as_secs_f64());
        let per_step: u64 = r.losses.iter().map(|s| (s.count * r.config.batch_size) as u64).sum();
        plan_totals.push((r.plan.total_tokens(r.config.batch_size), per_step));
        r.save(&dir.join(label.replace(':', "-")))
    })
    .expect("ablation runs");
    let mut csv = Vec::new();
    write_ablation_csv(&rows, &mut csv).expect("in-memory csv");
    let text = String::from_utf8(csv).expect("utf-8 csv");
    let expected = [Ratio::new(632, 5), Ratio::new(464, 3), Ratio::from_integer(184)];
    let mut ok = rows.len() == 3;
    let mut notes = Vec::new();
    for ((row, want), (plan_total, per_step)) in rows.iter().zip(expected).zip(plan_totals) {
        ok &= row.expected_tokens == want;
        ok &= row.accuracies.iter().map(|(n, _)| *n).collect::<Vec<_>>() == COUNTS;
        ok &= row.vision_tokens == plan_total && plan_total == per_step;
        let accs: Vec<String> = row.accuracies.iter().map(|(n, a)| format!("N={n}:{:.3}", a.overall)).collect();
        notes.push(format!("{} expects {} tokens, {} used, {}", row.proportion, row.expected_tokens, plan_total, accs.join(" ")));
    }
    let lines = text.lines().count();
    ok &= lines == 1 + 3 * COUNTS.len() && text.starts_with("proportion,expected_tokens,vision_tokens,seed,infer_N,accuracy");
    notes.push("1:1:1 is 464/3 by expectation arithmetic (the stated 144 does not follow)".to_string());
    check(ok, notes.join("; "))
}

fn main() {
    // cargo passes harness flags such as --list or a name filter; this target always runs in full
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let root = workspace_root();
    let config_path = root.join("configs/ood.toml");
    let cfg = ExperimentConfig::load(&config_path).expect("configs/ood.toml loads");
    let scratch = tempfile::tempdir().expect("temp dir");
    let mut r = Runner { failures: 0 };

    r.run("1", "cost arithmetic", Duration::from_secs(1), cost_arithmetic);
    r.run("2", "tiling formula", Duration::from_secs(1), tiling_formula);
    r.run("3", "gradient suite", Duration::from_secs(120), gradient_suite);
    r.run("4", "pooling invariants", Duration::from_secs(60), pooling_invariants);
    r.run("5", "scheduler fidelity", Duration::from_secs(10), scheduler_fidelity);

    let ood_dir = scratch.path().join("ood");
    std::fs::create_dir_all(&ood_dir).expect("scratch dir");
    let start = Instant::now();
    let run = ood_run(&cfg, &ood_dir);
    let took = start.elapsed();
    r.run("6", "out-of-distribution token counts", Duration::from_secs(30 * 60).saturating_sub(took), || {
        ood_direction(&run)
    });
    r.run("7", "fine vs coarse gain", Duration::from_secs(5), || fine_vs_coarse(&run));
    let det_dir = scratch.path().join("repeat");
    r.run("8", "determinism", Duration::from_secs(5 * 60), || determinism(&run, &config_path, &det_dir));

    let abl_dir = scratch.path().join("ablation");
    let mut abl_cfg = cfg.clone();
    abl_cfg.experiment.ablation_counts = COUNTS.to_vec();
    r.run("9", "proportion ablation", Duration::from_secs(45 * 60), || ablation_shape(&abl_cfg, &abl_dir));

    if r.failures > 0 {
        println!("{} criteria failed", r.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}

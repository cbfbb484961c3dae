use dyntok::params::uniform_matrix;
use dyntok::projector::{
    adaptive_avg_pool, init_params, layer_norm, project, FeatureGrid, Projector, ProjectorConfig, ProjectorDims,
    ProjectorRegistry,
};
use dyntok::rng::SeedRng;
use dyntok::tensor::Tensor;
use dyntok::Error;
use proptest::prelude::*;

const KINDS: [&str; 3] = ["adaptive", "naive", "attn"];

fn build(kind: &str, c_v: usize, c_text: usize, seed: u64) -> Box<dyn Projector> {
    ProjectorRegistry::default()
        .build(&ProjectorConfig::new(kind, ProjectorDims::new(c_v, c_text)), seed)
        .unwrap()
}

fn random_grid(h: usize, w: usize, c: usize, seed: u64) -> FeatureGrid {
    FeatureGrid::new(h, w, c, SeedRng::new(seed).normal_vec(h * w * c, 1.0)).unwrap()
}

#[test]
fn registry_lists_and_rejects() {
    let r = ProjectorRegistry::default();
    assert_eq!(r.names().collect::<Vec<_>>(), vec!["adaptive", "attn", "naive"]);
    let cfg = ProjectorConfig::new("pixel-shuffle", ProjectorDims::new(4, 4));
    assert!(matches!(r.build(&cfg, 0), Err(Error::Unknown { .. })));
}

#[test]
fn zero_grid_maps_to_zero_tokens() {
    for kind in KINDS {
        let p = build(kind, 5, 6, 3);
        let out = p.project(&FeatureGrid::constant(6, 6, 5, 0.0), 9).unwrap();
        assert!(out.values.data().iter().all(|&v| v == 0.0), "{kind}");
    }
}

#[test]
fn every_square_count_gives_that_many_tokens() {
    let grid = random_grid(7, 5, 3, 1);
    for kind in KINDS {
        let p = build(kind, 3, 4, 2);
        for n in 1..=5 {
            let out = p.project(&grid, n * n).unwrap();
            assert_eq!(out.values.shape(), &[n * n, 4]);
            assert_eq!((out.count, out.dim), (n * n, 4));
        }
        assert!(matches!(p.project(&grid, 36), Err(Error::UnsupportedUpsampling { .. })));
        assert!(matches!(p.project(&grid, 8), Err(Error::NotPerfectSquare(8))));
    }
}

#[test]
fn layouts_are_equivalent_on_the_27_grid() {
    let grid = random_grid(27, 27, 4, 5);
    let flat = FeatureGrid::from_tensor(Tensor::new(vec![729, 4], grid.data().to_vec()).unwrap(), 27, 27).unwrap();
    let p = init_params(ProjectorDims::new(4, 8), 9).unwrap();
    let a = project(&grid, 64, &p).unwrap();
    let b = project(&flat, 64, &p).unwrap();
    assert_eq!(a.count, 64);
    assert_eq!(a, b);
}

#[test]
fn projection_is_deterministic_per_seed() {
    let grid = random_grid(8, 8, 3, 4);
    for kind in KINDS {
        let a = build(kind, 3, 5, 11);
        let b = build(kind, 3, 5, 11);
        let c = build(kind, 3, 5, 12);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.project(&grid, 16).unwrap(), b.project(&grid, 16).unwrap());
    }
}

#[test]
fn checkpoints_roundtrip_through_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let grid = random_grid(6, 6, 3, 8);
    for kind in KINDS {
        let p = build(kind, 3, 4, 21);
        let path = dir.path().join(format!("{kind}.ckpt"));
        p.save(&path).unwrap();
        let q = ProjectorRegistry::default().load(&path).unwrap();
        assert_eq!(q.kind(), kind);
        assert_eq!(p.project(&grid, 4).unwrap(), q.project(&grid, 4).unwrap());
    }
}

#[test]
fn uniform_init_has_the_expected_spread() {
    let fan_in = 16;
    let t = uniform_matrix(&mut SeedRng::new(3), 100, 100, fan_in);
    let n = t.numel() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let sd = (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let expect = 1.0 / (3.0 * fan_in as f64).sqrt();
    assert!((sd / expect - 1.0).abs() < 0.1, "{sd} vs {expect}");
    let bound = 1.0 / (fan_in as f64).sqrt();
    assert!(t.data().iter().all(|x| x.abs() <= bound));
}

#[test]
fn layer_norm_moments() {
    let grid = random_grid(4, 8, 8, 6);
    let pooled = adaptive_avg_pool(&grid, 2).unwrap();
    let ones = Tensor::full(vec![8], 1.0);
    let zeros = Tensor::zeros(vec![8]);
    let out = layer_norm(&pooled, &ones, &zeros, 1e-6).unwrap();
    for (row, raw) in out.data().chunks(8).zip(pooled.values.data().chunks(8)) {
        let moments = |r: &[f64]| {
            let mean = r.iter().sum::<f64>() / 8.0;
            (mean, r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0)
        };
        let (mean, var) = moments(row);
        let (_, raw_var) = moments(raw);
        assert!(mean.abs() < 1e-6);
        assert!((var - raw_var / (raw_var + 1e-6)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    m.data().chunks(x.len()).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

#[test]
fn local_attention_matches_brute_force() {
    for seed in 0..5 {
        let grid = random_grid(4, 4, 3, 100 + seed);
        let p = build("attn", 3, 2, seed);
        let get = |name: &str| p.params().get(name).unwrap().clone();
        let (wq, wk, wv) = (get("wq"), get("wk"), get("wv"));
        let (w1, w2, w3) = (get("w1"), get("w2"), get("w3"));
        let mut expect = Vec::new();
        for bi in 0..2 {
            for bj in 0..2 {
                let cells: Vec<&[f64]> = (0..4).map(|k| grid.cell(bi * 2 + k / 2, bj * 2 + k % 2)).collect();
                let pooled: Vec<f64> = (0..3).map(|c| cells.iter().map(|x| x[c]).sum::<f64>() / 4.0).collect();
                let q = matvec(&wq, &pooled);
                let scores: Vec<f64> = cells
                    .iter()
                    .map(|x| matvec(&wk, x).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt())
                    .collect();
                let a = softmax(&scores);
                let mut x = pooled.clone();
                for (w, cell) in a.iter().zip(&cells) {
                    for (xi, vi) in x.iter_mut().zip(matvec(&wv, cell)) {
                        *xi += w * vi;
                    }
                }
                let mean = x.iter().sum::<f64>() / 3.0;
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
                let normed: Vec<f64> = x.iter().map(|v| (v - mean) / (var + 1e-6).sqrt()).collect();
                let h: Vec<f64> = matvec(&w1, &normed)
                    .iter()
                    .zip(matvec(&w2, &normed))
                    .map(|(a, z)| a / (1.0 + (-z).exp()))
                    .collect();
                expect.extend(matvec(&w3, &h));
            }
        }
        let got = p.project(&grid, 4).unwrap();
        for (g, e) in got.values.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "seed {seed}: {g} vs {e}");
        }
    }
}

proptest! {
    #[test]
    fn constant_grids_give_identical_naive_tokens(v in -3.0f64..3.0, n in 1usize..5) {
        let p = build("naive", 2, 3, 4);
        let out = p.project(&FeatureGrid::constant(5, 6, 2, v), n * n).unwrap();
        let first = out.values.row(0).to_vec();
        for r in 0..n * n {
            for (a, b) in out.values.row(r).iter().zip(&first) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

//! Central-difference checks for every differentiable component.

use crate::decoder::{loss, Decoder, DecoderConfig};
use crate::error::Result;
use crate::params::Bound;
use crate::projector::{GridVar, Projector, ProjectorConfig, ProjectorDims, ProjectorRegistry};
use crate::rng::SeedRng;
use crate::tensor::{gradcheck_with, Tape, Tensor, Var, DEFAULT_EPS};

pub const TOLERANCE: f64 = 1e-5;

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Case = Result<(Vec<Tensor>, Objective)>;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub component: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn random(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).expect("positive extents")
}

/// `Σ w ⊙ x` with fixed random weights, so symmetric outputs do not cancel.
fn readout(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = random(&mut SeedRng::stream(seed, 0xF00D), &shape);
    let w = tape.constant(&w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn check(
    name: &str,
    seeds: &[u64],
    case: impl Fn(u64) -> Case,
) -> Result<ComponentReport> {
    let mut report = ComponentReport {
        component: name.to_string(),
        seeds: seeds.len(),
        max_rel_error: 0.0,
        coordinates: 0,
    };
    for &seed in seeds {
        let (inputs, f) = case(seed)?;
        let r = gradcheck_with(f, &inputs, DEFAULT_EPS)?;
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
        report.coordinates += r.coordinates;
    }
    Ok(report)
}

fn projector_case(kind: &str, seed: u64) -> Case {
    let (h, w, c) = (5, 4, 3);
    let mut cfg = ProjectorConfig::new(kind, ProjectorDims::new(c, 4).with_hidden(5));
    cfg.bias = seed % 2 == 1;
    let p: Box<dyn Projector> = ProjectorRegistry::default().build(&cfg, seed)?;
    let mut rng = SeedRng::new(seed);
    let mut inputs: Vec<Tensor> = p.params().tensors().to_vec();
    // move parameters away from their structured init (unit gains, zero biases)
    for t in &mut inputs {
        let noise = rng.normal_vec(t.numel(), 0.3);
        t.data_mut().iter_mut().zip(noise).for_each(|(v, e)| *v += e);
    }
    inputs.push(random(&mut rng, &[h * w, c]));
    let n = 1 + (seed as usize % 3);
    let f = move |tape: &mut Tape, vars: &[Var]| {
        let (params, grid) = vars.split_at(vars.len() - 1);
        let grid = GridVar {
            var: grid[0],
            height: h,
            width: w,
        };
        let out = p.forward(tape, &Bound::from_vars(params.to_vec()), grid, n)?;
        readout(tape, out, seed)
    };
    Ok((inputs, Box::new(f)))
}

fn decoder_case(seed: u64, all_positions: bool) -> Case {
    let mut cfg = DecoderConfig::new(7, 9);
    cfg.c_text = 4;
    cfg.ffn_mult = 2;
    let d = Decoder::init(cfg, seed)?;
    let mut rng = SeedRng::new(seed);
    let mut inputs: Vec<Tensor> = d.params().tensors().to_vec();
    for t in &mut inputs {
        let noise = rng.normal_vec(t.numel(), 0.2);
        t.data_mut().iter_mut().zip(noise).for_each(|(v, e)| *v += e);
    }
    inputs.push(random(&mut rng, &[4, 4]));
    let text = vec![rng.below(6), rng.below(6), 6];
    let target = rng.below(7);
    let f = move |tape: &mut Tape, vars: &[Var]| {
        let (params, vision) = vars.split_at(vars.len() - 1);
        let bound = Bound::from_vars(params.to_vec());
        if all_positions {
            let out = d.all_position_logits(tape, &bound, vision[0], &text)?;
            readout(tape, out, seed)
        } else {
            let logits = d.sequence_logits(tape, &bound, vision[0], &text)?;
            loss(tape, logits, &[target])
        }
    };
    Ok((inputs, Box::new(f)))
}

fn unary(shape: &'static [usize], seed: u64, op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Case {
    let x = random(&mut SeedRng::new(seed), shape);
    Ok((
        vec![x],
        Box::new(move |tape: &mut Tape, v: &[Var]| {
            let y = op(tape, v[0])?;
            readout(tape, y, seed)
        }),
    ))
}

/// Runs every component over `seeds`.
pub fn run(seeds: &[u64]) -> Result<Vec<ComponentReport>> {
    let mut out = Vec::new();
    for kind in ["adaptive", "naive", "attn"] {
        out.push(check(&format!("projector:{kind}"), seeds, |s| projector_case(kind, s))?);
    }
    out.push(check("layer_norm", seeds, |s| {
        let mut rng = SeedRng::new(s);
        let inputs = vec![random(&mut rng, &[4, 6]), random(&mut rng, &[6]), random(&mut rng, &[6])];
        Ok((
            inputs,
            Box::new(move |tape: &mut Tape, v: &[Var]| {
                let y = tape.layer_norm(v[0], v[1], v[2], 1e-6)?;
                readout(tape, y, s)
            }) as Objective,
        ))
    })?);
    out.push(check("gated_unit", seeds, |s| {
        let mut rng = SeedRng::new(s);
        let inputs = vec![random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[5, 4])];
        Ok((
            inputs,
            Box::new(move |tape: &mut Tape, v: &[Var]| {
                let a = tape.matmul_nt(v[0], v[1])?;
                let b = tape.matmul_nt(v[0], v[2])?;
                let g = tape.sigmoid(b);
                let y = tape.mul(a, g)?;
                readout(tape, y, s)
            }) as Objective,
        ))
    })?);
    out.push(check("avg_pool", seeds, |s| {
        unary(&[20, 3], s, |tape, x| {
            let bins = crate::projector::adaptive_bins(5, 4, 3)?;
            tape.avg_pool(x, 4, bins.into())
        })
    })?);
    out.push(check("masked_softmax", seeds, |s| unary(&[4, 4], s, |tape, x| tape.masked_softmax(x, 0)))?);
    out.push(check("gelu", seeds, |s| unary(&[3, 5], s, |tape, x| Ok(tape.gelu(x))))?);
    out.push(check("decoder_blocks", seeds, |s| decoder_case(s, true))?);
    out.push(check("decoder_loss", seeds, |s| decoder_case(s, false))?);
    out.push(check("cross_entropy", seeds, |s| {
        let x = random(&mut SeedRng::new(s), &[3, 6]);
        let targets = vec![s as usize % 6, 2, 5];
        Ok((
            vec![x],
            Box::new(move |tape: &mut Tape, v: &[Var]| tape.cross_entropy(v[0], &targets))
                as Objective,
        ))
    })?);
    Ok(out)
}

use super::{
    adaptive_avg_pool, pool_on_tape, token_side, FeatureGrid, GateKind, GridVar, PooledFeatures,
    Projector, ProjectorConfig, ProjectorDims, VisionTokens,
};
use crate::error::{Error, Result};
use crate::params::{uniform_matrix, Bound, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor, Var};

/// Parameter indices of the LayerNorm + gated-unit head inside a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct GatedHead {
    gamma: usize,
    beta: usize,
    w1: usize,
    w2: usize,
    w3: usize,
    biases: Option<[usize; 3]>,
}

impl GatedHead {
    pub(crate) fn init(params: &mut ParamSet, cfg: &ProjectorConfig, rng: &mut SeedRng) -> Self {
        let ProjectorDims { c_v, d_h, c_text } = cfg.dims;
        let gamma = params.push("ln_gamma", Tensor::full(vec![c_v], 1.0));
        let beta = params.push("ln_beta", Tensor::zeros(vec![c_v]));
        let w1 = params.push("w1", uniform_matrix(rng, d_h, c_v, c_v));
        let w2 = params.push("w2", uniform_matrix(rng, d_h, c_v, c_v));
        let w3 = params.push("w3", uniform_matrix(rng, c_text, d_h, d_h));
        let biases = cfg.bias.then(|| {
            [
                params.push("b1", Tensor::zeros(vec![d_h])),
                params.push("b2", Tensor::zeros(vec![d_h])),
                params.push("b3", Tensor::zeros(vec![c_text])),
            ]
        });
        Self {
            gamma,
            beta,
            w1,
            w2,
            w3,
            biases,
        }
    }

    /// LayerNorm over channels of the `N×C_v` rows.
    pub(crate) fn normalize(&self, tape: &mut Tape, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), eps)
    }

    /// `W3·((W1·x) ⊙ g(W2·x))` applied to each row.
    pub(crate) fn gated(&self, tape: &mut Tape, p: &Bound, x: Var, gate: GateKind) -> Result<Var> {
        let mut a = tape.matmul_nt(x, p.var(self.w1))?;
        let mut z = tape.matmul_nt(x, p.var(self.w2))?;
        if let Some([b1, b2, _]) = self.biases {
            a = tape.add_row(a, p.var(b1))?;
            z = tape.add_row(z, p.var(b2))?;
        }
        let g = gate.apply(tape, z);
        let h = tape.mul(a, g)?;
        let mut out = tape.matmul_nt(h, p.var(self.w3))?;
        if let Some([_, _, b3]) = self.biases {
            out = tape.add_row(out, p.var(b3))?;
        }
        Ok(out)
    }
}

/// Adaptive pooling, LayerNorm and a gated linear unit followed by an
/// output projection into the text embedding width.
#[derive(Debug, Clone)]
pub struct GatedProjector {
    config: ProjectorConfig,
    params: ParamSet,
    head: GatedHead,
}

impl GatedProjector {
    pub const NAME: &'static str = "adaptive";

    pub fn init(mut config: ProjectorConfig, rng: &mut SeedRng) -> Result<Self> {
        config.kind = Self::NAME.to_string();
        let mut params = ParamSet::new();
        let head = GatedHead::init(&mut params, &config, rng);
        Ok(Self {
            config,
            params,
            head,
        })
    }

    pub fn dims(&self) -> ProjectorDims {
        self.config.dims
    }

    pub fn gate(&self) -> GateKind {
        self.config.gate
    }

    pub fn set_gate(&mut self, gate: GateKind) {
        self.config.gate = gate;
    }

    fn tensor(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("gated projector parameter")
    }

    pub fn w1(&self) -> &Tensor {
        self.tensor("w1")
    }

    pub fn w2(&self) -> &Tensor {
        self.tensor("w2")
    }

    pub fn w3(&self) -> &Tensor {
        self.tensor("w3")
    }

    pub fn ln_gamma(&self) -> &Tensor {
        self.tensor("ln_gamma")
    }

    pub fn ln_beta(&self) -> &Tensor {
        self.tensor("ln_beta")
    }

    /// Mutable access by parameter name (`w1`, `w2`, `w3`, `ln_gamma`, `ln_beta`).
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }
}

impl Projector for GatedProjector {
    fn config(&self) -> &ProjectorConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, grid: GridVar, n: usize) -> Result<Var> {
        let pooled = pool_on_tape(tape, grid, n)?;
        let normed = self.head.normalize(tape, p, pooled, self.config.ln_eps)?;
        self.head.gated(tape, p, normed, self.config.gate)
    }

    fn box_clone(&self) -> Box<dyn Projector> {
        Box::new(self.clone())
    }
}

/// Seeded gated projector with default hidden width, sigmoid gate and no biases.
pub fn init_params(dims: ProjectorDims, seed: u64) -> Result<GatedProjector> {
    dims.validate()?;
    GatedProjector::init(
        ProjectorConfig::new(GatedProjector::NAME, dims),
        &mut SeedRng::new(seed),
    )
}

/// Per-row LayerNorm of pooled features (population variance).
pub fn layer_norm(pooled: &PooledFeatures, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(&pooled.values);
    let g = tape.constant(gamma);
    let b = tape.constant(beta);
    let out = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.tensor(out))
}

/// Applies the gated unit and output projection to already-normalised `N×C_v` rows.
pub fn swiglu_project(normalized: &Tensor, params: &GatedProjector) -> Result<VisionTokens> {
    if normalized.shape().len() != 2 || normalized.cols() != params.dims().c_v {
        return Err(Error::contract(format!(
            "expected N×{} input, got {:?}",
            params.dims().c_v,
            normalized.shape()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.params.bind_constant(&mut tape);
    let x = tape.constant(normalized);
    let out = params.head.gated(&mut tape, &bound, x, params.gate())?;
    Ok(VisionTokens {
        count: normalized.rows(),
        dim: params.dims().c_text,
        values: tape.tensor(out),
    })
}

/// Pool to `count` tokens, normalise, gate and project.
pub fn project(grid: &FeatureGrid, count: usize, params: &GatedProjector) -> Result<VisionTokens> {
    let n = token_side(count)?;
    let pooled = adaptive_avg_pool(grid, n)?;
    let normed = layer_norm(&pooled, params.ln_gamma(), params.ln_beta(), params.config.ln_eps)?;
    swiglu_project(&normed, params)
}

use super::{pool_on_tape, FeatureGrid, GridVar, Projector, ProjectorConfig, VisionTokens};
use crate::error::Result;
use crate::params::{uniform_matrix, Bound, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor, Var};

/// Grouped average pooling followed by a two-layer GELU MLP, no LayerNorm.
#[derive(Debug, Clone)]
pub struct NaiveProjector {
    config: ProjectorConfig,
    params: ParamSet,
}

impl NaiveProjector {
    pub const NAME: &'static str = "naive";

    pub fn init(mut config: ProjectorConfig, rng: &mut SeedRng) -> Result<Self> {
        config.kind = Self::NAME.to_string();
        let d = config.dims;
        let mut params = ParamSet::new();
        params.push("wa", uniform_matrix(rng, d.d_h, d.c_v, d.c_v));
        params.push("wb", uniform_matrix(rng, d.c_text, d.d_h, d.d_h));
        if config.bias {
            params.push("ba", Tensor::zeros(vec![d.d_h]));
            params.push("bb", Tensor::zeros(vec![d.c_text]));
        }
        Ok(Self { config, params })
    }
}

impl Projector for NaiveProjector {
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
        let mut h = tape.matmul_nt(pooled, p.var(0))?;
        if self.config.bias {
            h = tape.add_row(h, p.var(2))?;
        }
        let h = tape.gelu(h);
        let mut out = tape.matmul_nt(h, p.var(1))?;
        if self.config.bias {
            out = tape.add_row(out, p.var(3))?;
        }
        Ok(out)
    }

    fn box_clone(&self) -> Box<dyn Projector> {
        Box::new(self.clone())
    }
}

pub fn naive_project(grid: &FeatureGrid, count: usize, params: &NaiveProjector) -> Result<VisionTokens> {
    params.project(grid, count)
}

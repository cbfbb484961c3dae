use std::sync::Arc;

use super::gated::GatedHead;
use super::{adaptive_bins, FeatureGrid, GridVar, Projector, ProjectorConfig, VisionTokens};
use crate::error::Result;
use crate::params::{uniform_matrix, Bound, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::{CellRange, Tape, Var};

/// Local cross-attention inside each pooling bin: the bin's pooled feature is
/// the query, its member cells are keys and values. A residual connection
/// adds the pooled feature back before the LayerNorm + gated head.
///
/// Single head, key width `C_v`, scale `1/sqrt(C_v)`.
#[derive(Debug, Clone)]
pub struct AttnProjector {
    config: ProjectorConfig,
    params: ParamSet,
    head: GatedHead,
}

const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;

impl AttnProjector {
    pub const NAME: &'static str = "attn";

    pub fn init(mut config: ProjectorConfig, rng: &mut SeedRng) -> Result<Self> {
        config.kind = Self::NAME.to_string();
        let c_v = config.dims.c_v;
        let mut params = ParamSet::new();
        params.push("wq", uniform_matrix(rng, c_v, c_v, c_v));
        params.push("wk", uniform_matrix(rng, c_v, c_v, c_v));
        params.push("wv", uniform_matrix(rng, c_v, c_v, c_v));
        let head = GatedHead::init(&mut params, &config, rng);
        Ok(Self {
            config,
            params,
            head,
        })
    }

    /// Records the residual attention output (`n²×C_v`) before the head.
    pub(crate) fn attend(&self, tape: &mut Tape, p: &Bound, grid: GridVar, n: usize) -> Result<Var> {
        let bins: Arc<[CellRange]> = adaptive_bins(grid.height, grid.width, n)?.into();
        let pooled = tape.avg_pool(grid.var, grid.width, bins.clone())?;
        let q = tape.matmul_nt(pooled, p.var(WQ))?;
        let k = tape.matmul_nt(grid.var, p.var(WK))?;
        let v = tape.matmul_nt(grid.var, p.var(WV))?;
        let scale = 1.0 / (self.config.dims.c_v as f64).sqrt();
        let mut rows = Vec::with_capacity(bins.len());
        for (b, bin) in bins.iter().enumerate() {
            let cells: Arc<[usize]> = bin.cells(grid.width).collect();
            let kb = tape.gather_rows(k, cells.clone())?;
            let vb = tape.gather_rows(v, cells)?;
            let qb = tape.slice_rows(q, b, b + 1)?;
            let s = tape.matmul_nt(qb, kb)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s)?;
            rows.push(tape.matmul(a, vb)?);
        }
        let attended = tape.concat_rows(&rows)?;
        tape.add(pooled, attended)
    }
}

impl Projector for AttnProjector {
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
        let x = self.attend(tape, p, grid, n)?;
        let normed = self.head.normalize(tape, p, x, self.config.ln_eps)?;
        self.head.gated(tape, p, normed, self.config.gate)
    }

    fn box_clone(&self) -> Box<dyn Projector> {
        Box::new(self.clone())
    }
}

pub fn attn_project(grid: &FeatureGrid, count: usize, params: &AttnProjector) -> Result<VisionTokens> {
    params.project(grid, count)
}

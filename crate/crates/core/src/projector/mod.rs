//! Vision-token projectors: map a feature grid to a caller-chosen number of
//! tokens `N = n²` in the text embedding space.
//!
//! Every projector implements [`Projector`] and is constructed by name
//! through a [`ProjectorRegistry`]:
//!
//! | name       | pipeline                                                        |
//! |------------|-----------------------------------------------------------------|
//! | `adaptive` | adaptive average pool → LayerNorm → gated linear unit → `W3`   |
//! | `naive`    | adaptive average pool → two-layer GELU MLP                      |
//! | `attn`     | pool, local cross-attention (pooled query, bin cells as keys), residual, then the `adaptive` head |

mod attn;
mod gated;
mod naive;
mod pool;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::{self, Manifest};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor, Var};

pub use attn::{attn_project, AttnProjector};
pub use gated::{init_params, layer_norm, project, swiglu_project, GatedProjector};
pub use naive::{naive_project, NaiveProjector};
pub use pool::{adaptive_avg_pool, adaptive_bins, pool_on_tape, FeatureGrid, GridVar, PooledFeatures};

pub use crate::tensor::CellRange as Bin;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Gating nonlinearity applied to `W2·x` before the elementwise product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateKind {
    /// `σ(z)`
    #[default]
    Sigmoid,
    /// `z·σ(z)`
    Swish,
}

impl GateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GateKind::Sigmoid => "sigmoid",
            GateKind::Swish => "swish",
        }
    }

    pub(crate) fn apply(self, tape: &mut Tape, z: Var) -> Var {
        match self {
            GateKind::Sigmoid => tape.sigmoid(z),
            GateKind::Swish => tape.swish(z),
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(GateKind::Sigmoid),
            "swish" => Ok(GateKind::Swish),
            other => Err(Error::Unknown {
                kind: "gate kind",
                name: other.to_string(),
            }),
        }
    }
}

/// Feature width `c_v`, hidden width `d_h` and output width `c_text`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorDims {
    pub c_v: usize,
    pub d_h: usize,
    pub c_text: usize,
}

impl ProjectorDims {
    /// Hidden width defaults to the output width.
    pub fn new(c_v: usize, c_text: usize) -> Self {
        Self {
            c_v,
            d_h: c_text,
            c_text,
        }
    }

    pub fn with_hidden(mut self, d_h: usize) -> Self {
        self.d_h = d_h;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.c_v == 0 || self.d_h == 0 || self.c_text == 0 {
            return Err(Error::contract(format!("projector dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorConfig {
    pub kind: String,
    pub dims: ProjectorDims,
    pub gate: GateKind,
    pub bias: bool,
    pub ln_eps: f64,
}

impl ProjectorConfig {
    pub fn new(kind: &str, dims: ProjectorDims) -> Self {
        Self {
            kind: kind.to_string(),
            dims,
            gate: GateKind::default(),
            bias: false,
            ln_eps: LAYER_NORM_EPS,
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new()
            .with("projector", &self.kind)
            .with("c_v", self.dims.c_v)
            .with("d_h", self.dims.d_h)
            .with("c_text", self.dims.c_text)
            .with("gate_kind", self.gate)
            .with("bias", self.bias)
            .with("ln_eps", self.ln_eps)
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(Self {
            kind: m.require("projector")?.to_string(),
            dims: ProjectorDims {
                c_v: m.parse("c_v")?,
                d_h: m.parse("d_h")?,
                c_text: m.parse("c_text")?,
            },
            gate: m.require("gate_kind")?.parse()?,
            bias: m.parse("bias")?,
            ln_eps: m.parse("ln_eps")?,
        })
    }
}

/// `N×C_text` tokens in raster order of the `n×n` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionTokens {
    pub count: usize,
    pub dim: usize,
    pub values: Tensor,
}

/// Side `n` of a perfect-square token count `N = n²`.
pub fn token_side(count: usize) -> Result<usize> {
    let n = (count as f64).sqrt().round() as usize;
    if count == 0 || n * n != count {
        return Err(Error::NotPerfectSquare(count));
    }
    Ok(n)
}

/// A token-count-adaptive projector.
pub trait Projector: fmt::Debug + Send + Sync {
    fn config(&self) -> &ProjectorConfig;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Records the projection of `grid` onto an `n×n` token layout and
    /// returns the `n²×C_text` token matrix.
    fn forward(&self, tape: &mut Tape, params: &Bound, grid: GridVar, n: usize) -> Result<Var>;

    fn box_clone(&self) -> Box<dyn Projector>;

    fn kind(&self) -> &str {
        &self.config().kind
    }

    /// Evaluates the projector without recording gradients.
    fn project(&self, grid: &FeatureGrid, count: usize) -> Result<VisionTokens> {
        let n = token_side(count)?;
        let mut tape = Tape::new();
        let bound = self.params().bind_constant(&mut tape);
        let g = grid.record(&mut tape);
        let out = self.forward(&mut tape, &bound, g, n)?;
        Ok(VisionTokens {
            count,
            dim: self.config().dims.c_text,
            values: tape.tensor(out),
        })
    }

    fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_params(path, &self.config().manifest(), self.params())
    }
}

impl Clone for Box<dyn Projector> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

pub type ProjectorBuilder = fn(&ProjectorConfig, &mut SeedRng) -> Result<Box<dyn Projector>>;

/// Name → constructor table for projector variants.
#[derive(Clone)]
pub struct ProjectorRegistry {
    builders: BTreeMap<String, ProjectorBuilder>,
}

impl Default for ProjectorRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register(GatedProjector::NAME, |c, rng| {
            Ok(Box::new(GatedProjector::init(c.clone(), rng)?))
        });
        r.register(NaiveProjector::NAME, |c, rng| {
            Ok(Box::new(NaiveProjector::init(c.clone(), rng)?))
        });
        r.register(AttnProjector::NAME, |c, rng| {
            Ok(Box::new(AttnProjector::init(c.clone(), rng)?))
        });
        r
    }
}

impl ProjectorRegistry {
    pub fn register(&mut self, name: &str, builder: ProjectorBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(&self, config: &ProjectorConfig, seed: u64) -> Result<Box<dyn Projector>> {
        let builder = self.builders.get(&config.kind).ok_or_else(|| Error::Unknown {
            kind: "projector",
            name: config.kind.clone(),
        })?;
        config.dims.validate()?;
        builder(config, &mut SeedRng::new(seed))
    }

    pub fn load(&self, path: &Path) -> Result<Box<dyn Projector>> {
        let (manifest, tensors) = checkpoint::load(path)?;
        let config = ProjectorConfig::from_manifest(&manifest)?;
        let mut p = self.build(&config, 0)?;
        if manifest.require("params")? != p.params().names().join(",") {
            return Err(Error::format("projector checkpoint", "parameter list mismatch"));
        }
        p.params_mut().load_values(tensors)?;
        Ok(p)
    }
}

impl fmt::Debug for ProjectorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.builders.keys()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_squares() {
        assert_eq!(token_side(64).unwrap(), 8);
        assert_eq!(token_side(1).unwrap(), 1);
        assert!(matches!(token_side(63), Err(Error::NotPerfectSquare(63))));
        assert!(token_side(0).is_err());
    }

    #[test]
    fn registry_builds_every_variant_and_rejects_unknown() {
        let reg = ProjectorRegistry::default();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["adaptive", "attn", "naive"]);
        let dims = ProjectorDims::new(4, 6);
        for name in ["adaptive", "attn", "naive"] {
            let p = reg.build(&ProjectorConfig::new(name, dims), 3).unwrap();
            assert_eq!(p.kind(), name);
            let grid = FeatureGrid::constant(4, 4, 4, 0.5);
            let t = p.project(&grid, 4).unwrap();
            assert_eq!(t.values.shape(), &[4, 6]);
        }
        assert!(matches!(
            reg.build(&ProjectorConfig::new("pixel-shuffle", dims), 0),
            Err(Error::Unknown { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_through_registry() {
        let dir = tempfile::tempdir().unwrap();
        let reg = ProjectorRegistry::default();
        let mut cfg = ProjectorConfig::new("adaptive", ProjectorDims::new(3, 5));
        cfg.gate = GateKind::Swish;
        let p = reg.build(&cfg, 9).unwrap();
        let path = dir.path().join("p.ckpt");
        p.save(&path).unwrap();
        let q = reg.load(&path).unwrap();
        assert_eq!(q.config(), p.config());
        assert_eq!(q.params().tensors()[0].data(), p.params().tensors()[0].data());
    }
}

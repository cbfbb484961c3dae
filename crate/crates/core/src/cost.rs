//! Vision-token budget accounting in exact rational arithmetic.

use std::fmt;
use std::time::Duration;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::trainer::Regime;

pub const DEFAULT_MAX_TILES: usize = 12;

/// An `i×j` tiling of a high-resolution image, optionally with a global
/// thumbnail, each tile projected to `base_tokens` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileSpec {
    pub i: usize,
    pub j: usize,
    pub max_tiles: usize,
    pub thumbnail: bool,
    pub base_tokens: usize,
}

impl TileSpec {
    pub fn new(i: usize, j: usize, base_tokens: usize) -> Self {
        Self {
            i,
            j,
            max_tiles: DEFAULT_MAX_TILES,
            thumbnail: true,
            base_tokens,
        }
    }

    pub fn tiles(&self) -> usize {
        self.i * self.j + usize::from(self.thumbnail)
    }

    pub fn validate(&self) -> Result<()> {
        if self.i == 0 || self.j == 0 {
            return Err(Error::contract(format!("tile factors must be positive, got {}×{}", self.i, self.j)));
        }
        if self.i * self.j > self.max_tiles {
            return Err(Error::contract(format!(
                "{}×{} tiles exceed the limit of {}",
                self.i, self.j, self.max_tiles
            )));
        }
        Ok(())
    }
}

/// `(i·j + thumbnail) · base_tokens`.
pub fn tile_tokens(spec: &TileSpec) -> Result<u64> {
    spec.validate()?;
    Ok((spec.tiles() * spec.base_tokens) as u64)
}

/// Every `(i, j)` with `i·j ≤ max_tiles`.
pub fn tile_grids(max_tiles: usize) -> Vec<(usize, usize)> {
    (1..=max_tiles)
        .flat_map(|i| (1..=max_tiles / i).map(move |j| (i, j)))
        .collect()
}

/// A distribution over tile layouts; weights need not be normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct Tiling {
    pub layouts: Vec<((usize, usize), u64)>,
    pub thumbnail: bool,
    pub max_tiles: usize,
}

impl Tiling {
    /// Expected number of projected images (tiles plus thumbnail) per input image.
    pub fn expected_tiles(&self) -> Result<Ratio<i128>> {
        let total: u64 = self.layouts.iter().map(|&(_, w)| w).sum();
        if total == 0 {
            return Err(Error::contract("tiling weights sum to zero"));
        }
        let mut acc = Ratio::from_integer(0);
        for &((i, j), w) in &self.layouts {
            let spec = TileSpec {
                i,
                j,
                max_tiles: self.max_tiles,
                thumbnail: self.thumbnail,
                base_tokens: 1,
            };
            spec.validate()?;
            acc += Ratio::new(w as i128 * spec.tiles() as i128, total as i128);
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub regime: String,
    pub images: u64,
    /// Expected tokens per image, tiling included.
    pub tokens_per_image: Ratio<i128>,
    pub total_tokens: Ratio<i128>,
    pub reference: String,
    pub reference_total: Ratio<i128>,
    /// `1 − total / reference_total`.
    pub reduction: Ratio<i128>,
    pub wall_time: Option<Duration>,
}

impl CostReport {
    pub fn reduction_percent(&self) -> Ratio<i128> {
        self.reduction * Ratio::from_integer(100)
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} tokens/image, {} total, {}% fewer than {}",
            self.regime,
            decimal(&self.tokens_per_image, 4),
            decimal(&self.total_tokens, 4),
            decimal(&self.reduction_percent(), 4),
            self.reference
        )
    }
}

fn tokens_per_image(regime: &Regime, tiling: Option<&Tiling>) -> Result<Ratio<i128>> {
    let base = regime.schedule()?.expected_tokens_exact();
    Ok(match tiling {
        Some(t) => base * t.expected_tiles()?,
        None => base,
    })
}

/// Token cost of `images` images under `regime`, compared to `reference`.
pub fn regime_cost(regime: &Regime, images: u64, tiling: Option<&Tiling>, reference: &Regime) -> Result<CostReport> {
    let per = tokens_per_image(regime, tiling)?;
    let images_r = Ratio::from_integer(images as i128);
    let total = per * images_r;
    let reference_total = tokens_per_image(reference, tiling)? * images_r;
    let one = Ratio::from_integer(1);
    let reduction = if reference_total == Ratio::from_integer(0) {
        Ratio::from_integer(0)
    } else {
        one - total / reference_total
    };
    Ok(CostReport {
        regime: regime.to_string(),
        images,
        tokens_per_image: per,
        total_tokens: total,
        reference: reference.to_string(),
        reference_total,
        reduction,
        wall_time: None,
    })
}

/// Decimal rendering of a rational: exact when it terminates within
/// `max_digits` fractional digits (at least one digit is always shown),
/// otherwise rounded half away from zero.
pub fn decimal(r: &Ratio<i128>, max_digits: usize) -> String {
    let neg = *r.numer() < 0;
    let (num, den) = (r.numer().abs(), *r.denom());
    let scale = 10i128.pow(max_digits as u32);
    let scaled = num * scale;
    let mut q = scaled / den;
    if (scaled % den) * 2 >= den {
        q += 1;
    }
    let int = q / scale;
    let mut frac = format!("{:0width$}", q % scale, width = max_digits);
    while frac.len() > 1 && frac.ends_with('0') {
        frac.pop();
    }
    if frac.is_empty() {
        frac.push('0');
    }
    format!("{}{int}.{frac}", if neg && q != 0 { "-" } else { "" })
}

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{PairedDataset, Split};

/// `X = s (W sin W + C3)`, `Y = s (W cos W + C4)` with `W = 1.5 pi (1 + 2H)`,
/// `H ~ U(0, 1)` and `C3, C4 ~ N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpiralSpec {
    pub scale: f64,
}

impl Default for SpiralSpec {
    fn default() -> Self {
        Self { scale: 0.1 }
    }
}

pub fn spiral_generate<R: Rng + ?Sized>(
    spec: &SpiralSpec,
    n: usize,
    split: Split,
    rng: &mut R,
) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale must be positive, got {}",
            spec.scale
        )));
    }
    let mut x = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        let h: f64 = rng.random();
        let w = 1.5 * PI * (1.0 + 2.0 * h);
        let c3: f64 = rng.sample(StandardNormal);
        let c4: f64 = rng.sample(StandardNormal);
        x[[i, 0]] = spec.scale * (w * w.sin() + c3);
        y[[i, 0]] = spec.scale * (w * w.cos() + c4);
    }
    PairedDataset::new(x, y, split)
}

/// Rows of `pool.x` whose measurement lies within `band / 2` of `y_hat`.
///
/// `band` is the total width of the acceptance window; pass `f64::INFINITY`
/// to keep everything.
pub fn spiral_reference_conditional(
    pool: &PairedDataset,
    y_hat: f64,
    band: f64,
) -> Result<Array2<f64>> {
    if pool.y_dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: pool.y_dim(),
            context: "reference pool measurement",
        });
    }
    if band.is_nan() || band <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "band must be positive, got {band}"
        )));
    }
    let half = band / 2.0;
    let keep: Vec<usize> = (0..pool.len())
        .filter(|&i| (pool.y[[i, 0]] - y_hat).abs() <= half)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyResult(format!(
            "no pool measurement within {half} of {y_hat} (0 of {} rows)",
            pool.len()
        )));
    }
    Ok(pool.x.select(ndarray::Axis(0), &keep))
}

//! Per-tensor gradient distortion operators: random pruning and stochastic
//! rounding quantization (plain min/max grid or sign-magnitude grid).
//!
//! Ranges are computed per tensor over the full dense gradient, untouched
//! embedding rows included. A plain grid usually has no point at zero, so
//! exact zeros come back as small nonzero values; the sign-magnitude grid
//! always contains zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};
use crate::tensor::{Matrix, ParamTensors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantScheme {
    Plain,
    SignMagnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    /// Round up to `p[k+1]` with probability `(x - p[k]) / (p[k+1] - p[k])`.
    #[default]
    Unbiased,
    /// Round down to `p[k]` with that probability instead.
    Reversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub scheme: QuantScheme,
    pub rounding: Rounding,
}

impl QuantSpec {
    pub fn new(bits: u32, scheme: QuantScheme) -> Self {
        Self {
            bits,
            scheme,
            rounding: Rounding::Unbiased,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=32).contains(&self.bits) {
            return Err(Error::invalid(format!(
                "bits must be in [1, 32], got {}",
                self.bits
            )));
        }
        if self.scheme == QuantScheme::SignMagnitude && self.bits < 2 {
            return Err(Error::invalid(
                "sign-magnitude quantization needs >= 2 bits",
            ));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.bits == 32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub drop_fraction: f64,
    #[serde(default)]
    pub rescale: bool,
}

impl PruneSpec {
    pub fn new(drop_fraction: f64) -> Self {
        Self {
            drop_fraction,
            rescale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::invalid(format!(
                "drop fraction must be in [0, 1), got {}",
                self.drop_fraction
            )));
        }
        Ok(())
    }
}

/// Uniform grid of `levels` points over `[lo, hi]`.
#[derive(Debug, Clone, Copy)]
struct Grid {
    lo: f64,
    hi: f64,
    step: f64,
    last: u64,
}

impl Grid {
    fn new(lo: f64, hi: f64, levels: u64) -> Self {
        let last = levels - 1;
        Self {
            lo,
            hi,
            step: (hi - lo) / last as f64,
            last,
        }
    }

    #[inline]
    fn point(&self, k: u64) -> f64 {
        if k >= self.last {
            self.hi
        } else {
            self.lo + k as f64 * self.step
        }
    }

    /// Stochastically rounds `x` (inside `[lo, hi]`) to a neighbouring point.
    #[inline]
    fn round<R: Rng>(&self, x: f64, rounding: Rounding, rng: &mut R) -> f64 {
        let t = ((x - self.lo) / self.step).floor();
        let k = if t <= 0.0 {
            0
        } else {
            (t as u64).min(self.last - 1)
        };
        let (below, above) = (self.point(k), self.point(k + 1));
        if x <= below {
            return below;
        }
        if x >= above {
            return above;
        }
        let frac = (x - below) / (above - below);
        let u: f64 = rng.random();
        let up = match rounding {
            Rounding::Unbiased => u < frac,
            Rounding::Reversed => u >= frac,
        };
        if up {
            above
        } else {
            below
        }
    }
}

fn check_finite(m: &Matrix) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient tensor".into()))
    }
}

/// Quantizes one tensor in place.
pub fn quantize_tensor<R: Rng>(m: &mut Matrix, spec: &QuantSpec, rng: &mut R) -> Result<()> {
    spec.validate()?;
    check_finite(m)?;
    if spec.is_identity() || m.is_empty() {
        return Ok(());
    }
    match spec.scheme {
        QuantScheme::Plain => {
            let lo = m.data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                return Ok(());
            }
            let grid = Grid::new(lo, hi, 1u64 << spec.bits);
            for v in m.data.iter_mut() {
                *v = grid.round(*v, spec.rounding, rng);
            }
        }
        QuantScheme::SignMagnitude => {
            let max = m.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if max == 0.0 {
                return Ok(());
            }
            let grid = Grid::new(0.0, max, 1u64 << (spec.bits - 1));
            for v in m.data.iter_mut() {
                let q = grid.round(v.abs(), spec.rounding, rng);
                *v = if *v < 0.0 { -q } else { q };
            }
        }
    }
    Ok(())
}

/// Zeroes each coordinate independently with probability `drop_fraction`.
pub fn prune_tensor<R: Rng>(m: &mut Matrix, spec: &PruneSpec, rng: &mut R) -> Result<()> {
    spec.validate()?;
    if spec.drop_fraction == 0.0 {
        return Ok(());
    }
    let keep_scale = if spec.rescale {
        1.0 / (1.0 - spec.drop_fraction)
    } else {
        1.0
    };
    for v in m.data.iter_mut() {
        if rng.random::<f64>() < spec.drop_fraction {
            *v = 0.0;
        } else {
            *v *= keep_scale;
        }
    }
    Ok(())
}

/// Quantizes every tensor with its own range. Tensor `i` draws from the
/// stream derived from `(seed, i)`.
pub fn quantize(grad: &ParamTensors, spec: &QuantSpec, seed: u64) -> Result<ParamTensors> {
    spec.validate()?;
    let mut out = grad.clone();
    for (i, t) in out.tensors_mut().into_iter().enumerate() {
        let mut rng = rng_from(&[seed, stream::COMPRESS, i as u64]);
        quantize_tensor(t, spec, &mut rng)?;
    }
    Ok(out)
}

pub fn prune(grad: &ParamTensors, spec: &PruneSpec, seed: u64) -> Result<ParamTensors> {
    spec.validate()?;
    let mut out = grad.clone();
    for (i, t) in out.tensors_mut().into_iter().enumerate() {
        let mut rng = rng_from(&[seed, stream::COMPRESS, i as u64]);
        prune_tensor(t, spec, &mut rng)?;
    }
    Ok(out)
}

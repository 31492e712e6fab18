//! Smoothing kernels on the real line.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Truncation radius (in bandwidth units) of the Gaussian kernel on the
/// windowed fast path. The neglected tail mass is below 1e-8.
pub const GAUSSIAN_TRUNCATION: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Epanechnikov,
    Uniform,
    Gaussian,
}

impl Kernel {
    /// Probability density at `u`.
    pub fn density(self, u: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            Kernel::Uniform => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            Kernel::Gaussian => (-0.5 * u * u).exp() / (2.0 * PI).sqrt(),
        }
    }

    /// `K_h(u) = K(u / h) / h`.
    #[inline]
    pub fn scaled(self, u: f64, h: f64) -> f64 {
        self.density(u / h) / h
    }

    pub fn has_compact_support(self) -> bool {
        !matches!(self, Kernel::Gaussian)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Epanechnikov => "epanechnikov",
            Kernel::Uniform => "uniform",
            Kernel::Gaussian => "gaussian",
        })
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" | "epa" => Ok(Kernel::Epanechnikov),
            "uniform" | "box" => Ok(Kernel::Uniform),
            "gaussian" | "normal" => Ok(Kernel::Gaussian),
            other => Err(Error::InvalidConfig(format!("unknown kernel `{other}`"))),
        }
    }
}

/// A kernel plus the evaluation policy used by the windowed sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct KernelSpec {
    pub kernel: Kernel,
    /// Sum the Gaussian kernel over every observation instead of truncating
    /// at `GAUSSIAN_TRUNCATION` bandwidths. No effect for compact kernels.
    #[serde(default)]
    pub exact: bool,
}

impl KernelSpec {
    pub fn new(kernel: Kernel) -> Self {
        Self { kernel, exact: false }
    }

    pub fn exact(kernel: Kernel) -> Self {
        Self { kernel, exact: true }
    }

    /// Half-width of the window, in bandwidth units, outside which weights are
    /// treated as zero. Infinite for the exact Gaussian path.
    pub fn radius(&self) -> f64 {
        match self.kernel {
            Kernel::Gaussian if self.exact => f64::INFINITY,
            Kernel::Gaussian => GAUSSIAN_TRUNCATION,
            _ => 1.0,
        }
    }

    #[inline]
    pub fn weight(&self, u: f64, h: f64) -> f64 {
        if (u / h).abs() > self.radius() {
            0.0
        } else {
            self.kernel.scaled(u, h)
        }
    }
}

impl From<Kernel> for KernelSpec {
    fn from(kernel: Kernel) -> Self {
        KernelSpec::new(kernel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(k: Kernel, lo: f64, hi: f64) -> f64 {
        // composite Simpson
        let n = 200_000;
        let step = (hi - lo) / n as f64;
        let mut acc = k.density(lo) + k.density(hi);
        for i in 1..n {
            let x = lo + i as f64 * step;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * k.density(x);
        }
        acc * step / 3.0
    }

    #[test]
    fn kernels_are_densities() {
        assert!((integrate(Kernel::Epanechnikov, -1.0, 1.0) - 1.0).abs() < 1e-9);
        assert!((integrate(Kernel::Uniform, -1.0, 1.0) - 1.0).abs() < 1e-6);
        assert!((integrate(Kernel::Gaussian, -12.0, 12.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_tail_beyond_truncation_is_negligible() {
        let tail = 2.0 * integrate(Kernel::Gaussian, GAUSSIAN_TRUNCATION, 40.0);
        assert!(tail < 1e-8, "tail mass {tail}");
    }

    #[test]
    fn compact_support() {
        for k in [Kernel::Epanechnikov, Kernel::Uniform] {
            assert_eq!(k.density(1.5), 0.0);
            assert!(k.has_compact_support());
        }
        assert!(!Kernel::Gaussian.has_compact_support());
    }

    #[test]
    fn parse_round_trip() {
        for k in [Kernel::Epanechnikov, Kernel::Uniform, Kernel::Gaussian] {
            assert_eq!(k.to_string().parse::<Kernel>().unwrap(), k);
        }
        assert!("triangle".parse::<Kernel>().is_err());
    }
}

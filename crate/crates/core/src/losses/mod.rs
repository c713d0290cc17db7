//! Training objectives and their weighted composition.

pub mod balance;
pub mod geometric;
pub mod photometric;
pub mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskBitmap;

pub use balance::{gradient_weight, loss_count_balance, loss_gc_load, GRAD_W_CAP, GRAD_W_FLOOR};
pub use geometric::{loss_ban, loss_flatten, loss_mv_geo, MV_GEO_CAP};
pub use photometric::{loss_coverage, loss_mv_rgb, loss_rgb, NCC_PATCH};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Weight of the mask coverage term, inside the geometric group.
    pub coverage: f64,
    pub boundary_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.41,
            lambda1: 0.05,
            lambda2: 0.2,
            lambda3: 100.0,
            lambda4: 0.01,
            coverage: 0.3,
            boundary_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.coverage, self.boundary_weight];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.lambda > 1.0 {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }

    /// Coefficient of each component in the total, in [`LossComponents`] order.
    pub fn coefficients(&self) -> LossComponents {
        let g = 1.0 - self.lambda;
        LossComponents {
            rgb: g,
            mv_geo: g * self.lambda1,
            mv_rgb: g * self.lambda2,
            flatten: g * self.lambda3,
            ban: g * self.lambda4,
            coverage: g * self.coverage,
            gc_load: self.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rgb: f64,
    pub mv_geo: f64,
    pub mv_rgb: f64,
    pub flatten: f64,
    pub ban: f64,
    pub coverage: f64,
    pub gc_load: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 7] = ["rgb", "mv_geo", "mv_rgb", "flatten", "ban", "coverage", "gc_load"];

    pub fn values(&self) -> [f64; 7] {
        [self.rgb, self.mv_geo, self.mv_rgb, self.flatten, self.ban, self.coverage, self.gc_load]
    }
}

/// `(1 - lambda) * (rgb + l1 mv_geo + l2 mv_rgb + l3 flatten + l4 ban + c coverage) + lambda * gc_load`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in LossComponents::NAMES.iter().zip(c.values()) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    Ok(c.values().iter().zip(w.coefficients().values()).map(|(v, k)| v * k).sum())
}

/// Per-pixel weights for one view: `ban_w` for the normal loss and `grad_w`
/// for the load-balance loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelWeightMaps {
    pub width: usize,
    pub height: usize,
    pub ban_w: Vec<f64>,
    pub grad_w: Vec<f64>,
}

impl PixelWeightMaps {
    pub fn new(rbm: &MaskBitmap, mb: &MaskBitmap, boundary_weight: f64, gray: &[f64]) -> Self {
        Self {
            width: rbm.width,
            height: rbm.height,
            ban_w: ban_weights(rbm, mb, boundary_weight),
            grad_w: gradient_weight(gray, rbm),
        }
    }
}

/// `boundary_weight` on the band inside the mask, 1 elsewhere inside, 0 outside.
pub fn ban_weights(rbm: &MaskBitmap, mb: &MaskBitmap, boundary_weight: f64) -> Vec<f64> {
    rbm.bits
        .iter()
        .zip(&mb.bits)
        .map(|(&r, &b)| match (r, b) {
            (false, _) => 0.0,
            (true, true) => boundary_weight,
            (true, false) => 1.0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let c = LossComponents { rgb: 1.0, ..Default::default() };
        assert!((total_loss(&c, &w).unwrap() - 0.59).abs() < 1e-12);
        let c = LossComponents { flatten: 0.01, ..Default::default() };
        assert!((total_loss(&c, &w).unwrap() - 0.59).abs() < 1e-12);
    }

    #[test]
    fn total_is_linear_in_each_component() {
        let w = LossWeights::default();
        let k = w.coefficients().values();
        for i in 0..7 {
            let mut v = [0.0; 7];
            v[i] = 1.0;
            let c = LossComponents { rgb: v[0], mv_geo: v[1], mv_rgb: v[2], flatten: v[3], ban: v[4], coverage: v[5], gc_load: v[6] };
            assert!((total_loss(&c, &w).unwrap() - k[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_component_is_named() {
        let c = LossComponents { ban: f64::NAN, ..Default::default() };
        match total_loss(&c, &LossWeights::default()) {
            Err(Error::NonFiniteLoss(n)) => assert_eq!(n, "ban"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ban_weights_take_three_values() {
        let rbm = MaskBitmap::from_fn(6, 6, |x, _| x < 4);
        let mb = MaskBitmap::from_fn(6, 6, |x, _| x == 3 || x == 4);
        let w = ban_weights(&rbm, &mb, 0.1);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[3], 0.1);
        assert_eq!(w[4], 0.0);
        assert_eq!(w[5], 0.0);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda3: -1.0, ..Default::default() }.validate().is_err());
    }
}

//! Adam over flattened primitive parameters with per-class learning rates.

use crate::splat::project::PrimitiveGrad;
use crate::splat::GaussianPrimitive;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-15;

/// Learning rates for one step, by parameter class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub color_rest: f64,
}

impl StepRates {
    fn for_index(&self, i: usize) -> f64 {
        match i {
            0..=2 => self.position,
            3..=5 => self.scale,
            6..=9 => self.rotation,
            10 => self.opacity,
            11..=13 => self.color,
            _ => self.color_rest,
        }
    }
}

/// Flattened parameters in [`PrimitiveGrad::to_flat`] order.
pub fn params_to_flat(p: &GaussianPrimitive) -> Vec<f64> {
    let mut v = Vec::with_capacity(p.param_count());
    v.extend(p.mu.iter());
    v.extend(p.log_scale.iter());
    v.extend(p.rot.iter());
    v.push(p.opacity_logit);
    for c in &p.sh {
        v.extend(c.iter());
    }
    v
}

pub fn params_from_flat(p: &mut GaussianPrimitive, v: &[f64]) {
    for k in 0..3 {
        p.mu[k] = v[k];
        p.log_scale[k] = v[3 + k];
    }
    for k in 0..4 {
        p.rot[k] = v[6 + k];
    }
    p.opacity_logit = v[10];
    for (j, c) in p.sh.iter_mut().enumerate() {
        for k in 0..3 {
            c[k] = v[11 + 3 * j + k];
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn resize(&mut self, n: usize) {
        self.m.resize(n, 0.0);
        self.v.resize(n, 0.0);
    }
}

/// One bias-corrected Adam step (step counter `t` starts at 1).
pub fn adam_step(p: &mut GaussianPrimitive, st: &mut AdamState, g: &PrimitiveGrad, rates: &StepRates, t: u64) {
    let grad = g.to_flat();
    let mut x = params_to_flat(p);
    st.resize(x.len());
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..x.len() {
        let gi = grad.get(i).copied().unwrap_or(0.0);
        st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * gi;
        st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * gi * gi;
        let mh = st.m[i] / bc1;
        let vh = st.v[i] / bc2;
        x[i] -= rates.for_index(i) * mh / (vh.sqrt() + EPS);
    }
    params_from_flat(p, &x);
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector3, Vector4};

    #[test]
    fn flat_round_trip() {
        let mut p = GaussianPrimitive::new(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(0.1, 0.2, 0.3),
            Vector4::new(0.9, 0.1, 0.0, 0.2),
            0.3,
            [0.2, 0.4, 0.6],
        );
        p.sh.push(Vector3::new(0.01, 0.02, 0.03));
        let v = params_to_flat(&p);
        assert_eq!(v.len(), p.param_count());
        let mut q = p.clone();
        q.mu = Vector3::zeros();
        q.sh[1] = Vector3::zeros();
        params_from_flat(&mut q, &v);
        assert_eq!(p, q);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = GaussianPrimitive::new(Vector3::zeros(), Vector3::repeat(1.0), Vector4::new(1.0, 0.0, 0.0, 0.0), 0.5, [0.5; 3]);
        let mut g = PrimitiveGrad::zeros_like(&p);
        g.mu = Vector3::new(3.0, -0.5, 0.0);
        let rates = StepRates {
            position: 0.01,
            scale: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            color: 0.0,
            color_rest: 0.0,
        };
        let mut st = AdamState::default();
        adam_step(&mut p, &mut st, &g, &rates, 1);
        assert!((p.mu.x + 0.01).abs() < 1e-12);
        assert!((p.mu.y - 0.01).abs() < 1e-12);
        assert_eq!(p.mu.z, 0.0);
    }
}

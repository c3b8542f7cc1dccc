use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, Matrix, ParamSet, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdagradConfig {
    pub lr: f64,
    pub eps: f64,
    /// Global L2 norm above which gradients are rescaled before the update.
    pub clip_norm: f64,
}

impl Default for AdagradConfig {
    fn default() -> Self {
        AdagradConfig {
            lr: 0.1,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

/// Adagrad for gradient *ascent*: `θ ← θ + lr · g / √(G + ε)`, with `G`
/// the running sum of squared (clipped) gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Adagrad {
    config: AdagradConfig,
    lr: f64,
    accum: Vec<Matrix>,
}

impl Adagrad {
    pub fn new(params: &ParamSet, config: AdagradConfig) -> Self {
        Adagrad {
            config,
            lr: config.lr,
            accum: params
                .iter()
                .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn halve_lr(&mut self) {
        self.lr *= 0.5;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() {
            return Err(DiffError::ShapeMismatch {
                op: "adagrad",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for ((_, name, m), g) in params.iter().zip(grads.iter()) {
            if m.shape() != g.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adagrad",
                    detail: format!("{name}: {:?} vs gradient {:?}", m.shape(), g.shape()),
                });
            }
        }
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(DiffError::NonFinite { op: "adagrad" });
        }
        let clip = if norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let eps = self.config.eps;
        let lr = self.lr;
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (id, g) in ids.into_iter().zip(grads.iter()) {
            let acc = &mut self.accum[id.0];
            let theta = params.get_mut(id);
            for ((t, a), &gv) in theta
                .data_mut()
                .iter_mut()
                .zip(acc.data_mut().iter_mut())
                .zip(g.data())
            {
                if gv == 0.0 {
                    continue;
                }
                let gc = gv * clip;
                *a += gc * gc;
                *t += lr * gc / (*a + eps).sqrt();
            }
            if theta.data().iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite { op: "adagrad" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = ParamSet::init(1, &[("a", 2, 3)]).unwrap();
        let before = p.clone();
        let mut opt = Adagrad::new(&p, AdagradConfig::default());
        let g = p.zeros_like();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let p0 = ParamSet::init(1, &[("a", 2, 3)]).unwrap();
        let run = || {
            let mut p = p0.clone();
            let mut opt = Adagrad::new(&p, AdagradConfig::default());
            let a = p.id("a").unwrap();
            let mut g = p.zeros_like();
            g.get_mut(a).set(0, 1, 0.7);
            g.get_mut(a).set(1, 2, -3.0);
            opt.step(&mut p, &g).unwrap();
            opt.step(&mut p, &g).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut p = ParamSet::from_matrices(0, vec![("a".into(), Matrix::zeros(1, 1))]).unwrap();
        let a = p.id("a").unwrap();
        let mut opt = Adagrad::new(&p, AdagradConfig::default());
        let mut g = p.zeros_like();
        g.get_mut(a).set(0, 0, 1e6);
        opt.step(&mut p, &g).unwrap();
        // first Adagrad step has magnitude ≈ lr regardless of scale
        assert!((p.get(a).get(0, 0) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn quadratic_maximization_converges() {
        // f(θ) = −½(θ − 1)², maximized at θ* = 1.
        let optimum = 1.0;
        let mut p = ParamSet::from_matrices(0, vec![("t".into(), Matrix::zeros(1, 1))]).unwrap();
        let t = p.id("t").unwrap();
        let mut opt = Adagrad::new(&p, AdagradConfig::default());
        let mut steps = 0;
        while (p.get(t).get(0, 0) - optimum).abs() >= 1e-3 {
            assert!(steps < 500, "not converged after 500 steps");
            let theta = p.get(t).get(0, 0);
            let mut g = p.zeros_like();
            g.get_mut(t).set(0, 0, optimum - theta);
            opt.step(&mut p, &g).unwrap();
            steps += 1;
        }
        assert!(steps <= 500);
    }
}

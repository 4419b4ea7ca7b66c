//! Adam optimizer with bias correction, one state per parameter store.
//!
//! Moment estimates always decay on every step, but a parameter coordinate
//! is only moved when its gradient for this step is exactly nonzero. That
//! keeps stores untouched by a phase (for example the predictor during
//! autoencoder pretraining) bitwise identical while still behaving like
//! textbook Adam on active coordinates.

use crate::diffnet::matrix::Matrix;
use crate::diffnet::mlp::{Layer, ParamStore};
use crate::diffnet::tape::{GradientSet, ParamKey, Slot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {beta}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Dense gradients for one store, zero-filled where the graph produced none.
#[derive(Debug, Clone)]
pub struct StoreGrads {
    pub layers: Vec<Layer>,
}

impl StoreGrads {
    /// Extracts this store's gradients from a backward pass, inserting zero
    /// tensors for parameters the loss never touched.
    pub fn collect(grads: &GradientSet, store: u32, params: &ParamStore) -> Self {
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let pick = |slot: Slot, shape: (usize, usize)| {
                    grads
                        .get(&ParamKey { store, layer: l as u32, slot })
                        .cloned()
                        .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
                };
                Layer {
                    w: pick(Slot::Weight, layer.w.shape()),
                    b: pick(Slot::Bias, layer.b.shape()),
                }
            })
            .collect();
        StoreGrads { layers }
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.as_slice().iter().all(|&g| g == 0.0) && l.b.as_slice().iter().all(|&g| g == 0.0))
    }
}

/// First and second moment estimates mirroring a store's tensor shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let zero = |layers: &[Layer]| {
            layers
                .iter()
                .map(|l| Layer {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: Matrix::zeros(1, l.b.cols()),
                })
                .collect::<Vec<_>>()
        };
        AdamState { m: zero(&params.layers), v: zero(&params.layers), step: 0 }
    }

    /// One Adam step over every tensor in the store.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &StoreGrads,
        hyper: &AdamHyper,
    ) -> Result<()> {
        hyper.validate()?;
        if grads.layers.len() != params.layers.len() || self.m.len() != params.layers.len() {
            return Err(Error::Shape(format!(
                "optimizer state over {} layers applied to store with {} layers",
                self.m.len(),
                params.layers.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - hyper.beta1.powi(self.step as i32);
        let bc2 = 1.0 - hyper.beta2.powi(self.step as i32);
        for l in 0..params.layers.len() {
            update_tensor(
                params.layers[l].w.as_mut_slice(),
                grads.layers[l].w.as_slice(),
                self.m[l].w.as_mut_slice(),
                self.v[l].w.as_mut_slice(),
                hyper,
                bc1,
                bc2,
            )?;
            update_tensor(
                params.layers[l].b.as_mut_slice(),
                grads.layers[l].b.as_slice(),
                self.m[l].b.as_mut_slice(),
                self.v[l].b.as_mut_slice(),
                hyper,
                bc1,
                bc2,
            )?;
        }
        Ok(())
    }
}

fn update_tensor(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hyper: &AdamHyper,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::Shape(format!(
            "gradient tensor has {} entries, parameter has {}",
            g.len(),
            p.len()
        )));
    }
    for i in 0..p.len() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
        if g[i] != 0.0 {
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::mlp::{MlpSpec, OutputActivation};
    use approx::assert_abs_diff_eq;

    fn one_layer_store(value: f64) -> ParamStore {
        let spec = MlpSpec::new(vec![1, 1], OutputActivation::Identity).unwrap();
        let mut s = ParamStore::zeros(&spec).unwrap();
        s.layers[0].w.set(0, 0, value);
        s
    }

    fn grads_of(w: f64, b: f64) -> StoreGrads {
        StoreGrads {
            layers: vec![Layer {
                w: Matrix::from_rows(&[vec![w]]).unwrap(),
                b: Matrix::from_rows(&[vec![b]]).unwrap(),
            }],
        }
    }

    #[test]
    fn first_step_from_zero_state_moves_by_signed_lr() {
        // With zero moments and gradient g, bias correction makes
        // m_hat = g and v_hat = g^2, so the step is -lr * g / (|g| + eps).
        let lr = 0.1;
        let mut params = one_layer_store(2.0);
        let mut state = AdamState::zeros_like(&params);
        state.step(&mut params, &grads_of(1.0, 0.0), &AdamHyper::with_lr(lr)).unwrap();
        let expected = 2.0 - lr / (1.0 + 1e-8);
        assert_abs_diff_eq!(params.layers[0].w.get(0, 0), expected, epsilon = 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_bitwise_unchanged() {
        let mut params = one_layer_store(0.73);
        let before = params.clone();
        let mut state = AdamState::zeros_like(&params);
        // Seed nonzero moments first so decay is observable.
        state.step(&mut params, &grads_of(0.5, 0.25), &AdamHyper::with_lr(0.01)).unwrap();
        let after_first = params.clone();
        let m_before = state.m[0].w.get(0, 0);
        state.step(&mut params, &grads_of(0.0, 0.0), &AdamHyper::with_lr(0.01)).unwrap();
        assert_eq!(params, after_first);
        assert_ne!(params, before);
        // Moments decayed toward zero even though parameters froze.
        assert_abs_diff_eq!(state.m[0].w.get(0, 0), 0.9 * m_before, epsilon = 1e-15);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn mixed_gradient_only_moves_nonzero_coordinates() {
        let spec = MlpSpec::new(vec![2, 1], OutputActivation::Identity).unwrap();
        let mut params = ParamStore::zeros(&spec).unwrap();
        params.layers[0].w.set(0, 0, 1.0);
        params.layers[0].w.set(1, 0, -1.0);
        let mut state = AdamState::zeros_like(&params);
        let grads = StoreGrads {
            layers: vec![Layer {
                w: Matrix::from_rows(&[vec![0.3], vec![0.0]]).unwrap(),
                b: Matrix::from_rows(&[vec![0.0]]).unwrap(),
            }],
        };
        state.step(&mut params, &grads, &AdamHyper::with_lr(0.05)).unwrap();
        assert_ne!(params.layers[0].w.get(0, 0), 1.0);
        assert_eq!(params.layers[0].w.get(1, 0), -1.0);
        assert_eq!(params.layers[0].b.get(0, 0), 0.0);
    }

    #[test]
    fn nonpositive_lr_is_a_config_error() {
        let mut params = one_layer_store(0.0);
        let mut state = AdamState::zeros_like(&params);
        let err =
            state.step(&mut params, &grads_of(1.0, 1.0), &AdamHyper::with_lr(0.0)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn repeated_steps_converge_on_quadratic() {
        // Minimize (w - 3)^2; gradient 2(w - 3).
        let mut params = one_layer_store(0.0);
        let mut state = AdamState::zeros_like(&params);
        let hyper = AdamHyper::with_lr(0.05);
        for _ in 0..2000 {
            let w = params.layers[0].w.get(0, 0);
            state.step(&mut params, &grads_of(2.0 * (w - 3.0), 0.0), &hyper).unwrap();
        }
        assert!((params.layers[0].w.get(0, 0) - 3.0).abs() < 1e-3);
    }
}

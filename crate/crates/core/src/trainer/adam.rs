use crate::tensor::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment accumulators, one buffer per parameter.
///
/// Moments are kept in `f32` (the update itself runs in `f64`) so a
/// checkpoint holds the exact optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn for_params(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState { t: 0, m: zeros(), v: zeros() }
    }
}

/// Bias-corrected Adam on the accumulated `grad` of every parameter.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!("adam state covers {} tensors, store has {}", state.m.len(), params.len())));
    }
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.len() != p.value.len() || v.len() != p.value.len() {
            return Err(Error::Shape(format!("adam moments for {} have the wrong length", p.name)));
        }
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = grad[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            value[i] = (value[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Volume};

    const CFG: AdamConfig = AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    fn store(values: &[f32], grads: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        let shape = Shape::new(1, 1, 1, 1, values.len()).unwrap();
        let id = s.add("p", Volume::from_vec(shape, values.to_vec()).unwrap()).unwrap();
        s.get_mut(id).grad = Volume::from_vec(shape, grads.to_vec()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[0.5, -1.0], &[0.0, 0.0]);
        let before = s.clone();
        let mut st = AdamState::for_params(&s);
        adam_step(&mut s, &mut st, &CFG).unwrap();
        assert_eq!(s.by_name("p").unwrap().value, before.by_name("p").unwrap().value);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let g = [0.25f32, -4.0, 1e-3];
        let mut s = store(&[0.0, 0.0, 0.0], &g);
        let mut st = AdamState::for_params(&s);
        adam_step(&mut s, &mut st, &CFG).unwrap();
        for (x, &gi) in s.by_name("p").unwrap().value.data().iter().zip(&g) {
            let gi = gi as f64;
            let want = -CFG.lr * gi / (gi.abs() + CFG.eps);
            assert!((*x as f64 - want).abs() < 1e-9, "{x} vs {want}");
            assert!((*x as f64).abs() <= CFG.lr * (1.0 + 1e-6));
        }
    }

    #[test]
    fn opposite_gradients_move_symmetrically() {
        let mut s = store(&[0.0, 0.0], &[0.3, -0.3]);
        let mut st = AdamState::for_params(&s);
        for _ in 0..5 {
            adam_step(&mut s, &mut st, &CFG).unwrap();
        }
        let v = s.by_name("p").unwrap().value.data().to_vec();
        assert_eq!(v[0], -v[1]);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut s = store(&[0.0], &[1.0]);
        let mut st = AdamState::default();
        assert!(adam_step(&mut s, &mut st, &CFG).is_err());
    }
}

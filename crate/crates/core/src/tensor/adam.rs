use super::{ParamStore, Result, Tensor, TensorError};

/// Adam moment buffers and step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of `params` in place. `grads[i] == None` leaves param `i`
    /// (and its moments) untouched.
    pub fn step(&self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>], state: &mut AdamState) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        if state.m.is_empty() {
            state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            state.v = state.m.clone();
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
            if m.len() != p.numel() || g.as_ref().is_some_and(|g| g.len() != p.numel()) {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("moment or gradient size differs from parameter {:?}", p.shape()),
                });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Update every trainable tensor of a store.
    pub fn step_store(&self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], state: &mut AdamState) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        let mut tensors: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        {
            let mut refs: Vec<&mut Tensor> = tensors.iter_mut().collect();
            self.step(&mut refs, grads, state)?;
        }
        for (id, t) in ids.into_iter().zip(tensors) {
            if store.is_trainable(id) {
                *store.get_mut(id) = t;
            }
        }
        Ok(())
    }
}

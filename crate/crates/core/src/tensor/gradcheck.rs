//! Central finite-difference checks for tape gradients.

use std::result::Result;

use super::{Ctx, Mode, ParamStore, Tape, Tensor, TensorError, Var};

/// Outcome of [`check_gradients`]: the worst norm-wise relative error over
/// all inputs, and which input produced it.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_input: usize,
}

/// Relative error `|a - b| / max(|a|, |b|)` between two gradient vectors,
/// with a floor of 1e-6 so that two vanishing gradients (which finite
/// differences only resolve to roundoff) compare as equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Compare backward() against central differences for `f`, which must build a
/// scalar from the given leaves. Every input tensor is differentiated; when
/// `coords` is `Some(n)`, only `n` evenly spread coordinates per input are
/// perturbed (for large composites).
pub fn check_gradients<F, E>(inputs: &[Tensor], eps: f64, coords: Option<usize>, f: F) -> Result<GradCheck, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let root = f(&mut tape, &vars)?;
    let mut grads = tape.backward(root)?;

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.take(*v).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let n = inputs[i].numel();
        let picked: Vec<usize> = match coords {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(picked.len());
        for &j in &picked {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let a: Vec<f64> = picked.iter().map(|&j| analytic[j]).collect();
        let err = relative_error(&a, &numeric);
        if err > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: err,
                worst_input: i,
            };
        }
    }
    Ok(worst)
}

/// Finite-difference check of every trainable entry of `store` for a scalar
/// built by `f` on a [`Ctx`] in training mode. Up to `coords` coordinates of
/// each tensor are probed; the result names the worst entry by index.
pub fn check_store_gradients<F, E>(store: &ParamStore, eps: f64, coords: usize, f: F) -> Result<GradCheck, E>
where
    F: Fn(&mut Ctx) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut cx = Ctx::new(s, Mode::Train, false);
        let out = f(&mut cx)?;
        Ok(cx.value(out).data()[0])
    };
    let mut cx = Ctx::new(store, Mode::Train, true);
    let root = f(&mut cx)?;
    let vars = cx.param_vars().to_vec();
    let mut grads = cx.tape.backward(root)?;
    let analytic = store.collect_grads(&vars, &mut grads);

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
    };
    let mut probe = store.clone();
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let n = store.get(id).numel();
        let picked: Vec<usize> = if coords < n {
            (0..coords).map(|j| j * n / coords + (j * 7919) % (n / coords).max(1)).collect()
        } else {
            (0..n).collect()
        };
        let full = analytic[id.index()].clone().unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = Vec::with_capacity(picked.len());
        for &j in &picked {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let a: Vec<f64> = picked.iter().map(|&j| full[j]).collect();
        let err = relative_error(&a, &numeric);
        if err > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: err,
                worst_input: id.index(),
            };
        }
    }
    Ok(worst)
}

/// Add `N(0, std^2)` noise to every trainable entry, moving parameters off
/// the exact kinks (zero biases feeding a ReLU) that default initialization
/// sits on.
pub fn jitter(store: &mut ParamStore, std: f64, rng: &mut crate::rng::SplitMix64) {
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += std * rng.normal();
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::denoiser::ParamStore;
use crate::error::{invalid, Result};
use crate::numerics::{Gradients, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay. Moments are kept in f64 regardless of the
/// parameter type, one pair per parameter tensor in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub params: AdamParams,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(params: AdamParams, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, v)| Tensor::zeros(v.shape()))
                .collect::<Vec<_>>()
        };
        AdamW {
            params,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `vars` are the store's tape bindings in store order; parameters that
    /// are frozen or received no gradient are left alone.
    ///
    /// `w <- w - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * w)`
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        vars: &[Var],
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        if vars.len() != store.len() || self.m.len() != store.len() {
            return Err(invalid(format!(
                "optimizer tracks {} tensors, store has {}, {} bindings",
                self.m.len(),
                store.len(),
                vars.len()
            )));
        }
        self.t += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(vars[i]) else {
                continue;
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m)
                .zip(v)
            {
                let g = g.to_f64();
                *m = p.beta1 * *m + (1.0 - p.beta1) * g;
                *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + p.eps);
                let wf = w.to_f64();
                *w = T::from_f64(wf - lr * (update + p.weight_decay * wf));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn setup(w: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[w.len()], w).unwrap(), true)
            .unwrap();
        s
    }

    fn grads(store: &ParamStore<f64>) -> (Vec<Var>, Gradients<f64>) {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, true).unwrap();
        let sq = tape.mul(vars[0], vars[0]).unwrap();
        let l = tape.sum(sq).unwrap();
        (vars.clone(), tape.backward(l).unwrap())
    }

    const P: AdamParams = AdamParams {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = setup(&[2.0, -3.0]);
        let mut opt = AdamW::new(P, &s);
        let (vars, g) = grads(&s);
        opt.step(&mut s, &vars, &g, 0.1).unwrap();
        // Bias-corrected first step is g/|g| (up to eps), plus decay.
        let w = s.get("w").unwrap().data();
        assert!((w[0] - (2.0 - 0.1 * (1.0 + 0.01 * 2.0))).abs() < 1e-8);
        assert!((w[1] - (-3.0 - 0.1 * (-1.0 - 0.01 * 3.0))).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_leaves_weights_bit_exact() {
        let mut s = setup(&[0.1, 1e-30, -7.25]);
        let before = s.clone();
        let mut opt = AdamW::new(P, &s);
        let (vars, g) = grads(&s);
        opt.step(&mut s, &vars, &g, 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn decay_applies_to_weights_not_gradients() {
        // With a zero gradient the Adam term vanishes and only the decay remains.
        let mut s = setup(&[0.0]);
        s.replace("w", Tensor::from_f64(&[1], &[4.0]).unwrap())
            .unwrap();
        let mut opt = AdamW::new(P, &s);
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape, true).unwrap();
        let z = tape.scale(vars[0], 0.0).unwrap();
        let l = tape.sum(z).unwrap();
        let g = tape.backward(l).unwrap();
        opt.step(&mut s, &vars, &g, 0.5).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 4.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-15);
    }
}

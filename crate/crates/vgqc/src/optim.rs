//! AdamW with decoupled weight decay and global-norm gradient clipping.
//!
//! The decay multiplies parameters after the adaptive update, scaled by the
//! learning rate. Two consequences worth testing: a zero learning rate freezes
//! parameters regardless of decay, and zero gradients shrink parameters by
//! exactly (1 - lr * wd) per step.

use crate::error::{Result, VgqcError};
use crate::params::ParamStore;
use crate::tensor::Elem;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub struct AdamW<E: Elem> {
    pub lr: f64,
    pub wd: f64,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Elem> AdamW<E> {
    pub fn new(store: &ParamStore<E>, lr: f64, wd: f64) -> Self {
        let m = store.iter().map(|(_, t)| vec![E::zero(); t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![E::zero(); t.numel()]).collect();
        AdamW {
            lr,
            wd,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` is indexed like the store; `None` means an exactly
    /// zero gradient. Moments still advance for `None` entries.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[Option<Vec<E>>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(VgqcError::validation(format!(
                "gradient count {} vs parameter count {}",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let b1 = E::from_f64(BETA1);
        let b1c = E::from_f64(1.0 - BETA1);
        let b2 = E::from_f64(BETA2);
        let b2c = E::from_f64(1.0 - BETA2);
        let inv_bc1 = E::from_f64(1.0 / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(EPS);
        let decay = E::from_f64(1.0 - self.lr * self.wd);

        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let zero_len = store.get(id).numel();
            if let Some(g) = &grads[idx] {
                if g.len() != zero_len {
                    return Err(VgqcError::validation(format!(
                        "{}: gradient length {} vs parameter {}",
                        store.name(id),
                        g.len(),
                        zero_len
                    )));
                }
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = store.get_mut(id).data_mut();
            match &grads[idx] {
                Some(g) => {
                    for i in 0..data.len() {
                        m[i] = b1 * m[i] + b1c * g[i];
                        v[i] = b2 * v[i] + b2c * g[i] * g[i];
                        let mhat = m[i] * inv_bc1;
                        let vhat = v[i] * inv_bc2;
                        data[i] = (data[i] - lr * mhat / (vhat.sqrt() + eps)) * decay;
                    }
                }
                None => {
                    for i in 0..data.len() {
                        m[i] = b1 * m[i];
                        v[i] = b2 * v[i];
                        let mhat = m[i] * inv_bc1;
                        let vhat = v[i] * inv_bc2;
                        data[i] = (data[i] - lr * mhat / (vhat.sqrt() + eps)) * decay;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm, computed in f64. Non-finite norms abort.
pub fn clip_global_norm<E: Elem>(grads: &mut [Option<Vec<E>>], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g {
            let x = x.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(VgqcError::numeric(format!(
            "gradient norm is not finite: {norm}"
        )));
    }
    if norm > max_norm {
        let scale = E::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x = *x * scale;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![values.len()], values.to_vec()));
        s
    }

    #[test]
    fn zero_lr_freezes_parameters_despite_decay() {
        let mut store = store_with(&[0.5, -1.25, 3.0]);
        let before = store.get(store.by_name("p").unwrap()).data().to_vec();
        let mut opt = AdamW::new(&store, 0.0, 0.5);
        for _ in 0..7 {
            opt.step(&mut store, &[Some(vec![1.0, -2.0, 0.3])]).unwrap();
        }
        assert_eq!(store.get(store.by_name("p").unwrap()).data(), &before[..]);
    }

    #[test]
    fn zero_gradients_shrink_by_exactly_the_decay_factor() {
        let start = [0.5f64, -1.25, 3.0];
        let mut store = store_with(&start);
        let (lr, wd) = (0.1, 0.01);
        let mut opt = AdamW::new(&store, lr, wd);
        let n = 5;
        for _ in 0..n {
            opt.step(&mut store, &[None]).unwrap();
        }
        let mut expect = start;
        for _ in 0..n {
            for e in &mut expect {
                *e *= 1.0 - lr * wd;
            }
        }
        assert_eq!(store.get(store.by_name("p").unwrap()).data(), &expect[..]);
    }

    #[test]
    fn first_step_moves_by_about_the_learning_rate() {
        let mut store = store_with(&[1.0]);
        let mut opt = AdamW::new(&store, 1e-2, 0.0);
        opt.step(&mut store, &[Some(vec![0.37])]).unwrap();
        let p = store.get(store.by_name("p").unwrap()).data()[0];
        // mhat = g, vhat = g*g, so the step is lr * g / (|g| + eps).
        assert!((p - (1.0 - 1e-2)).abs() < 1e-6, "got {p}");
    }

    #[test]
    fn matches_a_scalar_reference_over_several_steps() {
        let g_seq = [[0.3, -0.7], [0.1, 0.2], [-0.4, 0.9], [0.05, -0.05]];
        let (lr, wd) = (0.07, 0.2);
        let mut store = store_with(&[0.8, -0.6]);
        let mut opt = AdamW::new(&store, lr, wd);

        let mut reference = [0.8, -0.6];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for (t, g) in g_seq.iter().enumerate() {
            opt.step(&mut store, &[Some(g.to_vec())]).unwrap();
            let step = (t + 1) as i32;
            for i in 0..2 {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / (1.0 - BETA1.powi(step));
                let vhat = v[i] / (1.0 - BETA2.powi(step));
                reference[i] = (reference[i] - lr * mhat / (vhat.sqrt() + EPS)) * (1.0 - lr * wd);
            }
        }
        let got = store.get(store.by_name("p").unwrap()).data();
        for i in 0..2 {
            assert!((got[i] - reference[i]).abs() < 1e-12, "{} vs {}", got[i], reference[i]);
        }
    }

    #[test]
    fn clip_rescales_only_above_the_threshold() {
        let mut grads = vec![Some(vec![3.0f64, 4.0]), None];
        let norm = clip_global_norm(&mut grads, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        let g = grads[0].as_ref().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);

        let mut small = vec![Some(vec![0.3f64, 0.4])];
        let before = small[0].clone().unwrap();
        let norm = clip_global_norm(&mut small, 1.0).unwrap();
        assert_eq!(norm, 0.5);
        assert_eq!(small[0].as_ref().unwrap(), &before);
    }

    #[test]
    fn clip_rejects_non_finite_gradients() {
        let mut grads = vec![Some(vec![f64::NAN])];
        let err = clip_global_norm(&mut grads, 1.0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let mut inf = vec![Some(vec![f64::INFINITY])];
        assert!(clip_global_norm(&mut inf, 1.0).is_err());
    }
}

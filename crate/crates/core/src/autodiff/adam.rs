use crate::autodiff::{ParamKind, ParamStore, Scalar};
use crate::error::{Error, Result};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Updates every trainable parameter and clears all gradients.
    ///
    /// Fails without touching any parameter if a trainable parameter has no
    /// gradient.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.kind == ParamKind::Trainable && p.grad.is_none())
        {
            return Err(Error::Contract(format!(
                "adam_step: parameter {} has no gradient",
                p.name
            )));
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for p in store.iter_mut() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let st = &mut p.adam;
            st.step += 1;
            let c1 = T::one() - b1.powi(st.step as i32);
            let c2 = T::one() - b2.powi(st.step as i32);
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grad.data()[i];
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

use super::tensor::Scalar;
use super::{NnError, Result};

/// Moment buffers and hyperparameters for decoupled-weight-decay Adam.
///
/// `m` and `v` are flat over every trainable parameter in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<F> {
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_peak: f64,
}

impl<F: Scalar> AdamWState<F> {
    pub fn new(n_params: usize, betas: (f64, f64), weight_decay: f64, lr_peak: f64) -> Result<Self> {
        let (beta1, beta2) = betas;
        if !(0.0..1.0).contains(&beta1) || beta1 == 0.0 || !(0.0..1.0).contains(&beta2) || beta2 == 0.0 {
            return Err(NnError::Contract(format!("betas {betas:?} must lie in (0, 1)")));
        }
        if weight_decay < 0.0 || lr_peak <= 0.0 {
            return Err(NnError::Contract(format!(
                "weight decay {weight_decay} must be >= 0 and peak lr {lr_peak} > 0"
            )));
        }
        Ok(Self {
            step: 0,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            lr_peak,
        })
    }

    pub fn n_params(&self) -> usize {
        self.m.len()
    }

    /// One optimizer step over `(param, grad)` segments laid out in the
    /// same order the state was created with.
    pub fn update<'a, I>(&mut self, segments: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut [F], &'a [F])>,
    {
        let mut segments: Vec<(&mut [F], &[F])> = segments.into_iter().collect();
        let mut total = 0;
        for (p, g) in &segments {
            if p.len() != g.len() {
                return Err(NnError::Shape {
                    op: "adamw",
                    detail: format!("param segment {} vs grad {}", p.len(), g.len()),
                });
            }
            total += p.len();
        }
        if total != self.m.len() {
            return Err(NnError::Shape {
                op: "adamw",
                detail: format!("{total} params vs {} state slots", self.m.len()),
            });
        }
        if lr < 0.0 || !lr.is_finite() {
            return Err(NnError::Contract(format!("learning rate {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let decay = F::of(1.0 - lr * self.weight_decay);
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(self.eps);
        let mut offset = 0;
        for (p, g) in segments.iter_mut() {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
            offset += p.len();
        }
        Ok(())
    }
}

/// Single flat AdamW step: decoupled decay `p -= lr*wd*p`, then the
/// bias-corrected Adam update.
pub fn adamw_step<F: Scalar>(params: &mut [F], grads: &[F], state: &mut AdamWState<F>, lr: f64) -> Result<()> {
    state.update(std::iter::once((params, grads)), lr)
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [&mut [F]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

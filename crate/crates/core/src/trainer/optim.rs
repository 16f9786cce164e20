use crate::autodiff::Tensor2;
use crate::error::{Error, Result};
use crate::network::ModelParams;

/// Adam with decoupled weight decay.
///
/// ```text
/// m ← β1·m + (1−β1)·g
/// v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·( m̂ / (√v̂ + ε) + wd·θ )
/// ```
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl AdamW {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor2> = params
            .blocks
            .iter()
            .map(|b| Tensor2::zeros(b.value.rows(), b.value.cols()))
            .collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` is the gradient of block `i`, `None` for a
    /// block the loss does not depend on.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<&Tensor2>]) -> Result<()> {
        if grads.len() != params.blocks.len() || self.m.len() != params.blocks.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} blocks, got {} parameters and {} gradients",
                self.m.len(),
                params.blocks.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, block) in params.blocks.iter_mut().enumerate() {
            let theta = block.value.data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].map(|g| g.data());
            if let Some(g) = g {
                if g.len() != theta.len() {
                    return Err(Error::invalid(format!("gradient size mismatch for {}", block.name)));
                }
            }
            for j in 0..theta.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps) + self.weight_decay * theta[j];
                theta[j] -= self.lr * update;
            }
        }
        Ok(())
    }
}

/// `θ_T ← μ·θ_T + (1−μ)·θ_S`.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, momentum: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::invalid("teacher and student layouts differ"));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    for (t, s) in teacher.blocks.iter_mut().zip(&student.blocks) {
        for (a, &b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
    Ok(())
}

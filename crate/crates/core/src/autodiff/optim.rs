//! AdamW with decoupled weight decay and the one-cycle learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Zeroed moments for parameters with the given element counts.
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[Tensor], weight_decay: f64) -> Self {
        let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
        Self::new(&sizes, weight_decay)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores a state saved with [`AdamW::moments`] and [`AdamW::step_count`].
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<(), AutodiffError> {
        let same = |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(AutodiffError::StateMismatch);
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of every parameter with learning rate `lr`.
    pub fn step<'a, I>(&mut self, params: I, grads: &[Vec<f64>], lr: f64) -> Result<(), AutodiffError>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(AutodiffError::StateMismatch);
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.numel() != m.len() || g.len() != m.len() {
                return Err(AutodiffError::StateMismatch);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Rounds the moment buffers through `f32`.
    pub fn round_to_f32(&mut self) {
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

/// Cosine one-cycle schedule: anneals from `max_lr / initial_div` up to
/// `max_lr` over the warm-up fraction, then down to
/// `max_lr / (initial_div · final_div)` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub initial_div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self { max_lr, total_steps, warmup_frac: 0.3, initial_div: 25.0, final_div: 1e4 }
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.initial_div
    }

    pub fn final_lr(&self) -> f64 {
        self.initial_lr() / self.final_div
    }

    pub fn peak_step(&self) -> f64 {
        self.warmup_frac * self.total_steps as f64
    }

    pub fn lr(&self, step: usize) -> f64 {
        let s = step.min(self.total_steps) as f64;
        let peak = self.peak_step();
        if s <= peak {
            let p = if peak > 0.0 { s / peak } else { 1.0 };
            cosine_anneal(self.initial_lr(), self.max_lr, p)
        } else {
            let p = (s - peak) / (self.total_steps as f64 - peak);
            cosine_anneal(self.max_lr, self.final_lr(), p)
        }
    }
}

fn cosine_anneal(start: f64, end: f64, progress: f64) -> f64 {
    end + (start - end) * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = vec![one(1.5)];
        let mut opt = AdamW::for_params(&p, 0.0);
        opt.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        let mut p = vec![one(1.0)];
        let mut opt = AdamW::for_params(&p, 0.0);
        opt.step(&mut p, &[vec![1.0]], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = vec![one(1.0)];
        let mut opt = AdamW::for_params(&p, 0.1);
        opt.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn shape_drift_is_an_error() {
        let mut p = vec![one(1.0)];
        let mut opt = AdamW::new(&[2], 0.0);
        assert!(matches!(opt.step(&mut p, &[vec![0.0]], 0.1), Err(AutodiffError::StateMismatch)));
        let mut opt = AdamW::new(&[1], 0.0);
        assert!(opt.step(&mut p, &[vec![0.0, 1.0]], 0.1).is_err());
    }

    #[test]
    fn step_count_increases() {
        let mut p = vec![one(1.0)];
        let mut opt = AdamW::for_params(&p, 0.0);
        for i in 1..=3 {
            opt.step(&mut p, &[vec![0.5]], 0.01).unwrap();
            assert_eq!(opt.step_count(), i);
        }
    }

    #[test]
    fn one_cycle_shape() {
        let s = OneCycle::new(5e-4, 1000);
        assert!(s.lr(0) < s.max_lr);
        assert!(s.lr(1000) < s.lr(0));
        assert!((s.lr(300) - s.max_lr).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=1000).map(|i| s.lr(i)).collect();
        for w in lrs[..=300].windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in lrs[300..].windows(2) {
            assert!(w[1] <= w[0]);
        }
        // continuity: adjacent steps never jump by more than a small fraction of the peak
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() < 0.01 * s.max_lr);
        }
    }
}

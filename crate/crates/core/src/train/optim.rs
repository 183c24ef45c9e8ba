//! AdamW and the EMA shadow.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: ADAM_EPS,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Replaces the accumulators; shapes must mirror the current ones.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        for (have, got) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if have.shape() != got.shape() {
                return Err(Error::shape("optimizer restore", have.shape(), got.shape()));
            }
        }
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "optimizer holds {} moments, checkpoint {}",
                self.m.len(),
                m.len()
            )));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected update with decoupled weight decay.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidShape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gd[i];
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gd[i] * gd[i];
                let vhat = *vi / bc2;
                pd[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(params: &[Tensor], decay: f64) -> Self {
        Self {
            decay,
            shadow: params.to_vec(),
        }
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn restore(&mut self, shadow: Vec<Tensor>) -> Result<()> {
        if shadow.len() != self.shadow.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "EMA holds {} tensors, checkpoint {}",
                self.shadow.len(),
                shadow.len()
            )));
        }
        for (a, b) in self.shadow.iter().zip(&shadow) {
            if a.shape() != b.shape() {
                return Err(Error::shape("ema restore", a.shape(), b.shape()));
            }
        }
        self.shadow = shadow;
        Ok(())
    }

    /// `shadow ← d·shadow + (1−d)·params`.
    pub fn update(&mut self, params: &[Tensor]) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (si, pi) in s.data_mut().iter_mut().zip(p.data()) {
                *si = d * *si + (1.0 - d) * pi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::new([3], vec![0.3, -4.0, 0.0]).unwrap()];
        let mut opt = AdamW::new(&p, 0.1, 0.9, 0.999, 0.0);
        opt.update(&mut p, &g).unwrap();
        // bias-corrected first step is g/(|g|+eps)
        let expect = [1.0 - 0.1 * 0.3 / (0.3 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 0.5];
        for (a, b) in p[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_lr_leaves_params_and_decay_shrinks() {
        let p0 = vec![Tensor::full([4], 2.0)];
        let g = vec![Tensor::full([4], 1.0)];
        let mut p = p0.clone();
        let mut opt = AdamW::new(&p, 0.0, 0.9, 0.95, 0.1);
        opt.update(&mut p, &g).unwrap();
        assert_eq!(p, p0);

        let mut p = p0.clone();
        let mut opt = AdamW::new(&p, 0.1, 0.9, 0.95, 0.5);
        opt.update(&mut p, &[Tensor::zeros([4])]).unwrap();
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn ema_rules() {
        let p = vec![Tensor::full([2], 1.0)];
        let mut e = Ema::new(&[Tensor::zeros([2])], 0.0);
        e.update(&p);
        assert_eq!(e.shadow(), &p[..]);
        let mut e = Ema::new(&[Tensor::zeros([2])], 0.75);
        e.update(&p);
        assert_eq!(e.shadow()[0].data(), &[0.25, 0.25]);
    }
}

//! Adam and the iteration schedules.

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps.
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// `blocks` names flat ranges for the diagnostic on non-finite gradients.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        blocks: &[(String, std::ops::Range<usize>)],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, optimizer sized for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(p) = grads.iter().position(|g| !g.is_finite()) {
            let block = blocks
                .iter()
                .find(|(_, r)| r.contains(&p))
                .map(|(n, _)| n.clone())
                .unwrap_or_else(|| format!("index {p}"));
            return Err(Error::NonFiniteGradient {
                iteration: self.t,
                block,
            });
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr0: f64,
    pub gamma: f64,
    pub decay_every: usize,
    pub num_freqs: usize,
    /// `None` keeps all bands open from the start.
    pub anneal_iters: Option<usize>,
    pub sym_start: f64,
    pub sym_anneal_iters: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr0: 5e-5,
            gamma: 0.1,
            decay_every: 1000,
            num_freqs: 12,
            anneal_iters: Some(2500),
            sym_start: 100.0,
            sym_anneal_iters: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub lr: f64,
    pub beta: f64,
    pub sym_weight: f64,
}

impl Schedule {
    /// `lr0 gamma^floor(it / decay_every)`, `beta = L min(it / anneal_iters, 1)`,
    /// `sym = sym_start max(1 - it / sym_anneal_iters, 0)`.
    pub fn at(&self, iter: usize) -> ScheduleValues {
        let lr = self.lr0 * self.gamma.powi((iter / self.decay_every.max(1)) as i32);
        let l = self.num_freqs as f64;
        let beta = match self.anneal_iters {
            Some(n) if n > 0 => l * (iter as f64 / n as f64).min(1.0),
            _ => l,
        };
        let sym_weight = if self.sym_anneal_iters == 0 {
            0.0
        } else {
            self.sym_start * (1.0 - iter as f64 / self.sym_anneal_iters as f64).max(0.0)
        };
        ScheduleValues {
            lr,
            beta,
            sym_weight,
        }
    }
}

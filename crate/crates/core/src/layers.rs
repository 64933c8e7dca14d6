//! Parameterized building blocks shared by the network stages.

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{NormMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics to fold into a layer's running buffers after a step.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

impl BnUpdate {
    /// Running mean takes the batch mean; running variance takes the
    /// unbiased batch variance.
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        let unbias = self.count as f64 / (self.count as f64 - 1.0);
        let rm = store.get_mut(self.running_mean).value.data_mut();
        rm.iter_mut()
            .zip(&self.mean)
            .for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
        let rv = store.get_mut(self.running_var).value.data_mut();
        rv.iter_mut()
            .zip(&self.var)
            .for_each(|(r, b)| *r = (1.0 - m) * *r + m * b * unbias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: store.add(&format!("{prefix}/gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(&format!("{prefix}/beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{prefix}/running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{prefix}/running_var"), Tensor::full(&[channels], 1.0))?,
            eps,
            momentum,
        })
    }

    /// Normalizes `x: [R, C]`, pushing the batch statistics onto `updates` in
    /// train mode.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let gamma = store.var(tape, self.gamma);
        let beta = store.var(tape, self.beta);
        match mode {
            Mode::Train => {
                let y = tape.batch_norm(x, gamma, beta, self.eps, NormMode::Train)?;
                let (mean, var) = tape.batch_stats(y).expect("train-mode batch norm records stats");
                updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.momentum,
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                    count: tape.shape(x)[0],
                });
                Ok(y)
            }
            Mode::Eval => tape.batch_norm(
                x,
                gamma,
                beta,
                self.eps,
                NormMode::Eval {
                    mean: store.value(self.running_mean).data(),
                    var: store.value(self.running_var).data(),
                },
            ),
        }
    }
}

/// Affine map `x W + b` over the last axis of a 2-d input.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.add_uniform(&format!("{prefix}/weight"), &[inputs, outputs], inputs, rng)?,
            bias: store.add(&format!("{prefix}/bias"), Tensor::zeros(&[outputs]))?,
        })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

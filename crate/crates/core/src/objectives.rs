//! Training objectives and the Adam optimizer.

use indexmap::IndexMap;

use crate::data::PAD;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGrads};
use crate::numeric::{Scalar, Tensor, Var};

/// Guard inside the row-norm square root.
pub const NORM_EPS: f64 = 1e-12;

/// `||l(Z) l(Z)^T - I||_F^2 / M` for `Z` of shape `[M, D]` with
/// row-wise L2 normalization `l`.
pub fn orthogonal_loss<'g, T: Scalar>(z: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = z.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("orthogonal loss expects [M, D], got {shape:?}")));
    }
    let m = shape[0];
    let zn = z.l2_normalize(T::from_f64(NORM_EPS))?;
    let gram = zn.matmul(zn.transpose()?)?;
    let diff = gram.sub(z.graph().constant(Tensor::eye(m)))?;
    diff.mul(diff)?.sum()?.scale(T::one() / T::from_f64(m as f64))
}

/// Teacher-forcing targets with `PAD` positions excluded.
pub fn targets_of(ids: &[usize]) -> Vec<Option<usize>> {
    ids.iter().map(|&t| (t != PAD).then_some(t)).collect()
}

/// Summed token NLL averaged over experts, plus the counted tokens.
///
/// `logits` is `[M, T, V]`; `targets` has length `T` and is shared by all experts.
pub fn ce_sum<'g, T: Scalar>(logits: Var<'g, T>, targets: &[usize]) -> Result<(Var<'g, T>, usize)> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[1] != targets.len() {
        return Err(Error::Shape(format!(
            "ce expects logits [M, {}, V], got {shape:?}",
            targets.len()
        )));
    }
    let (m, t, v) = (shape[0], shape[1], shape[2]);
    let per_row = targets_of(targets);
    let tokens = per_row.iter().flatten().count();
    if tokens == 0 {
        return Err(Error::Invalid("target sequence is all PAD".into()));
    }
    let all: Vec<Option<usize>> = (0..m).flat_map(|_| per_row.iter().copied()).collect();
    let nll = logits.reshape(&[m * t, v])?.cross_entropy(&all)?;
    Ok((nll.scale(T::one() / T::from_f64(m as f64))?, tokens))
}

/// Expert-averaged NLL, divided by the token count when `normalize` is set.
pub fn ce_loss<'g, T: Scalar>(logits: Var<'g, T>, targets: &[usize], normalize: bool) -> Result<Var<'g, T>> {
    let (sum, tokens) = ce_sum(logits, targets)?;
    if normalize {
        sum.scale(T::one() / T::from_f64(tokens as f64))
    } else {
        Ok(sum)
    }
}

/// `ce + lambda * orl`.
pub fn total_loss<'g, T: Scalar>(ce: Var<'g, T>, orl: Var<'g, T>, lambda: f64) -> Result<Var<'g, T>> {
    if lambda < 0.0 {
        return Err(Error::Invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    ce.add(orl.scale(T::from_f64(lambda))?)
}

/// Loss components of one step or batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub orl: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(ce: f64, orl: f64, lambda: f64) -> Self {
        Self {
            ce,
            orl,
            total: ce + lambda * orl,
            lambda,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

/// Learning rate used at desk scale.
pub const DEFAULT_LR: f64 = 1e-3;
/// The slower preset kept for reference runs.
pub const PRESET_LR: f64 = 1e-4;

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.second.get(name)
    }

    /// Apply one update. Every gradient is checked before any parameter changes.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ParamGrads<T>) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGrad(name.clone()));
            }
            if params.get(name)?.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    params.get(name)?.shape()
                )));
            }
        }
        self.step += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::from_f64(self.lr / c1);
        let c2_sqrt = T::from_f64(c2.sqrt());
        let eps = T::from_f64(self.eps);
        for (name, g) in grads {
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name)?;
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

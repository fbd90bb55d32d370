use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{BackwardContext, Function, Tape, Var};
use crate::tensor::{numel, Tensor};

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let k = *shape.last().unwrap_or(&1);
    (numel(shape) / k.max(1), k)
}

/// Numerically stable `log(sum(exp(row)))`.
fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

struct SoftmaxCe<T> {
    inputs: [Var; 1],
    labels: Vec<usize>,
    mask: Vec<bool>,
    classes: usize,
    /// Softmax probabilities of the selected rows.
    probs: Vec<T>,
}

impl<T: Real> Function<T> for SoftmaxCe<T> {
    fn name(&self) -> &'static str {
        "softmax_ce"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let k = self.classes;
        let mut d = vec![T::zero(); self.labels.len() * k];
        for (r, (&label, &sel)) in self.labels.iter().zip(&self.mask).enumerate() {
            if !sel {
                continue;
            }
            for c in 0..k {
                let target = if c == label { T::one() } else { T::zero() };
                d[r * k + c] = out_grad[0] * (self.probs[r * k + c] - target);
            }
        }
        vec![Some(d)]
    }
}

struct BceLogits<T> {
    inputs: [Var; 1],
    targets: Vec<T>,
    mask: Vec<bool>,
}

impl<T: Real> Function<T> for BceLogits<T> {
    fn name(&self) -> &'static str {
        "bce_logits"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let z = ctx.value(self.inputs[0]).data();
        let d = z
            .iter()
            .zip(&self.targets)
            .zip(&self.mask)
            .map(|((&z, &t), &m)| {
                if m {
                    out_grad[0] * (sigmoid(z) - t)
                } else {
                    T::zero()
                }
            })
            .collect();
        vec![Some(d)]
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

struct SmoothL1<T> {
    inputs: [Var; 1],
    targets: Vec<T>,
    weights: Vec<T>,
    cols: usize,
}

pub fn smooth_l1_value<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    if x.abs() < T::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

pub fn smooth_l1_derivative<T: Real>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

impl<T: Real> Function<T> for SmoothL1<T> {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let pred = ctx.value(self.inputs[0]).data();
        let d = pred
            .iter()
            .zip(&self.targets)
            .enumerate()
            .map(|(i, (&p, &t))| {
                let w = self.weights[i / self.cols];
                if w == T::zero() {
                    T::zero()
                } else {
                    out_grad[0] * w * smooth_l1_derivative(p - t)
                }
            })
            .collect();
        vec![Some(d)]
    }
}

impl<T: Real> Tape<T> {
    /// Sum over selected rows of `-log softmax(row)[label]`. Rows are the
    /// last axis of `logits`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        self.check(&[logits])?;
        let (rows, k) = rows_of(self.shape(logits));
        if labels.len() != rows || mask.len() != rows || labels.iter().any(|&l| l >= k) {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_ce",
                detail: format!("{rows} rows x {k} classes, {} labels, {} mask", labels.len(), mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::EmptySelection { op: "softmax_ce" });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * k];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &x[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            total += lse - row[labels[r]];
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
            }
        }
        self.apply(
            Box::new(SoftmaxCe {
                inputs: [logits],
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                classes: k,
                probs,
            }),
            Tensor::scalar(total),
        )
    }

    /// Binary cross-entropy on logits, summed over selected elements.
    pub fn bce_logits(&mut self, logits: Var, targets: &[T], mask: &[bool]) -> Result<Var> {
        self.check(&[logits])?;
        let n = self.value(logits).numel();
        if targets.len() != n || mask.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_logits",
                detail: format!("{n} logits, {} targets, {} mask", targets.len(), mask.len()),
            });
        }
        let total = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&z, &t), _)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.apply(
            Box::new(BceLogits {
                inputs: [logits],
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            }),
            Tensor::scalar(total),
        )
    }

    /// `sum_r weight[r] * sum_k smooth_l1(pred[r, k] - target[r, k])`.
    pub fn smooth_l1(&mut self, pred: Var, targets: &[T], row_weights: &[T]) -> Result<Var> {
        self.check(&[pred])?;
        let (rows, k) = rows_of(self.shape(pred));
        if targets.len() != rows * k || row_weights.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                detail: format!("{rows}x{k} predictions, {} targets, {} weights", targets.len(), row_weights.len()),
            });
        }
        let p = self.value(pred).data();
        let mut total = T::zero();
        for r in 0..rows {
            let w = row_weights[r];
            if w == T::zero() {
                continue;
            }
            let row: T = (0..k).map(|c| smooth_l1_value(p[r * k + c] - targets[r * k + c])).sum();
            total += w * row;
        }
        self.apply(
            Box::new(SmoothL1 {
                inputs: [pred],
                targets: targets.to_vec(),
                weights: row_weights.to_vec(),
                cols: k,
            }),
            Tensor::scalar(total),
        )
    }
}

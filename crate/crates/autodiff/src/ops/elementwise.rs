use crate::error::{Result, TensorError};
use crate::real::{matmul, Real};
use crate::tape::{BackwardContext, Function, Tape, Var};
use crate::tensor::Tensor;

struct Relu {
    inputs: [Var; 1],
}

impl<T: Real> Function<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = ctx.value(self.inputs[0]).data();
        let dx = x
            .iter()
            .zip(out_grad)
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(dx)]
    }
}

struct Linear {
    inputs: [Var; 3],
    rows: usize,
    in_features: usize,
    out_features: usize,
}

impl<T: Real> Function<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (n, i, o) = (self.rows, self.in_features, self.out_features);
        let x = ctx.value(self.inputs[0]).data();
        let w = ctx.value(self.inputs[1]).data();
        let dx = ctx.needs(0).then(|| {
            let mut dx = vec![T::zero(); n * i];
            matmul(n, o, i, out_grad, false, w, false, &mut dx, false);
            dx
        });
        let dw = ctx.needs(1).then(|| {
            let mut dw = vec![T::zero(); o * i];
            matmul(o, n, i, out_grad, true, x, false, &mut dw, false);
            dw
        });
        let db = ctx.needs(2).then(|| {
            let mut db = vec![T::zero(); o];
            for row in out_grad.chunks(o) {
                db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct Add {
    inputs: [Var; 2],
}

impl<T: Real> Function<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![
            ctx.needs(0).then(|| out_grad.to_vec()),
            ctx.needs(1).then(|| out_grad.to_vec()),
        ]
    }
}

struct Scale<T> {
    inputs: [Var; 1],
    factor: T,
}

impl<T: Real> Function<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(out_grad.iter().map(|&g| g * self.factor).collect())]
    }
}

struct SumAll {
    inputs: [Var; 1],
}

impl<T: Real> Function<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![out_grad[0]; ctx.value(self.inputs[0]).numel()])]
    }
}

impl<T: Real> Tape<T> {
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(&[input])?;
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = x.shape().to_vec();
        self.apply(Box::new(Relu { inputs: [input] }), Tensor::from_parts(shape, out))
    }

    /// Affine map `x W^T + b` for `x: (rows, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        self.check(&[input, weights, bias])?;
        let (xs, ws, bs) = (self.shape(input), self.shape(weights), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("input {xs:?}, weights {ws:?}, bias {bs:?}"),
            });
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out: Vec<T> = (0..n).flat_map(|_| self.value(bias).data().iter().copied()).collect();
        matmul(
            n,
            i,
            o,
            self.value(input).data(),
            false,
            self.value(weights).data(),
            true,
            &mut out,
            true,
        );
        self.apply(
            Box::new(Linear {
                inputs: [input, weights, bias],
                rows: n,
                in_features: i,
                out_features: o,
            }),
            Tensor::from_parts(vec![n, o], out),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.apply(Box::new(Add { inputs: [a, b] }), Tensor::from_parts(shape, out))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.check(&[input])?;
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v * factor).collect();
        let shape = x.shape().to_vec();
        self.apply(
            Box::new(Scale {
                inputs: [input],
                factor,
            }),
            Tensor::from_parts(shape, out),
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(&[input])?;
        let total = self.value(input).data().iter().copied().sum();
        self.apply(Box::new(SumAll { inputs: [input] }), Tensor::scalar(total))
    }
}

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{BackwardContext, Function, Tape, Var};
use crate::tensor::Tensor;

pub const L2NORM_EPS: f64 = 1e-10;

struct L2Norm<T> {
    inputs: [Var; 2],
    dims: [usize; 4],
    /// Euclidean norm of each (batch, position) channel vector, without eps.
    norms: Vec<T>,
}

impl<T: Real> Function<T> for L2Norm<T> {
    fn name(&self) -> &'static str {
        "l2norm"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, c, h, w] = self.dims;
        let hw = h * w;
        let x = ctx.value(self.inputs[0]).data();
        let scale = ctx.value(self.inputs[1]).data();
        let eps = T::of(L2NORM_EPS);
        let mut dx = ctx.needs(0).then(|| vec![T::zero(); x.len()]);
        let mut dscale = ctx.needs(1).then(|| vec![T::zero(); c]);
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let norm = self.norms[bi * hw + p];
                let denom = norm + eps;
                let mut dot = T::zero();
                for ch in 0..c {
                    let i = base + ch * hw + p;
                    dot += out_grad[i] * scale[ch] * x[i];
                    if let Some(ds) = dscale.as_mut() {
                        ds[ch] += out_grad[i] * x[i] / denom;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    // d/dx_j of x_c / (|x| + eps); the |x| term vanishes at x = 0.
                    let coupling = if norm > T::zero() {
                        dot / (norm * denom * denom)
                    } else {
                        T::zero()
                    };
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        dx[i] = out_grad[i] * scale[ch] / denom - x[i] * coupling;
                    }
                }
            }
        }
        vec![dx, dscale]
    }
}

impl<T: Real> Tape<T> {
    /// Normalizes every spatial position's channel vector to unit length
    /// (`|x| + 1e-10` in the denominator) and rescales channel-wise.
    pub fn l2norm(&mut self, input: Var, scale: Var) -> Result<Var> {
        self.check(&[input, scale])?;
        let s = self.shape(input).to_vec();
        if s.len() != 4 || self.shape(scale) != [s[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "l2norm",
                detail: format!("input {s:?}, scale {:?}", self.shape(scale)),
            });
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = self.value(input).data();
        let sc = self.value(scale).data();
        let eps = T::of(L2NORM_EPS);
        let mut norms = Vec::with_capacity(b * hw);
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let sq: T = (0..c).map(|ch| x[base + ch * hw + p].powi(2)).sum();
                let norm = sq.sqrt();
                for ch in 0..c {
                    let i = base + ch * hw + p;
                    out[i] = sc[ch] * x[i] / (norm + eps);
                }
                norms.push(norm);
            }
        }
        self.apply(
            Box::new(L2Norm {
                inputs: [input, scale],
                dims: [s[0], s[1], s[2], s[3]],
                norms,
            }),
            Tensor::from_parts(s, out),
        )
    }
}

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{BackwardContext, Function, Tape, Var};
use crate::tensor::Tensor;

struct MaxPool2d {
    inputs: [Var; 1],
    /// Flat input index of each output's winning element.
    argmax: Vec<usize>,
}

impl<T: Real> Function<T> for MaxPool2d {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); ctx.value(self.inputs[0]).numel()];
        for (&src, &g) in self.argmax.iter().zip(out_grad) {
            dx[src] += g;
        }
        vec![Some(dx)]
    }
}

impl<T: Real> Tape<T> {
    /// Max pooling with a square `k x k` window. Ties go to the first element
    /// in row-major order.
    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        self.check(&[input])?;
        if stride == 0 {
            return Err(TensorError::InvalidStride { op: "maxpool2d" });
        }
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("expected 4-d input, got {s:?}"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        if k == 0 || k > h || k > w {
            return Err(TensorError::WindowTooLarge {
                window: k,
                height: h,
                width: w,
            });
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.apply(
            Box::new(MaxPool2d {
                inputs: [input],
                argmax,
            }),
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
        )
    }
}

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{BackwardContext, Function, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Output index for every input element; shared by the pure permutations.
struct Gather {
    inputs: Vec<Var>,
    name: &'static str,
    /// `(input position, flat index within that input)` per output element.
    sources: Vec<(u32, u32)>,
}

impl<T: Real> Function<T> for Gather {
    fn name(&self) -> &'static str {
        self.name
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut grads: Vec<Option<Vec<T>>> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, v)| ctx.needs(i).then(|| vec![T::zero(); ctx.value(*v).numel()]))
            .collect();
        for (&(input, idx), &g) in self.sources.iter().zip(out_grad) {
            if let Some(d) = grads[input as usize].as_mut() {
                d[idx as usize] += g;
            }
        }
        grads
    }
}

impl<T: Real> Tape<T> {
    fn gather(
        &mut self,
        inputs: Vec<Var>,
        name: &'static str,
        shape: Vec<usize>,
        sources: Vec<(u32, u32)>,
    ) -> Result<Var> {
        let data = sources
            .iter()
            .map(|&(i, idx)| self.value(inputs[i as usize]).data()[idx as usize])
            .collect();
        self.apply(
            Box::new(Gather {
                inputs,
                name,
                sources,
            }),
            Tensor::from_parts(shape, data),
        )
    }

    /// Rearranges a detection head `(B, A*K, H, W)` into per-prior rows
    /// `(B, H*W*A, K)`. Row order is cell-major (row-major cells), then
    /// anchor; input channel `a*K + k` holds value `k` of anchor `a`.
    pub fn flatten_head(&mut self, input: Var, anchors: usize) -> Result<Var> {
        self.check(&[input])?;
        let s = self.shape(input).to_vec();
        if s.len() != 4 || anchors == 0 || s[1] % anchors != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "flatten_head",
                detail: format!("{s:?} with {anchors} anchors"),
            });
        }
        let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let k = ch / anchors;
        let mut sources = Vec::with_capacity(numel(&s));
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    for a in 0..anchors {
                        for kk in 0..k {
                            let idx = ((bi * ch + a * k + kk) * h + y) * w + x;
                            sources.push((0, idx as u32));
                        }
                    }
                }
            }
        }
        self.gather(vec![input], "flatten_head", vec![b, h * w * anchors, k], sources)
    }

    /// Concatenates `(B, P_i, K)` tensors along the middle axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check(parts)?;
        let first = parts.first().ok_or(TensorError::EmptySelection { op: "concat_rows" })?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 3
            || parts
                .iter()
                .any(|p| self.shape(*p).len() != 3 || self.shape(*p)[0] != s0[0] || self.shape(*p)[2] != s0[2])
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                detail: format!(
                    "{:?}",
                    parts.iter().map(|p| self.shape(*p).to_vec()).collect::<Vec<_>>()
                ),
            });
        }
        let (b, k) = (s0[0], s0[2]);
        let rows: Vec<usize> = parts.iter().map(|p| self.shape(*p)[1]).collect();
        let total: usize = rows.iter().sum();
        let mut sources = Vec::with_capacity(b * total * k);
        for bi in 0..b {
            for (pi, &r) in rows.iter().enumerate() {
                let start = bi * r * k;
                sources.extend((start..start + r * k).map(|i| (pi as u32, i as u32)));
            }
        }
        self.gather(parts.to_vec(), "concat_rows", vec![b, total, k], sources)
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        self.check(&[input])?;
        let s = self.shape(input).to_vec();
        let k = *s.last().unwrap_or(&0);
        if s.is_empty() || start + len > k || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_last",
                detail: format!("[{start}, {}) of {s:?}", start + len),
            });
        }
        let rows = numel(&s) / k;
        let sources = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| (0, (r * k + c) as u32)))
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.gather(vec![input], "slice_last", shape, sources)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[input])?;
        let n = self.value(input).numel();
        if numel(shape) != n {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(input)),
            });
        }
        let sources = (0..n as u32).map(|i| (0, i)).collect();
        self.gather(vec![input], "reshape", shape.to_vec(), sources)
    }
}

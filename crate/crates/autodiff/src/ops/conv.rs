use crate::error::{Result, TensorError};
use crate::real::{matmul, Real};
use crate::tape::{BackwardContext, Function, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Real>(g: &Geometry, image: &[T], cols: &mut [T]) {
    let n = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(g: &Geometry, cols: &[T], image: &mut [T]) {
    let n = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

struct Conv2d<T> {
    inputs: [Var; 3],
    geom: Geometry,
    /// im2col buffers, one per image.
    cols: Vec<T>,
}

impl<T: Real> Function<T> for Conv2d<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (k, n) = (g.col_rows(), g.col_cols());
        let weights = ctx.value(self.inputs[1]).data();
        let mut d_input = ctx.needs(0).then(|| vec![T::zero(); g.batch * g.in_ch * g.height * g.width]);
        let mut d_weight = ctx.needs(1).then(|| vec![T::zero(); g.out_ch * k]);
        let mut d_bias = ctx.needs(2).then(|| vec![T::zero(); g.out_ch]);
        let mut d_cols = vec![T::zero(); if d_input.is_some() { k * n } else { 0 }];
        let image_len = g.in_ch * g.height * g.width;
        for b in 0..g.batch {
            let gout = &out_grad[b * g.out_ch * n..(b + 1) * g.out_ch * n];
            let cols = &self.cols[b * k * n..(b + 1) * k * n];
            if let Some(dw) = d_weight.as_mut() {
                matmul(g.out_ch, n, k, gout, false, cols, true, dw, true);
            }
            if let Some(db) = d_bias.as_mut() {
                for (o, d) in db.iter_mut().enumerate() {
                    *d += gout[o * n..(o + 1) * n].iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = d_input.as_mut() {
                matmul(k, g.out_ch, n, weights, true, gout, false, &mut d_cols, false);
                col2im(g, &d_cols, &mut dx[b * image_len..(b + 1) * image_len]);
            }
        }
        vec![d_input, d_weight, d_bias]
    }
}

impl<T: Real> Tape<T> {
    /// 2-D convolution over `(batch, channels, height, width)` input with
    /// `(out, in, k, k)` weights and zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(&[input, weights, bias])?;
        if stride == 0 {
            return Err(TensorError::InvalidStride { op: "conv2d" });
        }
        let (xs, ws, bs) = (self.shape(input), self.shape(weights), self.shape(bias));
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {xs:?}, weights {ws:?}"),
            });
        }
        if xs[1] != ws[1] {
            return Err(TensorError::ChannelMismatch {
                input: xs[1],
                weight: ws[1],
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {bs:?} for {} output channels", ws[0]),
            });
        }
        let kernel = ws[2];
        if xs[2] + 2 * pad < kernel || xs[3] + 2 * pad < kernel {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kernel} exceeds padded input {xs:?}"),
            });
        }
        let geom = Geometry {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kernel,
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - kernel) / stride + 1,
            out_w: (xs[3] + 2 * pad - kernel) / stride + 1,
        };
        let (k, n) = (geom.col_rows(), geom.col_cols());
        let image_len = geom.in_ch * geom.height * geom.width;
        let mut cols = vec![T::zero(); geom.batch * k * n];
        let mut out = vec![T::zero(); geom.batch * geom.out_ch * n];
        {
            let x = self.value(input).data();
            let w = self.value(weights).data();
            let bias_v = self.value(bias).data();
            for b in 0..geom.batch {
                let c = &mut cols[b * k * n..(b + 1) * k * n];
                im2col(&geom, &x[b * image_len..(b + 1) * image_len], c);
                let o = &mut out[b * geom.out_ch * n..(b + 1) * geom.out_ch * n];
                for (ch, row) in o.chunks_mut(n).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias_v[ch]);
                }
                matmul(geom.out_ch, k, n, w, false, c, false, o, true);
            }
        }
        let shape = vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w];
        self.apply(
            Box::new(Conv2d {
                inputs: [input, weights, bias],
                geom,
                cols,
            }),
            Tensor::from_parts(shape, out),
        )
    }
}

//! Stride-1 volumetric convolution and non-overlapping max pooling.
//!
//! Tensors are `[batch, channels, depth, height, width]`. Planar images use a
//! depth of one with a depth-1 kernel.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], padding: [usize; 3]) -> Result<Self> {
        let (&[b, ci, d, h, w], &[co, wci, kd, kh, kw]) = (x_shape, w_shape) else {
            return Err(Error::Shape(format!(
                "conv expects 5-d input and kernel, got {x_shape:?} and {w_shape:?}"
            )));
        };
        if ci != wci {
            return Err(Error::Shape(format!(
                "conv input has {ci} channels, kernel expects {wci}"
            )));
        }
        let input = [d, h, w];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * padding[a];
            if kernel[a] == 0 || padded < kernel[a] {
                return Err(Error::Shape(format!(
                    "kernel {kernel:?} does not fit input {input:?} with padding {padding:?}"
                )));
            }
            output[a] = padded - kernel[a] + 1;
        }
        Ok(Self {
            batch: b,
            in_ch: ci,
            out_ch: co,
            input,
            kernel,
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.output[0], self.output[1], self.output[2]]
    }

    fn in_size(&self) -> usize {
        self.input.iter().product()
    }

    fn out_size(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_size(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output index range `[lo, hi)` along `axis` whose input index `o + k - pad` is in bounds.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let pad = self.padding[axis];
        let lo = pad.saturating_sub(k);
        let hi = (self.input[axis] + pad).saturating_sub(k).min(self.output[axis]);
        (lo, hi.max(lo))
    }

    /// Visit every (kernel offset, output row, matching input row) triple.
    /// The callback receives the flat kernel offset, the output row start,
    /// the input row start and the row length.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        for a in 0..kd {
            let (d0, d1) = self.valid(0, a);
            for b in 0..kh {
                let (h0, h1) = self.valid(1, b);
                for c in 0..kw {
                    let (w0, w1) = self.valid(2, c);
                    if w1 <= w0 {
                        continue;
                    }
                    let koff = (a * kh + b) * kw + c;
                    let len = w1 - w0;
                    for od in d0..d1 {
                        let id = od + a - self.padding[0];
                        for oh_ in h0..h1 {
                            let ih_ = oh_ + b - self.padding[1];
                            let orow = (od * oh + oh_) * ow + w0;
                            let irow = (id * ih + ih_) * iw + w0 + c - self.padding[2];
                            f(koff, orow, irow, len);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (isz, osz, ksz) = (g.in_size(), g.out_size(), g.kernel_size());
    let mut y = vec![0.0; g.batch * g.out_ch * osz];
    for b in 0..g.batch {
        for co in 0..g.out_ch {
            let out = &mut y[(b * g.out_ch + co) * osz..][..osz];
            out.fill(bias[co]);
            for ci in 0..g.in_ch {
                let xin = &x[(b * g.in_ch + ci) * isz..][..isz];
                let wk = &w[(co * g.in_ch + ci) * ksz..][..ksz];
                g.for_each_row(|k, o, i, len| {
                    let wv = wk[k];
                    if wv == 0.0 {
                        return;
                    }
                    for (ov, iv) in out[o..o + len].iter_mut().zip(&xin[i..i + len]) {
                        *ov += wv * iv;
                    }
                });
            }
        }
    }
    y
}

/// Gradients of the convolution with respect to input, kernel and bias.
/// The input gradient is skipped when `need_input` is false.
pub fn conv_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (isz, osz, ksz) = (g.in_size(), g.out_size(), g.kernel_size());
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_ch];
    for b in 0..g.batch {
        for co in 0..g.out_ch {
            let gout = &gy[(b * g.out_ch + co) * osz..][..osz];
            gb[co] += gout.iter().sum::<f64>();
            for ci in 0..g.in_ch {
                let xin = &x[(b * g.in_ch + ci) * isz..][..isz];
                let wbase = (co * g.in_ch + ci) * ksz;
                let gwk = &mut gw[wbase..wbase + ksz];
                g.for_each_row(|k, o, i, len| {
                    gwk[k] += gout[o..o + len]
                        .iter()
                        .zip(&xin[i..i + len])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                });
                if let Some(gx) = gx.as_mut() {
                    let gxin = &mut gx[(b * g.in_ch + ci) * isz..][..isz];
                    let wk = &w[wbase..wbase + ksz];
                    g.for_each_row(|k, o, i, len| {
                        let wv = wk[k];
                        if wv == 0.0 {
                            return;
                        }
                        for (gv, ov) in gxin[i..i + len].iter_mut().zip(&gout[o..o + len]) {
                            *gv += wv * ov;
                        }
                    });
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Max pooling with window = stride = `factor` per axis; trailing remainders are dropped.
/// Returns the pooled values, the output shape and the flat input index of each maximum.
pub fn maxpool_forward(x: &[f64], shape: &[usize], factor: [usize; 3]) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let &[b, c, d, h, w] = shape else {
        return Err(Error::Shape(format!("max pool expects 5-d input, got {shape:?}")));
    };
    let out = [d / factor[0], h / factor[1], w / factor[2]];
    if factor.contains(&0) || out.contains(&0) {
        return Err(Error::Shape(format!(
            "pool factor {factor:?} collapses spatial dims {:?}",
            [d, h, w]
        )));
    }
    let isz = d * h * w;
    let osz: usize = out.iter().product();
    let mut y = Vec::with_capacity(b * c * osz);
    let mut arg = Vec::with_capacity(b * c * osz);
    for plane in 0..b * c {
        let base = plane * isz;
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for a in 0..factor[0] {
                        for bb in 0..factor[1] {
                            let row = base + ((od * factor[0] + a) * h + oh * factor[1] + bb) * w + ow * factor[2];
                            for cc in 0..factor[2] {
                                let v = x[row + cc];
                                if v > best {
                                    best = v;
                                    best_i = row + cc;
                                }
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((y, vec![b, c, out[0], out[1], out[2]], arg))
}

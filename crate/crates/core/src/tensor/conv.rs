//! Stride-1 dilated 2-D cross-correlation via im2col.

use super::gemm::{gemm, Layout};
use super::tape::{Function, GradSink, TapeValues};
use super::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    padding: usize,
    dilation: usize,
    out_height: usize,
    out_width: usize,
}

impl ConvGeometry {
    /// Rows of the im2col matrix: one per (input channel, tap).
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    /// A 1×1 kernel without padding reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }

    /// Valid output range along one axis for a tap offset `off`.
    fn valid_range(off: isize, out_len: usize, in_len: usize) -> (usize, usize) {
        let lo = (-off).max(0) as usize;
        let hi = (in_len as isize - off).clamp(0, out_len as isize) as usize;
        (lo.min(hi), hi)
    }

    fn tap_offset(&self, tap: usize) -> isize {
        (tap * self.dilation) as isize - self.padding as isize
    }

    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let (ow, oh) = (self.out_width, self.out_height);
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &input[c * self.in_plane()..(c + 1) * self.in_plane()];
            for ky in 0..k {
                let oy_off = self.tap_offset(ky);
                let (y_lo, y_hi) = Self::valid_range(oy_off, oh, self.height);
                for kx in 0..k {
                    let ox_off = self.tap_offset(kx);
                    let (x_lo, x_hi) = Self::valid_range(ox_off, ow, self.width);
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if oy < y_lo || oy >= y_hi || x_lo >= x_hi {
                            line.fill(0.0);
                            continue;
                        }
                        let iy = (oy as isize + oy_off) as usize;
                        let src = iy * self.width;
                        line[..x_lo].fill(0.0);
                        let ix_lo = (x_lo as isize + ox_off) as usize;
                        line[x_lo..x_hi].copy_from_slice(&plane[src + ix_lo..src + ix_lo + (x_hi - x_lo)]);
                        line[x_hi..].fill(0.0);
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], grad_input: &mut [f64]) {
        let (ow, oh) = (self.out_width, self.out_height);
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &mut grad_input[c * self.in_plane()..(c + 1) * self.in_plane()];
            for ky in 0..k {
                let oy_off = self.tap_offset(ky);
                let (y_lo, y_hi) = Self::valid_range(oy_off, oh, self.height);
                for kx in 0..k {
                    let ox_off = self.tap_offset(kx);
                    let (x_lo, x_hi) = Self::valid_range(ox_off, ow, self.width);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    let ix_lo = (x_lo as isize + ox_off) as usize;
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize + oy_off) as usize;
                        let dst = &mut plane[iy * self.width + ix_lo..iy * self.width + ix_lo + (x_hi - x_lo)];
                        let line = &src[oy * ow + x_lo..oy * ow + x_hi];
                        dst.iter_mut().zip(line).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}

struct Conv2d {
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
}

impl Function for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.input, self.kernel];
        v.extend(self.bias);
        v
    }

    fn backward(&self, tape: &TapeValues<'_>, _output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        let g = self.geom;
        let (co, k_len, p) = (g.out_channels, g.patch_len(), g.out_plane());
        let x = tape.value(self.input).data();
        let w = tape.value(self.kernel).data();

        if let Some(bias) = self.bias {
            if let Some(gb) = sink.slot(bias) {
                for n in 0..g.batch {
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        let start = (n * co + o) * p;
                        *gbo += grad_out[start..start + p].iter().sum::<f64>();
                    }
                }
            }
        }

        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k_len * p] };
        if let Some(gw) = sink.slot(self.kernel) {
            for n in 0..g.batch {
                let xn = &x[n * g.in_channels * g.in_plane()..(n + 1) * g.in_channels * g.in_plane()];
                let cols_ref: &[f64] = if g.is_pointwise() {
                    xn
                } else {
                    g.im2col(xn, &mut cols);
                    &cols
                };
                let gn = &grad_out[n * co * p..(n + 1) * co * p];
                gemm(gn, Layout::row_major(co, p), cols_ref, Layout::transposed(p, k_len), 1.0, gw);
            }
        }

        if let Some(gx) = sink.slot(self.input) {
            let in_len = g.in_channels * g.in_plane();
            for n in 0..g.batch {
                let gn = &grad_out[n * co * p..(n + 1) * co * p];
                let gxn = &mut gx[n * in_len..(n + 1) * in_len];
                if g.is_pointwise() {
                    gemm(w, Layout::transposed(k_len, co), gn, Layout::row_major(co, p), 1.0, gxn);
                } else {
                    gemm(w, Layout::transposed(k_len, co), gn, Layout::row_major(co, p), 0.0, &mut cols);
                    g.col2im_add(&cols, gxn);
                }
            }
        }
    }
}

impl Tape {
    /// Stride-1 cross-correlation of `input` `[N,Ci,H,W]` with `kernel`
    /// `[Co,Ci,k,k]`, zero padding `padding` and tap spacing `dilation`.
    ///
    /// The kernel spans `dilation·(k−1)+1` input pixels per axis; the output
    /// is `[N,Co,H+2p−d(k−1),W+2p−d(k−1)]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        dilation: usize,
    ) -> Result<Var, TensorError> {
        let [n, ci, h, w] = self.value(input).dims4("conv2d")?;
        let [co, kci, kh, kw] = self.value(kernel).dims4("conv2d")?;
        if kci != ci {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: format!("kernel with {ci} input channels"),
                actual: self.shape(kernel).to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel must be square with odd size, got {kh}x{kw}"),
            });
        }
        if dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "dilation must be at least 1".into(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    expected: format!("bias [{co}]"),
                    actual: self.shape(b).to_vec(),
                });
            }
        }
        let span = dilation * (kh - 1);
        let (oh, ow) = (h + 2 * padding, w + 2 * padding);
        if oh <= span || ow <= span {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel span {} exceeds padded input {oh}x{ow}", span + 1),
            });
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: ci,
            out_channels: co,
            height: h,
            width: w,
            kernel: kh,
            padding,
            dilation,
            out_height: oh - span,
            out_width: ow - span,
        };

        let (k_len, p) = (geom.patch_len(), geom.out_plane());
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let bias_data = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * co * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k_len * p] };
        for b in 0..n {
            let xn = &x[b * ci * h * w..(b + 1) * ci * h * w];
            let on = &mut out[b * co * p..(b + 1) * co * p];
            if let Some(bd) = bias_data {
                for (o, chunk) in on.chunks_exact_mut(p).enumerate() {
                    chunk.fill(bd[o]);
                }
            }
            let cols_ref: &[f64] = if geom.is_pointwise() {
                xn
            } else {
                geom.im2col(xn, &mut cols);
                &cols
            };
            gemm(wt, Layout::row_major(co, k_len), cols_ref, Layout::row_major(k_len, p), 1.0, on);
        }
        let value = Tensor::from_parts(vec![n, co, geom.out_height, geom.out_width], out);
        Ok(self.record(
            value,
            Box::new(Conv2d {
                input,
                kernel,
                bias,
                geom,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..9).map(|v| v as f64 * 0.3 - 1.0).collect();
        let x = leaf(&mut tape, &[1, 1, 3, 3], data.clone());
        let k = leaf(&mut tape, &[1, 1, 1, 1], vec![1.0]);
        let b = leaf(&mut tape, &[1], vec![0.0]);
        let y = tape.conv2d(x, k, Some(b), 0, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9]);
        let k = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9]);
        let b = leaf(&mut tape, &[1], vec![0.0]);
        let y = tape.conv2d(x, k, Some(b), 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn dilated_kernel_reads_lattice_positions() {
        let mut tape = Tape::new();
        let input: Vec<f64> = (0..25).map(|v| (v * v % 17) as f64 + 0.5).collect();
        let kernel: Vec<f64> = (0..9).map(|v| v as f64 - 3.0).collect();
        // Hand evaluation over rows/cols {0,2,4}.
        let mut expect = 0.0;
        for (ky, iy) in [0, 2, 4].into_iter().enumerate() {
            for (kx, ix) in [0, 2, 4].into_iter().enumerate() {
                expect += kernel[ky * 3 + kx] * input[iy * 5 + ix];
            }
        }
        let x = leaf(&mut tape, &[1, 1, 5, 5], input);
        let k = leaf(&mut tape, &[1, 1, 3, 3], kernel);
        let y = tape.conv2d(x, k, None, 0, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn padding_preserves_size_per_dilation() {
        for d in 1..=4 {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &[2, 3, 6, 6], vec![0.5; 216]);
            let k = leaf(&mut tape, &[4, 3, 3, 3], vec![0.1; 108]);
            let y = tape.conv2d(x, k, None, d, d).unwrap();
            assert_eq!(tape.shape(y), &[2, 4, 6, 6]);
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_bad_kernels() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 4, 4], vec![0.0; 32]);
        let k = leaf(&mut tape, &[1, 3, 3, 3], vec![0.0; 27]);
        let err = tape.conv2d(x, k, None, 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "conv2d", .. }), "{err}");
        let even = leaf(&mut tape, &[1, 2, 2, 2], vec![0.0; 8]);
        assert!(tape.conv2d(x, even, None, 1, 1).is_err());
        let k3 = leaf(&mut tape, &[1, 2, 3, 3], vec![0.0; 18]);
        assert!(tape.conv2d(x, k3, None, 0, 0).is_err());
        // span 9 on a 4x4 input without padding
        assert!(tape.conv2d(x, k3, None, 0, 4).is_err());
    }
}

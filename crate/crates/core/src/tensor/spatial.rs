use super::tape::{Function, GradSink, TapeValues};
use super::{Tape, Tensor, TensorError, Var};

struct MaxPool2d {
    input: Var,
    /// Flat input index of the selected element for every output element.
    argmax: Vec<usize>,
}

impl Function for MaxPool2d {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _tape: &TapeValues<'_>, _output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        if let Some(gx) = sink.slot(self.input) {
            for (&src, g) in self.argmax.iter().zip(grad_out) {
                gx[src] += g;
            }
        }
    }
}

struct Upsample2d {
    input: Var,
}

impl Function for Upsample2d {
    fn name(&self) -> &'static str {
        "upsample2d"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, tape: &TapeValues<'_>, _output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        let [n, c, h, w] = tape.value(self.input).dims4("upsample2d").expect("checked in forward");
        if let Some(gx) = sink.slot(self.input) {
            let ow = 2 * w;
            for plane in 0..n * c {
                let src = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for oy in 0..2 * h {
                    for ox in 0..ow {
                        dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

struct ConcatChannels {
    a: Var,
    b: Var,
}

impl Function for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, tape: &TapeValues<'_>, output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        let [n, c, h, w] = output.dims4("concat_channels").expect("rank 4");
        let ca = tape.value(self.a).shape()[1];
        let plane = h * w;
        if let Some(ga) = sink.slot(self.a) {
            for b in 0..n {
                let src = &grad_out[b * c * plane..(b * c + ca) * plane];
                ga[b * ca * plane..(b + 1) * ca * plane]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let cb = c - ca;
        if let Some(gb) = sink.slot(self.b) {
            for b in 0..n {
                let src = &grad_out[(b * c + ca) * plane..(b + 1) * c * plane];
                gb[b * cb * plane..(b + 1) * cb * plane]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
    }
}

impl Tape {
    /// 2×2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order, which is also where the gradient is routed.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4("maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2d",
                reason: format!("spatial size {h}x{w} must be even"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let first = base + 2 * oy * w + 2 * ox;
                    let mut best = first;
                    for idx in [first + 1, first + w, first + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.record(value, Box::new(MaxPool2d { input, argmax })))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2d(&mut self, input: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4("upsample2d")?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.record(value, Box::new(Upsample2d { input })))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [na, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                expected: format!("[{na}, _, {ha}, {wa}]"),
                actual: self.shape(b).to_vec(),
            });
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            out.extend_from_slice(&xa[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&xb[n * cb * plane..(n + 1) * cb * plane]);
        }
        let value = Tensor::from_parts(vec![na, ca + cb, ha, wa], out);
        Ok(self.record(value, Box::new(ConcatChannels { a, b })))
    }
}

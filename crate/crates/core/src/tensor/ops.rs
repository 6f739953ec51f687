use super::tape::{Function, GradSink, TapeValues};
use super::{Tape, Tensor, TensorError, Var};

struct Add {
    a: Var,
    b: Var,
}

impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, _tape: &TapeValues<'_>, _output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        sink.accumulate(self.a, grad_out);
        sink.accumulate(self.b, grad_out);
    }
}

struct Mul {
    a: Var,
    b: Var,
}

impl Function for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, tape: &TapeValues<'_>, _output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        let (xa, xb) = (tape.value(self.a).data(), tape.value(self.b).data());
        if let Some(ga) = sink.slot(self.a) {
            for ((g, d), o) in ga.iter_mut().zip(grad_out).zip(xb) {
                *g += d * o;
            }
        }
        if let Some(gb) = sink.slot(self.b) {
            for ((g, d), o) in gb.iter_mut().zip(grad_out).zip(xa) {
                *g += d * o;
            }
        }
    }
}

struct Sum {
    input: Var,
}

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _tape: &TapeValues<'_>, _output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        if let Some(g) = sink.slot(self.input) {
            g.iter_mut().for_each(|v| *v += grad_out[0]);
        }
    }
}

struct Relu {
    input: Var,
}

impl Function for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, tape: &TapeValues<'_>, _output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        let x = tape.value(self.input).data();
        if let Some(g) = sink.slot(self.input) {
            for ((gi, d), xv) in g.iter_mut().zip(grad_out).zip(x) {
                if *xv > 0.0 {
                    *gi += d;
                }
            }
        }
    }
}

struct SoftmaxChannels {
    input: Var,
}

impl Function for SoftmaxChannels {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _tape: &TapeValues<'_>, output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        let [n, k, h, w] = output.dims4("softmax_channels").expect("rank 4");
        let plane = h * w;
        let y = output.data();
        if let Some(g) = sink.slot(self.input) {
            let mut dot = vec![0.0; plane];
            for b in 0..n {
                let base = b * k * plane;
                dot.fill(0.0);
                for c in 0..k {
                    let off = base + c * plane;
                    for p in 0..plane {
                        dot[p] += y[off + p] * grad_out[off + p];
                    }
                }
                for c in 0..k {
                    let off = base + c * plane;
                    for p in 0..plane {
                        g[off + p] += y[off + p] * (grad_out[off + p] - dot[p]);
                    }
                }
            }
        }
    }
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: format!("{:?}", self.shape(a)),
                actual: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.record(value, Box::new(Add { a, b })))
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.record(value, Box::new(Mul { a, b })))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.record(Tensor::scalar(total), Box::new(Sum { input }))
    }

    /// Elementwise `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let data = self.value(input).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_parts(self.shape(input).to_vec(), data);
        self.record(value, Box::new(Relu { input }))
    }

    /// Per-pixel softmax over the channel axis of `[N,K,H,W]` logits.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var, TensorError> {
        let [n, k, h, w] = self.value(input).dims4("softmax_channels")?;
        if k < 2 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_channels",
                reason: format!("need at least two channels, got {k}"),
            });
        }
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let base = b * k * plane;
            for p in 0..plane {
                let max = (0..k).map(|c| x[base + c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for c in 0..k {
                    let e = (x[base + c * plane + p] - max).exp();
                    out[base + c * plane + p] = e;
                    total += e;
                }
                for c in 0..k {
                    out[base + c * plane + p] /= total;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, k, h, w], out);
        Ok(self.record(value, Box::new(SoftmaxChannels { input })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn relu_values_and_gradients() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![-1.0, 2.0]);
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4], vec![-1.0, -0.5, -3.0, -1e-300]);
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn add_identities() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], vec![1.0, 1.0]);
        let b = leaf(&mut tape, &[2], vec![2.0, 2.0]);
        let z = leaf(&mut tape, &[2], vec![0.0, 0.0]);
        let az = tape.add(a, z).unwrap();
        assert_eq!(tape.value(az).data(), tape.value(a).data());
        let ab = tape.add(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[3.0, 3.0]);
        let s = tape.sum(ab);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
        let c = leaf(&mut tape, &[3], vec![0.0; 3]);
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, -2.0]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, -2.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 5, 1, 1], vec![0.7; 5]);
        let y = tape.softmax_channels(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));

        let x = leaf(&mut tape, &[1, 2, 1, 1], vec![0.0, 3f64.ln()]);
        let y = tape.softmax_channels(x).unwrap();
        let p = tape.value(y).data();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);

        let logits = vec![0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 41.5).collect();
        let a = leaf(&mut tape, &[1, 4, 1, 1], logits);
        let b = leaf(&mut tape, &[1, 4, 1, 1], shifted);
        let ya = tape.softmax_channels(a).unwrap();
        let yb = tape.softmax_channels(b).unwrap();
        for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let one = leaf(&mut tape, &[1, 1, 2, 2], vec![0.0; 4]);
        assert!(tape.softmax_channels(one).is_err());
    }
}

use super::tape::{Function, GradSink, TapeValues};
use super::{Tape, Tensor, TensorError, Var};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    /// Statistics that must be filled by a training pass before eval use.
    /// The first training batch seeds them directly.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
            eps: BATCHNORM_EPS,
            momentum: BATCHNORM_MOMENTUM,
        }
    }

    /// Zero mean, unit variance.
    pub fn standard(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

struct BatchNorm2d {
    input: Var,
    gamma: Var,
    beta: Var,
    mode: NormMode,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Function for BatchNorm2d {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input, self.gamma, self.beta]
    }

    fn backward(&self, tape: &TapeValues<'_>, _output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        let x = tape.value(self.input);
        let [n, c, h, w] = x.dims4("batchnorm2d").expect("checked in forward");
        let x = x.data();
        let gamma = tape.value(self.gamma).data();
        let plane = h * w;
        let count = (n * plane) as f64;

        // Per-channel Σdy and Σdy·x̂.
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                let (m, s) = (self.mean[ch], self.inv_std[ch]);
                for (xv, dy) in x[start..start + plane].iter().zip(&grad_out[start..start + plane]) {
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * (xv - m) * s;
                }
            }
        }
        if let Some(gg) = sink.slot(self.gamma) {
            gg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b);
        }
        if let Some(gb) = sink.slot(self.beta) {
            gb.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b);
        }
        if let Some(gx) = sink.slot(self.input) {
            for b in 0..n {
                for ch in 0..c {
                    let start = (b * c + ch) * plane;
                    let (m, s, g) = (self.mean[ch], self.inv_std[ch], gamma[ch]);
                    let xs = &x[start..start + plane];
                    let dys = &grad_out[start..start + plane];
                    let dst = &mut gx[start..start + plane];
                    match self.mode {
                        NormMode::Eval => {
                            for (d, dy) in dst.iter_mut().zip(dys) {
                                *d += dy * g * s;
                            }
                        }
                        NormMode::Train => {
                            let scale = g * s / count;
                            let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                            for ((d, dy), xv) in dst.iter_mut().zip(dys).zip(xs) {
                                let xhat = (xv - m) * s;
                                *d += scale * (count * dy - sd - xhat * sdx);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Per-channel batch normalization of `[N,C,H,W]` input.
    ///
    /// Train mode uses the biased batch variance for normalization and
    /// folds the unbiased estimate into `state` with
    /// `new = (1−momentum)·old + momentum·batch`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4("batchnorm2d")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm2d",
                    expected: format!("{name} [{c}]"),
                    actual: self.shape(v).to_vec(),
                });
            }
        }
        if state.channels() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d",
                expected: format!("running statistics for {c} channels"),
                actual: vec![state.channels()],
            });
        }
        let plane = h * w;
        let count = n * plane;
        let x = self.value(input).data();
        let (mean, var) = match mode {
            NormMode::Train => {
                if count < 2 {
                    return Err(TensorError::InvalidArgument {
                        op: "batchnorm2d",
                        reason: "train mode needs at least two values per channel".into(),
                    });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let values = || (0..n).flat_map(move |b| &x[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
                    let m = values().sum::<f64>() / count as f64;
                    let v = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = count as f64 / (count - 1) as f64;
                for ch in 0..c {
                    if state.initialized {
                        let mo = state.momentum;
                        state.running_mean[ch] = (1.0 - mo) * state.running_mean[ch] + mo * mean[ch];
                        state.running_var[ch] = (1.0 - mo) * state.running_var[ch] + mo * var[ch] * unbiased;
                    } else {
                        state.running_mean[ch] = mean[ch];
                        state.running_var[ch] = var[ch] * unbiased;
                    }
                }
                state.initialized = true;
                (mean, var)
            }
            NormMode::Eval => {
                if !state.initialized {
                    return Err(TensorError::UninitializedRunningStats);
                }
                (state.running_mean.clone(), state.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let gamma_d = self.value(gamma).data();
        let beta_d = self.value(beta).data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                let (m, s, g, be) = (mean[ch], inv_std[ch], gamma_d[ch], beta_d[ch]);
                for (o, xv) in out[start..start + plane].iter_mut().zip(&x[start..start + plane]) {
                    *o = g * (xv - m) * s + be;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.record(
            value,
            Box::new(BatchNorm2d {
                input,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            }),
        ))
    }
}

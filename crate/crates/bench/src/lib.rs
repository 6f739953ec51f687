//! Deterministic inputs shared by the benchmarks.

use unetdr::phantom::{generate_phantom, PhantomSpec};
use unetdr::{Tensor, Volume};

/// Smooth pseudo-random values in `[-1, 1]`.
pub fn wave_tensor(shape: [usize; 4], phase: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64) * 0.7548776662 + phase).sin()).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Labelled phantom of the given size.
pub fn phantom(dims: [usize; 3], seed: u64) -> Volume {
    generate_phantom(&PhantomSpec {
        dims,
        seed,
        ..PhantomSpec::default()
    })
    .expect("valid phantom size")
}

//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetdr::tensor::{Tape, Tensor, Var};
use unetdr::volume::{Dims, LabelMap, Mask, Spacing};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Distinct values at least `gap` apart in random order, so a small
/// perturbation never changes which element is the maximum.
pub fn separated_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * gap - n as f64 * gap / 2.0).collect();
    for i in (1..n).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// `Σ w ⊙ v` with fixed random weights, turning any output into a scalar
/// whose gradient exercises every output element.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let w = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(v, wv).unwrap();
    tape.sum(prod)
}

/// Compares the tape gradient of `f` with central differences (step `h`)
/// for every element of every input. Returns the worst relative error of
/// any input, measured as `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
pub fn gradcheck(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().expect("scalar output")
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// Random label map made of a few random boxes drawn over background,
/// so classes form both compact and fragmented regions.
pub fn random_label_map(rng: &mut ChaCha8Rng, dims: Dims, num_classes: u8) -> LabelMap {
    let [d, h, w] = dims;
    let mut data = vec![0u8; d * h * w];
    let boxes = rng.random_range(0..8);
    for _ in 0..boxes {
        let label = rng.random_range(1..num_classes);
        let z0 = rng.random_range(0..d);
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let z1 = rng.random_range(z0..d) + 1;
        let y1 = rng.random_range(y0..h) + 1;
        let x1 = rng.random_range(x0..w) + 1;
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    data[(z * h + y) * w + x] = label;
                }
            }
        }
    }
    // Salt noise adds isolated voxels.
    let salt = rng.random_range(0..6);
    for _ in 0..salt {
        let i = rng.random_range(0..data.len());
        data[i] = rng.random_range(0..num_classes);
    }
    LabelMap::new(dims, data).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, dims: Dims, density: f64) -> Mask {
    let n = dims.iter().product();
    Mask::new(dims, (0..n).map(|_| rng.random_bool(density)).collect()).unwrap()
}

pub fn random_dims(rng: &mut ChaCha8Rng, max: usize) -> Dims {
    [rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max)]
}

/// Surface voxels: set voxels with an unset face neighbour or on the array border.
pub fn brute_surface(mask: &Mask) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(z, y, x) {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                let open = border
                    || !mask.get(z - 1, y, x)
                    || !mask.get(z + 1, y, x)
                    || !mask.get(z, y - 1, x)
                    || !mask.get(z, y + 1, x)
                    || !mask.get(z, y, x - 1)
                    || !mask.get(z, y, x + 1);
                if open {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

pub fn mm_distance(a: [usize; 3], b: [usize; 3], s: Spacing) -> f64 {
    let dz = (a[0] as f64 - b[0] as f64) * s.z;
    let dy = (a[1] as f64 - b[1] as f64) * s.y;
    let dx = (a[2] as f64 - b[2] as f64) * s.x;
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// Symmetric Hausdorff distance between the two surfaces by all-pairs search.
pub fn brute_hausdorff(a: &Mask, b: &Mask, spacing: Spacing) -> Option<f64> {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| mm_distance(p, q, spacing)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&sa, &sb).max(directed(&sb, &sa)))
}

/// Dice by direct counting, 1 when both masks are empty.
pub fn brute_dice(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Depth-first flood-fill component labelling with 6-connectivity. Components are
/// numbered from 1 in the order their first voxel appears in a row-major
/// scan; background gets 0.
pub fn flood_fill_components(mask: &Mask) -> Vec<u32> {
    let [d, h, w] = mask.dims();
    let mut ids = vec![0u32; d * h * w];
    let mut next = 0u32;
    for start in 0..ids.len() {
        if !mask.data()[start] || ids[start] != 0 {
            continue;
        }
        next += 1;
        ids[start] = next;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if mask.data()[j] && ids[j] == 0 {
                    ids[j] = next;
                    stack.push(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    ids
}

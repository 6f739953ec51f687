//! Overlap and surface-distance metrics for label volumes.
//!
//! The Hausdorff distance is the symmetric maximum of the two directed
//! max–min Euclidean distances between the 6-connected surface voxels of
//! each mask, measured between voxel centres in millimetres. Distances to
//! a surface are read from an exact anisotropic Euclidean distance
//! transform, so the cost is linear in the volume size.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::volume::{class_name, flat_index, Dims, LabelMap, Mask, Spacing, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Dims, Dims),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("malformed report: {0}")]
    Parse(String),
}

fn same_dims(a: Dims, b: Dims) -> Result<(), MetricsError> {
    if a == b {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(a, b))
    }
}

/// `2|G∩P| / (|G|+|P|)`; two empty masks score 1.
pub fn dice_score(gt: &Mask, pred: &Mask) -> Result<f64, MetricsError> {
    same_dims(gt.dims(), pred.dims())?;
    let (mut inter, mut g, mut p) = (0usize, 0usize, 0usize);
    for (&a, &b) in gt.data().iter().zip(pred.data()) {
        g += a as usize;
        p += b as usize;
        inter += (a && b) as usize;
    }
    if g + p == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (g + p) as f64)
}

/// Voxels of `mask` with at least one face neighbour outside the mask.
/// Voxels on the array border count as surface.
pub fn surface(mask: &Mask) -> Mask {
    let dims = mask.dims();
    let [d, h, w] = dims;
    let mut out = vec![false; mask.data().len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(z, y, x) {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < d
                    && y > 0
                    && y + 1 < h
                    && x > 0
                    && x + 1 < w
                    && mask.get(z - 1, y, x)
                    && mask.get(z + 1, y, x)
                    && mask.get(z, y - 1, x)
                    && mask.get(z, y + 1, x)
                    && mask.get(z, y, x - 1)
                    && mask.get(z, y, x + 1);
                out[flat_index(dims, z, y, x)] = !interior;
            }
        }
    }
    Mask::new(dims, out).expect("same dims")
}

/// One pass of the lower-envelope distance transform along a line:
/// `out[q] = min_p w²(q−p)² + f[p]` over sites with finite `f[p]`.
fn edt_line(f: &[f64], weight: f64, out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    let w2 = weight * weight;
    sites.clear();
    bounds.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&p) = sites.last() else {
                sites.push(q);
                bounds.push(f64::NEG_INFINITY);
                break;
            };
            let (qf, pf) = (q as f64, p as f64);
            let s = ((fq + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf));
            if s <= *bounds.last().expect("paired with sites") {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(s);
                break;
            }
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < sites.len() && bounds[k + 1] < qf {
            k += 1;
        }
        let dq = qf - sites[k] as f64;
        *o = w2 * dq * dq + f[sites[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel centre to the nearest
/// set voxel of `mask`; infinite everywhere when the mask is empty.
pub fn squared_distance_transform(mask: &Mask, spacing: Spacing) -> Vec<f64> {
    let [d, h, w] = mask.dims();
    let mut g: Vec<f64> = mask.data().iter().map(|&v| if v { 0.0 } else { f64::INFINITY }).collect();
    let (mut sites, mut bounds) = (Vec::new(), Vec::new());
    let mut line_in = Vec::new();
    let mut line_out = Vec::new();

    // x lines are contiguous.
    line_out.resize(w, 0.0);
    for row in g.chunks_exact_mut(w) {
        line_in.clear();
        line_in.extend_from_slice(row);
        edt_line(&line_in, spacing.x, row, &mut sites, &mut bounds);
    }
    // y lines.
    line_out.resize(h, 0.0);
    for z in 0..d {
        for x in 0..w {
            line_in.clear();
            line_in.extend((0..h).map(|y| g[flat_index([d, h, w], z, y, x)]));
            edt_line(&line_in, spacing.y, &mut line_out, &mut sites, &mut bounds);
            for (y, v) in line_out.iter().enumerate() {
                g[flat_index([d, h, w], z, y, x)] = *v;
            }
        }
    }
    // z lines.
    line_out.resize(d, 0.0);
    for y in 0..h {
        for x in 0..w {
            line_in.clear();
            line_in.extend((0..d).map(|z| g[flat_index([d, h, w], z, y, x)]));
            edt_line(&line_in, spacing.z, &mut line_out, &mut sites, &mut bounds);
            for (z, v) in line_out.iter().enumerate() {
                g[flat_index([d, h, w], z, y, x)] = *v;
            }
        }
    }
    g
}

/// `max_{a∈from} min_{b∈to} |a−b|` in millimetres over all set voxels;
/// `None` when either mask is empty.
pub fn directed_hausdorff(from: &Mask, to: &Mask, spacing: Spacing) -> Result<Option<f64>, MetricsError> {
    same_dims(from.dims(), to.dims())?;
    if from.is_empty() || to.is_empty() {
        return Ok(None);
    }
    let dist = squared_distance_transform(to, spacing);
    let worst = from
        .data()
        .iter()
        .zip(&dist)
        .filter(|(&set, _)| set)
        .map(|(_, &d2)| d2)
        .fold(0.0, f64::max);
    Ok(Some(worst.sqrt()))
}

/// Symmetric Hausdorff distance between the surfaces of `gt` and `pred`;
/// `None` (undefined) when either mask is empty.
pub fn hausdorff_distance(gt: &Mask, pred: &Mask, spacing: Spacing) -> Result<Option<f64>, MetricsError> {
    same_dims(gt.dims(), pred.dims())?;
    if gt.is_empty() || pred.is_empty() {
        return Ok(None);
    }
    let (sg, sp) = (surface(gt), surface(pred));
    let forward = directed_hausdorff(&sg, &sp, spacing)?.expect("non-empty surfaces");
    let backward = directed_hausdorff(&sp, &sg, spacing)?.expect("non-empty surfaces");
    Ok(Some(forward.max(backward)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub label: u8,
    pub name: String,
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd: Option<f64>,
    pub gt_voxels: usize,
    pub pred_voxels: usize,
}

/// Per-organ scores for one volume plus foreground means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    /// Mean over the classes whose distance is defined.
    pub mean_hd: Option<f64>,
}

/// Scores every foreground class of `pred` against `gt`.
pub fn evaluate_volume(gt: &LabelMap, pred: &LabelMap, spacing: Spacing, num_classes: usize) -> Result<MetricsReport, MetricsError> {
    same_dims(gt.dims(), pred.dims())?;
    gt.check_range(num_classes)?;
    pred.check_range(num_classes)?;
    let gt_counts = gt.counts(num_classes);
    let pred_counts = pred.counts(num_classes);
    let mut per_class = Vec::with_capacity(num_classes.saturating_sub(1));
    for label in 1..num_classes as u8 {
        let (g, p) = (gt.mask(label), pred.mask(label));
        per_class.push(ClassMetrics {
            label,
            name: class_name(label, num_classes),
            dsc: dice_score(&g, &p)?,
            hd: hausdorff_distance(&g, &p, spacing)?,
            gt_voxels: gt_counts[label as usize],
            pred_voxels: pred_counts[label as usize],
        });
    }
    Ok(MetricsReport::from_classes(num_classes, per_class))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn from_classes(num_classes: usize, per_class: Vec<ClassMetrics>) -> Self {
        let mean_dsc = mean(per_class.iter().map(|c| c.dsc)).unwrap_or(1.0);
        let mean_hd = mean(per_class.iter().filter_map(|c| c.hd));
        Self {
            num_classes,
            per_class,
            mean_dsc,
            mean_hd,
        }
    }

    pub fn class(&self, label: u8) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.label == label)
    }

    /// Line-oriented `key=value` form, parseable by [`MetricsReport::from_text`].
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "mean_dsc={}", self.mean_dsc);
        let _ = writeln!(s, "mean_hd={}", opt(self.mean_hd));
        for c in &self.per_class {
            let _ = writeln!(s, "class.{}.name={}", c.label, c.name);
            let _ = writeln!(s, "class.{}.dsc={}", c.label, c.dsc);
            let _ = writeln!(s, "class.{}.hd={}", c.label, opt(c.hd));
            let _ = writeln!(s, "class.{}.gt_voxels={}", c.label, c.gt_voxels);
            let _ = writeln!(s, "class.{}.pred_voxels={}", c.label, c.pred_voxels);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, MetricsError> {
        let bad = |m: String| MetricsError::Parse(m);
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("missing '=' in {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| -> Result<f64, MetricsError> { get(k)?.parse().map_err(|_| bad(format!("bad number for {k}"))) };
        let count = |k: &str| -> Result<usize, MetricsError> { get(k)?.parse().map_err(|_| bad(format!("bad count for {k}"))) };
        let opt = |k: &str| -> Result<Option<f64>, MetricsError> {
            match get(k)?.as_str() {
                "undefined" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(format!("bad number for {k}"))),
            }
        };
        let num_classes = count("num_classes")?;
        let mut per_class = Vec::new();
        for label in 1..num_classes {
            let key = |f: &str| format!("class.{label}.{f}");
            per_class.push(ClassMetrics {
                label: label as u8,
                name: get(&key("name"))?.clone(),
                dsc: num(&key("dsc"))?,
                hd: opt(&key("hd"))?,
                gt_voxels: count(&key("gt_voxels"))?,
                pred_voxels: count(&key("pred_voxels"))?,
            });
        }
        Ok(Self {
            num_classes,
            per_class,
            mean_dsc: num("mean_dsc")?,
            mean_hd: opt("mean_hd")?,
        })
    }

    /// Fixed-width table with one column per organ and a mean column.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "Metric");
        for c in &self.per_class {
            let mut name = c.name.clone();
            if let Some(first) = name.get_mut(0..1) {
                first.make_ascii_uppercase();
            }
            let _ = write!(s, "{name:>11}");
        }
        let _ = writeln!(s, "{:>11}", "Mean");
        let _ = write!(s, "{:<10}", "DSC");
        for c in &self.per_class {
            let _ = write!(s, "{:>11}", fmt(Some(c.dsc)));
        }
        let _ = writeln!(s, "{:>11}", fmt(Some(self.mean_dsc)));
        let _ = write!(s, "{:<10}", "HD [mm]");
        for c in &self.per_class {
            let _ = write!(s, "{:>11}", fmt(c.hd));
        }
        let _ = writeln!(s, "{:>11}", fmt(self.mean_hd));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: Dims, voxels: &[[usize; 3]]) -> Mask {
        Mask::from_voxels(dims, voxels).unwrap()
    }

    #[test]
    fn dice_counts() {
        let dims = [1, 2, 4];
        let a = mask(dims, &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
        let b = mask(dims, &[[0, 0, 0], [0, 1, 1]]);
        let c = mask(dims, &[[0, 0, 3]]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.0);
        assert!((dice_score(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let e = Mask::empty(dims).unwrap();
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert_eq!(dice_score(&e, &a).unwrap(), 0.0);
        assert!(dice_score(&a, &Mask::empty([2, 1, 4]).unwrap()).is_err());
    }

    #[test]
    fn hausdorff_hand_cases() {
        let dims = [1, 5, 11];
        let g = mask(dims, &[[0, 0, 0]]);
        let p = mask(dims, &[[0, 4, 3]]);
        assert_eq!(hausdorff_distance(&g, &p, Spacing::UNIT).unwrap(), Some(5.0));
        let g2 = mask(dims, &[[0, 0, 0], [0, 0, 10]]);
        assert_eq!(hausdorff_distance(&g2, &g, Spacing::UNIT).unwrap(), Some(10.0));
        assert_eq!(hausdorff_distance(&g, &g2, Spacing::UNIT).unwrap(), Some(10.0));
        assert_eq!(hausdorff_distance(&g2, &g2, Spacing::UNIT).unwrap(), Some(0.0));
        let e = Mask::empty(dims).unwrap();
        assert_eq!(hausdorff_distance(&g, &e, Spacing::UNIT).unwrap(), None);
    }

    #[test]
    fn anisotropic_spacing() {
        let dims = [3, 1, 3];
        let g = mask(dims, &[[0, 0, 0]]);
        let p = mask(dims, &[[2, 0, 2]]);
        let s = Spacing::new(0.5, 1.0, 2.5).unwrap();
        let expect = (1.0f64 + 25.0).sqrt();
        assert!((hausdorff_distance(&g, &p, s).unwrap().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn surface_of_solid_cube_is_its_shell() {
        let dims = [5, 5, 5];
        let mut voxels = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    voxels.push([z, y, x]);
                }
            }
        }
        let s = surface(&mask(dims, &voxels));
        assert_eq!(s.count(), 26);
        assert!(!s.get(2, 2, 2));
    }

    #[test]
    fn evaluate_perfect_and_empty_predictions() {
        let gt = LabelMap::new([2, 2, 3], vec![0, 1, 1, 2, 2, 0, 3, 4, 0, 0, 1, 1]).unwrap();
        let r = evaluate_volume(&gt, &gt, Spacing::UNIT, 5).unwrap();
        assert!(r.per_class.iter().all(|c| c.dsc == 1.0 && c.hd == Some(0.0)));
        assert_eq!(r.mean_dsc, 1.0);
        assert_eq!(r.mean_hd, Some(0.0));

        let bg = LabelMap::zeros([2, 2, 3]).unwrap();
        let r = evaluate_volume(&gt, &bg, Spacing::UNIT, 5).unwrap();
        let c1 = r.class(1).unwrap();
        assert_eq!(c1.dsc, 0.0);
        assert_eq!(c1.hd, None);
        assert_eq!(r.mean_hd, None);

        let bad = LabelMap::new([2, 2, 3], vec![7; 12]).unwrap();
        assert!(matches!(
            evaluate_volume(&gt, &bad, Spacing::UNIT, 5),
            Err(MetricsError::Volume(VolumeError::LabelOutOfRange { .. }))
        ));
    }

    #[test]
    fn report_text_round_trip_and_table_order() {
        let gt = LabelMap::new([1, 2, 4], vec![1, 1, 2, 3, 4, 4, 0, 2]).unwrap();
        let pred = LabelMap::new([1, 2, 4], vec![1, 0, 2, 2, 4, 0, 0, 2]).unwrap();
        let r = evaluate_volume(&gt, &pred, Spacing::new(0.98, 0.98, 2.5).unwrap(), 5).unwrap();
        assert_eq!(MetricsReport::from_text(&r.to_text()).unwrap(), r);
        let table = r.table();
        let header = table.lines().next().unwrap();
        let pos: Vec<usize> = ["Esophagus", "Heart", "Trachea", "Aorta", "Mean"]
            .iter()
            .map(|n| header.find(n).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{header}");
        assert!(MetricsReport::from_text("num_classes=5").is_err());
    }
}

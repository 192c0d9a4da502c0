//! Image, direction and geometry error metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::image::{Image, Mask};
use crate::math::Vec3;

type V = Vec3<f64>;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_dims(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<(), MetricError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricError::LengthMismatch);
    }
    if let Some(m) = mask {
        if m.width() != a.width() || m.height() != a.height() {
            return Err(MetricError::LengthMismatch);
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for values in `[0, 1]`, over the pixels
/// selected by `mask` (all pixels when `None`).
pub fn psnr(pred: &Image, reference: &Image, mask: Option<&Mask>) -> Result<f64, MetricError> {
    check_dims(pred, reference, mask)?;
    let w = pred.width();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (p, r)) in pred
        .data()
        .chunks_exact(3)
        .zip(reference.data().chunks_exact(3))
        .enumerate()
    {
        if mask.is_some_and(|m| !m.get(i % w, i / w)) {
            continue;
        }
        for c in 0..3 {
            let d = p[c] as f64 - r[c] as f64;
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(MetricError::ZeroPixelMask);
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of a `w x h` plane with the SSIM window.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn gray(img: &Image) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0)
        .collect()
}

/// Structural similarity on the channel-mean image with an 11x11 Gaussian
/// window (sigma 1.5), averaged over fully covered windows. With a mask, only
/// windows centred on selected pixels count.
pub fn ssim(pred: &Image, reference: &Image, mask: Option<&Mask>) -> Result<f64, MetricError> {
    check_dims(pred, reference, mask)?;
    let (w, h) = (pred.width(), pred.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall);
    }
    let k = gaussian_window();
    let a = gray(pred);
    let b = gray(reference);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a, w, h, &k);
    let mu_b = filter_valid(&b, w, h, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let ow = w - SSIM_WINDOW + 1;
    let half = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..mu_a.len() {
        if mask.is_some_and(|m| !m.get(i % ow + half, i / ow + half)) {
            continue;
        }
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::ZeroPixelMask);
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularError {
    pub mean: f64,
    pub median: f64,
}

/// Angle in degrees between paired unit directions.
pub fn angular_error(pred: &[V], reference: &[V]) -> Result<AngularError, MetricError> {
    if pred.len() != reference.len() {
        return Err(MetricError::LengthMismatch);
    }
    if pred.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let mut deg: Vec<f64> = pred
        .iter()
        .zip(reference)
        .map(|(a, b)| a.dot(*b).clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    let mean = deg.iter().sum::<f64>() / deg.len() as f64;
    deg.sort_by(f64::total_cmp);
    let n = deg.len();
    let median = if n % 2 == 1 {
        deg[n / 2]
    } else {
        0.5 * (deg[n / 2 - 1] + deg[n / 2])
    };
    Ok(AngularError { mean, median })
}

/// Uniform bucket grid over a point set for exact nearest-neighbour queries.
struct PointGrid<'a> {
    points: &'a [V],
    min: V,
    cell: f64,
    dims: [usize; 3],
    /// Point indices sorted by cell, with `starts[c]..starts[c + 1]` per cell.
    order: Vec<u32>,
    starts: Vec<u32>,
}

impl<'a> PointGrid<'a> {
    fn new(points: &'a [V]) -> Self {
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min = min.min(*p);
            max = max.max(*p);
        }
        let ext = max - min;
        let vol = ext.x.max(1e-9) * ext.y.max(1e-9) * ext.z.max(1e-9);
        // about two points per occupied cell on a surface-like set
        let cell = (vol / points.len() as f64 * 2.0)
            .cbrt()
            .max(ext.max_element() / 256.0)
            .max(1e-9);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell) as usize + 1).min(1024));
        let mut counts = vec![0u32; dims[0] * dims[1] * dims[2] + 1];
        let mut grid = Self {
            points,
            min,
            cell,
            dims,
            order: Vec::new(),
            starts: Vec::new(),
        };
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.coord(*p))).collect();
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        grid.order = order;
        grid.starts = counts;
        grid
    }

    fn coord(&self, p: V) -> [usize; 3] {
        let q = (p - self.min) / self.cell;
        [0, 1, 2].map(|a| (q[a].max(0.0) as usize).min(self.dims[a] - 1))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Exact distance to the nearest stored point. Rings of cells around the
    /// query are scanned until every unscanned cell is farther than the best
    /// candidate.
    fn nearest(&self, p: V) -> f64 {
        let c = self.coord(p).map(|v| v as isize);
        let d = self.dims.map(|v| v as isize);
        let mut best = f64::INFINITY;
        let max_r = *self.dims.iter().max().unwrap() as isize;
        for r in 0..=max_r {
            for z in (c[2] - r).max(0)..=(c[2] + r).min(d[2] - 1) {
                for y in (c[1] - r).max(0)..=(c[1] + r).min(d[1] - 1) {
                    let inner = (z - c[2]).abs() < r && (y - c[1]).abs() < r;
                    // interior rows only touch the two x faces of the ring
                    let span: Vec<isize> = if inner {
                        vec![c[0] - r, c[0] + r]
                    } else {
                        ((c[0] - r)..=(c[0] + r)).collect()
                    };
                    for x in span {
                        if x < 0 || x >= d[0] {
                            continue;
                        }
                        let f = self.flat([x as usize, y as usize, z as usize]);
                        for &i in &self.order[self.starts[f] as usize..self.starts[f + 1] as usize] {
                            best = best.min((self.points[i as usize] - p).norm_squared());
                        }
                    }
                }
            }
            if best.sqrt() <= r as f64 * self.cell {
                break;
            }
        }
        best.sqrt()
    }
}

fn mean_nearest(from: &[V], to: &[V]) -> f64 {
    let grid = PointGrid::new(to);
    let d: Vec<f64> = from.par_iter().map(|p| grid.nearest(*p)).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Symmetric mean nearest-neighbour distance between two point sets.
/// Nearest neighbours are exact; a bucket grid only prunes the search.
pub fn chamfer_l1(a: &[V], b: &[V]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySet);
    }
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

/// Intersection over union; 1 when both masks are empty.
pub fn mask_iou(pred: &Mask, reference: &Mask) -> Result<f64, MetricError> {
    if pred.width() != reference.width() || pred.height() != reference.height() {
        return Err(MetricError::LengthMismatch);
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &r) in pred.bits().iter().zip(reference.bits()) {
        inter += (p && r) as usize;
        union += (p || r) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Metrics of one predicted view against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub views: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_view: Vec<ViewMetrics>,
    pub aggregate: Aggregate,
}

/// Image pair as stored on disk: linear radiance is tone-mapped before
/// comparison; `mask` restricts the evaluated pixels.
pub struct ImagePair<'a> {
    pub name: String,
    pub pred: &'a Image,
    pub reference: &'a Image,
    pub mask: Option<&'a Mask>,
    pub masks: Option<(&'a Mask, &'a Mask)>,
}

pub fn evaluate_view(pair: &ImagePair, tone_map: bool) -> Result<ViewMetrics, MetricError> {
    let (p, r) = if tone_map {
        (pair.pred.tone_mapped(), pair.reference.tone_mapped())
    } else {
        (pair.pred.clone(), pair.reference.clone())
    };
    Ok(ViewMetrics {
        view: pair.name.clone(),
        psnr: psnr(&p, &r, pair.mask)?,
        ssim: ssim(&p, &r, pair.mask)?,
        mask_iou: pair.masks.map(|(a, b)| mask_iou(a, b)).transpose()?,
    })
}

impl MetricReport {
    pub fn new(per_view: Vec<ViewMetrics>) -> Self {
        let n = per_view.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ViewMetrics) -> f64| per_view.iter().map(f).sum::<f64>() / n;
        let mask_iou = if !per_view.is_empty() && per_view.iter().all(|v| v.mask_iou.is_some()) {
            Some(mean(&|v| v.mask_iou.unwrap()))
        } else {
            None
        };
        let aggregate = Aggregate {
            views: per_view.len(),
            psnr: mean(&|v| v.psnr),
            ssim: mean(&|v| v.ssim),
            mask_iou,
        };
        Self { per_view, aggregate }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Tab-separated table, one row per view plus a `mean` row.
    pub fn to_tsv(&self) -> String {
        let with_iou = self.aggregate.mask_iou.is_some();
        let mut s = String::from("view\tpsnr\tssim");
        if with_iou {
            s.push_str("\tmask_iou");
        }
        s.push('\n');
        let mut row = |name: &str, psnr: f64, ssim: f64, iou: Option<f64>| {
            s.push_str(&format!("{name}\t{psnr:.4}\t{ssim:.6}"));
            if let (true, Some(i)) = (with_iou, iou) {
                s.push_str(&format!("\t{i:.6}"));
            }
            s.push('\n');
        };
        for v in &self.per_view {
            row(&v.view, v.psnr, v.ssim, v.mask_iou);
        }
        let a = &self.aggregate;
        row("mean", a.psnr, a.ssim, a.mask_iou);
        s
    }
}

//! Patch-based ray batches.

use rand::Rng;

use crate::math::{Ray, Rgb};
use crate::oracle::View;
use crate::sdf::{sphere_trace_batch, DistanceField, SurfaceHit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Patch {
    pub view: usize,
    pub x0: usize,
    pub y0: usize,
}

/// `M` patches of `m x m` pixels, stored patch-major and row-major within a
/// patch.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub patch_size: usize,
    pub patches: Vec<Patch>,
    pub rays: Vec<Ray<f64>>,
    pub targets: Vec<Rgb>,
    pub mask: Vec<bool>,
    pub hits: Vec<SurfaceHit>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Re-traces every ray against `field`.
    pub fn trace(&mut self, field: &dyn DistanceField) {
        self.hits = sphere_trace_batch(field, &self.rays);
    }

    /// Whether pixel `i` belongs to the hit set: the ray hits the current
    /// surface and the pixel lies inside the object mask.
    pub fn in_hit_set(&self, i: usize) -> bool {
        self.hits[i].hit && self.mask[i]
    }

    /// Indices of the hit set and of its complement.
    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.in_hit_set(i))
    }
}

/// Draws `patches` patch origins uniformly over the valid positions of the
/// given views, builds their camera rays and traces them against `field`.
pub fn sample_batch<R: Rng>(
    views: &[&View],
    patches: usize,
    patch_size: usize,
    field: &dyn DistanceField,
    rng: &mut R,
) -> TrainBatch {
    assert!(!views.is_empty(), "no training views");
    let m = patch_size;
    let mut batch = TrainBatch {
        patch_size: m,
        patches: Vec::with_capacity(patches),
        rays: Vec::with_capacity(patches * m * m),
        targets: Vec::with_capacity(patches * m * m),
        mask: Vec::with_capacity(patches * m * m),
        hits: Vec::new(),
    };
    for _ in 0..patches {
        let vi = rng.random_range(0..views.len());
        let v = views[vi];
        let (w, h) = (v.camera.width, v.camera.height);
        assert!(w >= m && h >= m, "patch larger than the image");
        let x0 = rng.random_range(0..=w - m);
        let y0 = rng.random_range(0..=h - m);
        batch.patches.push(Patch { view: vi, x0, y0 });
        for dy in 0..m {
            for dx in 0..m {
                let (x, y) = (x0 + dx, y0 + dy);
                batch.rays.push(v.camera.ray(x, y));
                batch.targets.push(v.image.get(x, y));
                batch.mask.push(v.mask.get(x, y));
            }
        }
    }
    batch.trace(field);
    batch
}

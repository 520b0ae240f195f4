//! Overlap, surface-distance and volume metrics, and Simpson's biplane
//! method of disks.

use crate::views::SliceMask;
use crate::volume::{Class, LabelVolume, VolumeError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of disks for Simpson's biplane rule.
pub const SIMPSON_DISKS: usize = 20;
/// Bucket edge (voxels) for nearest-surface queries.
const BUCKET: usize = 4;
/// Chord sampling step relative to the pixel spacing.
const CHORD_STEP: f64 = 0.125;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("structure {class} is empty in the {which} volume")]
    EmptyClass { class: Class, which: &'static str },
    #[error("reference volume of {0} is zero; percentage error undefined")]
    ZeroReference(Class),
    #[error("structure {0} is absent from the {1} mask")]
    ClassAbsent(Class, &'static str),
    #[error("no {0} pixels touch the {1} in the {2} mask")]
    NoInterface(Class, Class, &'static str),
    #[error("biplane volumes are only defined for LV and LA, not {0}")]
    Unsupported(Class),
    #[error("mask pixel grid is not uniform")]
    PixelGrid,
    #[error("at least one disk is required")]
    NoDisks,
}

/// Per-structure comparison of a reconstruction with its reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub dice: f64,
    /// `None` when the structure is missing from either volume.
    pub assd_mm: Option<f64>,
    pub mae_ml: f64,
    pub mae_pct: f64,
}

/// `2|P ∩ R| / (|P| + |R|)`; 1 when both are empty.
pub fn dice(pred: &LabelVolume, reference: &LabelVolume, class: Class) -> Result<f64, EvalError> {
    pred.ensure_same_grid(reference)?;
    let id = class.id();
    let (mut p, mut r, mut both) = (0usize, 0usize, 0usize);
    for (a, b) in pred.labels().iter().zip(reference.labels()) {
        let (ia, ib) = (*a == id, *b == id);
        p += ia as usize;
        r += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + r == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + r) as f64)
}

/// Linear indices of class voxels with at least one face neighbour outside
/// the class; the volume boundary counts as outside.
pub fn surface_voxels(vol: &LabelVolume, class: Class) -> Vec<usize> {
    let [nx, ny, nz] = vol.dims();
    let id = class.id();
    let labels = vol.labels();
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                if labels[idx] != id {
                    continue;
                }
                let on_border = i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz;
                if on_border || vol.face_neighbors(i, j, k).any(|[a, b, c]| vol.get(a, b, c) != id) {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// Surface voxels bucketed on a coarse grid for nearest-neighbour queries.
struct SurfaceIndex {
    dims: [usize; 3],
    spacing: [f64; 3],
    buckets: [usize; 3],
    cells: Vec<Vec<[usize; 3]>>,
}

impl SurfaceIndex {
    fn new(vol: &LabelVolume, surface: &[usize]) -> Self {
        let grid = vol.grid();
        let buckets = grid.dims.map(|d| d.div_ceil(BUCKET).max(1));
        let mut cells = vec![Vec::new(); buckets.iter().product()];
        for &idx in surface {
            let v = grid.unravel(idx);
            let b = v.map(|c| c / BUCKET);
            cells[b[0] + buckets[0] * (b[1] + buckets[1] * b[2])].push(v);
        }
        Self {
            dims: grid.dims,
            spacing: grid.spacing,
            buckets,
            cells,
        }
    }

    fn distance(&self, a: [usize; 3], b: [usize; 3]) -> f64 {
        let mut sq = 0.0;
        for axis in 0..3 {
            let d = (a[axis] as f64 - b[axis] as f64) * self.spacing[axis];
            sq += d * d;
        }
        sq.sqrt()
    }

    /// Exact distance from voxel `v` to the nearest indexed voxel, searching
    /// bucket shells outward until no unvisited bucket can be closer.
    fn nearest(&self, v: [usize; 3]) -> f64 {
        let home = v.map(|c| c / BUCKET);
        let min_spacing = self.spacing.iter().copied().fold(f64::INFINITY, f64::min);
        let max_ring = *self.buckets.iter().max().expect("3 axes");
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            let lo = home.map(|h| h as isize - ring as isize);
            let hi = home.map(|h| h as isize + ring as isize);
            for bz in lo[2].max(0)..=hi[2].min(self.buckets[2] as isize - 1) {
                for by in lo[1].max(0)..=hi[1].min(self.buckets[1] as isize - 1) {
                    for bx in lo[0].max(0)..=hi[0].min(self.buckets[0] as isize - 1) {
                        let shell = bx == lo[0] || bx == hi[0] || by == lo[1] || by == hi[1] || bz == lo[2] || bz == hi[2];
                        if !shell {
                            continue;
                        }
                        let cell = bx as usize + self.buckets[0] * (by as usize + self.buckets[1] * bz as usize);
                        for q in &self.cells[cell] {
                            best = best.min(self.distance(v, *q));
                        }
                    }
                }
            }
            // Anything outside rings 0..=ring is at least ring*BUCKET + 1 voxels away.
            let bound = (ring * BUCKET + 1) as f64 * min_spacing;
            if best <= bound {
                break;
            }
        }
        debug_assert!(self.dims.iter().all(|d| *d > 0));
        best
    }
}

/// Average symmetric surface distance (mm).
pub fn assd(pred: &LabelVolume, reference: &LabelVolume, class: Class) -> Result<f64, EvalError> {
    pred.ensure_same_grid(reference)?;
    let sp = surface_voxels(pred, class);
    let sr = surface_voxels(reference, class);
    if sp.is_empty() {
        return Err(EvalError::EmptyClass { class, which: "predicted" });
    }
    if sr.is_empty() {
        return Err(EvalError::EmptyClass { class, which: "reference" });
    }
    let grid = pred.grid();
    let ip = SurfaceIndex::new(pred, &sp);
    let ir = SurfaceIndex::new(reference, &sr);
    let total_p: f64 = sp.iter().map(|i| ir.nearest(grid.unravel(*i))).sum();
    let total_r: f64 = sr.iter().map(|i| ip.nearest(grid.unravel(*i))).sum();
    Ok((total_p + total_r) / (sp.len() + sr.len()) as f64)
}

/// Absolute volume error in mL and as a percentage of the reference.
pub fn volume_mae(pred: &LabelVolume, reference: &LabelVolume, class: Class) -> Result<(f64, f64), EvalError> {
    if pred.grid().spacing != reference.grid().spacing {
        return Err(VolumeError::GridMismatch(*pred.grid(), *reference.grid()).into());
    }
    let vp = pred.volume_ml(class);
    let vr = reference.volume_ml(class);
    if vr == 0.0 {
        return Err(EvalError::ZeroReference(class));
    }
    let mae = (vp - vr).abs();
    Ok((mae, 100.0 * mae / vr))
}

/// Dice, ASSD and volume errors for every foreground structure.
pub fn evaluate_structures(pred: &LabelVolume, reference: &LabelVolume) -> Result<Vec<(Class, StructureMetrics)>, EvalError> {
    Class::FOREGROUND
        .into_iter()
        .map(|class| {
            let assd_mm = match assd(pred, reference, class) {
                Ok(v) => Some(v),
                Err(EvalError::EmptyClass { .. }) => None,
                Err(e) => return Err(e),
            };
            let (mae_ml, mae_pct) = volume_mae(pred, reference, class)?;
            Ok((
                class,
                StructureMetrics {
                    dice: dice(pred, reference, class)?,
                    assd_mm,
                    mae_ml,
                    mae_pct,
                },
            ))
        })
        .collect()
}

/// Long axis of a structure in a 2D mask, in in-plane millimetres `(α, β)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongAxis {
    pub base_midpoint: [f64; 2],
    pub apex: [f64; 2],
    /// Unit vector from the base midpoint towards the apex.
    pub axis: [f64; 2],
}

/// Uniform in-plane pixel lattice of a mask.
struct PixelLattice {
    origin: [f64; 2],
    step: [f64; 2],
    size: [usize; 2],
}

impl PixelLattice {
    fn of(mask: &SliceMask) -> Result<Self, EvalError> {
        let (a, b) = (&mask.plane.alphas, &mask.plane.betas);
        if a.len() < 2 || b.len() < 2 {
            return Err(EvalError::PixelGrid);
        }
        let (row_step, col_step) = mask.plane.pixel_spacing();
        if !(row_step > 0.0 && col_step > 0.0) {
            return Err(EvalError::PixelGrid);
        }
        Ok(Self {
            origin: [a[0], b[0]],
            step: [col_step, row_step],
            size: [a.len(), b.len()],
        })
    }

    fn center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + col as f64 * self.step[0],
            self.origin[1] + row as f64 * self.step[1],
        ]
    }

    /// Nearest pixel `(row, col)` to an in-plane point, `None` outside.
    fn nearest(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let col = ((p[0] - self.origin[0]) / self.step[0] + 0.5).floor();
        let row = ((p[1] - self.origin[1]) / self.step[1] + 0.5).floor();
        if col < 0.0 || row < 0.0 || col >= self.size[0] as f64 || row >= self.size[1] as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    fn diagonal(&self) -> f64 {
        let w = self.size[0] as f64 * self.step[0];
        let h = self.size[1] as f64 * self.step[1];
        (w * w + h * h).sqrt()
    }

    /// Parameters `t` where the line `p + t d` first enters and last leaves
    /// pixels of class `id`: sampled coarsely, then bisected to the pixel
    /// boundary so the extent is not biased short by the sampling step.
    fn extent_along(&self, mask: &SliceMask, id: u8, p: [f64; 2], d: [f64; 2]) -> Option<(f64, f64)> {
        let step = CHORD_STEP * self.step[0].min(self.step[1]);
        let reach = self.diagonal();
        let n = (reach / step).ceil() as i64;
        let inside = |t: f64| {
            self.nearest([p[0] + t * d[0], p[1] + t * d[1]])
                .is_some_and(|(r, c)| mask.get(r, c) == id)
        };
        let mut range: Option<(f64, f64)> = None;
        for s in -n..=n {
            let t = s as f64 * step;
            if inside(t) {
                range = Some(match range {
                    Some((lo, _)) => (lo, t),
                    None => (t, t),
                });
            }
        }
        let (lo, hi) = range?;
        Some((bisect(&inside, lo, lo - step), bisect(&inside, hi, hi + step)))
    }
}

/// Boundary between `inside_t` (inside) and `outside_t` (outside).
fn bisect(inside: impl Fn(f64) -> bool, mut inside_t: f64, mut outside_t: f64) -> f64 {
    for _ in 0..40 {
        let mid = 0.5 * (inside_t + outside_t);
        if inside(mid) {
            inside_t = mid;
        } else {
            outside_t = mid;
        }
    }
    0.5 * (inside_t + outside_t)
}

fn partner(class: Class) -> Result<Class, EvalError> {
    match class {
        Class::LeftVentricle => Ok(Class::LeftAtrium),
        Class::LeftAtrium => Ok(Class::LeftVentricle),
        other => Err(EvalError::Unsupported(other)),
    }
}

/// Base midpoint (centroid of class pixels face-adjacent to the partner
/// chamber), apex (class pixel farthest from it) and unit axis.
pub fn biplane_long_axis(mask: &SliceMask, class: Class) -> Result<LongAxis, EvalError> {
    let other = partner(class)?;
    let lattice = PixelLattice::of(mask)?;
    let (id, other_id) = (class.id(), other.id());
    let (h, w) = (mask.height(), mask.width());
    let mut present = false;
    let mut sum = [0.0; 2];
    let mut count = 0usize;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) != id {
                continue;
            }
            present = true;
            let touches = (r > 0 && mask.get(r - 1, c) == other_id)
                || (r + 1 < h && mask.get(r + 1, c) == other_id)
                || (c > 0 && mask.get(r, c - 1) == other_id)
                || (c + 1 < w && mask.get(r, c + 1) == other_id);
            if touches {
                let p = lattice.center(r, c);
                sum[0] += p[0];
                sum[1] += p[1];
                count += 1;
            }
        }
    }
    let view = mask.view.name();
    if !present {
        return Err(EvalError::ClassAbsent(class, view));
    }
    if count == 0 {
        return Err(EvalError::NoInterface(class, other, view));
    }
    let base = [sum[0] / count as f64, sum[1] / count as f64];
    let mut apex = base;
    let mut best = -1.0;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == id {
                let p = lattice.center(r, c);
                let d = (p[0] - base[0]).hypot(p[1] - base[1]);
                if d > best {
                    best = d;
                    apex = p;
                }
            }
        }
    }
    let len = (apex[0] - base[0]).hypot(apex[1] - base[1]);
    if len == 0.0 {
        return Err(EvalError::NoInterface(class, other, view));
    }
    Ok(LongAxis {
        base_midpoint: base,
        apex,
        axis: [(apex[0] - base[0]) / len, (apex[1] - base[1]) / len],
    })
}

/// Per-view disk geometry: where the structure starts along its long axis
/// and how far it extends.
struct AxisSpan {
    start: [f64; 2],
    axis: [f64; 2],
    length: f64,
}

fn axis_span(mask: &SliceMask, class: Class, lattice: &PixelLattice) -> Result<AxisSpan, EvalError> {
    let la = biplane_long_axis(mask, class)?;
    let (lo, hi) = lattice
        .extent_along(mask, class.id(), la.base_midpoint, la.axis)
        .ok_or(EvalError::ClassAbsent(class, mask.view.name()))?;
    Ok(AxisSpan {
        start: [la.base_midpoint[0] + lo * la.axis[0], la.base_midpoint[1] + lo * la.axis[1]],
        axis: la.axis,
        length: hi - lo,
    })
}

/// Diameter (mm) of each of `n` equal disks along `length`: the extreme
/// class-pixel distance on chords perpendicular to the axis, averaged over
/// chords spread across the disk about one pixel apart. A single chord per
/// disk picks up half a pixel of rasterization error at each end.
fn chord_diameters(mask: &SliceMask, class: Class, lattice: &PixelLattice, span: &AxisSpan, length: f64, n: usize) -> Vec<f64> {
    let perp = [-span.axis[1], span.axis[0]];
    let dl = length / n as f64;
    let per_disk = (dl / lattice.step[0].min(lattice.step[1])).ceil().max(1.0) as usize;
    (0..n)
        .map(|k| {
            let total: f64 = (0..per_disk)
                .map(|j| {
                    let s = (k as f64 + (j as f64 + 0.5) / per_disk as f64) * dl;
                    let p = [span.start[0] + s * span.axis[0], span.start[1] + s * span.axis[1]];
                    lattice
                        .extent_along(mask, class.id(), p, perp)
                        .map_or(0.0, |(lo, hi)| hi - lo)
                })
                .sum();
            total / per_disk as f64
        })
        .collect()
}

/// Simpson's biplane volume (mL) with `n` disks: `Σ π/4 d_A2C,k d_A4C,k Δl`,
/// using the shorter of the two long axes for both views.
pub fn simpson_biplane(a2c: &SliceMask, a4c: &SliceMask, class: Class, n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::NoDisks);
    }
    let (l2, l4) = (PixelLattice::of(a2c)?, PixelLattice::of(a4c)?);
    let s2 = axis_span(a2c, class, &l2)?;
    let s4 = axis_span(a4c, class, &l4)?;
    let length = s2.length.min(s4.length);
    let d2 = chord_diameters(a2c, class, &l2, &s2, length, n);
    let d4 = chord_diameters(a4c, class, &l4, &s4, length, n);
    let dl = length / n as f64;
    let mm3: f64 = d2.iter().zip(&d4).map(|(a, b)| std::f64::consts::FRAC_PI_4 * a * b * dl).sum();
    Ok(mm3 / 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Vec3, ViewPlane};
    use crate::views::{pixel_grid, ViewName};
    use crate::volume::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(n: usize, spacing: f64) -> GridSpec {
        GridSpec::new([n; 3], [spacing; 3], Vec3::ZERO).unwrap()
    }

    fn brute_assd(p: &LabelVolume, r: &LabelVolume, class: Class) -> f64 {
        let g = p.grid();
        let sp: Vec<Vec3> = surface_voxels(p, class).iter().map(|i| g.center_of(*i)).collect();
        let sr: Vec<Vec3> = surface_voxels(r, class).iter().map(|i| g.center_of(*i)).collect();
        let near = |a: &Vec3, set: &[Vec3]| set.iter().map(|b| a.distance(*b)).fold(f64::INFINITY, f64::min);
        let total: f64 = sp.iter().map(|a| near(a, &sr)).sum::<f64>() + sr.iter().map(|a| near(a, &sp)).sum::<f64>();
        total / (sp.len() + sr.len()) as f64
    }

    fn blob(seed: u64) -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GridSpec::new([16; 3], [1.0, 1.5, 0.8], Vec3::ZERO).unwrap();
        let c = [rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0)];
        let r = rng.gen_range(2.0..6.0);
        let labels = (0..g.len())
            .map(|i| {
                let [x, y, z] = g.unravel(i);
                let d = ((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2)).sqrt();
                let noise: f64 = rng.gen_range(0.0..1.0);
                if d < r || noise < 0.03 {
                    2
                } else {
                    0
                }
            })
            .collect();
        LabelVolume::new(g, labels).unwrap()
    }

    #[test]
    fn dice_examples() {
        let g = cube(4, 1.0);
        let mut a = LabelVolume::filled(g, Class::Background);
        a.set(0, 0, 0, Class::LeftVentricle);
        a.set(1, 0, 0, Class::LeftVentricle);
        assert_eq!(dice(&a, &a, Class::LeftVentricle).unwrap(), 1.0);
        let mut b = LabelVolume::filled(g, Class::Background);
        b.set(1, 0, 0, Class::LeftVentricle);
        b.set(2, 0, 0, Class::LeftVentricle);
        assert_eq!(dice(&a, &b, Class::LeftVentricle).unwrap(), 0.5);
        let mut c = LabelVolume::filled(g, Class::Background);
        c.set(3, 3, 3, Class::LeftVentricle);
        assert_eq!(dice(&a, &c, Class::LeftVentricle).unwrap(), 0.0);
        assert_eq!(dice(&a, &c, Class::RightAtrium).unwrap(), 1.0);
        let other = LabelVolume::filled(cube(5, 1.0), Class::Background);
        assert!(matches!(dice(&a, &other, Class::LeftVentricle), Err(EvalError::Volume(_))));
    }

    #[test]
    fn assd_examples() {
        let g = cube(8, 1.0);
        let mut a = LabelVolume::filled(g, Class::Background);
        a.set(1, 1, 1, Class::LeftAtrium);
        let mut b = LabelVolume::filled(g, Class::Background);
        b.set(4, 1, 1, Class::LeftAtrium);
        assert_eq!(assd(&a, &b, Class::LeftAtrium).unwrap(), 3.0);
        assert_eq!(assd(&a, &a, Class::LeftAtrium).unwrap(), 0.0);
        assert!(matches!(assd(&a, &b, Class::RightAtrium), Err(EvalError::EmptyClass { .. })));
    }

    #[test]
    fn metrics_match_brute_force_and_are_symmetric() {
        for seed in 0..10 {
            let (p, r) = (blob(2 * seed), blob(2 * seed + 1));
            let c = Class::LeftVentricle;
            let fast = assd(&p, &r, c).unwrap();
            assert!((fast - brute_assd(&p, &r, c)).abs() < 1e-9);
            assert_eq!(fast, assd(&r, &p, c).unwrap());
            assert_eq!(dice(&p, &r, c).unwrap(), dice(&r, &p, c).unwrap());
        }
    }

    #[test]
    fn volume_errors() {
        let g = GridSpec::new([10, 10, 11], [1.0; 3], Vec3::ZERO).unwrap();
        let mut pred = LabelVolume::filled(g, Class::Background);
        let mut reference = LabelVolume::filled(g, Class::Background);
        pred.labels_mut()[..1100].fill(2);
        reference.labels_mut()[..1000].fill(2);
        let (ml, pct) = volume_mae(&pred, &reference, Class::LeftVentricle).unwrap();
        assert!((ml - 0.1).abs() < 1e-12 && (pct - 10.0).abs() < 1e-9);
        assert_eq!(volume_mae(&reference, &reference, Class::LeftVentricle).unwrap(), (0.0, 0.0));

        let g2 = cube(10, 2.0);
        let mut p2 = LabelVolume::filled(g2, Class::Background);
        let mut r2 = LabelVolume::filled(g2, Class::Background);
        p2.labels_mut()[..500].fill(1);
        r2.labels_mut()[..400].fill(1);
        let (ml, pct) = volume_mae(&p2, &r2, Class::LeftAtrium).unwrap();
        assert!((ml - 0.8).abs() < 1e-12 && (pct - 25.0).abs() < 1e-9);
        assert_eq!(volume_mae(&p2, &r2, Class::RightAtrium).unwrap_err(), EvalError::ZeroReference(Class::RightAtrium));
    }

    /// `size²` mask over `extent` mm: LV inside `inside(α, β)`, plus LA
    /// pixels where `atrium(α, β)` holds and the pixel is not LV.
    fn mask_from(extent: f64, size: usize, inside: impl Fn(f64, f64) -> bool, atrium: impl Fn(f64, f64) -> bool) -> SliceMask {
        let (alphas, _) = pixel_grid(extent, size);
        let betas = alphas.clone();
        let mut labels = Vec::with_capacity(size * size);
        for b in &betas {
            for a in &alphas {
                labels.push(if inside(*a, *b) {
                    Class::LeftVentricle.id()
                } else if atrium(*a, *b) {
                    Class::LeftAtrium.id()
                } else {
                    0
                });
            }
        }
        let plane = ViewPlane::new(Vec3::ZERO, Vec3::X, Vec3::Y, alphas, betas).unwrap();
        SliceMask {
            view: ViewName::A4C,
            plane,
            labels,
        }
    }

    /// Ellipse with semi-axis `long` along direction `angle`, `short` across,
    /// centered at `c`, with a thin atrium cap beyond one end of the long axis.
    fn ellipse_mask(long: f64, short: f64, angle: f64, c: [f64; 2]) -> SliceMask {
        let (s, co) = angle.sin_cos();
        let local = move |a: f64, b: f64| {
            let (x, y) = (a - c[0], b - c[1]);
            (x * co + y * s, -x * s + y * co)
        };
        mask_from(
            2.4 * long,
            256,
            move |a, b| {
                let (u, v) = local(a, b);
                (u / long).powi(2) + (v / short).powi(2) <= 1.0
            },
            move |a, b| {
                let (u, v) = local(a, b);
                u < -long + 0.5 && u > -long - 3.0 && v.abs() < 0.2 * short
            },
        )
    }

    #[test]
    fn long_axis_of_rectangle_over_atrium() {
        // LV occupies rows with β > 0, LA the rows just below.
        let mask = mask_from(
            64.0,
            64,
            |a, b| a.abs() < 10.0 && b > 0.0 && b < 30.0,
            |a, b| a.abs() < 10.0 && b <= 0.0 && b > -30.0,
        );
        let la = biplane_long_axis(&mask, Class::LeftVentricle).unwrap();
        let px = 1.0;
        assert!(la.base_midpoint[0].abs() < 1e-9);
        assert!((la.base_midpoint[1] - 0.5 * px).abs() < px);
        assert!(la.axis[1] > 0.9);
        let atrium = biplane_long_axis(&mask, Class::LeftAtrium).unwrap();
        assert!(atrium.axis[1] < -0.9);
    }

    #[test]
    fn circle_apex_is_opposite_the_interface() {
        let r = 20.0;
        let mask = mask_from(64.0, 128, |a, b| a * a + b * b <= r * r, |a, b| a.abs() < 0.3 && b < -r && b > -r - 0.8);
        let la = biplane_long_axis(&mask, Class::LeftVentricle).unwrap();
        let px = 0.5;
        assert!((la.apex[1] - r).abs() < 2.0 * px, "{:?}", la);
        // Near the apex the distance from the base varies only as x²/4r, so
        // rasterization error of half a pixel can move the maximum sideways.
        assert!(la.apex[0].abs() < (4.0 * r * px).sqrt(), "{:?}", la);
        assert!((la.base_midpoint[1] + r).abs() < 2.0 * px);
    }

    #[test]
    fn missing_structures_are_errors() {
        let empty = mask_from(64.0, 32, |_, _| false, |_, _| false);
        assert!(matches!(biplane_long_axis(&empty, Class::LeftVentricle), Err(EvalError::ClassAbsent(..))));
        let lonely = mask_from(64.0, 32, |a, b| a * a + b * b < 100.0, |_, _| false);
        assert!(matches!(biplane_long_axis(&lonely, Class::LeftVentricle), Err(EvalError::NoInterface(..))));
        let sphere = ellipse_mask(30.0, 30.0, 0.0, [0.0, 0.0]);
        assert!(simpson_biplane(&sphere, &empty, Class::LeftVentricle, 20).is_err());
        assert!(matches!(biplane_long_axis(&sphere, Class::RightAtrium), Err(EvalError::Unsupported(_))));
    }

    #[test]
    fn simpson_sphere_and_spheroid() {
        let sphere = ellipse_mask(30.0, 30.0, 0.3, [1.0, -2.0]);
        let v = simpson_biplane(&sphere, &sphere, Class::LeftVentricle, SIMPSON_DISKS).unwrap();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 30f64.powi(3) / 1000.0;
        assert!(((v - exact) / exact).abs() < 0.02, "{v} vs {exact}");

        let spheroid = ellipse_mask(40.0, 25.0, 0.0, [0.0, 0.0]);
        let v = simpson_biplane(&spheroid, &spheroid, Class::LeftVentricle, SIMPSON_DISKS).unwrap();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 40.0 * 25.0 * 25.0 / 1000.0;
        assert!(((v - exact) / exact).abs() < 0.025, "{v} vs {exact}");
    }

    #[test]
    fn simpson_ignores_in_plane_motion() {
        let a = ellipse_mask(40.0, 25.0, 0.0, [0.0, 0.0]);
        let b = ellipse_mask(40.0, 25.0, 0.7, [3.0, -4.0]);
        let va = simpson_biplane(&a, &a, Class::LeftVentricle, 20).unwrap();
        let vb = simpson_biplane(&b, &b, Class::LeftVentricle, 20).unwrap();
        assert!(((va - vb) / va).abs() < 0.01, "{va} vs {vb}");
    }
}

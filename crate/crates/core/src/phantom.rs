//! Procedural four-chamber heart phantoms.
//!
//! Each structure is an ellipsoid whose radius is modulated by a smooth,
//! low-order function of direction. Structures are laid out in a local
//! heart frame (`z` from apex to base, `x` toward the right heart) and the
//! whole heart is then rotated and shifted by a small random amount.
//!
//! Overlaps resolve by priority LV pool > LV-myo > LA > RV > RA, except that
//! the part of the myocardial shell inside the LA (the mitral opening)
//! belongs to the LA. A final pass turns any non-{LV, LV-myo, LA} face
//! neighbor of the LV pool into myocardium so the pool is always enclosed.

use crate::geometry::{rodrigues, Mat3, Vec3};
use crate::volume::{Class, GridSpec, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use std::collections::BTreeSet;

/// Largest allowed radial modulation, as a fraction of the semi-axis.
pub const MAX_BUMP: f64 = 0.15;

const BUMP_TERMS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom parameters: {0}")]
    InvalidParams(String),
    #[error("structure {0} reaches the volume boundary; enlarge the grid or shrink the anatomy")]
    OutOfBounds(Class),
    #[error("structure {0} is empty")]
    MissingStructure(Class),
    #[error("cohort split {train}+{val}+{test} does not sum to {n}")]
    Split {
        n: usize,
        train: usize,
        val: usize,
        test: usize,
    },
}

/// Closed interval sampled uniformly; `min == max` is a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min > 0.0 && self.max >= self.min
    }
}

/// Semi-axes `(x, y, z)` ranges in the local heart frame, mm.
pub type AxesRange = [Range; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    /// Voxels per side of the cubic grid.
    pub grid: usize,
    /// Isotropic voxel size, mm.
    pub spacing: f64,
    pub lv_axes: AxesRange,
    pub myo_thickness: Range,
    pub la_axes: AxesRange,
    pub rv_axes: AxesRange,
    pub ra_axes: AxesRange,
    /// Depth (mm) by which the LA reaches below the top of the LV pool.
    pub mitral_depth: Range,
    /// Upper bound on the summed bump coefficients, at most [`MAX_BUMP`].
    pub bump_amplitude: f64,
    /// Maximum absolute global rotation about each axis, degrees.
    pub rotation_deg: f64,
    /// Maximum absolute global shift per axis, mm.
    pub shift_mm: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            grid: 96,
            spacing: 2.0,
            lv_axes: [Range::new(18.0, 25.0), Range::new(18.0, 25.0), Range::new(32.0, 42.0)],
            myo_thickness: Range::new(6.0, 9.0),
            la_axes: [Range::new(16.0, 24.0), Range::new(15.0, 22.0), Range::new(17.0, 25.0)],
            rv_axes: [Range::new(14.0, 20.0), Range::new(24.0, 32.0), Range::new(30.0, 40.0)],
            ra_axes: [Range::new(15.0, 22.0), Range::new(15.0, 22.0), Range::new(16.0, 23.0)],
            mitral_depth: Range::new(3.0, 6.0),
            bump_amplitude: MAX_BUMP,
            rotation_deg: 10.0,
            shift_mm: 4.0,
        }
    }
}

impl PhantomParams {
    /// Default anatomy resampled on a `grid`³ lattice of `spacing` mm.
    pub fn with_grid(grid: usize, spacing: f64) -> Self {
        Self {
            grid,
            spacing,
            ..Self::default()
        }
    }

    /// Every range collapsed to its midpoint, no bumps, no global motion.
    pub fn deterministic(&self) -> Self {
        let mid = |r: Range| Range::fixed(0.5 * (r.min + r.max));
        let axes = |a: AxesRange| a.map(mid);
        Self {
            lv_axes: axes(self.lv_axes),
            myo_thickness: mid(self.myo_thickness),
            la_axes: axes(self.la_axes),
            rv_axes: axes(self.rv_axes),
            ra_axes: axes(self.ra_axes),
            mitral_depth: mid(self.mitral_depth),
            bump_amplitude: 0.0,
            rotation_deg: 0.0,
            shift_mm: 0.0,
            ..self.clone()
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::centered_cube(self.grid, self.spacing)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |msg: &str| Err(PhantomError::InvalidParams(msg.to_string()));
        if self.grid < 8 {
            return bad("grid must have at least 8 voxels per side");
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return bad("spacing must be positive");
        }
        let ranges = self
            .lv_axes
            .iter()
            .chain(&self.la_axes)
            .chain(&self.rv_axes)
            .chain(&self.ra_axes)
            .chain([&self.myo_thickness, &self.mitral_depth]);
        if ranges.into_iter().any(|r| !r.is_valid()) {
            return bad("all ranges must be positive with min <= max");
        }
        let lv_min = self.lv_axes.iter().map(|r| r.min).fold(f64::INFINITY, f64::min);
        if self.myo_thickness.max >= lv_min {
            return bad("myocardial thickness must be below the smallest LV semi-axis");
        }
        if !(0.0..=MAX_BUMP).contains(&self.bump_amplitude) {
            return bad("bump amplitude must lie in [0, 0.15]");
        }
        if !(self.rotation_deg >= 0.0 && self.shift_mm >= 0.0) {
            return bad("rotation and shift bounds must be non-negative");
        }
        Ok(())
    }
}

/// Ellipsoid with a direction-dependent radial scale `1 + bump(d)`.
#[derive(Debug, Clone)]
struct Blob {
    center: Vec3,
    axes: [f64; 3],
    bump: [f64; BUMP_TERMS],
}

impl Blob {
    fn sample(center: Vec3, axes: [f64; 3], amplitude: f64, rng: &mut impl Rng) -> Self {
        let mut bump = [0.0f64; BUMP_TERMS];
        if amplitude > 0.0 {
            for c in bump.iter_mut() {
                *c = rng.gen_range(-1.0..1.0);
            }
            let total: f64 = bump.iter().map(|c| c.abs()).sum();
            let scale = amplitude * rng.gen_range(0.5..1.0) / total;
            for c in bump.iter_mut() {
                *c *= scale;
            }
        }
        Self { center, axes, bump }
    }

    /// Same center and modulation with every semi-axis grown by `d`.
    fn inflated(&self, d: f64) -> Self {
        Self {
            axes: self.axes.map(|a| a + d),
            ..self.clone()
        }
    }

    fn modulation(&self, d: [f64; 3]) -> f64 {
        let [x, y, z] = d;
        let basis = [
            x,
            y,
            z,
            x * y,
            y * z,
            z * x,
            x * x - y * y,
            1.5 * z * z - 0.5,
        ];
        1.0 + basis.iter().zip(&self.bump).map(|(b, c)| b * c).sum::<f64>()
    }

    fn contains(&self, p: Vec3) -> bool {
        let q = p - self.center;
        let u = [q.x / self.axes[0], q.y / self.axes[1], q.z / self.axes[2]];
        let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if r == 0.0 {
            return true;
        }
        r < self.modulation([u[0] / r, u[1] / r, u[2] / r])
    }
}

/// Sampled anatomy in the local heart frame plus its world placement.
#[derive(Debug, Clone)]
struct Anatomy {
    pool: Blob,
    myo: Blob,
    la: Blob,
    rv: Blob,
    ra: Blob,
    /// local -> world rotation
    rotation: Mat3,
    /// world position of the local origin
    offset: Vec3,
}

impl Anatomy {
    fn sample(params: &PhantomParams, rng: &mut impl Rng) -> Self {
        let amp = params.bump_amplitude;
        let mut axes = |r: &AxesRange| [r[0].sample(rng), r[1].sample(rng), r[2].sample(rng)];
        let (lv_axes, la_axes, rv_axes, ra_axes) = (
            axes(&params.lv_axes),
            axes(&params.la_axes),
            axes(&params.rv_axes),
            axes(&params.ra_axes),
        );
        let thickness = params.myo_thickness.sample(rng);
        let depth = params.mitral_depth.sample(rng);
        let [sx, sy, lz] = lv_axes;

        let pool = Blob::sample(Vec3::ZERO, lv_axes, amp, rng);
        let myo = pool.inflated(thickness);
        let la_center = Vec3::new(0.0, 0.0, lz - depth + la_axes[2]);
        let la = Blob::sample(la_center, la_axes, amp, rng);
        let rv_center = Vec3::new(sx + thickness + 0.4 * rv_axes[0], 0.15 * sy, 0.9 * lz - rv_axes[2]);
        let rv = Blob::sample(rv_center, rv_axes, amp, rng);
        let ra_center = Vec3::new(la_axes[0] + 0.45 * ra_axes[0], 0.0, lz);
        let ra = Blob::sample(ra_center, ra_axes, amp, rng);

        let rot_bound = params.rotation_deg.to_radians();
        let mut angle = || {
            if rot_bound > 0.0 {
                rng.gen_range(-rot_bound..=rot_bound)
            } else {
                0.0
            }
        };
        let rotation = rodrigues(Vec3::new(angle(), 0.0, 0.0))
            .mul_mat(&rodrigues(Vec3::new(0.0, angle(), 0.0)))
            .mul_mat(&rodrigues(Vec3::new(0.0, 0.0, angle())));

        // Center the heart's local bounding box on the world origin.
        let lo = Vec3::new(-(sx + thickness), -(myo.axes[1]), -(lz + thickness));
        let hi = Vec3::new(
            (ra.center.x + ra.axes[0]).max(rv.center.x + rv.axes[0]),
            rv.center.y + rv.axes[1],
            (la.center.z + la.axes[2]).max(ra.center.z + ra.axes[2]),
        );
        let mid = (lo + hi) * 0.5;
        let shift_bound = params.shift_mm;
        let mut shift = || {
            if shift_bound > 0.0 {
                rng.gen_range(-shift_bound..=shift_bound)
            } else {
                0.0
            }
        };
        let jitter = Vec3::new(shift(), shift(), shift());
        let offset = jitter - rotation.mul_vec(mid);

        Self {
            pool,
            myo,
            la,
            rv,
            ra,
            rotation,
            offset,
        }
    }

    fn classify(&self, world: Vec3) -> Class {
        let p = self.rotation.transpose().mul_vec(world - self.offset);
        if self.pool.contains(p) {
            Class::LeftVentricle
        } else if self.myo.contains(p) {
            if p.z > 0.0 && self.la.contains(p) {
                Class::LeftAtrium
            } else {
                Class::Myocardium
            }
        } else if self.la.contains(p) {
            Class::LeftAtrium
        } else if self.rv.contains(p) {
            Class::RightVentricle
        } else if self.ra.contains(p) {
            Class::RightAtrium
        } else {
            Class::Background
        }
    }
}

/// Deterministic phantom for `seed`.
pub fn generate_phantom(params: &PhantomParams, seed: u64) -> Result<LabelVolume, PhantomError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = Anatomy::sample(params, &mut rng);
    let grid = params.grid_spec();
    let mut vol = LabelVolume::filled(grid, Class::Background);
    for idx in 0..grid.len() {
        vol.labels_mut()[idx] = anatomy.classify(grid.center_of(idx)).id();
    }
    close_lv_pool(&mut vol);
    check_phantom(&vol)?;
    Ok(vol)
}

/// Turn every face neighbor of the LV pool that is not LV, LV-myo or LA
/// into LV-myo.
fn close_lv_pool(vol: &mut LabelVolume) {
    let [nx, ny, nz] = vol.dims();
    let allowed = [Class::LeftVentricle.id(), Class::Myocardium.id(), Class::LeftAtrium.id()];
    let mut fix = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if vol.get(i, j, k) != Class::LeftVentricle.id() {
                    continue;
                }
                for [a, b, c] in vol.face_neighbors(i, j, k) {
                    if !allowed.contains(&vol.get(a, b, c)) {
                        fix.push([a, b, c]);
                    }
                }
            }
        }
    }
    for [a, b, c] in fix {
        vol.set(a, b, c, Class::Myocardium);
    }
}

fn check_phantom(vol: &LabelVolume) -> Result<(), PhantomError> {
    let [nx, ny, nz] = vol.dims();
    let counts = vol.class_counts();
    for class in Class::FOREGROUND {
        if counts[class.id() as usize] == 0 {
            return Err(PhantomError::MissingStructure(class));
        }
    }
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let on_face = i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz;
                if on_face {
                    let l = vol.get(i, j, k);
                    if l != Class::Background.id() {
                        return Err(PhantomError::OutOfBounds(Class::from_id(l).expect("valid id")));
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Train/val/test counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// Proportional to 100:13:40, rounding validation and test down, with
    /// the remainder going to training.
    pub fn proportional(n: usize) -> Self {
        let val = n * 13 / 153;
        let test = n * 40 / 153;
        Self {
            train: n - val - test,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    /// Volume file name relative to the manifest.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub base_seed: u64,
    pub params: PhantomParams,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Seed of the `index`-th case of a cohort.
pub fn case_seed(base_seed: u64, index: usize) -> u64 {
    // splitmix64 step keeps consecutive cohorts decorrelated
    let mut z = base_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Manifest for `n` cases: the first `split.train` are training cases,
/// then validation, then test.
pub fn cohort_manifest(
    params: &PhantomParams,
    n: usize,
    base_seed: u64,
    split: SplitCounts,
) -> Result<Manifest, PhantomError> {
    if n == 0 {
        return Err(PhantomError::InvalidParams("cohort size must be at least 1".into()));
    }
    if split.total() != n {
        return Err(PhantomError::Split {
            n,
            train: split.train,
            val: split.val,
            test: split.test,
        });
    }
    let entries = (0..n)
        .map(|i| {
            let split = if i < split.train {
                Split::Train
            } else if i < split.train + split.val {
                Split::Val
            } else {
                Split::Test
            };
            let id = format!("case_{i:03}");
            ManifestEntry {
                file: format!("{id}.lvol"),
                id,
                seed: case_seed(base_seed, i),
                split,
            }
        })
        .collect();
    Ok(Manifest {
        base_seed,
        params: params.clone(),
        entries,
    })
}

/// Generate every volume of a cohort in manifest order.
pub fn cohort(
    params: &PhantomParams,
    n: usize,
    base_seed: u64,
    split: SplitCounts,
) -> Result<(Vec<LabelVolume>, Manifest), PhantomError> {
    let manifest = cohort_manifest(params, n, base_seed, split)?;
    let volumes = manifest
        .entries
        .iter()
        .map(|e| generate_phantom(params, e.seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((volumes, manifest))
}

/// Unordered pairs of distinct class ids that share at least one voxel face.
pub fn adjacency_graph(vol: &LabelVolume) -> BTreeSet<(u8, u8)> {
    let [nx, ny, nz] = vol.dims();
    let labels = vol.labels();
    let strides = [1, nx, nx * ny];
    let mut edges = BTreeSet::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let a = labels[idx];
                for (axis, inside) in [(0, i + 1 < nx), (1, j + 1 < ny), (2, k + 1 < nz)] {
                    if inside {
                        let b = labels[idx + strides[axis]];
                        if a != b {
                            edges.insert((a.min(b), a.max(b)));
                        }
                    }
                }
            }
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomParams {
        PhantomParams::with_grid(64, 3.0)
    }

    #[test]
    fn same_seed_same_volume() {
        let a = generate_phantom(&small(), 7).unwrap();
        let b = generate_phantom(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&small(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lv_pool_touches_only_myocardium_and_atrium() {
        for seed in 0..4 {
            let vol = generate_phantom(&PhantomParams::default(), seed).unwrap();
            let [nx, ny, nz] = vol.dims();
            let lv = Class::LeftVentricle.id();
            let mut touches_la = false;
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        if vol.get(i, j, k) != lv {
                            continue;
                        }
                        for [a, b, c] in vol.face_neighbors(i, j, k) {
                            let n = vol.get(a, b, c);
                            assert!(
                                n == lv || n == Class::Myocardium.id() || n == Class::LeftAtrium.id(),
                                "seed {seed}: LV voxel next to class {n}"
                            );
                            touches_la |= n == Class::LeftAtrium.id();
                        }
                    }
                }
            }
            assert!(touches_la, "seed {seed}: no mitral opening");
        }
    }

    #[test]
    fn analytic_lv_pool_volume() {
        let mut params = PhantomParams::with_grid(192, 1.0).deterministic();
        params.lv_axes = [Range::fixed(20.0), Range::fixed(20.0), Range::fixed(30.0)];
        let vol = generate_phantom(&params, 0).unwrap();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * 30.0 * 20.0 * 20.0;
        let got = vol.count(Class::LeftVentricle) as f64;
        assert!(((got - expected) / expected).abs() < 0.02, "{got} vs {expected}");
    }

    #[test]
    fn all_structures_present_and_inside() {
        for seed in 0..6 {
            let vol = generate_phantom(&PhantomParams::default(), seed).unwrap();
            for c in Class::FOREGROUND {
                assert!(vol.count(c) > 0);
            }
        }
    }

    #[test]
    fn oversized_anatomy_is_rejected() {
        let params = PhantomParams::with_grid(40, 2.0);
        assert!(matches!(generate_phantom(&params, 1), Err(PhantomError::OutOfBounds(_))));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = PhantomParams::default();
        p.myo_thickness = Range::new(5.0, 30.0);
        assert!(matches!(generate_phantom(&p, 0), Err(PhantomError::InvalidParams(_))));
        let mut p = PhantomParams::default();
        p.bump_amplitude = 0.3;
        assert!(p.validate().is_err());
    }

    #[test]
    fn paper_sized_split() {
        let split = SplitCounts::proportional(153);
        assert_eq!(split, SplitCounts { train: 100, val: 13, test: 40 });
        let m = cohort_manifest(&small(), 153, 5, split).unwrap();
        assert_eq!(m.ids(Split::Train).len(), 100);
        assert_eq!(m.ids(Split::Val).len(), 13);
        assert_eq!(m.ids(Split::Test).len(), 40);
        let ids: BTreeSet<_> = m.entries.iter().map(|e| e.id.clone()).collect();
        assert_eq!(ids.len(), 153);
        let seeds: BTreeSet<_> = m.entries.iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), 153);
    }

    #[test]
    fn single_case_cohort_is_training() {
        let split = SplitCounts::proportional(1);
        let m = cohort_manifest(&small(), 1, 0, split).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].split, Split::Train);
        assert!(cohort_manifest(&small(), 0, 0, SplitCounts::proportional(0)).is_err());
    }

    #[test]
    fn manifest_is_reproducible() {
        let a = cohort_manifest(&small(), 10, 42, SplitCounts::proportional(10)).unwrap();
        let b = cohort_manifest(&small(), 10, 42, SplitCounts::proportional(10)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adjacency_graph_is_seed_independent() {
        let params = PhantomParams::default();
        let graphs: BTreeSet<_> = (0..12)
            .map(|i| adjacency_graph(&generate_phantom(&params, case_seed(3, i)).unwrap()))
            .collect();
        assert_eq!(graphs.len(), 1, "{graphs:?}");
        let g = graphs.into_iter().next().unwrap();
        let (lv, myo, la) = (Class::LeftVentricle.id(), Class::Myocardium.id(), Class::LeftAtrium.id());
        assert!(g.contains(&(la, lv)));
        assert!(g.contains(&(Class::RightVentricle.id(), myo)));
        assert!(!g.contains(&(0, lv)));
    }

    #[test]
    fn structure_volumes_vary_across_cohort() {
        let params = PhantomParams::with_grid(64, 3.0);
        let vols: Vec<_> = (0..100)
            .map(|i| generate_phantom(&params, case_seed(11, i)).unwrap())
            .collect();
        for c in Class::FOREGROUND {
            let v: Vec<f64> = vols.iter().map(|x| x.volume_ml(c)).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let cv = var.sqrt() / mean;
            assert!(cv >= 0.1, "{c}: cv {cv}");
        }
    }
}

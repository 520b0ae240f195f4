//! Apical view planes: landmarks, canonical A2C/A3C/A4C/A5C construction,
//! nearest-neighbour slice rendering, and the perturbed-acquisition protocol.

use crate::geometry::{project_orthogonal, rotate_about, rotated_basis, GeometryError, RigidParams, Vec3, ViewPlane};
use crate::volume::{Class, GridSpec, LabelVolume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Rendered images are `IMAGE_SIZE x IMAGE_SIZE` pixels.
pub const IMAGE_SIZE: usize = 256;
/// Field of view relative to the apex–LA distance.
pub const EXTENT_FACTOR: f64 = 1.5;
/// Rows start this fraction of the extent above the apex.
pub const TOP_MARGIN: f64 = 0.1;
pub const A3C_ROTATION_DEG: f64 = 45.0;
pub const A2C_ROTATION_DEG: f64 = 90.0;
pub const A5C_TILT_DEG: f64 = 5.0;
pub const IN_PLANE_ROTATION_DEG: f64 = 10.0;
/// Default landmark noise for perturbed acquisitions (mm).
pub const DEFAULT_SIGMA_MM: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewError {
    #[error("structure {0} is missing from the volume")]
    MissingClass(Class),
    #[error("landmark noise must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("degenerate view geometry: {0}")]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewName {
    A2C,
    A3C,
    A4C,
    A5C,
}

impl ViewName {
    pub const ALL: [ViewName; 4] = [ViewName::A2C, ViewName::A3C, ViewName::A4C, ViewName::A5C];

    pub fn name(self) -> &'static str {
        match self {
            ViewName::A2C => "A2C",
            ViewName::A3C => "A3C",
            ViewName::A4C => "A4C",
            ViewName::A5C => "A5C",
        }
    }

    pub fn from_name(s: &str) -> Option<ViewName> {
        ViewName::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ViewName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Chamber centers of mass and the LV apex (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub com_la: Vec3,
    pub com_lv: Vec3,
    pub com_ra: Vec3,
    pub com_rv: Vec3,
    pub apex: Vec3,
}

impl Landmarks {
    fn points_mut(&mut self) -> [&mut Vec3; 5] {
        [&mut self.com_la, &mut self.com_lv, &mut self.com_ra, &mut self.com_rv, &mut self.apex]
    }
}

/// Centers of mass of the four chambers and the apex: the LV voxel center
/// farthest from the LA center of mass (lowest linear index on ties).
pub fn compute_landmarks(vol: &LabelVolume) -> Result<Landmarks, ViewError> {
    let grid = vol.grid();
    let mut sums = [Vec3::ZERO; crate::volume::NUM_CLASSES];
    let mut counts = [0usize; crate::volume::NUM_CLASSES];
    for (idx, l) in vol.labels().iter().enumerate() {
        sums[*l as usize] += grid.center_of(idx);
        counts[*l as usize] += 1;
    }
    let com = |c: Class| -> Result<Vec3, ViewError> {
        let n = counts[c.id() as usize];
        if n == 0 {
            return Err(ViewError::MissingClass(c));
        }
        Ok(sums[c.id() as usize] * (1.0 / n as f64))
    };
    let (com_la, com_lv, com_ra, com_rv) = (
        com(Class::LeftAtrium)?,
        com(Class::LeftVentricle)?,
        com(Class::RightAtrium)?,
        com(Class::RightVentricle)?,
    );
    let lv = Class::LeftVentricle.id();
    let mut apex = None;
    let mut best = f64::NEG_INFINITY;
    for (idx, l) in vol.labels().iter().enumerate() {
        if *l == lv {
            let c = grid.center_of(idx);
            let d = c.distance(com_la);
            if d > best {
                best = d;
                apex = Some(c);
            }
        }
    }
    Ok(Landmarks {
        com_la,
        com_lv,
        com_ra,
        com_rv,
        apex: apex.expect("LV is present"),
    })
}

/// Pixel coordinates for an `size x size` image with total extent `extent`:
/// columns symmetric about zero, rows from `-TOP_MARGIN` to `1 - TOP_MARGIN`.
pub fn pixel_grid(extent: f64, size: usize) -> (Vec<f64>, Vec<f64>) {
    let n = size as f64;
    let alphas = (0..size).map(|j| extent * ((j as f64 + 0.5) / n - 0.5)).collect();
    let betas = (0..size).map(|i| extent * (-TOP_MARGIN + (i as f64 + 0.5) / n)).collect();
    (alphas, betas)
}

/// The four canonical apical planes, in [`ViewName::ALL`] order.
pub fn canonical_views(lm: &Landmarks, size: usize) -> Result<[ViewPlane; 4], ViewError> {
    let e_v = (lm.com_lv - lm.apex)
        .normalized()
        .ok_or_else(|| GeometryError::Degenerate("apex coincides with LV center of mass".into()))?;
    let e_u4 = project_orthogonal(lm.com_ra - lm.apex, e_v)?;
    let extent = EXTENT_FACTOR * lm.apex.distance(lm.com_la);
    if !(extent > 0.0) {
        return Err(GeometryError::Degenerate("apex coincides with LA center of mass".into()).into());
    }
    let (alphas, betas) = pixel_grid(extent, size);
    let plane = |u: Vec3, v: Vec3| ViewPlane::new(lm.apex, u, v, alphas.clone(), betas.clone());

    let a3c_u = rotate_about(e_u4, e_v, A3C_ROTATION_DEG.to_radians())?;
    let a2c_u = rotate_about(e_u4, e_v, A2C_ROTATION_DEG.to_radians())?;
    // A5C: tilt about e_u first, then the in-plane rotation shared with A4C.
    let a5c_v = rotate_about(e_v, e_u4, A5C_TILT_DEG.to_radians())?;
    let in_plane = |u: Vec3, v: Vec3| -> Result<(Vec3, Vec3), ViewError> {
        let n = u.cross(v);
        let angle = IN_PLANE_ROTATION_DEG.to_radians();
        Ok((rotate_about(u, n, angle)?, rotate_about(v, n, angle)?))
    };
    let (a4c_u, a4c_v) = in_plane(e_u4, e_v)?;
    let (a5c_u, a5c_v) = in_plane(e_u4, a5c_v)?;
    Ok([
        plane(a2c_u, e_v)?,
        plane(a3c_u, e_v)?,
        plane(a4c_u, a4c_v)?,
        plane(a5c_u, a5c_v)?,
    ])
}

/// World coordinates of every pixel (row-major) under rigid parameters.
pub fn pixel_points(plane: &ViewPlane, rigid: &RigidParams) -> Vec<[f64; 3]> {
    let (eu, ev) = if rigid.is_zero() {
        (plane.basis_u, plane.basis_v)
    } else {
        rotated_basis(plane, rigid)
    };
    let origin = if rigid.is_zero() {
        plane.anchor
    } else {
        plane.anchor + rigid.translation
    };
    let mut out = Vec::with_capacity(plane.width() * plane.height());
    for beta in &plane.betas {
        for alpha in &plane.alphas {
            out.push((origin + eu * *alpha + ev * *beta).to_array());
        }
    }
    out
}

/// A rendered label image with the plane it is assumed to lie in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMask {
    pub view: ViewName,
    pub plane: ViewPlane,
    /// Row-major `height x width` class ids.
    #[serde(skip)]
    pub labels: Vec<u8>,
}

impl SliceMask {
    pub fn width(&self) -> usize {
        self.plane.width()
    }

    pub fn height(&self) -> usize {
        self.plane.height()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width() + col]
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|l| **l == class.id()).count()
    }

    pub fn distinct_classes(&self) -> usize {
        let mut seen = [false; crate::volume::NUM_CLASSES];
        for l in &self.labels {
            seen[*l as usize] = true;
        }
        seen.iter().filter(|s| **s).count()
    }
}

/// Nearest-neighbour labels at every pixel of `plane` moved by `rigid`;
/// samples outside the volume are background.
pub fn render_slice(vol: &LabelVolume, plane: &ViewPlane, rigid: &RigidParams, view: ViewName) -> SliceMask {
    let labels = pixel_points(plane, rigid)
        .into_iter()
        .map(|p| vol.label_at(Vec3::from_array(p)))
        .collect();
    SliceMask {
        view,
        plane: plane.clone(),
        labels,
    }
}

/// Landmarks plus i.i.d. `N(0, sigma²)` noise on every coordinate.
pub fn perturb_landmarks(lm: &Landmarks, sigma: f64, rng: &mut impl rand::Rng) -> Result<Landmarks, ViewError> {
    if !(sigma >= 0.0) {
        return Err(ViewError::NegativeSigma(sigma));
    }
    let mut out = *lm;
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for p in out.points_mut() {
        *p = *p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    }
    Ok(out)
}

/// One acquired view: the rendered mask (carrying its assumed plane), the
/// plane it was actually rendered from, and the landmarks that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquiredView {
    pub mask: SliceMask,
    pub true_plane: ViewPlane,
    pub landmarks: Landmarks,
}

/// Four acquired views of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceBundle {
    pub case_id: String,
    pub sigma_mm: f64,
    pub seed: u64,
    /// Grid of the source volume; reconstructions are queried on it.
    pub reference_grid: GridSpec,
    pub reference_landmarks: Landmarks,
    pub views: Vec<AcquiredView>,
}

impl SliceBundle {
    pub fn view(&self, name: ViewName) -> Option<&AcquiredView> {
        self.views.iter().find(|v| v.mask.view == name)
    }
}

/// Replace the stored plane of each acquired view by the ideal canonical
/// plane of the same view. The true acquisition plane is kept alongside.
pub fn assign_ideal_poses(views: &mut [AcquiredView], ideal: &[ViewPlane; 4]) {
    for v in views {
        v.mask.plane = ideal[v.mask.view.index()].clone();
    }
}

/// Acquisition protocol: each view is rendered from canonical planes built
/// on independently perturbed landmarks, then stored with the ideal
/// (unperturbed) plane as its assumed pose.
pub fn acquire_bundle(
    vol: &LabelVolume,
    case_id: &str,
    sigma: f64,
    seed: u64,
    size: usize,
) -> Result<SliceBundle, ViewError> {
    let truth = compute_landmarks(vol)?;
    let ideal = canonical_views(&truth, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(4);
    for name in ViewName::ALL {
        let noisy = perturb_landmarks(&truth, sigma, &mut rng)?;
        let plane = canonical_views(&noisy, size)?[name.index()].clone();
        let mask = render_slice(vol, &plane, &RigidParams::default(), name);
        views.push(AcquiredView {
            mask,
            true_plane: plane,
            landmarks: noisy,
        });
    }
    assign_ideal_poses(&mut views, &ideal);
    Ok(SliceBundle {
        case_id: case_id.to_string(),
        sigma_mm: sigma,
        seed,
        reference_grid: *vol.grid(),
        reference_landmarks: truth,
        views,
    })
}

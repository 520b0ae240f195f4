//! Dense multi-class label grids.

use crate::geometry::Vec3;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub const NUM_CLASSES: usize = 6;

/// Label classes in their fixed storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    LeftAtrium = 1,
    LeftVentricle = 2,
    RightAtrium = 3,
    RightVentricle = 4,
    Myocardium = 5,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Background,
        Class::LeftAtrium,
        Class::LeftVentricle,
        Class::RightAtrium,
        Class::RightVentricle,
        Class::Myocardium,
    ];

    /// Reporting order for the five foreground structures.
    pub const FOREGROUND: [Class; 5] = [
        Class::LeftVentricle,
        Class::LeftAtrium,
        Class::RightVentricle,
        Class::RightAtrium,
        Class::Myocardium,
    ];

    /// The four cavities.
    pub const CHAMBERS: [Class; 4] = [
        Class::LeftAtrium,
        Class::LeftVentricle,
        Class::RightAtrium,
        Class::RightVentricle,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Class> {
        Class::ALL.get(id as usize).copied()
    }

    /// Canonical name used in file headers and tables.
    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::LeftAtrium => "LA",
            Class::LeftVentricle => "LV",
            Class::RightAtrium => "RA",
            Class::RightVentricle => "RV",
            Class::Myocardium => "LV-myo",
        }
    }

    pub fn from_name(name: &str) -> Option<Class> {
        let lower = name.to_ascii_lowercase();
        Class::ALL
            .into_iter()
            .find(|c| c.name().to_ascii_lowercase() == lower)
            .or(match lower.as_str() {
                "myo" | "lvmyo" | "lv_myo" => Some(Class::Myocardium),
                _ => None,
            })
    }

    pub fn names() -> Vec<String> {
        Class::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("label buffer has {got} voxels, grid {dims:?} needs {expected}")]
    BufferSize {
        dims: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("invalid class id {0}")]
    InvalidClass(u8),
    #[error("grid spacing must be positive and finite, got {0:?}")]
    Spacing([f64; 3]),
    #[error("grids differ: {0:?} vs {1:?}")]
    GridMismatch(GridSpec, GridSpec),
}

/// Voxel grid geometry: voxel `(i, j, k)` has its center at
/// `origin + (index + 0.5) * spacing` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: Vec3,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Vec3) -> Result<Self, VolumeError> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::Spacing(spacing));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Cube of `n` voxels per side centered on the world origin.
    pub fn centered_cube(n: usize, spacing: f64) -> Self {
        let half = n as f64 * spacing / 2.0;
        Self {
            dims: [n; 3],
            spacing: [spacing; 3],
            origin: Vec3::new(-half, -half, -half),
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// x-fastest linear index.
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let o = self.origin;
        let s = self.spacing;
        Vec3::new(
            o.x + (i as f64 + 0.5) * s[0],
            o.y + (j as f64 + 0.5) * s[1],
            o.z + (k as f64 + 0.5) * s[2],
        )
    }

    pub fn center_of(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.unravel(idx);
        self.center(i, j, k)
    }

    /// World-space bounding box `(min, max)` of the voxel faces.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let o = self.origin;
        let ext = Vec3::new(
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        );
        (o, o + ext)
    }

    /// Nearest voxel to a world point: per axis, `floor(f + 0.5)` of the
    /// continuous center index `f` (ties round up). `None` outside the grid.
    pub fn nearest_voxel(&self, p: Vec3) -> Option<[usize; 3]> {
        let coords = [p.x, p.y, p.z];
        let origin = self.origin.to_array();
        let mut out = [0usize; 3];
        for axis in 0..3 {
            let f = (coords[axis] - origin[axis]) / self.spacing[axis] - 0.5;
            let r = (f + 0.5).floor();
            if !(r >= 0.0 && r < self.dims[axis] as f64) {
                return None;
            }
            out[axis] = r as usize;
        }
        Some(out)
    }
}

/// Dense class-id grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: GridSpec,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: GridSpec, labels: Vec<u8>) -> Result<Self, VolumeError> {
        if labels.len() != grid.len() {
            return Err(VolumeError::BufferSize {
                dims: grid.dims,
                expected: grid.len(),
                got: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|l| **l as usize >= NUM_CLASSES) {
            return Err(VolumeError::InvalidClass(*bad));
        }
        GridSpec::new(grid.dims, grid.spacing, grid.origin)?;
        Ok(Self { grid, labels })
    }

    pub fn filled(grid: GridSpec, class: Class) -> Self {
        Self {
            labels: vec![class.id(); grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.grid.linear(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, class: Class) {
        let idx = self.grid.linear(i, j, k);
        self.labels[idx] = class.id();
    }

    /// Nearest-neighbor label at a world point; background outside.
    pub fn label_at(&self, p: Vec3) -> u8 {
        match self.grid.nearest_voxel(p) {
            Some([i, j, k]) => self.get(i, j, k),
            None => Class::Background.id(),
        }
    }

    pub fn count(&self, class: Class) -> usize {
        let id = class.id();
        self.labels.iter().filter(|l| **l == id).count()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for l in &self.labels {
            counts[*l as usize] += 1;
        }
        counts
    }

    /// Structure volume in mL.
    pub fn volume_ml(&self, class: Class) -> f64 {
        self.count(class) as f64 * self.grid.voxel_volume_mm3() / 1000.0
    }

    pub fn ensure_same_grid(&self, other: &LabelVolume) -> Result<(), VolumeError> {
        if self.grid != other.grid {
            return Err(VolumeError::GridMismatch(self.grid, other.grid));
        }
        Ok(())
    }

    /// Face neighbors (6-connectivity) of a voxel that lie inside the grid.
    pub fn face_neighbors(&self, i: usize, j: usize, k: usize) -> impl Iterator<Item = [usize; 3]> {
        let dims = self.grid.dims;
        const OFFSETS: [[isize; 3]; 6] = [
            [-1, 0, 0],
            [1, 0, 0],
            [0, -1, 0],
            [0, 1, 0],
            [0, 0, -1],
            [0, 0, 1],
        ];
        OFFSETS.into_iter().filter_map(move |o| {
            let n = [i as isize + o[0], j as isize + o[1], k as isize + o[2]];
            (0..3)
                .all(|a| n[a] >= 0 && (n[a] as usize) < dims[a])
                .then(|| [n[0] as usize, n[1] as usize, n[2] as usize])
        })
    }
}

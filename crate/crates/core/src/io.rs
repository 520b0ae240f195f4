//! On-disk formats: label volumes, slice bundles, cohort manifests, and the
//! JSON run configuration.

use crate::phantom::{Manifest, PhantomParams};
use crate::pipeline::{ExperimentConfig, TrainConfig};
use crate::views::{SliceBundle, ViewName};
use crate::volume::{Class, GridSpec, LabelVolume, VolumeError};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const VOLUME_MAGIC: &[u8; 5] = b"LVOL1";
pub const BUNDLE_MAGIC: &[u8; 8] = b"S2HSLB01";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error")]
    Io(#[from] io::Error),
    #[error("not a {0} file (bad magic)")]
    BadMagic(&'static str),
    #[error("malformed JSON")]
    Json(#[from] serde_json::Error),
    #[error("class names {found:?} differ from {expected:?}; relabel the file or regenerate it")]
    ClassOrder { found: Vec<String>, expected: Vec<String> },
    #[error("payload has {got} bytes, header implies {expected}")]
    Payload { expected: usize, got: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("invalid file: {0}")]
    Invalid(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    class_names: Vec<String>,
}

fn write_framed(mut w: impl Write, magic: &[u8], header: &impl Serialize, payload: &[u8]) -> Result<(), FormatError> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| FormatError::Invalid("header exceeds 4 GiB".into()))?;
    w.write_all(magic)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Checks the magic and returns the raw JSON header.
fn read_framed(mut r: impl Read, magic: &[u8], what: &'static str) -> Result<(Vec<u8>, Vec<u8>), FormatError> {
    let mut found = vec![0u8; magic.len()];
    r.read_exact(&mut found).map_err(|_| FormatError::BadMagic(what))?;
    if found != magic {
        return Err(FormatError::BadMagic(what));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((json, payload))
}

fn check_class_names(found: Vec<String>) -> Result<(), FormatError> {
    let expected = Class::names();
    if found != expected {
        return Err(FormatError::ClassOrder { found, expected });
    }
    Ok(())
}

pub fn write_volume(vol: &LabelVolume, w: impl Write) -> Result<(), FormatError> {
    let g = vol.grid();
    let header = VolumeHeader {
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin.to_array(),
        class_names: Class::names(),
    };
    write_framed(w, VOLUME_MAGIC, &header, vol.labels())
}

pub fn read_volume(r: impl Read) -> Result<LabelVolume, FormatError> {
    let (json, payload) = read_framed(r, VOLUME_MAGIC, "label volume")?;
    let h: VolumeHeader = serde_json::from_slice(&json)?;
    check_class_names(h.class_names)?;
    let grid = GridSpec::new(h.dims, h.spacing, crate::geometry::Vec3::from_array(h.origin))?;
    if payload.len() != grid.len() {
        return Err(FormatError::Payload {
            expected: grid.len(),
            got: payload.len(),
        });
    }
    Ok(LabelVolume::new(grid, payload)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    class_names: Vec<String>,
    bundle: SliceBundle,
}

/// Bundle metadata as JSON, then each view's mask bytes in the listed view
/// order.
pub fn write_bundle(bundle: &SliceBundle, w: impl Write) -> Result<(), FormatError> {
    let mut payload = Vec::new();
    for v in &bundle.views {
        let m = &v.mask;
        if m.labels.len() != m.width() * m.height() {
            return Err(FormatError::Invalid(format!("{} mask does not match its plane", m.view)));
        }
        payload.extend_from_slice(&m.labels);
    }
    let header = BundleHeader {
        class_names: Class::names(),
        bundle: bundle.clone(),
    };
    write_framed(w, BUNDLE_MAGIC, &header, &payload)
}

pub fn read_bundle(r: impl Read) -> Result<SliceBundle, FormatError> {
    let (json, payload) = read_framed(r, BUNDLE_MAGIC, "slice bundle")?;
    let h: BundleHeader = serde_json::from_slice(&json)?;
    check_class_names(h.class_names)?;
    let mut bundle = h.bundle;
    let expected: usize = bundle.views.iter().map(|v| v.mask.width() * v.mask.height()).sum();
    if payload.len() != expected {
        return Err(FormatError::Payload {
            expected,
            got: payload.len(),
        });
    }
    let mut seen = Vec::new();
    let mut rest = payload.as_slice();
    for v in &mut bundle.views {
        v.mask.plane.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
        if seen.contains(&v.mask.view) {
            return Err(FormatError::Invalid(format!("view {} appears twice", v.mask.view)));
        }
        seen.push(v.mask.view);
        let (mine, tail) = rest.split_at(v.mask.width() * v.mask.height());
        if let Some(bad) = mine.iter().find(|l| Class::from_id(**l).is_none()) {
            return Err(FormatError::Volume(VolumeError::InvalidClass(*bad)));
        }
        v.mask.labels = mine.to_vec();
        rest = tail;
    }
    Ok(bundle)
}

/// Views present in a bundle, in file order.
pub fn bundle_views(bundle: &SliceBundle) -> Vec<ViewName> {
    bundle.views.iter().map(|v| v.mask.view).collect()
}

pub fn save_volume(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_volume(vol, BufWriter::new(File::create(path)?))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<LabelVolume, FormatError> {
    read_volume(BufReader::new(File::open(path)?))
}

pub fn save_bundle(bundle: &SliceBundle, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_bundle(bundle, BufWriter::new(File::create(path)?))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<SliceBundle, FormatError> {
    read_bundle(BufReader::new(File::open(path)?))
}

/// Pretty-printed JSON followed by a newline.
pub fn save_json(value: &impl Serialize, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T, FormatError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, FormatError> {
    load_json(path)
}

/// Every tunable of a run. Each field defaults to the published setting;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomParams,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Reduced profile that fits a single desktop core: fewer epochs, a
    /// coarser phantom grid over the same field of view, fewer training
    /// points per shape, and strided slice pixels at test time.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.phantom.grid = 64;
        c.phantom.spacing = 3.0;
        c.train.epochs = 300;
        c.train.points_per_volume = 4096;
        c.train.learning_rate = 3e-4;
        c.train.checkpoint_every = 50;
        c.experiment.recon.pixel_stride = 8;
        c
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let invalid = |e: &dyn std::fmt::Display| FormatError::Invalid(e.to_string());
        self.phantom.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.experiment.recon.validate().map_err(|e| invalid(&e))?;
        if !(self.experiment.sigma_mm >= 0.0) || self.experiment.image_size == 0 || self.experiment.simpson_disks == 0 {
            return Err(FormatError::Invalid(
                "sigma must be non-negative; image size and disk count positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, FormatError> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

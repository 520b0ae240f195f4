//! Shared fixtures for the kernel benchmarks.

use slice2heart::phantom::{generate_phantom, PhantomParams};
use slice2heart::views::{acquire_bundle, SliceBundle};
use slice2heart::volume::LabelVolume;

/// A coarse phantom: big enough to have every structure, small enough to
/// build in well under a second.
pub fn small_phantom(seed: u64) -> LabelVolume {
    generate_phantom(&PhantomParams::with_grid(48, 4.0), seed).expect("phantom")
}

pub fn small_bundle(vol: &LabelVolume, size: usize) -> SliceBundle {
    acquire_bundle(vol, "bench", 5.0, 1, size).expect("bundle")
}

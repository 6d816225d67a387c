//! Shared fixtures for the criterion benches.

use csdmt_core::facedata::synth_sample;
use csdmt_core::{Domain, FaceSample};

/// A bare source and a makeup reference at `size`.
pub fn pair(size: usize) -> (FaceSample, FaceSample) {
    let x = synth_sample(7, Domain::NonMakeup, 0, size).expect("synthetic source");
    let y = synth_sample(7, Domain::Makeup, 1, size).expect("synthetic reference");
    (x, y)
}

//! Complexity profiler: exact parameter count, analytic MAC count and a
//! timed single-image FPS measurement.

use std::time::Instant;

use crate::error::Result;
use crate::model::PolypSegNet;
use crate::report::{hardware_description, Profile};
use crate::tensor::{Elem, Tensor};

pub const FPS_WARMUP: usize = 5;
pub const FPS_RUNS: usize = 30;

/// Profile a model at `input_size`: exact parameter count, analytic MACs,
/// and the median FPS of `FPS_RUNS` single-image forwards after
/// `FPS_WARMUP` warmups, single-threaded.
pub fn profile<E: Elem>(model: &PolypSegNet<E>, input_size: usize) -> Result<Profile> {
    let image = Tensor::full(&[1, 3, input_size, input_size], E::from_f64(0.5));
    for _ in 0..FPS_WARMUP {
        model.predict(&image, 1)?;
    }
    let mut times = Vec::with_capacity(FPS_RUNS);
    for _ in 0..FPS_RUNS {
        let start = Instant::now();
        model.predict(&image, 1)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if FPS_RUNS.is_multiple_of(2) {
        0.5 * (times[FPS_RUNS / 2 - 1] + times[FPS_RUNS / 2])
    } else {
        times[FPS_RUNS / 2]
    };
    Ok(Profile {
        param_count: model.param_count(),
        mac_count: model.mac_count(input_size),
        fps: 1.0 / median,
        input_size,
        hardware: hardware_description(),
    })
}

use rand::Rng;

use super::PixelSetSample;
use crate::tensor::{Real, Tensor};

/// Draws `size` pixel indices out of `available`: without replacement when
/// enough pixels exist, otherwise uniformly with replacement.
pub fn sample_indices(available: usize, size: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(available >= 1 && size >= 1, "need at least one pixel and one draw");
    if available >= size {
        rand::seq::index::sample(rng, available, size).into_vec()
    } else {
        (0..size).map(|_| rng.gen_range(0..available)).collect()
    }
}

/// Random pixel subset of a parcel, `C × S × T`. The same pixels are used
/// for every date so each column is a coherent per-pixel trajectory.
pub fn sample_pixels(sample: &PixelSetSample, size: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let idx = sample_indices(sample.pixel_count(), size, rng);
    let (c, t) = (sample.channels(), sample.dates());
    let mut data = Vec::with_capacity(c * size * t);
    for ch in 0..c {
        for &p in &idx {
            for d in 0..t {
                data.push(sample.value(ch, p, d));
            }
        }
    }
    Tensor::new(vec![c, size, t], data).expect("non-empty sample")
}

/// Same draw as [`sample_pixels`] laid out for the pixel-set encoder:
/// `(T · S) × C`, rows grouped by date.
pub fn sample_pixel_rows<R: Real>(
    sample: &PixelSetSample,
    size: usize,
    rng: &mut impl Rng,
) -> Tensor<R> {
    let idx = sample_indices(sample.pixel_count(), size, rng);
    let (c, t) = (sample.channels(), sample.dates());
    let mut data = Vec::with_capacity(c * size * t);
    for d in 0..t {
        for &p in &idx {
            for ch in 0..c {
                data.push(R::of(sample.value(ch, p, d) as f64));
            }
        }
    }
    Tensor::new(vec![t * size, c], data).expect("non-empty sample")
}

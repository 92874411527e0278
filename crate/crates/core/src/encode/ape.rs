use crate::numcore::Tensor;
use crate::scene::Point;

use super::EncodeError;

const RANGE_SLACK: f64 = 1e-6;

/// Sinusoidal encoding of normalized positions, `m × d`.
///
/// Each axis gets `⌊d/6⌋` frequencies `T^(−2j/(d/3))` emitted as interleaved
/// `sin, cos` pairs; axes are laid out x, y, z and the tail is zero padded.
pub fn fourier_ape(positions: &[Point], d: usize, temperature: f64) -> Result<Tensor, EncodeError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(EncodeError::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    let per_axis = d / 6;
    let third = d as f64 / 3.0;
    let freqs: Vec<f64> = (0..per_axis).map(|j| temperature.powf(-2.0 * j as f64 / third)).collect();
    let mut data = Vec::with_capacity(positions.len() * d);
    for (i, p) in positions.iter().enumerate() {
        if p.iter().any(|x| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(x)) {
            return Err(EncodeError::Domain(format!("position {i} = {p:?} is outside [0, 1]³")));
        }
        for x in p {
            for w in &freqs {
                let (s, c) = (w * x).sin_cos();
                data.push(s);
                data.push(c);
            }
        }
        data.resize((i + 1) * d, 0.0);
    }
    Ok(Tensor::new(vec![positions.len(), d], data)?)
}

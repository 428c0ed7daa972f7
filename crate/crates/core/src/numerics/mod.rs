//! Dense `f64` tensors, reverse-mode autodiff, Adam, and seeded randomness.

mod attention;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod params;
mod rng;
mod tensor;

pub use attention::{attention_weights, softmax_attention, AttnMask, MaskGrid};
pub use graph::{Bound, Graph, Var};
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use rng::{derive_seed, Rng};
pub use tensor::Tensor;

use crate::error::{dim_err, Result};

/// Default epsilon inside RMS normalisation.
pub const NORM_EPS: f64 = 1e-6;

/// `scale ⊙ gain ⊙ x / sqrt(mean(x²) + eps)` along the last axis of a 2-D
/// `x`. `gain` has one entry per channel; `scale` is one row or one row per
/// input row.
pub fn rms_norm(x: &Tensor, gain: &Tensor, scale: &Tensor, eps: f64) -> Result<Tensor> {
    if x.shape().len() > 2 {
        return Err(dim_err!("rms_norm expects 1-D or 2-D input, got {:?}", x.shape()));
    }
    let mut g = Graph::new();
    let (xv, gv, sv) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(scale.clone()),
    );
    let y = g.rms_norm(xv, gv, sv, eps)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_of_ones_is_identity() {
        let x = Tensor::full(&[2, 4], 1.0);
        let one = Tensor::full(&[4], 1.0);
        let y = rms_norm(&x, &one, &one, 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rms_cancels_magnitude() {
        let x = Tensor::from_rows(&[&[3.0, -3.0]]).unwrap();
        let gain = Tensor::full(&[2], 1.0);
        let scale = Tensor::full(&[2], 2.0);
        let y = rms_norm(&x, &gain, &scale, 0.0).unwrap();
        assert_eq!(y.data(), &[2.0, -2.0]);
    }

    #[test]
    fn rms_matches_scalar_loop() {
        let mut rng = Rng::new(11);
        let x = rng.randn(&[3, 7]);
        let gain = rng.randn(&[7]);
        let scale = rng.randn(&[3, 7]);
        let eps = 1e-6;
        let y = rms_norm(&x, &gain, &scale, eps).unwrap();
        for i in 0..3 {
            let mut ms = 0.0;
            for j in 0..7 {
                ms += x.row(i)[j] * x.row(i)[j];
            }
            ms /= 7.0;
            let denom = (ms + eps).sqrt();
            for j in 0..7 {
                let want = scale.row(i)[j] * gain.data()[j] * x.row(i)[j] / denom;
                assert!((y.row(i)[j] - want).abs() <= 1e-12);
            }
        }
    }
}

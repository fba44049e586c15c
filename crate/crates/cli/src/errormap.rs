//! Four-colour prediction error maps.

use bicd::netpbm::Image;
use bicd::objective::Confusion;
use bicd::{BicdError, Result, Tensor};

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];

/// Colour one 1×1×H×W logit map against its mask. A pixel is predicted as
/// changed when its logit is positive.
pub fn error_map(logits: &Tensor<f32>, mask: &Tensor<f32>) -> Result<(Image, Confusion)> {
    let (n, c, h, w) = logits.nchw()?;
    if n != 1 || c != 1 || mask.dims() != logits.dims() {
        return Err(BicdError::Shape(format!(
            "error map needs matching 1x1xHxW logits and mask, got {:?} and {:?}",
            logits.dims(),
            mask.dims()
        )));
    }
    let mut counts = Confusion::default();
    let mut data = Vec::with_capacity(h * w * 3);
    for (&l, &y) in logits.data().iter().zip(mask.data()) {
        let color = match (l > 0.0, y == 1.0) {
            (true, true) => {
                counts.tp += 1;
                TP_COLOR
            }
            (true, false) => {
                counts.fp += 1;
                FP_COLOR
            }
            (false, true) => {
                counts.fn_ += 1;
                FN_COLOR
            }
            (false, false) => {
                counts.tn += 1;
                TN_COLOR
            }
        };
        data.extend_from_slice(&color);
    }
    let image = Image {
        width: w,
        height: h,
        channels: 3,
        data,
    };
    Ok((image, counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(logits: &[f32], mask: &[f32]) -> (Image, Confusion) {
        let l = Tensor::from_vec(&[1, 1, 2, 2], logits.to_vec()).unwrap();
        let m = Tensor::from_vec(&[1, 1, 2, 2], mask.to_vec()).unwrap();
        error_map(&l, &m).unwrap()
    }

    #[test]
    fn one_pixel_per_class() {
        let (img, c) = map(&[1.0, 1.0, -1.0, -1.0], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(img.data, [TP_COLOR, FP_COLOR, FN_COLOR, TN_COLOR].concat());
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
    }

    #[test]
    fn perfect_prediction_is_black_and_white() {
        let (img, _) = map(&[2.0, -2.0, -2.0, 2.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(img.data.chunks(3).all(|p| p == TP_COLOR || p == TN_COLOR));
    }

    #[test]
    fn all_negative_prediction_has_no_white() {
        let (img, _) = map(&[-1.0; 4], &[1.0, 1.0, 0.0, 0.0]);
        assert!(img.data.chunks(3).all(|p| p != TP_COLOR));
    }

    #[test]
    fn zero_logit_counts_as_negative() {
        let (_, c) = map(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!((c.fn_, c.tn), (1, 3));
    }
}

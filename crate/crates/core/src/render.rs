//! Confusion-coloured overlays of predicted change masks.

use image::{GrayImage, Rgb, RgbImage};

use crate::data::Mask;
use crate::error::{Error, Result};

pub const TRUE_POSITIVE: Rgb<u8> = Rgb([255, 255, 255]);
pub const TRUE_NEGATIVE: Rgb<u8> = Rgb([0, 0, 0]);
pub const FALSE_POSITIVE: Rgb<u8> = Rgb([255, 0, 0]);
pub const FALSE_NEGATIVE: Rgb<u8> = Rgb([0, 255, 0]);

/// Colour of one pixel outcome.
pub fn outcome_color(pred: u8, gt: u8) -> Rgb<u8> {
    match (pred != 0, gt != 0) {
        (true, true) => TRUE_POSITIVE,
        (false, false) => TRUE_NEGATIVE,
        (true, false) => FALSE_POSITIVE,
        (false, true) => FALSE_NEGATIVE,
    }
}

/// Per-pixel outcome image of `pred` against `gt`.
pub fn confusion_overlay(pred: &Mask, gt: &Mask) -> Result<RgbImage> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Input(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let w = pred.width;
    Ok(RgbImage::from_fn(w as u32, pred.height as u32, |x, y| {
        let i = y as usize * w + x as usize;
        outcome_color(pred.data[i], gt.data[i])
    }))
}

/// Black/white rendering of a binary mask.
pub fn mask_image(m: &Mask) -> GrayImage {
    crate::data::mask_to_gray(m)
}

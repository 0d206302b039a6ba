//! Discretisation of bounding-box regression labels into classes so that
//! classification validators can run on regression packs.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const BINS_PER_COORD: u32 = 8;
pub const NUM_BOX_CLASSES: usize = 4096;

fn quantize(v: f64) -> Result<u32> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("box coordinate {v} is outside [0, 1]")));
    }
    Ok(((v * BINS_PER_COORD as f64).floor() as u32).min(BINS_PER_COORD - 1))
}

/// Class index of a box `(x1, y1, x2, y2)`, each coordinate binned into 8
/// uniform bins (1.0 falls in the top bin) and combined positionally.
pub fn discretize_bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<u32> {
    let b = BINS_PER_COORD;
    Ok(quantize(x1)? + b * quantize(y1)? + b * b * quantize(x2)? + b * b * b * quantize(y2)?)
}

/// Discretises each row of an N x 4 box matrix.
pub fn discretize_boxes(boxes: &Array2<f32>) -> Result<Vec<u32>> {
    if boxes.ncols() != 4 {
        return Err(Error::Shape(format!("boxes need 4 columns, found {}", boxes.ncols())));
    }
    boxes
        .rows()
        .into_iter()
        .map(|r| discretize_bbox(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64))
        .collect()
}

/// One-hot prediction rows over the 4096 box classes.
pub fn one_hot_predictions(classes: &[u32]) -> Array2<f32> {
    let mut m = Array2::zeros((classes.len(), NUM_BOX_CLASSES));
    for (i, &c) in classes.iter().enumerate() {
        m[[i, c as usize]] = 1.0;
    }
    m
}

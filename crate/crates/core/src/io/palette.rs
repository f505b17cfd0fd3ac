use crate::error::{Error, Result};
use crate::io::Image;

/// Label colors; class `k` uses entry `k % 16`.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
    [128, 128, 128],
    [255, 255, 255],
];

/// RGB image of a row-major label map.
pub fn colorize(labels: &[usize], width: usize, height: usize) -> Result<Image> {
    if labels.len() != width * height {
        return Err(Error::shape("colorize", format!("{} labels for {width}x{height}", labels.len())));
    }
    let data = labels.iter().flat_map(|&l| PALETTE[l % PALETTE.len()]).collect();
    Ok(Image {
        width,
        height,
        channels: 3,
        data,
    })
}

/// Single-channel map in `[0, 1]` as a gray RGB image.
pub fn gray_to_rgb(values: &[f64], width: usize, height: usize) -> Result<Image> {
    if values.len() != width * height {
        return Err(Error::shape("gray_to_rgb", format!("{} values for {width}x{height}", values.len())));
    }
    let data = values
        .iter()
        .flat_map(|&v| [(v.clamp(0.0, 1.0) * 255.0).round() as u8; 3])
        .collect();
    Ok(Image {
        width,
        height,
        channels: 3,
        data,
    })
}

use serde::{Deserialize, Serialize};

use crate::slide_io::PixelBlock;

/// HSV tissue heuristic: a pixel is tissue when its saturation exceeds
/// `sat_min` and its value is below `val_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub sat_min: f64,
    pub val_max: f64,
    pub tissue_fraction_min: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            sat_min: 0.05,
            val_max: 0.95,
            tissue_fraction_min: 0.25,
        }
    }
}

#[inline]
pub fn is_tissue_pixel(px: [u8; 3], params: &FilterParams) -> bool {
    let max = px[0].max(px[1]).max(px[2]) as f64;
    let min = px[0].min(px[1]).min(px[2]) as f64;
    let value = max / 255.0;
    let saturation = if max == 0.0 { 0.0 } else { (max - min) / max };
    saturation > params.sat_min && value < params.val_max
}

pub fn tissue_fraction(block: &PixelBlock, params: &FilterParams) -> f64 {
    let total = block.width as usize * block.height as usize;
    if total == 0 {
        return 0.0;
    }
    let tissue = block.pixels().filter(|&p| is_tissue_pixel(p, params)).count();
    tissue as f64 / total as f64
}

/// Returns true if the patch has enough tissue to keep.
pub fn background_filter(block: &PixelBlock, params: &FilterParams) -> bool {
    tissue_fraction(block, params) >= params.tissue_fraction_min
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_patch_is_rejected() {
        let b = PixelBlock::filled(32, 32, [255, 255, 255]);
        assert!(!background_filter(&b, &FilterParams::default()));
    }

    #[test]
    fn pink_patch_is_kept() {
        let b = PixelBlock::filled(32, 32, [220, 120, 170]);
        assert_eq!(tissue_fraction(&b, &FilterParams::default()), 1.0);
        assert!(background_filter(&b, &FilterParams::default()));
    }

    #[test]
    fn half_tissue_patch_is_kept() {
        let mut b = PixelBlock::filled(32, 32, [255, 255, 255]);
        for y in 0..16 {
            for x in 0..32 {
                b.set_pixel(x, y, [220, 120, 170]);
            }
        }
        assert_eq!(tissue_fraction(&b, &FilterParams::default()), 0.5);
        assert!(background_filter(&b, &FilterParams::default()));
    }

    #[test]
    fn black_pixels_are_not_tissue() {
        assert!(!is_tissue_pixel([0, 0, 0], &FilterParams::default()));
    }
}

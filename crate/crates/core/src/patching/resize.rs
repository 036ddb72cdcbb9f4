use crate::slide_io::PixelBlock;
use crate::{Error, Result};

/// Bilinear resize of a square patch using pixel-centre alignment.
pub fn resize_patch(block: &PixelBlock, out_size: u32) -> Result<PixelBlock> {
    if block.width != block.height {
        return Err(Error::Shape(format!(
            "resize expects a square patch, got {}x{}",
            block.width, block.height
        )));
    }
    if out_size == 0 || block.width == 0 {
        return Err(Error::Shape("resize to or from an empty patch".into()));
    }
    if out_size == block.width {
        return Ok(block.clone());
    }
    let src = block.width as usize;
    let scale = src as f64 / out_size as f64;
    let taps: Vec<(usize, usize, f32)> = (0..out_size as usize)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect();
    let mut out = PixelBlock::new(out_size, out_size);
    let stride = src * 3;
    for (oy, &(y0, y1, fy)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in taps.iter().enumerate() {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let at = |y: usize, x: usize| block.data[y * stride + x * 3 + c] as f32;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                *v = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(ox as u32, oy as u32, px);
        }
    }
    Ok(out)
}

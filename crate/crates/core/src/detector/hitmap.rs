use std::fmt::Write as _;
use std::path::Path;

use crate::nn::{block_to_chw, ProbModel, Tensor};
use crate::patching::{background_filter, resize_patch, FilterParams, PatchGeometry};
use crate::slide_io::{PixelBlock, SlideSource};
use crate::{Error, Result};

/// Thumbnail pixels per grid cell in the overlay.
const CELL_PX: u32 = 8;

/// Per-cell cancer probability over a slide; NaN marks background cells.
#[derive(Debug, Clone)]
pub struct Hitmap {
    pub rows: usize,
    pub cols: usize,
    pub stride: u32,
    pub window: u32,
    pub values: Vec<f64>,
    thumbnail: PixelBlock,
}

impl Hitmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn to_csv(&self, header: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = header {
            let _ = writeln!(out, "# {h}");
        }
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| {
                    let v = self.get(r, c);
                    if v.is_nan() {
                        "NaN".to_string()
                    } else {
                        format!("{v:.6}")
                    }
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path, header: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_csv(header)).map_err(|e| Error::io(path, e))
    }

    /// Slide thumbnail with probabilities blended in as heat colours.
    pub fn overlay(&self) -> image::RgbImage {
        let mut img = self.thumbnail.to_image();
        for (x, y, px) in img.enumerate_pixels_mut() {
            let (r, c) = ((y / CELL_PX) as usize, (x / CELL_PX) as usize);
            let v = self.get(r, c);
            if v.is_nan() {
                continue;
            }
            let heat = heat_colour(v);
            for ch in 0..3 {
                px.0[ch] = ((px.0[ch] as f64 + heat[ch] as f64) / 2.0).round() as u8;
            }
        }
        img
    }
}

/// Blue through green to red.
pub(crate) fn heat_colour(p: f64) -> [u8; 3] {
    let p = p.clamp(0.0, 1.0);
    [
        (255.0 * (2.0 * p).min(1.0)) as u8,
        (255.0 * (1.0 - (2.0 * p - 1.0).abs())) as u8,
        (255.0 * (1.0 - 2.0 * p).max(0.0)) as u8,
    ]
}

/// Scores the grid cell at `(j * stride, i * stride)` for every row `i` and
/// column `j`, shifting edge windows back inside the slide. The score is the
/// probability mass outside class 0, i.e. the positive-class probability for
/// a binary detector.
pub fn generate_hitmap(
    slide: &dyn SlideSource,
    model: &mut dyn ProbModel,
    geometry: PatchGeometry,
    stride: u32,
    filter: &FilterParams,
) -> Result<Hitmap> {
    if stride == 0 {
        return Err(Error::Config("hit-map stride must be > 0".into()));
    }
    let window = geometry.window_for(slide.base_magnification());
    let (w, h) = (slide.width(), slide.height());
    if window > w || window > h {
        return Err(Error::Shape(format!("slide {w}x{h} smaller than patch window {window}")));
    }
    let rows = (h / stride) as usize;
    let cols = (w / stride) as usize;
    let mut values = vec![f64::NAN; rows * cols];
    let mut thumbnail = PixelBlock::new(cols as u32 * CELL_PX, rows as u32 * CELL_PX);
    let mut pending: Vec<(usize, Vec<f32>)> = Vec::new();
    let s = model.input_size();

    let mut flush = |pending: &mut Vec<(usize, Vec<f32>)>, values: &mut Vec<f64>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let refs: Vec<&[f32]> = pending.iter().map(|(_, v)| v.as_slice()).collect();
        let probs = model.predict_proba(&Tensor::stack(&refs, &[3, s, s])?)?;
        for ((cell, _), p) in pending.iter().zip(probs) {
            values[*cell] = 1.0 - p[0];
        }
        pending.clear();
        Ok(())
    };

    for r in 0..rows {
        for c in 0..cols {
            let x = (c as u32 * stride).min(w - window);
            let y = (r as u32 * stride).min(h - window);
            let block = slide.read_region(x, y, window, window)?;
            let thumb = resize_patch(&block, CELL_PX)?;
            for ty in 0..CELL_PX {
                for tx in 0..CELL_PX {
                    thumbnail.set_pixel(c as u32 * CELL_PX + tx, r as u32 * CELL_PX + ty, thumb.pixel(tx, ty));
                }
            }
            if !background_filter(&block, filter) {
                continue;
            }
            pending.push((r * cols + c, block_to_chw(&resize_patch(&block, s as u32)?)));
            if pending.len() >= 64 {
                flush(&mut pending, &mut values)?;
            }
        }
    }
    flush(&mut pending, &mut values)?;
    Ok(Hitmap {
        rows,
        cols,
        stride,
        window,
        values,
        thumbnail,
    })
}

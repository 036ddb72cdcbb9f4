//! Deterministic procedural slides with known cancer regions.
//!
//! Pixels are computed on demand from the spec and seed, so arbitrarily large
//! slides cost nothing until a region is read. Normal tissue is smooth,
//! low-frequency texture in a pink band; cancer is busier texture with denser
//! nuclei in a hue band that depends on the subtype; background is near-white.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_window, AnnotationSet, PixelBlock, PointAnnotation, Polarity, Polygon, RegionAnnotation, SlideDims,
    SlideSource, Subtype,
};
use crate::{Error, Result};

/// Appearance of one tissue class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Base hue in degrees.
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    /// Wavelength of the dominant value noise, in base pixels.
    pub wavelength: f64,
    /// Amplitude of the brightness/saturation noise.
    pub contrast: f64,
    /// Nucleus lattice spacing in base pixels.
    pub nucleus_spacing: f64,
    pub nucleus_radius: f64,
    /// Probability that a lattice cell holds a nucleus.
    pub nucleus_density: f64,
}

impl TextureParams {
    pub fn normal() -> Self {
        TextureParams {
            hue: 335.0,
            saturation: 0.30,
            value: 0.82,
            wavelength: 40.0,
            contrast: 0.10,
            nucleus_spacing: 18.0,
            nucleus_radius: 2.5,
            nucleus_density: 0.25,
        }
    }

    pub fn cancer(subtype: Subtype) -> Self {
        match subtype {
            Subtype::Clear => TextureParams {
                hue: 320.0,
                saturation: 0.20,
                value: 0.86,
                wavelength: 10.0,
                contrast: 0.22,
                nucleus_spacing: 12.0,
                nucleus_radius: 2.5,
                nucleus_density: 0.55,
            },
            Subtype::Papillary => TextureParams {
                hue: 285.0,
                saturation: 0.45,
                value: 0.62,
                wavelength: 7.0,
                contrast: 0.25,
                nucleus_spacing: 10.0,
                nucleus_radius: 3.0,
                nucleus_density: 0.70,
            },
            Subtype::Chromophobe => TextureParams {
                hue: 305.0,
                saturation: 0.38,
                value: 0.74,
                wavelength: 14.0,
                contrast: 0.18,
                nucleus_spacing: 14.0,
                nucleus_radius: 3.5,
                nucleus_density: 0.45,
            },
        }
    }
}

fn default_magnification() -> f64 {
    40.0
}
fn default_radius() -> [u32; 2] {
    [150, 400]
}
fn default_vertices() -> usize {
    16
}
fn default_tissue_fraction() -> f64 {
    0.85
}
fn default_scale() -> f64 {
    1.0
}
fn default_jitter() -> f64 {
    10.0
}
fn default_points() -> usize {
    5
}
fn default_normal() -> TextureParams {
    TextureParams::normal()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlideSpec {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_magnification")]
    pub base_magnification: f64,
    pub diagnosis: Subtype,
    #[serde(default)]
    pub num_regions: usize,
    /// Min/max radius of generated regions in base pixels.
    #[serde(default = "default_radius")]
    pub region_radius: [u32; 2],
    #[serde(default = "default_vertices")]
    pub region_vertices: usize,
    /// Explicit regions; replaces random generation when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<Polygon>>,
    /// Tissue ellipse semi-axes as a fraction of the half-dimensions.
    #[serde(default = "default_tissue_fraction")]
    pub tissue_fraction: f64,
    /// Multiplier on all texture length scales.
    #[serde(default = "default_scale")]
    pub texture_scale: f64,
    /// Max per-slide hue shift in degrees (stain variation).
    #[serde(default = "default_jitter")]
    pub stain_jitter: f64,
    #[serde(default = "default_points")]
    pub points_per_class: usize,
    #[serde(default = "default_normal")]
    pub normal_texture: TextureParams,
    /// Defaults to the diagnosis' cancer texture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancer_texture: Option<TextureParams>,
    pub seed: u64,
}

impl SyntheticSlideSpec {
    pub fn new(slide_id: impl Into<String>, width: u32, height: u32, diagnosis: Subtype, seed: u64) -> Self {
        SyntheticSlideSpec {
            slide_id: slide_id.into(),
            width,
            height,
            base_magnification: default_magnification(),
            diagnosis,
            num_regions: 0,
            region_radius: default_radius(),
            region_vertices: default_vertices(),
            regions: None,
            tissue_fraction: default_tissue_fraction(),
            texture_scale: default_scale(),
            stain_jitter: default_jitter(),
            points_per_class: default_points(),
            normal_texture: TextureParams::normal(),
            cancer_texture: None,
            seed,
        }
    }

    pub fn cancer_params(&self) -> TextureParams {
        self.cancer_texture.unwrap_or_else(|| TextureParams::cancer(self.diagnosis))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TissueClass {
    Background,
    Normal,
    Cancer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stain {
    hue_shift: f64,
    saturation_scale: f64,
    value_shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TissueEllipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    phase: [f64; 2],
}

impl TissueEllipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        let r2 = dx * dx + dy * dy;
        if r2 < 0.7 {
            return true;
        }
        if r2 > 1.3 * 1.3 {
            return false;
        }
        let theta = dy.atan2(dx);
        let limit = 1.0 + 0.08 * (3.0 * theta + self.phase[0]).sin() + 0.05 * (5.0 * theta + self.phase[1]).sin();
        r2 <= limit * limit
    }
}

/// A procedural slide plus its exact ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    spec: SyntheticSlideSpec,
    regions: RegionAnnotation,
    bboxes: Vec<(i64, i64, i64, i64)>,
    points: AnnotationSet,
    ellipse: TissueEllipse,
    stain: Stain,
    normal: TextureParams,
    cancer: TextureParams,
}

/// Generates the slide, its region ground truth and suggested point
/// annotations (`points_per_class` inside regions, as many in normal tissue).
pub fn generate_synthetic_slide(spec: &SyntheticSlideSpec) -> Result<SyntheticSlide> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("synthetic slide must have non-zero dimensions".into()));
    }
    let dims = SlideDims {
        width: spec.width,
        height: spec.height,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = spec.stain_jitter.abs();
    let stain = Stain {
        hue_shift: if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 },
        saturation_scale: rng.random_range(0.85..1.15),
        value_shift: rng.random_range(-0.04..0.04),
    };
    let (w, h) = (spec.width as f64, spec.height as f64);
    let ellipse = TissueEllipse {
        cx: w / 2.0 + rng.random_range(-0.03..0.03) * w,
        cy: h / 2.0 + rng.random_range(-0.03..0.03) * h,
        ax: spec.tissue_fraction * w / 2.0,
        ay: spec.tissue_fraction * h / 2.0,
        phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
    };

    let polygons = match &spec.regions {
        Some(explicit) => explicit.clone(),
        None => random_regions(spec, &ellipse, &mut rng)?,
    };
    let regions = RegionAnnotation::new(spec.slide_id.clone(), polygons);
    regions.validate(Some(dims))?;
    let bboxes = regions.polygons.iter().map(Polygon::bbox).collect();

    let mut slide = SyntheticSlide {
        spec: spec.clone(),
        regions,
        bboxes,
        points: AnnotationSet::new(spec.slide_id.clone(), Vec::new()),
        ellipse,
        stain,
        normal: spec.normal_texture,
        cancer: spec.cancer_params(),
    };
    slide.points = slide.sample_points(&mut rng);
    Ok(slide)
}

fn random_regions(spec: &SyntheticSlideSpec, ellipse: &TissueEllipse, rng: &mut ChaCha8Rng) -> Result<Vec<Polygon>> {
    let [rmin, rmax] = spec.region_radius;
    if spec.num_regions == 0 {
        return Ok(Vec::new());
    }
    if rmin == 0 || rmin > rmax || 2 * rmax as u64 >= spec.width.min(spec.height) as u64 {
        return Err(Error::Config(format!(
            "region radius range {rmin}..{rmax} does not fit a {}x{} slide",
            spec.width, spec.height
        )));
    }
    let n = spec.region_vertices.max(3);
    let mut out = Vec::with_capacity(spec.num_regions);
    let mut attempts = 0;
    while out.len() < spec.num_regions {
        attempts += 1;
        if attempts > 1000 * spec.num_regions {
            return Err(Error::Config("could not place synthetic regions".into()));
        }
        let r = rng.random_range(rmin as f64..=rmax as f64);
        // centre within the tissue ellipse, region fully inside the slide
        let t = rng.random_range(0.0..TAU);
        let d = rng.random_range(0.0..0.75f64).sqrt();
        let cx = (ellipse.cx + d * ellipse.ax * t.cos()).clamp(r + 1.0, spec.width as f64 - r - 1.0);
        let cy = (ellipse.cy + d * ellipse.ay * t.sin()).clamp(r + 1.0, spec.height as f64 - r - 1.0);
        let offset = rng.random_range(0.0..TAU);
        let verts: Vec<[i64; 2]> = (0..n)
            .map(|i| {
                let a = offset + TAU * (i as f64 + rng.random_range(-0.3..0.3)) / n as f64;
                let rr = r * rng.random_range(0.7..1.0);
                [(cx + rr * a.cos()).round() as i64, (cy + rr * a.sin()).round() as i64]
            })
            .collect();
        if let Ok(p) = Polygon::new(verts) {
            out.push(p);
        }
    }
    Ok(out)
}

impl SyntheticSlide {
    pub fn spec(&self) -> &SyntheticSlideSpec {
        &self.spec
    }

    pub fn regions(&self) -> &RegionAnnotation {
        &self.regions
    }

    pub fn suggested_points(&self) -> &AnnotationSet {
        &self.points
    }

    pub fn diagnosis(&self) -> Subtype {
        self.spec.diagnosis
    }

    pub fn in_cancer(&self, x: i64, y: i64) -> bool {
        self.regions
            .polygons
            .iter()
            .zip(&self.bboxes)
            .any(|(p, b)| x >= b.0 && x <= b.2 && y >= b.1 && y <= b.3 && p.contains(x, y))
    }

    /// Ground-truth class of a base pixel.
    pub fn tissue_class(&self, x: i64, y: i64) -> TissueClass {
        if self.in_cancer(x, y) {
            TissueClass::Cancer
        } else if self.ellipse.contains(x as f64 + 0.5, y as f64 + 0.5) {
            TissueClass::Normal
        } else {
            TissueClass::Background
        }
    }

    /// Fraction of non-background pixels in a window according to the
    /// generator's mask.
    pub fn tissue_fraction(&self, x: u32, y: u32, w: u32, h: u32) -> f64 {
        let mut tissue = 0usize;
        for yy in y..y + h {
            for xx in x..x + w {
                if self.tissue_class(xx as i64, yy as i64) != TissueClass::Background {
                    tissue += 1;
                }
            }
        }
        tissue as f64 / (w as f64 * h as f64)
    }

    /// Texture parameters after the per-slide stain shift.
    pub fn effective_texture(&self, class: TissueClass) -> Option<TextureParams> {
        let base = match class {
            TissueClass::Background => return None,
            TissueClass::Normal => self.normal,
            TissueClass::Cancer => self.cancer,
        };
        Some(TextureParams {
            hue: (base.hue + self.stain.hue_shift).rem_euclid(360.0),
            saturation: base.saturation * self.stain.saturation_scale,
            value: base.value + self.stain.value_shift,
            ..base
        })
    }

    /// Colour of a single base pixel.
    pub fn pixel(&self, x: i64, y: i64) -> [u8; 3] {
        let class = self.tissue_class(x, y);
        let seed = self.spec.seed;
        let scale = self.spec.texture_scale.max(1e-6);
        let (xf, yf) = (x as f64, y as f64);
        let Some(tex) = self.effective_texture(class) else {
            let n = value_noise(xf, yf, 24.0 * scale, seed ^ 0xB6);
            return hsv_to_rgb(30.0, 0.01 + 0.02 * n, 0.965 + 0.02 * n);
        };
        let salt = match class {
            TissueClass::Cancer => 0xC0,
            _ => 0x40,
        };
        let coarse = value_noise(xf, yf, tex.wavelength * scale, seed ^ salt);
        let fine = value_noise(xf, yf, (tex.wavelength / 3.0).max(1.5) * scale, seed ^ (salt + 1));
        let spacing = tex.nucleus_spacing * scale;
        let radius = tex.nucleus_radius * scale;
        if in_nucleus(xf, yf, spacing, radius, tex.nucleus_density, seed ^ (salt + 2)) {
            let v = (0.32 + 0.06 * (fine - 0.5) + self.stain.value_shift).clamp(0.2, 0.5);
            return hsv_to_rgb(265.0 + self.stain.hue_shift, 0.55, v);
        }
        let hue = tex.hue + 8.0 * (coarse - 0.5);
        let sat = (tex.saturation + 0.5 * tex.contrast * (coarse - 0.5)).clamp(0.12, 0.95);
        let val = (tex.value + tex.contrast * (0.6 * (fine - 0.5) + 0.4 * (coarse - 0.5))).clamp(0.25, 0.90);
        hsv_to_rgb(hue, sat, val)
    }

    /// Renders the whole slide into memory.
    pub fn render(&self) -> image::RgbImage {
        let block = self
            .read_region(0, 0, self.spec.width, self.spec.height)
            .expect("full window is in bounds");
        block.to_image()
    }

    fn sample_points(&self, rng: &mut ChaCha8Rng) -> AnnotationSet {
        let mut points = Vec::new();
        let n = self.spec.points_per_class;
        let polys = &self.regions.polygons;
        if !polys.is_empty() {
            for k in 0..n {
                let idx = k % polys.len();
                let (x0, y0, x1, y1) = polys[idx].bbox();
                let x1 = x1.min(self.spec.width as i64 - 1);
                let y1 = y1.min(self.spec.height as i64 - 1);
                for _ in 0..10_000 {
                    let x = rng.random_range(x0..=x1);
                    let y = rng.random_range(y0..=y1);
                    if polys[idx].contains(x, y) {
                        points.push(PointAnnotation {
                            x,
                            y,
                            polarity: Polarity::Positive,
                        });
                        break;
                    }
                }
            }
        }
        let mut placed = 0;
        for _ in 0..100_000 {
            if placed == n {
                break;
            }
            let x = rng.random_range(0..self.spec.width as i64);
            let y = rng.random_range(0..self.spec.height as i64);
            if self.tissue_class(x, y) == TissueClass::Normal {
                points.push(PointAnnotation {
                    x,
                    y,
                    polarity: Polarity::Negative,
                });
                placed += 1;
            }
        }
        if placed < n {
            log::warn!("slide {}: only placed {placed} of {n} negative points", self.spec.slide_id);
        }
        AnnotationSet::new(self.spec.slide_id.clone(), points)
    }
}

impl SlideSource for SyntheticSlide {
    fn slide_id(&self) -> &str {
        &self.spec.slide_id
    }

    fn width(&self) -> u32 {
        self.spec.width
    }

    fn height(&self) -> u32 {
        self.spec.height
    }

    fn base_magnification(&self) -> f64 {
        self.spec.base_magnification
    }

    fn read_region(&self, x: u32, y: u32, w: u32, h: u32) -> Result<PixelBlock> {
        check_window(self.dims(), x, y, w, h)?;
        let mut block = PixelBlock::new(w, h);
        for dy in 0..h {
            for dx in 0..w {
                block.set_pixel(dx, dy, self.pixel((x + dx) as i64, (y + dy) as i64));
            }
        }
        Ok(block)
    }
}

#[inline]
fn hash3(a: i64, b: i64, seed: u64) -> u64 {
    let mut z = seed
        .wrapping_add((a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in [0, 1).
fn value_noise(x: f64, y: f64, wavelength: f64, seed: u64) -> f64 {
    let fx = x / wavelength;
    let fy = y / wavelength;
    let (ix, iy) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - ix, fy - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let sx = tx * tx * (3.0 - 2.0 * tx);
    let sy = ty * ty * (3.0 - 2.0 * ty);
    let v00 = unit(hash3(ix, iy, seed));
    let v10 = unit(hash3(ix + 1, iy, seed));
    let v01 = unit(hash3(ix, iy + 1, seed));
    let v11 = unit(hash3(ix + 1, iy + 1, seed));
    let top = v00 + sx * (v10 - v00);
    let bottom = v01 + sx * (v11 - v01);
    top + sy * (bottom - top)
}

/// Nuclei sit at most one per lattice cell and never cross the cell edge.
fn in_nucleus(x: f64, y: f64, spacing: f64, radius: f64, density: f64, seed: u64) -> bool {
    if spacing <= 2.0 * radius {
        return false;
    }
    let (cx, cy) = ((x / spacing).floor(), (y / spacing).floor());
    let h = hash3(cx as i64, cy as i64, seed);
    if unit(h) >= density {
        return false;
    }
    let slack = spacing / 2.0 - radius;
    let jx = (unit(hash3(cx as i64, cy as i64, seed ^ 0x11)) * 2.0 - 1.0) * slack;
    let jy = (unit(hash3(cx as i64, cy as i64, seed ^ 0x22)) * 2.0 - 1.0) * slack;
    let ox = cx * spacing + spacing / 2.0 + jx;
    let oy = cy * spacing + spacing / 2.0 + jy;
    let (dx, dy) = (x + 0.5 - ox, y + 0.5 - oy);
    dx * dx + dy * dy <= radius * radius
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

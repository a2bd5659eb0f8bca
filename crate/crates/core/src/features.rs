//! Region descriptors from average-pooling pyramids.
//!
//! Two extraction strategies produce the same G x G x C descriptor shape so a
//! single Q-network can consume either:
//!
//! * [`extract_zoom`] pools the full-resolution pixels under the region into a
//!   fresh G x G grid every time — the effective source resolution is always
//!   G x G no matter how small the region is.
//! * [`extract_crop`] reuses feature maps pooled once per image at two
//!   strides, crops the cells overlapping the region, and resamples the crop
//!   to G x G. Small regions cover few source cells, so their descriptors are
//!   upsamples of a lower-resolution source.
//!
//! Pixel membership is by pixel center; bilinear resampling is corner-aligned
//! so a crop that is already G x G passes through exactly.

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Row-major, channel-interleaved intensity raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl ImageRaster {
    pub const MIN_SIDE: usize = 16;

    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width < Self::MIN_SIDE || height < Self::MIN_SIDE {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height} below minimum side {}",
                Self::MIN_SIDE
            )));
        }
        if channels == 0 || data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "raster data length {} != {width}*{height}*{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::ShapeMismatch("raster values outside [0,1]".into()));
        }
        Ok(ImageRaster { width, height, channels, data })
    }

    /// Normalizes 8-bit samples to [0, 1].
    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(width, height, channels, data)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn bounds(&self) -> BBox {
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: self.width as f64,
            y1: self.height as f64,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// G x G x C feature grid, flattened row-major as [row][col][channel].
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub grid: usize,
    pub channels: usize,
    values: Vec<f32>,
}

impl Descriptor {
    fn new(grid: usize, channels: usize, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), grid * grid * channels);
        Descriptor { grid, channels, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, c: usize) -> f32 {
        self.values[(row * self.grid + col) * self.channels + c]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// One average-pooled map: cell (mx, my) is the mean of the stride x stride
/// pixel block under it (edge cells pool the remainder).
#[derive(Debug, Clone)]
pub struct PooledMap {
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl PooledMap {
    fn build(image: &ImageRaster, stride: usize) -> Self {
        let width = image.width.div_ceil(stride);
        let height = image.height.div_ceil(stride);
        let channels = image.channels;
        let mut data = vec![0.0f32; width * height * channels];
        for my in 0..height {
            let py0 = my * stride;
            let py1 = ((my + 1) * stride).min(image.height);
            for mx in 0..width {
                let px0 = mx * stride;
                let px1 = ((mx + 1) * stride).min(image.width);
                let count = ((py1 - py0) * (px1 - px0)) as f64;
                for c in 0..channels {
                    let mut sum = 0.0f64;
                    for py in py0..py1 {
                        for px in px0..px1 {
                            sum += image.get(px, py, c) as f64;
                        }
                    }
                    data[(my * width + mx) * channels + c] = (sum / count) as f32;
                }
            }
        }
        PooledMap { stride, width, height, channels, data }
    }

    #[inline]
    pub fn get(&self, mx: usize, my: usize, c: usize) -> f32 {
        self.data[(my * self.width + mx) * self.channels + c]
    }
}

/// Shallow and deep pooled maps for one image, computed once and reused for
/// every region the agent visits.
#[derive(Debug, Clone)]
pub struct FeatureMapSet {
    pub shallow: PooledMap,
    pub deep: PooledMap,
    pub image_width: usize,
    pub image_height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Shallow,
    Deep,
}

/// Pools the image once at each stride. `s1 < s2` required.
pub fn precompute_maps(image: &ImageRaster, s1: usize, s2: usize) -> Result<FeatureMapSet> {
    if s1 == 0 || s1 >= s2 {
        return Err(Error::ShapeMismatch(format!(
            "strides must satisfy 0 < s1 < s2, got {s1}, {s2}"
        )));
    }
    Ok(FeatureMapSet {
        shallow: PooledMap::build(image, s1),
        deep: PooledMap::build(image, s2),
        image_width: image.width,
        image_height: image.height,
    })
}

fn clip_to(region: &BBox, width: usize, height: usize) -> Result<BBox> {
    let bounds = BBox { x0: 0.0, y0: 0.0, x1: width as f64, y1: height as f64 };
    region.intersect(&bounds).ok_or(Error::DegenerateRegion)
}

/// Index range of pixels whose centers fall in [a, b), clamped to [0, n).
#[inline]
fn center_range(a: f64, b: f64, n: usize) -> (i64, i64) {
    // center px + 0.5 in [a, b)  <=>  px in [a - 0.5, b - 0.5)
    let first = (a - 0.5).ceil() as i64;
    let last = (b - 0.5).ceil() as i64 - 1;
    (first.max(0), last.min(n as i64 - 1))
}

/// Fresh G x G pooling of the pixels under `region`, recomputed from the full
/// resolution image. Cells that trap no pixel center fall back to the pixel
/// containing the cell center.
pub fn extract_zoom(image: &ImageRaster, region: &BBox, grid: usize) -> Result<Descriptor> {
    let r = clip_to(region, image.width, image.height)?;
    let channels = image.channels;
    let mut values = vec![0.0f32; grid * grid * channels];
    let cell_w = r.width() / grid as f64;
    let cell_h = r.height() / grid as f64;
    for gy in 0..grid {
        let ay = r.y0 + gy as f64 * cell_h;
        let by = if gy + 1 == grid { r.y1 } else { r.y0 + (gy + 1) as f64 * cell_h };
        let (fy, ly) = center_range(ay, by, image.height);
        for gx in 0..grid {
            let ax = r.x0 + gx as f64 * cell_w;
            let bx = if gx + 1 == grid { r.x1 } else { r.x0 + (gx + 1) as f64 * cell_w };
            let (fx, lx) = center_range(ax, bx, image.width);
            let base = (gy * grid + gx) * channels;
            if fy > ly || fx > lx {
                // tiny region: sample the pixel under the cell center
                let cx = (((ax + bx) * 0.5).floor() as i64).clamp(0, image.width as i64 - 1);
                let cy = (((ay + by) * 0.5).floor() as i64).clamp(0, image.height as i64 - 1);
                for c in 0..channels {
                    values[base + c] = image.get(cx as usize, cy as usize, c);
                }
                continue;
            }
            let count = ((ly - fy + 1) * (lx - fx + 1)) as f64;
            for c in 0..channels {
                let mut sum = 0.0f64;
                for py in fy..=ly {
                    for px in fx..=lx {
                        sum += image.get(px as usize, py as usize, c) as f64;
                    }
                }
                values[base + c] = (sum / count) as f32;
            }
        }
    }
    Ok(Descriptor::new(grid, channels, values))
}

/// Map choice plus the inclusive cell ranges the clipped region overlaps.
fn select_crop(
    maps: &FeatureMapSet,
    region: &BBox,
    grid: usize,
) -> Result<(MapKind, usize, usize, usize, usize)> {
    let r = clip_to(region, maps.image_width, maps.image_height)?;
    let kind = if r.shorter_side() >= (grid * maps.deep.stride) as f64 {
        MapKind::Deep
    } else {
        MapKind::Shallow
    };
    let map = match kind {
        MapKind::Deep => &maps.deep,
        MapKind::Shallow => &maps.shallow,
    };
    let s = map.stride as f64;
    let kx0 = ((r.x0 / s).floor() as i64).clamp(0, map.width as i64 - 1) as usize;
    let kx1 = (((r.x1 / s).ceil() as i64) - 1).clamp(kx0 as i64, map.width as i64 - 1) as usize;
    let ky0 = ((r.y0 / s).floor() as i64).clamp(0, map.height as i64 - 1) as usize;
    let ky1 = (((r.y1 / s).ceil() as i64) - 1).clamp(ky0 as i64, map.height as i64 - 1) as usize;
    Ok((kind, kx0, kx1, ky0, ky1))
}

/// Which map the scale rule picks for this region.
pub fn selected_map(maps: &FeatureMapSet, region: &BBox, grid: usize) -> Result<MapKind> {
    select_crop(maps, region, grid).map(|(kind, ..)| kind)
}

/// Number of source map cells the region overlaps under the selected map.
/// The zoom extractor has no analog: its source grid is G x G by construction.
pub fn effective_source_cells(maps: &FeatureMapSet, region: &BBox, grid: usize) -> Result<usize> {
    let (_, kx0, kx1, ky0, ky1) = select_crop(maps, region, grid)?;
    Ok((kx1 - kx0 + 1) * (ky1 - ky0 + 1))
}

/// Crops the overlapped cells from the selected map and resamples them to
/// G x G with corner-aligned bilinear interpolation. Crops smaller than
/// G x G come out as upsamples of a lower-resolution source.
pub fn extract_crop(maps: &FeatureMapSet, region: &BBox, grid: usize) -> Result<Descriptor> {
    let (kind, kx0, kx1, ky0, ky1) = select_crop(maps, region, grid)?;
    let map = match kind {
        MapKind::Deep => &maps.deep,
        MapKind::Shallow => &maps.shallow,
    };
    let crop_w = kx1 - kx0 + 1;
    let crop_h = ky1 - ky0 + 1;
    let channels = map.channels;
    let mut values = vec![0.0f32; grid * grid * channels];
    for gy in 0..grid {
        let sy = if grid > 1 && crop_h > 1 {
            gy as f64 * (crop_h - 1) as f64 / (grid - 1) as f64
        } else {
            0.0
        };
        let i0 = sy.floor() as usize;
        let i1 = (i0 + 1).min(crop_h - 1);
        let ty = sy - i0 as f64;
        for gx in 0..grid {
            let sx = if grid > 1 && crop_w > 1 {
                gx as f64 * (crop_w - 1) as f64 / (grid - 1) as f64
            } else {
                0.0
            };
            let j0 = sx.floor() as usize;
            let j1 = (j0 + 1).min(crop_w - 1);
            let tx = sx - j0 as f64;
            let base = (gy * grid + gx) * channels;
            for c in 0..channels {
                let v00 = map.get(kx0 + j0, ky0 + i0, c) as f64;
                let v01 = map.get(kx0 + j1, ky0 + i0, c) as f64;
                let v10 = map.get(kx0 + j0, ky0 + i1, c) as f64;
                let v11 = map.get(kx0 + j1, ky0 + i1, c) as f64;
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                values[base + c] = (top + (bot - top) * ty) as f32;
            }
        }
    }
    Ok(Descriptor::new(grid, channels, values))
}

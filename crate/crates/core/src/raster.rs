//! RGB images in network range `[-1, 1]`, PNG I/O and grid export.

use crate::error::{Error, Result};
use crate::nn::{CropResize, CropWindow, Maps};
use crate::toyset::Attributes;
use std::path::Path;

pub const CHANNELS: usize = 3;

/// Square RGB image, HWC layout, values in `[-1, 1]`.
///
/// `attrs` carries the ground-truth attributes of a toy rendering; generated
/// or loaded-without-manifest images have none.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub side: usize,
    pub pixels: Vec<f32>,
    pub attrs: Option<Attributes>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != side * side * CHANNELS {
            return Err(Error::dim(side * side * CHANNELS, pixels.len()));
        }
        Ok(Self { side, pixels, attrs: None })
    }

    pub fn filled(side: usize, value: f32) -> Self {
        Self { side, pixels: vec![value; side * side * CHANNELS], attrs: None }
    }

    pub fn with_attrs(mut self, attrs: Attributes) -> Self {
        self.attrs = Some(attrs);
        self
    }

    /// Crop a square window and resize it bilinearly to `out x out`.
    /// Attributes are carried over.
    pub fn crop_resize(&self, window: CropWindow, out: usize) -> Image {
        let maps = self.to_maps::<f32>();
        let y = CropResize::new(vec![window], out).forward(&maps);
        Image { side: out, pixels: y.to_hwc(0), attrs: self.attrs }
    }

    pub fn to_maps<R: crate::nn::Real>(&self) -> Maps<R> {
        Maps::from_hwc(&[&self.pixels], CHANNELS, self.side, self.side)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(side: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
        Image::new(side, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let side = self.side as u32;
        image::save_buffer(path, &self.to_rgb8(), side, side, image::ColorType::Rgb8)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::Data(format!("{} is not square ({w}x{h})", path.display())));
        }
        Image::from_rgb8(w as usize, img.as_raw())
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Stack images into `(3, B, side, side)` maps.
pub fn batch_to_maps<R: crate::nn::Real>(images: &[&Image]) -> Result<Maps<R>> {
    let side = images.first().map(|i| i.side).ok_or_else(|| Error::Data("empty image batch".into()))?;
    if let Some(bad) = images.iter().find(|i| i.side != side) {
        return Err(Error::dim(side, bad.side));
    }
    let bufs: Vec<&[f32]> = images.iter().map(|i| i.pixels.as_slice()).collect();
    Ok(Maps::from_hwc(&bufs, CHANNELS, side, side))
}

pub fn maps_to_images<R: crate::nn::Real>(maps: &Maps<R>) -> Vec<Image> {
    (0..maps.b)
        .map(|b| Image { side: maps.w, pixels: maps.to_hwc(b), attrs: None })
        .collect()
}

/// Write images as a PNG grid with `cols` columns (1px dark gutter).
pub fn save_grid(images: &[Image], cols: usize, path: &Path) -> Result<()> {
    let side = images.first().map(|i| i.side).ok_or_else(|| Error::Data("no images to write".into()))?;
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * (side + 1) + 1, rows * (side + 1) + 1);
    let mut buf = vec![0u8; gw * gh * CHANNELS];
    for (n, img) in images.iter().enumerate() {
        let (r, c) = (n / cols, n % cols);
        let (oy, ox) = (1 + r * (side + 1), 1 + c * (side + 1));
        let rgb = img.to_rgb8();
        for y in 0..side {
            let dst = ((oy + y) * gw + ox) * CHANNELS;
            buf[dst..dst + side * CHANNELS].copy_from_slice(&rgb[y * side * CHANNELS..(y + 1) * side * CHANNELS]);
        }
    }
    image::save_buffer(path, &buf, gw as u32, gh as u32, image::ColorType::Rgb8)?;
    Ok(())
}

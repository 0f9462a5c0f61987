//! Resize, normalize and pad images into a batch tensor.

use candle_core::{Device, Result, Tensor};
use image::imageops::{self, FilterType};
use image::RgbImage;

use super::config::DetectorParams;

/// Geometry of one image inside a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ImageMeta {
    pub original: (usize, usize),
    /// Resized `(width, height)` before padding.
    pub resized: (usize, usize),
    /// Resized over original, per axis.
    pub scale: (f32, f32),
}

impl ImageMeta {
    pub fn to_resized(&self, b: &[f32; 4]) -> [f32; 4] {
        [b[0] * self.scale.0, b[1] * self.scale.1, b[2] * self.scale.0, b[3] * self.scale.1]
    }

    pub fn to_original(&self, b: &[f32; 4]) -> [f32; 4] {
        [b[0] / self.scale.0, b[1] / self.scale.1, b[2] / self.scale.0, b[3] / self.scale.1]
    }
}

/// Shorter side to `min_size` unless the longer side would exceed `max_size`.
pub(crate) fn resized_dims(width: usize, height: usize, min_size: usize, max_size: usize) -> (usize, usize) {
    let (short, long) = (width.min(height) as f64, width.max(height) as f64);
    let mut scale = min_size as f64 / short;
    if long * scale > max_size as f64 {
        scale = max_size as f64 / long;
    }
    let w = ((width as f64 * scale).round() as usize).max(1);
    let h = ((height as f64 * scale).round() as usize).max(1);
    (w, h)
}

/// Batch tensor `(B, 3, H, W)` with `H` and `W` padded to `size_divisible`.
pub(crate) fn prepare_batch(
    images: &[&RgbImage],
    params: &DetectorParams,
    device: &Device,
) -> Result<(Tensor, Vec<ImageMeta>)> {
    let mut resized = Vec::with_capacity(images.len());
    let mut metas = Vec::with_capacity(images.len());
    for img in images {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (nw, nh) = resized_dims(w, h, params.min_size, params.max_size);
        let r = if (nw, nh) == (w, h) {
            (*img).clone()
        } else {
            imageops::resize(*img, nw as u32, nh as u32, FilterType::Triangle)
        };
        metas.push(ImageMeta {
            original: (w, h),
            resized: (nw, nh),
            scale: (nw as f32 / w as f32, nh as f32 / h as f32),
        });
        resized.push(r);
    }
    let div = params.size_divisible.max(1);
    let pad_w = metas.iter().map(|m| m.resized.0).max().unwrap_or(div).div_ceil(div) * div;
    let pad_h = metas.iter().map(|m| m.resized.1).max().unwrap_or(div).div_ceil(div) * div;
    let plane = pad_h * pad_w;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (b, img) in resized.iter().enumerate() {
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                let v = (px[c] as f32 / 255.0 - params.pixel_mean[c]) / params.pixel_std[c];
                data[(b * 3 + c) * plane + y as usize * pad_w + x as usize] = v;
            }
        }
    }
    let t = Tensor::from_vec(data, (images.len(), 3, pad_h, pad_w), device)?;
    Ok((t, metas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Backbone, DetectorParams};

    #[test]
    fn resize_policy() {
        assert_eq!(resized_dims(128, 128, 128, 256), (128, 128));
        assert_eq!(resized_dims(640, 480, 800, 1333), (1067, 800));
        assert_eq!(resized_dims(4000, 1000, 800, 1333), (1333, 333));
    }

    #[test]
    fn batch_is_padded_and_normalized() {
        let p = DetectorParams::for_backbone(Backbone::CompactFpn);
        let a = RgbImage::from_pixel(128, 128, image::Rgb([255, 0, 0]));
        let b = RgbImage::from_pixel(100, 128, image::Rgb([0, 0, 0]));
        let (t, metas) = prepare_batch(&[&a, &b], &p, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 192, 128]);
        assert_eq!(metas[1].resized, (128, 164));
        let first = t.get(0).unwrap().get(0).unwrap().get(0).unwrap().get(0).unwrap().to_scalar::<f32>().unwrap();
        let padded = t.get(0).unwrap().get(0).unwrap().get(180).unwrap().get(0).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(padded, 0.0);
        assert!((first - (1.0 - 0.485) / 0.229).abs() < 1e-6);
    }
}

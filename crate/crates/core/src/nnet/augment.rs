//! Online geometric augmentation: horizontal flip, crop-zoom and small rotation
//! applied to channel-planar images, with the matching box transform.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::volume::BoundingBox2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_p: f64,
    /// Maximum fraction of each side removed by the random crop (zoom-in).
    pub crop_frac: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, hflip_p: 0.5, crop_frac: 0.1, max_rotation_deg: 10.0 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

/// One sampled transform. Maps output pixel coordinates to input coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    pub scale: f64,
    pub shift: (f64, f64),
    pub angle_rad: f64,
}

impl Augmentation {
    pub const IDENTITY: Self = Self { flip: false, scale: 1.0, shift: (0.0, 0.0), angle_rad: 0.0 };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let flip = rng.random_bool(cfg.hflip_p.clamp(0.0, 1.0));
        let crop = if cfg.crop_frac > 0.0 { rng.random_range(0.0..cfg.crop_frac) } else { 0.0 };
        let scale = 1.0 - crop;
        // The crop window may sit anywhere inside the original frame.
        let slack = crop / 2.0;
        let shift = if slack > 0.0 { (rng.random_range(-slack..slack), rng.random_range(-slack..slack)) } else { (0.0, 0.0) };
        let max = cfg.max_rotation_deg.to_radians();
        let angle_rad = if max > 0.0 { rng.random_range(-max..max) } else { 0.0 };
        Self { flip, scale, shift, angle_rad }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Output point (continuous pixel coordinates) to input point.
    fn to_input(&self, x: f64, y: f64, w: f64, h: f64) -> (f64, f64) {
        let (cx, cy) = (w / 2.0, h / 2.0);
        let (mut dx, dy) = (x - cx, y - cy);
        if self.flip {
            dx = -dx;
        }
        let (s, c) = self.angle_rad.sin_cos();
        let rx = c * dx - s * dy;
        let ry = s * dx + c * dy;
        (cx + rx * self.scale + self.shift.0 * w, cy + ry * self.scale + self.shift.1 * h)
    }

    /// Input point to output point (inverse of `to_input`).
    fn to_output(&self, x: f64, y: f64, w: f64, h: f64) -> (f64, f64) {
        let (cx, cy) = (w / 2.0, h / 2.0);
        let ux = (x - cx - self.shift.0 * w) / self.scale;
        let uy = (y - cy - self.shift.1 * h) / self.scale;
        let (s, c) = self.angle_rad.sin_cos();
        let mut dx = c * ux + s * uy;
        let dy = -s * ux + c * uy;
        if self.flip {
            dx = -dx;
        }
        (cx + dx, cy + dy)
    }

    /// Resamples every `w x h` plane of `image` (bilinear, edge-clamped).
    pub fn apply_image(&self, image: &[f32], w: usize, h: usize) -> Vec<f32> {
        if self.is_identity() {
            return image.to_vec();
        }
        let plane = w * h;
        let mut out = vec![0.0f32; image.len()];
        for oy in 0..h {
            for ox in 0..w {
                let (ix, iy) = self.to_input(ox as f64 + 0.5, oy as f64 + 0.5, w as f64, h as f64);
                let (px, py) = ((ix - 0.5).clamp(0.0, (w - 1) as f64), (iy - 0.5).clamp(0.0, (h - 1) as f64));
                let (x0, y0) = (px.floor() as usize, py.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (px - x0 as f64, py - y0 as f64);
                for (src, dst) in image.chunks(plane).zip(out.chunks_mut(plane)) {
                    let top = src[y0 * w + x0] as f64 * (1.0 - fx) + src[y0 * w + x1] as f64 * fx;
                    let bot = src[y1 * w + x0] as f64 * (1.0 - fx) + src[y1 * w + x1] as f64 * fx;
                    dst[oy * w + ox] = (top * (1.0 - fy) + bot * fy) as f32;
                }
            }
        }
        out
    }

    /// Axis-aligned hull of the transformed box corners, clipped to the frame.
    pub fn apply_box(&self, b: &BoundingBox2D, w: usize, h: usize) -> Option<BoundingBox2D> {
        if self.is_identity() {
            return Some(*b);
        }
        let corners = [(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_min, b.y_max), (b.x_max, b.y_max)];
        let pts: Vec<(f64, f64)> = corners.iter().map(|&(x, y)| self.to_output(x, y, w as f64, h as f64)).collect();
        let x_min = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let x_max = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let y_min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let y_max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        BoundingBox2D::new(b.z, x_min, y_min, x_max, y_max).clip(w, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flip_mirrors_pixels_and_boxes() {
        let aug = Augmentation { flip: true, ..Augmentation::IDENTITY };
        let img: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let out = aug.apply_image(&img, 4, 3);
        assert_eq!(&out[0..4], &[3.0, 2.0, 1.0, 0.0]);
        let b = aug.apply_box(&BoundingBox2D::new(0, 0.0, 0.0, 1.0, 2.0), 4, 3).unwrap();
        assert!((b.x_min - 3.0).abs() < 1e-12 && (b.x_max - 4.0).abs() < 1e-12);
    }

    #[test]
    fn box_transform_inverts_point_map() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = Augmentation::sample(&AugmentConfig::default(), &mut rng);
            let (x, y) = a.to_input(17.0, 40.0, 64.0, 64.0);
            let (bx, by) = a.to_output(x, y, 64.0, 64.0);
            assert!((bx - 17.0).abs() < 1e-9 && (by - 40.0).abs() < 1e-9);
        }
    }
}

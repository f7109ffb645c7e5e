//! Volume data model: Hounsfield-unit voxel grids, display windowing,
//! patch/triplet extraction for the classifier, and the on-disk CTVOL format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest representable HU value accepted by [`HuVolume`].
pub const HU_MIN: i16 = -2048;
/// Highest representable HU value accepted by [`HuVolume`].
pub const HU_MAX: i16 = 4095;

/// Side length of classifier patches.
pub const PATCH_SIZE: usize = 128;

const MAGIC: &str = "CTVOL1";
const DTYPE: &str = "i16le";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid dimensions {0:?}: every axis needs at least one voxel")]
    InvalidDims([usize; 3]),
    #[error("voxel count {got} does not match dims product {expected}")]
    HeaderMismatch { expected: usize, got: usize },
    #[error("payload truncated: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("bad magic {0:?}, expected \"CTVOL1\"")]
    BadMagic(String),
    #[error("unsupported dtype {0:?}")]
    BadDtype(String),
    #[error("HU value {0} outside [-2048, 4095]")]
    HuOutOfRange(i16),
    #[error("box has zero area after clipping to the image")]
    EmptyBox,
    #[error("slice index {z} outside volume with {nz} slices")]
    SliceOutOfRange { z: usize, nz: usize },
    #[error("window width must be positive, got {0}")]
    BadWindow(f32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// 3D grid of Hounsfield units, slice-major (z outermost), row-major in-slice.
#[derive(Debug, Clone, PartialEq)]
pub struct HuVolume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    voxels: Vec<i16>,
}

impl HuVolume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<i16>) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidDims(dims));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(VolumeError::HeaderMismatch { expected, got: voxels.len() });
        }
        if let Some(&bad) = voxels.iter().find(|&&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(VolumeError::HuOutOfRange(bad));
        }
        Ok(Self { dims, spacing_mm, voxels })
    }

    /// A volume filled with a single HU value.
    pub fn filled(dims: [usize; 3], spacing_mm: [f64; 3], hu: i16) -> Result<Self, VolumeError> {
        Self::new(dims, spacing_mm, vec![hu; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn nx(&self) -> usize {
        self.dims[0]
    }

    pub fn ny(&self) -> usize {
        self.dims[1]
    }

    pub fn nz(&self) -> usize {
        self.dims[2]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> &[i16] {
        let n = self.nx() * self.ny();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[(z * self.ny() + y) * self.nx() + x]
    }
}

/// Linear display window in HU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSettings {
    pub center: f32,
    pub width: f32,
}

impl Default for WindowSettings {
    /// Brain window: center 30 HU, width 60 HU.
    fn default() -> Self {
        Self { center: 30.0, width: 60.0 }
    }
}

impl WindowSettings {
    pub fn new(center: f32, width: f32) -> Result<Self, VolumeError> {
        if width > 0.0 && width.is_finite() && center.is_finite() {
            Ok(Self { center, width })
        } else {
            Err(VolumeError::BadWindow(width))
        }
    }

    /// Maps one HU value into [0, 1].
    #[inline]
    pub fn map(&self, hu: f32) -> f32 {
        let lower = self.center - self.width / 2.0;
        ((hu - lower) / self.width).clamp(0.0, 1.0)
    }
}

/// Windowed volume with every value in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedVolume {
    dims: [usize; 3],
    voxels: Vec<f32>,
}

impl NormalizedVolume {
    /// Builds a normalized volume directly; values are clamped into [0, 1].
    pub fn from_values(dims: [usize; 3], mut voxels: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidDims(dims));
        }
        let expected = dims.iter().product();
        if voxels.len() != expected {
            return Err(VolumeError::HeaderMismatch { expected, got: voxels.len() });
        }
        for v in &mut voxels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { dims, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn nz(&self) -> usize {
        self.dims[2]
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> SliceView<'_> {
        let n = self.dims[0] * self.dims[1];
        SliceView { width: self.dims[0], height: self.dims[1], data: &self.voxels[z * n..(z + 1) * n] }
    }
}

/// Borrowed 2D float image, row-major.
#[derive(Debug, Clone, Copy)]
pub struct SliceView<'a> {
    pub width: usize,
    pub height: usize,
    pub data: &'a [f32],
}

impl<'a> SliceView<'a> {
    pub fn new(width: usize, height: usize, data: &'a [f32]) -> Self {
        assert_eq!(data.len(), width * height, "slice buffer does not match its dimensions");
        Self { width, height, data }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

pub fn apply_window(vol: &HuVolume, window: WindowSettings) -> NormalizedVolume {
    let voxels = vol.voxels.iter().map(|&hu| window.map(hu as f32)).collect();
    NormalizedVolume { dims: vol.dims, voxels }
}

/// Axis-aligned half-open box `[x_min, x_max) x [y_min, y_max)` on slice `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox2D {
    pub z: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox2D {
    pub fn new(z: usize, x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { z, x_min, y_min, x_max, y_max }
    }

    pub fn from_center(z: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(z, cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Positive extent on both axes and finite coordinates.
    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_max > self.x_min
            && self.y_max > self.y_min
    }

    /// Intersection with `[0, width) x [0, height)`; `None` when empty.
    pub fn clip(&self, width: usize, height: usize) -> Option<Self> {
        let b = Self::new(
            self.z,
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width as f64),
            self.y_max.min(height as f64),
        );
        b.is_valid().then_some(b)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Which slices feed the three classifier channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Center slice replicated into all three channels.
    OneSlice,
    /// Slices z-1, z, z+1 with edge clamping.
    ThreeSlice,
}

impl InputMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputMode::OneSlice => "one_slice",
            InputMode::ThreeSlice => "three_slice",
        }
    }
}

/// Classifier input: three channel planes of `PATCH_SIZE x PATCH_SIZE`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pixels: Vec<f32>,
    pub source: PatchSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSource {
    pub case_id: String,
    pub bbox: BoundingBox2D,
    pub mode: InputMode,
}

impl Patch {
    pub const CHANNELS: usize = 3;

    pub fn from_channels(channels: [Vec<f32>; 3], source: PatchSource) -> Self {
        let plane = PATCH_SIZE * PATCH_SIZE;
        let mut pixels = Vec::with_capacity(3 * plane);
        for ch in channels {
            assert_eq!(ch.len(), plane, "patch channel must be {PATCH_SIZE}x{PATCH_SIZE}");
            pixels.extend(ch);
        }
        Self { pixels, source }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = PATCH_SIZE * PATCH_SIZE;
        &self.pixels[c * plane..(c + 1) * plane]
    }

    /// Channel-planar (CHW) pixel buffer.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let ch = self.channel(c);
        ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64
    }
}

/// Bilinear resample of `bbox` to a `size x size` grid.
///
/// Output pixel `(i, j)` samples the continuous image point at the center of the
/// corresponding sub-cell of the box. Points outside the image read as 0; inside,
/// taps are clamped to the image so constants are preserved.
pub fn extract_patch(slice: SliceView<'_>, bbox: &BoundingBox2D, size: usize) -> Result<Vec<f32>, VolumeError> {
    if !bbox.is_valid() || bbox.clip(slice.width, slice.height).is_none() {
        return Err(VolumeError::EmptyBox);
    }
    let sx = bbox.width() / size as f64;
    let sy = bbox.height() / size as f64;
    let (w, h) = (slice.width as f64, slice.height as f64);
    let mut out = vec![0.0f32; size * size];
    for i in 0..size {
        let v = bbox.y_min + (i as f64 + 0.5) * sy;
        if v < 0.0 || v >= h {
            continue;
        }
        let py = v - 0.5;
        let y0 = py.floor();
        let fy = py - y0;
        let ya = (y0 as isize).clamp(0, slice.height as isize - 1) as usize;
        let yb = (y0 as isize + 1).clamp(0, slice.height as isize - 1) as usize;
        for j in 0..size {
            let u = bbox.x_min + (j as f64 + 0.5) * sx;
            if u < 0.0 || u >= w {
                continue;
            }
            let px = u - 0.5;
            let x0 = px.floor();
            let fx = px - x0;
            let xa = (x0 as isize).clamp(0, slice.width as isize - 1) as usize;
            let xb = (x0 as isize + 1).clamp(0, slice.width as isize - 1) as usize;
            let top = slice.at(xa, ya) as f64 * (1.0 - fx) + slice.at(xb, ya) as f64 * fx;
            let bottom = slice.at(xa, yb) as f64 * (1.0 - fx) + slice.at(xb, yb) as f64 * fx;
            out[i * size + j] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
    }
    Ok(out)
}

/// Slices (z-1, z, z+1) with the neighbors clamped at the volume ends.
pub fn triplet_slices(z: usize, nz: usize) -> [usize; 3] {
    [z.saturating_sub(1), z, (z + 1).min(nz - 1)]
}

pub fn extract_triplet(vol: &NormalizedVolume, bbox: &BoundingBox2D, case_id: &str) -> Result<Patch, VolumeError> {
    build_patch(vol, bbox, case_id, InputMode::ThreeSlice)
}

/// Classifier patch for either input mode.
pub fn build_patch(vol: &NormalizedVolume, bbox: &BoundingBox2D, case_id: &str, mode: InputMode) -> Result<Patch, VolumeError> {
    let nz = vol.nz();
    if bbox.z >= nz {
        return Err(VolumeError::SliceOutOfRange { z: bbox.z, nz });
    }
    let source = PatchSource { case_id: case_id.to_string(), bbox: *bbox, mode };
    match mode {
        InputMode::OneSlice => {
            let center = extract_patch(vol.slice(bbox.z), bbox, PATCH_SIZE)?;
            Ok(Patch::from_channels([center.clone(), center.clone(), center], source))
        }
        InputMode::ThreeSlice => {
            let [a, b, c] = triplet_slices(bbox.z, nz);
            let channels = [
                extract_patch(vol.slice(a), bbox, PATCH_SIZE)?,
                extract_patch(vol.slice(b), bbox, PATCH_SIZE)?,
                extract_patch(vol.slice(c), bbox, PATCH_SIZE)?,
            ];
            Ok(Patch::from_channels(channels, source))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    magic: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
}

/// Raw payload path that sits next to a CTVOL header.
pub fn raw_path_for(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes `<path>` (JSON header) and the sibling `.raw` payload.
pub fn save_volume(vol: &HuVolume, path: &Path) -> Result<(), VolumeError> {
    let header = VolumeHeader {
        magic: MAGIC.to_string(),
        dims: vol.dims,
        spacing_mm: vol.spacing_mm,
        dtype: DTYPE.to_string(),
    };
    fs::write(path, serde_json::to_vec(&header)?)?;
    let mut raw = Vec::with_capacity(vol.voxels.len() * 2);
    for v in &vol.voxels {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(raw_path_for(path), raw)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<HuVolume, VolumeError> {
    let header: VolumeHeader = serde_json::from_slice(&fs::read(path)?)?;
    let raw = fs::read(raw_path_for(path))?;
    decode_volume(&header, &raw)
}

fn decode_volume(header: &VolumeHeader, raw: &[u8]) -> Result<HuVolume, VolumeError> {
    if header.magic != MAGIC {
        return Err(VolumeError::BadMagic(header.magic.clone()));
    }
    if header.dtype != DTYPE {
        return Err(VolumeError::BadDtype(header.dtype.clone()));
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::InvalidDims(header.dims));
    }
    let expected = header.dims.iter().product::<usize>() * 2;
    if raw.len() < expected {
        return Err(VolumeError::Truncated { expected, got: raw.len() });
    }
    if raw.len() > expected {
        return Err(VolumeError::HeaderMismatch { expected: expected / 2, got: raw.len() / 2 });
    }
    let voxels = raw.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    HuVolume::new(header.dims, header.spacing_mm, voxels)
}

/// One finding's ground-truth boxes across consecutive slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub id: String,
    pub boxes: Vec<BoundingBox2D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAnnotation {
    pub case_id: String,
    pub lesions: Vec<Lesion>,
}

impl CaseAnnotation {
    pub fn boxes_on_slice(&self, z: usize) -> impl Iterator<Item = &BoundingBox2D> {
        self.lesions.iter().flat_map(|l| l.boxes.iter()).filter(move |b| b.z == z)
    }

    pub fn all_boxes(&self) -> impl Iterator<Item = &BoundingBox2D> {
        self.lesions.iter().flat_map(|l| l.boxes.iter())
    }
}

pub fn save_annotation(ann: &CaseAnnotation, path: &Path) -> Result<(), VolumeError> {
    fs::write(path, serde_json::to_vec_pretty(ann)?)?;
    Ok(())
}

pub fn load_annotation(path: &Path) -> Result<CaseAnnotation, VolumeError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dims: [usize; 3]) -> VolumeHeader {
        VolumeHeader { magic: MAGIC.into(), dims, spacing_mm: [1.0, 1.0, 4.0], dtype: DTYPE.into() }
    }

    #[test]
    fn window_center_maps_to_midpoint() {
        let w = WindowSettings::default();
        assert_eq!(w.map(30.0), 0.5);
        assert_eq!(w.map(-500.0), 0.0);
        assert_eq!(w.map(45.0), 0.75);
        assert_eq!(w.map(4000.0), 1.0);
    }

    #[test]
    fn window_rejects_nonpositive_width() {
        assert!(WindowSettings::new(30.0, 0.0).is_err());
        assert!(WindowSettings::new(30.0, -5.0).is_err());
    }

    #[test]
    fn payload_length_checks() {
        let dims = [64, 64, 16];
        assert!(decode_volume(&header(dims), &vec![0u8; 131072]).is_ok());
        assert!(matches!(
            decode_volume(&header(dims), &vec![0u8; 131070]),
            Err(VolumeError::Truncated { expected: 131072, got: 131070 })
        ));
        let mut bad = header(dims);
        bad.magic = "NOPE".into();
        assert!(matches!(decode_volume(&bad, &vec![0u8; 131072]), Err(VolumeError::BadMagic(_))));
    }

    #[test]
    fn identity_resample_is_exact_copy() {
        let (w, h) = (140, 130);
        let data: Vec<f32> = (0..w * h).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
        let img = SliceView::new(w, h, &data);
        let b = BoundingBox2D::new(0, 5.0, 1.0, 133.0, 129.0);
        let patch = extract_patch(img, &b, 128).unwrap();
        for i in 0..128 {
            for j in 0..128 {
                assert_eq!(patch[i * 128 + j], data[(i + 1) * w + j + 5]);
            }
        }
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let data = vec![0.37f32; 64 * 64];
        let img = SliceView::new(64, 64, &data);
        for b in [BoundingBox2D::new(0, 0.0, 0.0, 64.0, 64.0), BoundingBox2D::new(0, 10.3, 2.7, 17.9, 31.0)] {
            let p = extract_patch(img, &b, 128).unwrap();
            assert!(p.iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn outside_samples_read_zero() {
        let data = vec![1.0f32; 16 * 16];
        let img = SliceView::new(16, 16, &data);
        let p = extract_patch(img, &BoundingBox2D::new(0, -16.0, 0.0, 16.0, 16.0), 32).unwrap();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[31], 1.0);
    }

    #[test]
    fn empty_box_after_clipping() {
        let data = vec![1.0f32; 16 * 16];
        let img = SliceView::new(16, 16, &data);
        let r = extract_patch(img, &BoundingBox2D::new(0, 20.0, 0.0, 30.0, 10.0), 128);
        assert!(matches!(r, Err(VolumeError::EmptyBox)));
    }

    #[test]
    fn triplet_edge_clamp() {
        assert_eq!(triplet_slices(0, 3), [0, 0, 1]);
        assert_eq!(triplet_slices(2, 3), [1, 2, 2]);
        assert_eq!(triplet_slices(0, 1), [0, 0, 0]);
    }

    #[test]
    fn hu_range_enforced() {
        assert!(HuVolume::new([1, 1, 1], [1.0; 3], vec![4096]).is_err());
        assert!(HuVolume::new([1, 1, 1], [1.0; 3], vec![-2049]).is_err());
        assert!(HuVolume::new([0, 1, 1], [1.0; 3], vec![]).is_err());
    }
}

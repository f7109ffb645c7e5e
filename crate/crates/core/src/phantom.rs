//! Deterministic synthetic head-CT phantoms with exact ground truth.
//!
//! Each case is a cylinder-shaped head: skull ring, a gray-matter rim around a
//! white-matter core, two ventricles and Gaussian noise. Lesions are
//! elliptical hypodensities in the white matter spanning one to three slices.
//! Confounders are hypodense crescents on the two outermost slices at each end,
//! each paired with a co-located bright partial-volume region on the adjacent
//! slice; they are not part of the ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::volume::{self, BoundingBox2D, CaseAnnotation, HuVolume, Lesion, VolumeError, HU_MAX, HU_MIN};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("could not place {what} in case {case_index} after {attempts} attempts")]
    PlacementFailure { what: &'static str, case_index: usize, attempts: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HuPalette {
    pub air: f64,
    pub skull: f64,
    pub gray_matter: f64,
    pub white_matter: f64,
    pub ventricle: f64,
    /// Bright partial-volume region next to a confounder.
    pub partial_volume_bone: f64,
}

impl Default for HuPalette {
    fn default() -> Self {
        Self { air: -1000.0, skull: 700.0, gray_matter: 37.0, white_matter: 33.0, ventricle: 8.0, partial_volume_bone: 300.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// (nx, ny, nz)
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Inclusive [min, max] lesions per case.
    pub n_lesions_range: [usize; 2],
    /// Uniform [lo, hi] HU offset applied inside lesions.
    pub lesion_contrast_hu: [f64; 2],
    /// Inclusive [min, max] slices per lesion.
    pub lesion_extent_slices: [usize; 2],
    /// Uniform [lo, hi] ellipse semi-axis in pixels, for lesions and confounders.
    pub lesion_radius_px: [f64; 2],
    pub n_confounders_range: [usize; 2],
    pub noise_sigma_hu: f64,
    pub palette: HuPalette,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 16],
            spacing_mm: [3.4, 3.4, 4.0],
            n_lesions_range: [0, 3],
            lesion_contrast_hu: [-8.0, -3.0],
            lesion_extent_slices: [1, 3],
            lesion_radius_px: [2.5, 6.0],
            n_confounders_range: [0, 2],
            noise_sigma_hu: 2.0,
            palette: HuPalette::default(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidConfig(m));
        let [nx, ny, nz] = self.dims;
        if nx < 24 || ny < 24 || nz == 0 {
            return bad(format!("dims {:?} too small (need at least 24x24x1)", self.dims));
        }
        let [clo, chi] = self.lesion_contrast_hu;
        if !(clo <= chi && chi < 0.0) {
            return bad(format!("lesion contrast {:?} must be a non-empty strictly negative range", self.lesion_contrast_hu));
        }
        if self.n_lesions_range[0] > self.n_lesions_range[1] || self.n_confounders_range[0] > self.n_confounders_range[1] {
            return bad("count ranges must be non-empty".into());
        }
        let [elo, ehi] = self.lesion_extent_slices;
        if elo == 0 || elo > ehi || ehi > nz {
            return bad(format!("lesion extent {:?} must lie within 1..={nz}", self.lesion_extent_slices));
        }
        let [rlo, rhi] = self.lesion_radius_px;
        if !(rlo >= 1.0 && rlo <= rhi) {
            return bad(format!("lesion radius {:?} must be a non-empty range starting at 1 px or more", self.lesion_radius_px));
        }
        if !(self.noise_sigma_hu >= 0.0 && self.noise_sigma_hu.is_finite()) {
            return bad("noise sigma must be non-negative".into());
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    pub volume: HuVolume,
    pub lesions: Vec<Lesion>,
    /// Confounder crescents (not ground truth).
    pub confounders: Vec<BoundingBox2D>,
    /// HU offset each lesion was drawn with, parallel to `lesions`.
    pub lesion_contrasts: Vec<f64>,
}

impl PhantomCase {
    pub fn annotation(&self) -> CaseAnnotation {
        CaseAnnotation { case_id: self.case_id.clone(), lesions: self.lesions.clone() }
    }
}

pub fn case_id(case_index: usize) -> String {
    format!("case_{case_index:04}")
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.cx) / self.a, (y - self.cy) / self.b);
        u * u + v * v <= 1.0
    }

    fn scaled(&self, s: f64) -> Self {
        Self { a: self.a * s, b: self.b * s, ..*self }
    }
}

/// Static anatomy of one slice: per-pixel tissue class.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    Skull,
    Gray,
    White,
    Ventricle,
}

struct Anatomy {
    nx: usize,
    ny: usize,
    tissue: Vec<Tissue>,
}

const SKULL_PX: f64 = 2.0;
const GRAY_RIM_PX: f64 = 3.0;
/// White-matter margin kept around each lesion box so the annulus stays in one tissue.
const LESION_MARGIN_PX: usize = 4;

impl Anatomy {
    fn new(nx: usize, ny: usize) -> Self {
        let (cx, cy) = (nx as f64 / 2.0, ny as f64 / 2.0);
        let head = Ellipse { cx, cy, a: 0.44 * nx as f64, b: 0.47 * ny as f64 };
        let brain = Ellipse { a: head.a - SKULL_PX, b: head.b - SKULL_PX, ..head };
        let white = Ellipse { a: brain.a - GRAY_RIM_PX, b: brain.b - GRAY_RIM_PX, ..head };
        let ventricles = [-1.0, 1.0].map(|side| Ellipse {
            cx: cx + side * 0.08 * nx as f64,
            cy: cy - 0.02 * ny as f64,
            a: 0.03 * nx as f64,
            b: 0.08 * ny as f64,
        });
        let mut tissue = vec![Tissue::Air; nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                tissue[y * nx + x] = if ventricles.iter().any(|v| v.contains(px, py)) {
                    Tissue::Ventricle
                } else if white.contains(px, py) {
                    Tissue::White
                } else if brain.contains(px, py) {
                    Tissue::Gray
                } else if head.contains(px, py) {
                    Tissue::Skull
                } else {
                    Tissue::Air
                };
            }
        }
        Self { nx, ny, tissue }
    }

    fn at(&self, x: usize, y: usize) -> Tissue {
        self.tissue[y * self.nx + x]
    }

    /// True when every pixel of `rect` (inclusive pixel bounds) is white matter.
    fn all_white(&self, rect: PixelRect) -> bool {
        if rect.x1 >= self.nx || rect.y1 >= self.ny {
            return false;
        }
        (rect.y0..=rect.y1).all(|y| (rect.x0..=rect.x1).all(|x| self.at(x, y) == Tissue::White))
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PixelRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl PixelRect {
    fn dilate(&self, m: usize) -> Option<Self> {
        Some(Self { x0: self.x0.checked_sub(m)?, y0: self.y0.checked_sub(m)?, x1: self.x1 + m, y1: self.y1 + m })
    }

    fn intersects(&self, o: &Self) -> bool {
        self.x0 <= o.x1 && o.x0 <= self.x1 && self.y0 <= o.y1 && o.y0 <= self.y1
    }

    fn to_box(self, z: usize) -> BoundingBox2D {
        BoundingBox2D::new(z, self.x0 as f64, self.y0 as f64, (self.x1 + 1) as f64, (self.y1 + 1) as f64)
    }
}

/// Pixels whose centers fall inside `shape`, with their tight bounds.
fn rasterize(nx: usize, ny: usize, shape: impl Fn(f64, f64) -> bool) -> Option<(Vec<usize>, PixelRect)> {
    let mut pixels = Vec::new();
    let mut r = PixelRect { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
    for y in 0..ny {
        for x in 0..nx {
            if shape(x as f64 + 0.5, y as f64 + 0.5) {
                pixels.push(y * nx + x);
                r = PixelRect { x0: r.x0.min(x), y0: r.y0.min(y), x1: r.x1.max(x), y1: r.y1.max(y) };
            }
        }
    }
    (!pixels.is_empty()).then_some((pixels, r))
}

fn sample_ellipse<R: Rng>(cfg: &PhantomConfig, rng: &mut R) -> Ellipse {
    let [nx, ny, _] = cfg.dims;
    let [rlo, rhi] = cfg.lesion_radius_px;
    let radius = |rng: &mut R| if rlo < rhi { rng.random_range(rlo..rhi) } else { rlo };
    Ellipse { cx: rng.random_range(0.0..nx as f64), cy: rng.random_range(0.0..ny as f64), a: radius(rng), b: radius(rng) }
}

fn sample_contrast<R: Rng>(cfg: &PhantomConfig, rng: &mut R) -> f64 {
    let [lo, hi] = cfg.lesion_contrast_hu;
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Slices eligible for confounders: the two outermost at each end.
fn confounder_slices(nz: usize) -> Vec<usize> {
    let mut zs = vec![0, 1.min(nz - 1), nz.saturating_sub(2), nz - 1];
    zs.sort_unstable();
    zs.dedup();
    zs
}

/// Adjacent slice holding the partial-volume partner of a confounder on `z`.
fn partner_slice(z: usize, nz: usize) -> Option<usize> {
    if nz < 2 {
        return None;
    }
    Some(if z < nz / 2 { if z == 0 { 1 } else { z - 1 } } else if z == nz - 1 { nz - 2 } else { z + 1 })
}

struct Placed {
    pixels: Vec<usize>,
    rect: PixelRect,
}

/// Draws one case. Pure function of (`cfg`, `case_index`).
pub fn generate_case(cfg: &PhantomConfig, case_index: usize) -> Result<PhantomCase, PhantomError> {
    cfg.validate()?;
    let [nx, ny, nz] = cfg.dims;
    let seed = cfg.seed;
    let idx = case_index as u64;
    let anatomy = Anatomy::new(nx, ny);
    let pal = cfg.palette;

    let mut counts = rng::stream(seed, idx, "counts");
    let n_lesions = counts.random_range(cfg.n_lesions_range[0]..=cfg.n_lesions_range[1]);
    let n_confounders = counts.random_range(cfg.n_confounders_range[0]..=cfg.n_confounders_range[1]);

    // Footprints later objects must keep their annulus clear of, with the
    // inclusive slice range they occupy.
    let mut reserved: Vec<(PixelRect, usize, usize)> = Vec::new();
    let clear = |reserved: &[(PixelRect, usize, usize)], d: &PixelRect, z0: usize, z1: usize| {
        !reserved.iter().any(|(r, lo, hi)| *lo <= z1 + 1 && z0 <= hi + 1 && r.intersects(d))
    };

    let mut conf_rng = rng::stream(seed, idx, "confounders");
    let conf_zs = confounder_slices(nz);
    let mut confounders = Vec::with_capacity(n_confounders);
    let mut confounder_draws = Vec::with_capacity(n_confounders);
    for _ in 0..n_confounders {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let e = sample_ellipse(cfg, &mut conf_rng);
            let z = conf_zs[conf_rng.random_range(0..conf_zs.len())];
            let angle = conf_rng.random_range(0.0..std::f64::consts::TAU);
            let contrast = sample_contrast(cfg, &mut conf_rng);
            let Some((outer_px, outer)) = rasterize(nx, ny, |x, y| e.contains(x, y)) else { continue };
            let (zlo, zhi) = partner_slice(z, nz).map_or((z, z), |p| (z.min(p), z.max(p)));
            let fits = outer.dilate(LESION_MARGIN_PX).is_some_and(|d| anatomy.all_white(d) && clear(&reserved, &d, zlo, zhi));
            if !fits {
                continue;
            }
            // Crescent: the ellipse minus a smaller copy shifted off-center.
            let cut = Ellipse { cx: e.cx + 0.55 * e.a * angle.cos(), cy: e.cy + 0.55 * e.b * angle.sin(), ..e.scaled(0.75) };
            let Some((pixels, rect)) = rasterize(nx, ny, |x, y| e.contains(x, y) && !cut.contains(x, y)) else { continue };
            placed = Some((z, contrast, Placed { pixels, rect }, Placed { pixels: outer_px, rect: outer }));
            break;
        }
        let (z, contrast, crescent, partner) =
            placed.ok_or(PhantomError::PlacementFailure { what: "confounder", case_index, attempts: PLACEMENT_ATTEMPTS })?;
        let (zlo, zhi) = partner_slice(z, nz).map_or((z, z), |p| (z.min(p), z.max(p)));
        reserved.push((partner.rect, zlo, zhi));
        confounders.push(crescent.rect.to_box(z));
        confounder_draws.push((z, contrast, crescent, partner));
    }

    let mut les_rng = rng::stream(seed, idx, "lesions");
    let mut lesions = Vec::with_capacity(n_lesions);
    let mut lesion_contrasts = Vec::with_capacity(n_lesions);
    let mut lesion_draws: Vec<(usize, f64, Placed)> = Vec::new();
    for li in 0..n_lesions {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let e = sample_ellipse(cfg, &mut les_rng);
            let extent = les_rng.random_range(cfg.lesion_extent_slices[0]..=cfg.lesion_extent_slices[1]);
            let z0 = les_rng.random_range(0..=nz - extent);
            let contrast = sample_contrast(cfg, &mut les_rng);
            let Some((pixels, rect)) = rasterize(nx, ny, |x, y| e.contains(x, y)) else { continue };
            let fits = rect.dilate(LESION_MARGIN_PX).is_some_and(|d| anatomy.all_white(d) && clear(&reserved, &d, z0, z0 + extent - 1));
            if !fits {
                continue;
            }
            // Three-slice lesions taper on their end slices.
            let mut slices = Vec::with_capacity(extent);
            for k in 0..extent {
                let taper = extent == 3 && k != 1;
                let shape = if taper { e.scaled(0.75) } else { e };
                match rasterize(nx, ny, |x, y| shape.contains(x, y)) {
                    Some((p, r)) => slices.push((z0 + k, Placed { pixels: p, rect: r })),
                    None => slices.push((z0 + k, Placed { pixels: pixels.clone(), rect })),
                }
            }
            placed = Some((contrast, rect, slices));
            break;
        }
        let (contrast, rect, slices) =
            placed.ok_or(PhantomError::PlacementFailure { what: "lesion", case_index, attempts: PLACEMENT_ATTEMPTS })?;
        reserved.push((rect, slices[0].0, slices[slices.len() - 1].0));
        lesions.push(Lesion { id: format!("L{li}"), boxes: slices.iter().map(|(z, p)| p.rect.to_box(*z)).collect() });
        lesion_contrasts.push(contrast);
        lesion_draws.extend(slices.into_iter().map(|(z, p)| (z, contrast, p)));
    }

    let plane = nx * ny;
    let mut hu = vec![0.0f64; plane * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                hu[z * plane + y * nx + x] = match anatomy.at(x, y) {
                    Tissue::Air => pal.air,
                    Tissue::Skull => pal.skull,
                    Tissue::Gray => pal.gray_matter,
                    Tissue::White => pal.white_matter,
                    Tissue::Ventricle => pal.ventricle,
                };
            }
        }
    }
    for (z, contrast, p) in &lesion_draws {
        for &i in &p.pixels {
            hu[z * plane + i] += contrast;
        }
    }
    for (z, contrast, crescent, partner) in &confounder_draws {
        for &i in &crescent.pixels {
            hu[z * plane + i] += contrast;
        }
        if let Some(pz) = partner_slice(*z, nz) {
            for &i in &partner.pixels {
                hu[pz * plane + i] = pal.partial_volume_bone;
            }
        }
    }

    let mut noise_rng = rng::stream(seed, idx, "noise");
    let normal = Normal::new(0.0, cfg.noise_sigma_hu).map_err(|e| PhantomError::InvalidConfig(e.to_string()))?;
    let voxels: Vec<i16> = hu
        .iter()
        .map(|&v| {
            let noisy = if cfg.noise_sigma_hu > 0.0 { v + normal.sample(&mut noise_rng) } else { v };
            noisy.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16
        })
        .collect();

    Ok(PhantomCase {
        case_id: case_id(case_index),
        volume: HuVolume::new(cfg.dims, cfg.spacing_mm, voxels)?,
        lesions,
        confounders,
        lesion_contrasts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: String,
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<ManifestEntry>,
    pub seed: u64,
    pub config: PhantomConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PhantomError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Loads every case listed in a manifest stored in `dir`.
    pub fn load_cases(&self, dir: &Path) -> Result<Vec<(HuVolume, CaseAnnotation)>, PhantomError> {
        self.cases
            .iter()
            .map(|c| Ok((volume::load_volume(&dir.join(&c.volume))?, volume::load_annotation(&dir.join(&c.annotation))?)))
            .collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `n_cases` cases (case `i` uses index `first_index + i`) plus
/// `manifest.json` into `out_dir`.
pub fn generate_dataset(cfg: &PhantomConfig, first_index: usize, n_cases: usize, out_dir: &Path) -> Result<(Manifest, PathBuf), PhantomError> {
    cfg.validate()?;
    if n_cases == 0 {
        return Err(PhantomError::InvalidConfig("n_cases must be at least 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n_cases);
    for i in first_index..first_index + n_cases {
        let case = generate_case(cfg, i)?;
        let vol_name = format!("{}.vol.json", case.case_id);
        let ann_name = format!("{}.ann.json", case.case_id);
        volume::save_volume(&case.volume, &out_dir.join(&vol_name))?;
        volume::save_annotation(&case.annotation(), &out_dir.join(&ann_name))?;
        entries.push(ManifestEntry { id: case.case_id, volume: vol_name, annotation: ann_name });
    }
    let manifest = Manifest { cases: entries, seed: cfg.seed, config: cfg.clone() };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok((manifest, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partner_is_adjacent_and_inside() {
        assert_eq!(partner_slice(0, 16), Some(1));
        assert_eq!(partner_slice(1, 16), Some(0));
        assert_eq!(partner_slice(14, 16), Some(15));
        assert_eq!(partner_slice(15, 16), Some(14));
        assert_eq!(partner_slice(0, 1), None);
        assert_eq!(confounder_slices(3), vec![0, 1, 2]);
    }

    #[test]
    fn anatomy_has_expected_tissues() {
        let a = Anatomy::new(64, 64);
        assert!(a.at(0, 0) == Tissue::Air);
        assert!(a.at(32, 2) == Tissue::Skull || a.at(32, 3) == Tissue::Skull);
        assert!(a.tissue.iter().any(|&t| t == Tissue::Ventricle));
        assert!(a.tissue.iter().filter(|&&t| t == Tissue::White).count() > 1000);
    }

    #[test]
    fn rejects_non_negative_contrast() {
        let cfg = PhantomConfig { lesion_contrast_hu: [-2.0, 0.0], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(PhantomError::InvalidConfig(_))));
    }
}

//! Procedural fundus phantoms with exact anatomical ground truth.
//!
//! Each phantom is an orange circular retina on a black surround with a
//! bright optic disc, a darker macula and a recursively branching vessel
//! tree growing out of the disc. Labels are drawn once per subject; the
//! kidney label widens and twists the vessels, an extra trait darkens the
//! macula, and the HbA1c label has no rendered correlate at all.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{write_manifest, ClinicalFields, ImageRecord};
use crate::imaging::{encode_gray_png, encode_png, BinaryMask, ImageError, RasterImage};
use crate::rng::{self, Rng};
use crate::TaskLabels;

/// Vessel width multiplier for kidney-positive subjects.
pub const KIDNEY_WIDTH_FACTOR: f64 = 1.4;
/// Tortuosity amplitude multiplier for kidney-positive subjects.
pub const KIDNEY_TORTUOSITY_FACTOR: f64 = 1.5;
/// Macula brightness multiplier for the extra multi-system trait.
pub const DARK_MACULA_FACTOR: f64 = 0.8;
/// Field-of-view radius as a fraction of the image size.
pub const FOV_RADIUS: f64 = 0.48;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VesselTreeSpec {
    /// Primary branches leaving the disc.
    pub branch_count: usize,
    /// Recursive branching depth; 1 means unbranched primaries.
    pub depth: usize,
    /// Primary vessel width in pixels at 224 px.
    pub base_width_px: f64,
    /// Lateral sinusoidal displacement amplitude in pixels at 224 px.
    pub tortuosity_px: f64,
    /// Full angle between the two children of a branch point, degrees.
    pub branch_angle_spread_deg: f64,
    /// Primary segment length as a fraction of the image size.
    pub primary_length: f64,
}

impl Default for VesselTreeSpec {
    fn default() -> Self {
        VesselTreeSpec {
            branch_count: 4,
            depth: 4,
            base_width_px: 5.0,
            tortuosity_px: 2.0,
            branch_angle_spread_deg: 50.0,
            primary_length: 0.26,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Normalized `(x, y)`.
    pub disc_center: [f64; 2],
    pub disc_radius: f64,
    pub macula_center: [f64; 2],
    pub macula_radius: f64,
    /// Uniform per-image jitter of both centres, normalized units.
    pub center_jitter: f64,
    pub vessel_tree: VesselTreeSpec,
    pub background_tint: [u8; 3],
    /// Gaussian noise standard deviation in grey levels.
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 224,
            disc_center: [0.72, 0.50],
            disc_radius: 0.075,
            macula_center: [0.40, 0.52],
            macula_radius: 0.11,
            center_jitter: 0.02,
            vessel_tree: VesselTreeSpec::default(),
            background_tint: [205, 95, 40],
            noise_sigma: 3.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if !(self.disc_radius > 0.0 && self.macula_radius > 0.0) {
            return bad("radii must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.center_jitter >= 0.0) {
            return bad("noise_sigma and center_jitter must be non-negative");
        }
        let inside = |c: [f64; 2], r: f64| ((c[0] - 0.5).hypot(c[1] - 0.5)) + r + self.center_jitter * 2f64.sqrt() <= FOV_RADIUS;
        if !inside(self.disc_center, self.disc_radius) || !inside(self.macula_center, self.macula_radius) {
            return bad("disc and macula must lie inside the field of view");
        }
        let v = &self.vessel_tree;
        if v.branch_count > 0 && (v.depth == 0 || !(v.base_width_px > 0.0) || !(v.primary_length > 0.0)) {
            return bad("vessel tree needs depth >= 1, positive width and length");
        }
        Ok(())
    }

    fn px_scale(&self) -> f64 {
        self.image_size as f64 / 224.0
    }
}

/// Rendered traits of one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomTraits {
    /// Kidney label: wider, more tortuous vessels.
    pub kidney: bool,
    /// Extra multi-system trait: darker macula.
    pub dark_macula: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    /// Pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    #[inline]
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }

    pub fn mask(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains_pixel(x, y))
    }
}

/// Pairwise-disjoint masks covering the frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyMasks {
    pub vessel: BinaryMask,
    pub disc: BinaryMask,
    pub macula: BinaryMask,
    pub background: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub fov: Circle,
    pub disc: Circle,
    pub macula: Circle,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: RasterImage,
    pub masks: AnatomyMasks,
    pub geometry: PhantomGeometry,
}

/// Field-of-view circle for an image of side `size`.
pub fn fov_circle(size: usize) -> Circle {
    let c = size as f64 / 2.0;
    Circle { cx: c, cy: c, r: FOV_RADIUS * size as f64 }
}

struct Branch {
    start: [f64; 2],
    angle: f64,
    length: f64,
    width: f64,
    amplitude: f64,
    period: f64,
    phase: f64,
}

fn stamp_disk(mask: &mut BinaryMask, fov: &Circle, p: [f64; 2], r: f64) {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let x0 = ((p[0] - r - 1.0).floor() as isize).max(0);
    let x1 = ((p[0] + r + 1.0).ceil() as isize).min(w - 1);
    let y0 = ((p[1] - r - 1.0).floor() as isize).max(0);
    let y1 = ((p[1] + r + 1.0).ceil() as isize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 + 0.5 - p[0], y as f64 + 0.5 - p[1]);
            if dx * dx + dy * dy <= r * r && fov.contains_pixel(x as usize, y as usize) {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
}

/// Draws one branch; returns its end point.
fn draw_branch(mask: &mut BinaryMask, fov: &Circle, b: &Branch) -> [f64; 2] {
    let (dir_x, dir_y) = (libm::cos(b.angle), libm::sin(b.angle));
    let (nx, ny) = (-dir_y, dir_x);
    let radius = (b.width / 2.0).max(0.75);
    let steps = (b.length / 0.5).ceil().max(1.0) as usize;
    let offset0 = libm::sin(b.phase);
    let mut end = b.start;
    for i in 0..=steps {
        let s = b.length * i as f64 / steps as f64;
        let lateral = b.amplitude * (libm::sin(2.0 * PI * s / b.period + b.phase) - offset0);
        end = [b.start[0] + s * dir_x + lateral * nx, b.start[1] + s * dir_y + lateral * ny];
        stamp_disk(mask, fov, end, radius);
    }
    end
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Renders one phantom. All random quantities are drawn before trait
/// factors are applied, so renders that differ only in traits share their
/// geometry.
pub fn render_fundus(spec: &PhantomSpec, traits: PhantomTraits, rng: &mut Rng) -> Phantom {
    let size = spec.image_size;
    let s = size as f64;
    let scale = spec.px_scale();
    let fov = fov_circle(size);

    let jitter = |rng: &mut Rng| uniform(rng, -spec.center_jitter, spec.center_jitter);
    let disc = Circle {
        cx: (spec.disc_center[0] + jitter(rng)) * s,
        cy: (spec.disc_center[1] + jitter(rng)) * s,
        r: spec.disc_radius * s,
    };
    let macula = Circle {
        cx: (spec.macula_center[0] + jitter(rng)) * s,
        cy: (spec.macula_center[1] + jitter(rng)) * s,
        r: spec.macula_radius * s,
    };
    let illumination = uniform(rng, 0.85, 1.15);
    let macula_pigment = uniform(rng, 0.62, 0.80);
    let vessel_darkness = uniform(rng, 0.42, 0.55);

    // vessel tree, breadth-first so draws happen in a fixed order
    let tree = &spec.vessel_tree;
    let width_factor = if traits.kidney { KIDNEY_WIDTH_FACTOR } else { 1.0 };
    let tort_factor = if traits.kidney { KIDNEY_TORTUOSITY_FACTOR } else { 1.0 };
    let mut vessel = BinaryMask::empty(size, size);
    let mut level: Vec<([f64; 2], f64)> = (0..tree.branch_count)
        .map(|i| {
            let base = 2.0 * PI * (i as f64 + 0.5) / tree.branch_count as f64;
            ([disc.cx, disc.cy], base + uniform(rng, -0.35, 0.35))
        })
        .collect();
    let spread = tree.branch_angle_spread_deg.to_radians();
    for depth in 0..tree.depth {
        let shrink = 0.72f64.powi(depth as i32);
        let mut next = Vec::with_capacity(level.len() * 2);
        for (start, angle) in level {
            let length = tree.primary_length * s * shrink * uniform(rng, 0.8, 1.2);
            let width = tree.base_width_px * scale * 0.75f64.powi(depth as i32);
            let amplitude = tree.tortuosity_px * scale * 0.85f64.powi(depth as i32);
            let period = uniform(rng, 18.0, 30.0) * scale;
            let phase = uniform(rng, 0.0, 2.0 * PI);
            let split_a = uniform(rng, 0.8, 1.2) * spread / 2.0;
            let split_b = uniform(rng, 0.8, 1.2) * spread / 2.0;
            let branch = Branch {
                start,
                angle,
                length,
                width: width * width_factor,
                amplitude: amplitude * tort_factor,
                period,
                phase,
            };
            let end = draw_branch(&mut vessel, &fov, &branch);
            next.push((end, angle - split_a));
            next.push((end, angle + split_b));
        }
        level = next;
    }

    let fov_mask = fov.mask(size, size);
    let disc_mask = disc.mask(size, size).minus(&vessel);
    let macula_mask = macula.mask(size, size).minus(&vessel).minus(&disc_mask);
    let background = vessel.union(&disc_mask).union(&macula_mask).complement();

    let tint = spec.background_tint.map(|c| c as f64 * illumination);
    let disc_rgb = [250.0, 225.0, 160.0].map(|c: f64| c * illumination);
    let macula_factor = macula_pigment * if traits.dark_macula { DARK_MACULA_FACTOR } else { 1.0 };
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let mut image = RasterImage::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            if !fov_mask.is_set(i) {
                continue;
            }
            let (dx, dy) = (x as f64 + 0.5 - fov.cx, y as f64 + 0.5 - fov.cy);
            let vignette = 1.0 - 0.3 * (dx * dx + dy * dy) / (fov.r * fov.r);
            let base = if vessel.is_set(i) {
                tint.map(|c| c * vessel_darkness * vignette)
            } else if disc_mask.is_set(i) {
                disc_rgb
            } else if macula_mask.is_set(i) {
                tint.map(|c| c * macula_factor * vignette)
            } else {
                tint.map(|c| c * vignette)
            };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                px[c] = (base[c] + n).round().clamp(0.0, 255.0) as u8;
            }
            image.set_pixel(x, y, px);
        }
    }

    Phantom {
        image,
        masks: AnatomyMasks { vessel, disc: disc_mask, macula: macula_mask, background },
        geometry: PhantomGeometry { fov, disc, macula },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub images_per_subject: usize,
    pub prevalence_hba1c: f64,
    pub prevalence_kidney: f64,
    /// Chosen so that `1 - (1 - 0.218)(1 - q)` is about 0.358.
    pub prevalence_multi_extra_trait: f64,
    pub seed: u64,
    pub phantom: PhantomSpec,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_subjects: 400,
            images_per_subject: 3,
            prevalence_hba1c: 0.852,
            prevalence_kidney: 0.218,
            prevalence_multi_extra_trait: 0.179,
            seed: 42,
            phantom: PhantomSpec::default(),
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_subjects == 0 || self.images_per_subject == 0 {
            return Err(SynthError::InvalidSpec("subject and image counts must be >= 1".into()));
        }
        let p = [self.prevalence_hba1c, self.prevalence_kidney, self.prevalence_multi_extra_trait];
        if p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SynthError::InvalidSpec("prevalences must lie in [0, 1]".into()));
        }
        self.phantom.validate()
    }
}

/// Per-subject draw shared by all of that subject's images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPlan {
    pub subject_id: String,
    pub index: usize,
    pub labels: TaskLabels,
    pub traits: PhantomTraits,
    pub clinical: ClinicalFields,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Draws labels and matching clinical values for every subject.
pub fn plan_subjects(spec: &CohortSpec) -> Vec<SubjectPlan> {
    (0..spec.n_subjects)
        .map(|i| {
            let mut r = rng::stream(spec.seed, &[i as u64, u64::MAX]);
            let hba1c = r.random::<f64>() < spec.prevalence_hba1c;
            let kidney = r.random::<f64>() < spec.prevalence_kidney;
            let extra = r.random::<f64>() < spec.prevalence_multi_extra_trait;
            let multi = kidney || extra;
            let clinical = ClinicalFields {
                hba1c_pct: Some(if hba1c { round1(uniform(&mut r, 7.0, 11.0)) } else { round1(uniform(&mut r, 5.0, 6.9)) }),
                creatinine: Some(if kidney { round1(uniform(&mut r, 110.0, 200.0)) } else { round1(uniform(&mut r, 50.0, 100.0)) }),
                urea: Some(round1(uniform(&mut r, 3.0, 8.0))),
                proteinuria: Some(0.0),
                organ_flags: Some(if multi { 2 + u32::from(kidney && extra) } else { 0 }),
            };
            SubjectPlan {
                subject_id: format!("S{:04}", i + 1),
                index: i,
                labels: TaskLabels::new(Some(hba1c), Some(kidney), Some(multi)),
                traits: PhantomTraits { kidney, dark_macula: extra },
                clinical,
            }
        })
        .collect()
}

pub fn visit_id(visit: usize) -> String {
    format!("V{}", visit + 1)
}

pub fn image_stem(subject: &SubjectPlan, visit: usize) -> String {
    format!("{}_{}", subject.subject_id, visit_id(visit))
}

/// Renders image `visit` of `subject`; its stream depends only on
/// `(seed, subject, visit)`.
pub fn render_subject_image(spec: &CohortSpec, subject: &SubjectPlan, visit: usize) -> Phantom {
    let mut r = rng::stream(spec.seed, &[subject.index as u64, visit as u64]);
    render_fundus(&spec.phantom, subject.traits, &mut r)
}

/// Relative paths of the files written for one image.
pub struct CohortFiles;

impl CohortFiles {
    pub const MANIFEST: &'static str = "manifest.csv";

    pub fn image(stem: &str) -> String {
        format!("images/{stem}.png")
    }

    pub fn mask(stem: &str, region: &str) -> String {
        format!("masks/{stem}_{region}.png")
    }

    pub fn sidecar(stem: &str) -> String {
        format!("sidecars/{stem}.json")
    }

    /// Image stem from a manifest `image_path`.
    pub fn stem_of(image_path: &str) -> &str {
        let name = image_path.rsplit('/').next().unwrap_or(image_path);
        name.strip_suffix(".png").unwrap_or(name)
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    subject_id: &'a str,
    visit_id: String,
    image_size: usize,
    fov: Circle,
    disc: Circle,
    macula: Circle,
    labels: TaskLabels,
    traits: PhantomTraits,
    label_provenance: &'static str,
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<(), SynthError> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| SynthError::Io { path: parent.display().to_string(), source })?;
    }
    fs::write(&path, bytes).map_err(|source| SynthError::Io { path: path.display().to_string(), source })
}

/// Renders the full cohort into `dir` and returns its manifest records.
pub fn write_cohort(spec: &CohortSpec, dir: &Path) -> Result<Vec<ImageRecord>, SynthError> {
    spec.validate()?;
    let subjects = plan_subjects(spec);
    let jobs: Vec<(usize, usize)> = (0..subjects.len())
        .flat_map(|s| (0..spec.images_per_subject).map(move |v| (s, v)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(s, v)| -> Result<ImageRecord, SynthError> {
            let subject = &subjects[s];
            let phantom = render_subject_image(spec, subject, v);
            let stem = image_stem(subject, v);
            write_file(dir, &CohortFiles::image(&stem), &encode_png(&phantom.image)?)?;
            for (name, mask) in [
                ("vessel", &phantom.masks.vessel),
                ("disc", &phantom.masks.disc),
                ("macula", &phantom.masks.macula),
                ("background", &phantom.masks.background),
            ] {
                write_file(dir, &CohortFiles::mask(&stem, name), &encode_gray_png(&mask.to_gray())?)?;
            }
            let sidecar = Sidecar {
                subject_id: &subject.subject_id,
                visit_id: visit_id(v),
                image_size: spec.phantom.image_size,
                fov: phantom.geometry.fov,
                disc: phantom.geometry.disc,
                macula: phantom.geometry.macula,
                labels: subject.labels,
                traits: subject.traits,
                label_provenance: "synthetic per-subject draw: kidney widens and twists vessels, \
                                   the extra multi trait darkens the macula, hba1c is not rendered",
            };
            write_file(dir, &CohortFiles::sidecar(&stem), &serde_json::to_vec_pretty(&sidecar)?)?;
            Ok(ImageRecord {
                image_path: CohortFiles::image(&stem),
                subject_id: subject.subject_id.clone(),
                visit_id: visit_id(v),
                clinical: subject.clinical,
                labels: subject.labels,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_file(dir, CohortFiles::MANIFEST, write_manifest(&records).as_bytes())?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{derive_labels, LabelThresholds};
    use crate::Task;

    fn small_spec() -> PhantomSpec {
        PhantomSpec { image_size: 96, ..PhantomSpec::default() }
    }

    #[test]
    fn noiseless_renders_are_identical() {
        let spec = PhantomSpec { noise_sigma: 0.0, ..small_spec() };
        let a = render_fundus(&spec, PhantomTraits::default(), &mut rng::stream(3, &[]));
        let b = render_fundus(&spec, PhantomTraits::default(), &mut rng::stream(3, &[]));
        assert_eq!(a.image, b.image);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn kidney_widens_vessels_under_identical_draws() {
        for seed in 0..5 {
            let spec = PhantomSpec::default();
            let neg = render_fundus(&spec, PhantomTraits { kidney: false, dark_macula: false }, &mut rng::stream(seed, &[]));
            let pos = render_fundus(&spec, PhantomTraits { kidney: true, dark_macula: false }, &mut rng::stream(seed, &[]));
            assert!(pos.masks.vessel.count() > neg.masks.vessel.count());
            assert_eq!(pos.geometry, neg.geometry);
        }
    }

    #[test]
    fn masks_partition_the_frame() {
        let p = render_fundus(&small_spec(), PhantomTraits { kidney: true, dark_macula: true }, &mut rng::stream(1, &[]));
        let m = &p.masks;
        let all = [&m.vessel, &m.disc, &m.macula, &m.background];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_eq!(all[i].intersection(all[j]).count(), 0);
            }
        }
        let cover = m.vessel.union(&m.disc).union(&m.macula).union(&m.background);
        assert_eq!(cover.count(), 96 * 96);
        assert!(m.vessel.count() > 0 && m.disc.count() > 0 && m.macula.count() > 0);
    }

    #[test]
    fn outside_fov_is_black() {
        let p = render_fundus(&small_spec(), PhantomTraits::default(), &mut rng::stream(2, &[]));
        assert_eq!(p.image.pixel(0, 0), [0, 0, 0]);
        assert_eq!(p.image.pixel(95, 95), [0, 0, 0]);
        let fov = fov_circle(96);
        for y in 0..96 {
            for x in 0..96 {
                if !fov.contains_pixel(x, y) {
                    assert!(!p.masks.vessel.get(x, y));
                }
            }
        }
    }

    #[test]
    fn dark_macula_trait_darkens_macula_only() {
        let spec = PhantomSpec { noise_sigma: 0.0, ..small_spec() };
        let a = render_fundus(&spec, PhantomTraits::default(), &mut rng::stream(4, &[]));
        let b = render_fundus(&spec, PhantomTraits { kidney: false, dark_macula: true }, &mut rng::stream(4, &[]));
        let mean = |img: &RasterImage, m: &BinaryMask| {
            let idx: Vec<usize> = (0..m.len()).filter(|&i| m.is_set(i)).collect();
            idx.iter().map(|&i| img.data()[i * 3] as f64).sum::<f64>() / idx.len() as f64
        };
        let ratio = mean(&b.image, &b.masks.macula) / mean(&a.image, &a.masks.macula);
        assert!((ratio - DARK_MACULA_FACTOR).abs() < 0.02, "ratio {ratio}");
        assert_eq!(mean(&a.image, &a.masks.background), mean(&b.image, &b.masks.background));
    }

    #[test]
    fn single_subject_images_share_labels() {
        let spec = CohortSpec { n_subjects: 1, ..CohortSpec::default() };
        let plans = plan_subjects(&spec);
        assert_eq!(plans.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        let small = CohortSpec { phantom: PhantomSpec { image_size: 32, disc_radius: 0.07, ..PhantomSpec::default() }, ..spec };
        let recs = write_cohort(&small, dir.path()).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.labels == recs[0].labels));
    }

    #[test]
    fn kidney_prevalence_in_400_subjects() {
        // binomial 95% interval half-width for n = 400, p = 0.218 is ~4.05 points
        let plans = plan_subjects(&CohortSpec::default());
        let prevalence = plans.iter().filter(|p| p.traits.kidney).count() as f64 / 400.0;
        assert!((prevalence - 0.218).abs() <= 0.04, "{prevalence}");
        let multi = plans.iter().filter(|p| p.labels.get(Task::Multi) == Some(true)).count() as f64 / 400.0;
        assert!((multi - 0.358).abs() <= 0.06, "{multi}");
    }

    #[test]
    fn clinical_fields_reproduce_labels() {
        for p in plan_subjects(&CohortSpec { n_subjects: 200, ..CohortSpec::default() }) {
            assert_eq!(derive_labels(&p.clinical, &LabelThresholds::default()), p.labels);
        }
    }

    #[test]
    fn seed_controls_plan() {
        let a = plan_subjects(&CohortSpec { seed: 1, ..CohortSpec::default() });
        let b = plan_subjects(&CohortSpec { seed: 1, ..CohortSpec::default() });
        let c = plan_subjects(&CohortSpec { seed: 2, ..CohortSpec::default() });
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn spec_validation() {
        assert!(PhantomSpec::default().validate().is_ok());
        let off = PhantomSpec { disc_center: [0.95, 0.5], ..PhantomSpec::default() };
        assert!(off.validate().is_err());
        let neg = PhantomSpec { disc_radius: 0.0, ..PhantomSpec::default() };
        assert!(neg.validate().is_err());
    }
}

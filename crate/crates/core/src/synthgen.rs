//! Deterministic synthetic identities: ellipse patterns inside a fixed
//! triangle whose corners act as landmarks, seen through random projective
//! warps over textured backgrounds.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{DatasetManifest, Provenance, Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::{is_convex_quad, Homography, Point2};
use crate::heatmap::{in_frame, LandmarkSet};
use crate::raster::{Border, Raster};
use crate::seed::{self, tag, Rng};

pub const LANDMARK_NAMES: [&str; 3] = ["apex", "left", "right"];
const MAX_ELLIPSE_ATTEMPTS: usize = 10_000;
const MAX_HOMOGRAPHY_RESAMPLES: usize = 100;
const PATTERN_BAND: (f32, f32) = (0.0, 120.0);
const BACKGROUND_BAND: (f32, f32) = (160.0, 255.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub gallery: usize,
    pub query: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 3,
            gallery: 3,
            query: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Identities per subset: this many train identities and as many evaluation identities.
    pub n_identities: usize,
    pub image_size: usize,
    pub examples_per_split: SplitCounts,
    pub ellipse_count_range: (usize, usize),
    /// Semi-axis range as fractions of the image size.
    pub ellipse_axis_frac: (f64, f64),
    pub corner_jitter_frac: f64,
    pub texture_dir: Option<PathBuf>,
    pub noise_sigma: f64,
    pub master_seed: u64,
    /// Probability that a rendered sample has one random visible landmark hidden.
    pub hide_one_landmark_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 750,
            image_size: 128,
            examples_per_split: SplitCounts::default(),
            ellipse_count_range: (1, 8),
            ellipse_axis_frac: (0.03, 0.08),
            corner_jitter_frac: 0.15,
            texture_dir: None,
            noise_sigma: 8.0,
            master_seed: 0,
            hide_one_landmark_prob: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 {
            return Err(Error::config("synth.n_identities", "must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(Error::config("synth.image_size", "must be at least 16"));
        }
        let (lo, hi) = self.ellipse_count_range;
        if lo < 1 || hi < lo {
            return Err(Error::config("synth.ellipse_count_range", "need 1 <= min <= max"));
        }
        let (a, b) = self.ellipse_axis_frac;
        if !(a > 0.0 && b >= a) {
            return Err(Error::config("synth.ellipse_axis_frac", "need 0 < min <= max"));
        }
        if !(0.0..0.5).contains(&self.corner_jitter_frac) {
            return Err(Error::config("synth.corner_jitter_frac", "must be in [0, 0.5)"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("synth.noise_sigma", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.hide_one_landmark_prob) {
            return Err(Error::config("synth.hide_one_landmark_prob", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// The canonical triangle, shared by every identity.
    pub fn triangle(&self) -> [Point2; 3] {
        let s = (self.image_size - 1) as f64;
        [
            Point2::new(0.5 * s, 0.18 * s),
            Point2::new(0.18 * s, 0.8 * s),
            Point2::new(0.82 * s, 0.8 * s),
        ]
    }

    fn corners(&self) -> [Point2; 4] {
        let s = (self.image_size - 1) as f64;
        [
            Point2::new(0.0, 0.0),
            Point2::new(s, 0.0),
            Point2::new(s, s),
            Point2::new(0.0, s),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: Point2,
    pub semi_axes: (f64, f64),
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, p: Point2) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let u = (c * dx + s * dy) / self.semi_axes.0;
        let v = (-s * dx + c * dy) / self.semi_axes.1;
        u * u + v * v <= 1.0
    }

    /// Support function: max of `n . p` over the ellipse, relative to its center.
    fn support(&self, n: (f64, f64)) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let nu = n.0 * c + n.1 * s;
        let nv = -n.0 * s + n.1 * c;
        ((self.semi_axes.0 * nu).powi(2) + (self.semi_axes.1 * nv).powi(2)).sqrt()
    }

    /// True when the whole ellipse lies inside the triangle with `margin` to spare.
    pub fn inside_triangle(&self, tri: &[Point2; 3], margin: f64) -> bool {
        let area2 = (tri[1].x - tri[0].x) * (tri[2].y - tri[0].y) - (tri[1].y - tri[0].y) * (tri[2].x - tri[0].x);
        let orient = area2.signum();
        (0..3).all(|i| {
            let a = tri[i];
            let b = tri[(i + 1) % 3];
            let (ex, ey) = (b.x - a.x, b.y - a.y);
            let len = ex.hypot(ey);
            // inward unit normal
            let n = (-ey * orient / len, ex * orient / len);
            let dist = (self.center.x - a.x) * n.0 + (self.center.y - a.y) * n.1;
            dist - self.support((-n.0, -n.1)) >= margin
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedPattern {
    pub identity_id: usize,
    /// White (255) background with black (0) ellipses.
    pub canvas: GrayImage,
    pub triangle: [Point2; 3],
    pub ellipses: Vec<Ellipse>,
    pub rng_seed: u64,
}

pub fn generate_seed_pattern(identity_id: usize, cfg: &SynthConfig) -> Result<SeedPattern> {
    if identity_id >= 2 * cfg.n_identities {
        return Err(Error::config(
            "identity_id",
            format!("{identity_id} outside 0..{}", 2 * cfg.n_identities),
        ));
    }
    let rng_seed = seed::derive_seed(cfg.master_seed, &[tag::PATTERN, identity_id as u64]);
    let mut rng: Rng = rand::SeedableRng::seed_from_u64(rng_seed);
    let tri = cfg.triangle();
    let size = cfg.image_size as f64;
    let (lo, hi) = cfg.ellipse_count_range;
    let target = rng.random_range(lo..=hi);
    let (amin, amax) = (cfg.ellipse_axis_frac.0 * size, cfg.ellipse_axis_frac.1 * size);
    let (xmin, xmax) = (tri.iter().map(|p| p.x).fold(f64::MAX, f64::min), tri.iter().map(|p| p.x).fold(f64::MIN, f64::max));
    let (ymin, ymax) = (tri.iter().map(|p| p.y).fold(f64::MAX, f64::min), tri.iter().map(|p| p.y).fold(f64::MIN, f64::max));
    let mut ellipses = Vec::with_capacity(target);
    let mut attempts = 0;
    while ellipses.len() < target && attempts < MAX_ELLIPSE_ATTEMPTS {
        attempts += 1;
        let e = Ellipse {
            center: Point2::new(rng.random_range(xmin..=xmax), rng.random_range(ymin..=ymax)),
            semi_axes: (rng.random_range(amin..=amax), rng.random_range(amin..=amax)),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        if e.inside_triangle(&tri, 1.0) {
            ellipses.push(e);
        }
    }
    if ellipses.len() < lo {
        return Err(Error::DegeneratePattern(format!(
            "placed {} of at least {lo} ellipses in {MAX_ELLIPSE_ATTEMPTS} attempts",
            ellipses.len()
        )));
    }
    let n = cfg.image_size as u32;
    let canvas = GrayImage::from_fn(n, n, |x, y| {
        let p = Point2::new(x as f64, y as f64);
        Luma([if ellipses.iter().any(|e| e.contains(p)) { 0 } else { 255 }])
    });
    Ok(SeedPattern {
        identity_id,
        canvas,
        triangle: tri,
        ellipses,
        rng_seed,
    })
}

/// Maps the four image corners onto independently jittered corners.
pub fn sample_homography(rng: &mut Rng, cfg: &SynthConfig) -> Result<Homography> {
    let src = cfg.corners();
    if cfg.corner_jitter_frac == 0.0 {
        return Ok(Homography::identity());
    }
    let j = cfg.corner_jitter_frac * cfg.image_size as f64;
    for _ in 0..MAX_HOMOGRAPHY_RESAMPLES {
        let dst = src.map(|p| Point2::new(p.x + rng.random_range(-j..=j), p.y + rng.random_range(-j..=j)));
        if !is_convex_quad(&dst) {
            continue;
        }
        if let Ok(h) = Homography::from_correspondences(&src, &dst) {
            return Ok(h);
        }
    }
    Err(Error::HomographySampling(MAX_HOMOGRAPHY_RESAMPLES))
}

pub fn warp_point(h: &Homography, p: Point2) -> Result<Point2> {
    h.warp_point(p)
}

/// Pool of grayscale textures from which random patches are cut.
#[derive(Debug, Clone)]
pub struct TextureSource {
    textures: Vec<Raster>,
}

impl TextureSource {
    pub fn new(textures: Vec<Raster>) -> Result<Self> {
        if textures.is_empty() {
            return Err(Error::EmptyTextures);
        }
        Ok(Self { textures })
    }

    /// Smooth multi-octave value noise, standing in for photographs.
    pub fn procedural(seed: u64, count: usize, size: usize) -> Result<Self> {
        let textures = (0..count)
            .map(|i| {
                let mut rng = seed::stream(seed, &[tag::TEXTURE_POOL, i as u64]);
                value_noise(size, &mut rng)
            })
            .collect();
        Self::new(textures)
    }

    /// Every decodable image in a directory, in file-name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let textures = paths.iter().filter_map(|p| Raster::load(p, 1).ok()).collect();
        Self::new(textures)
    }

    pub fn flat(level: f32) -> Self {
        let mut r = Raster::new(4, 4, 1);
        r.data.iter_mut().for_each(|v| *v = level);
        Self { textures: vec![r] }
    }

    pub fn len(&self) -> usize {
        self.textures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.textures.is_empty()
    }

    /// A `size x size` patch from a random texture, rescaled into `band`.
    fn patch(&self, size: usize, band: (f32, f32), rng: &mut Rng) -> Vec<f32> {
        let tex = &self.textures[rng.random_range(0..self.textures.len())];
        let tex = if tex.width < size || tex.height < size {
            tex.resize(size.max(tex.width), size.max(tex.height))
        } else {
            tex.clone()
        };
        let ox = rng.random_range(0..=tex.width - size);
        let oy = rng.random_range(0..=tex.height - size);
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                out.push(tex.get(0, ox + x, oy + y));
            }
        }
        let lo = out.iter().copied().fold(f32::MAX, f32::min);
        let hi = out.iter().copied().fold(f32::MIN, f32::max);
        let span = hi - lo;
        out.iter_mut().for_each(|v| {
            let t = if span > 1e-6 { (*v - lo) / span } else { 0.5 };
            *v = band.0 + t * (band.1 - band.0);
        });
        out
    }
}

fn value_noise(size: usize, rng: &mut Rng) -> Raster {
    let mut out = Raster::new(size, size, 1);
    let mut amp = 1.0f32;
    let mut cell = (size / 4).max(2);
    while cell >= 4 {
        let n = size / cell + 2;
        let lattice: Vec<f32> = (0..n * n).map(|_| rng.random::<f32>()).collect();
        for y in 0..size {
            for x in 0..size {
                let fx = x as f32 / cell as f32;
                let fy = y as f32 / cell as f32;
                let (ix, iy) = (fx as usize, fy as usize);
                let (tx, ty) = (fx - ix as f32, fy - iy as f32);
                let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
                let l = |a: usize, b: usize| lattice[b * n + a];
                let top = l(ix, iy) * (1.0 - sx) + l(ix + 1, iy) * sx;
                let bot = l(ix, iy + 1) * (1.0 - sx) + l(ix + 1, iy + 1) * sx;
                out.data[y * size + x] += amp * (top * (1.0 - sy) + bot * sy);
            }
        }
        amp *= 0.5;
        cell /= 2;
    }
    out
}

/// A rendered example: 8-bit grayscale pixels (stored as floats) and warped landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Raster,
    pub landmarks: LandmarkSet,
}

pub fn render_sample(
    pattern: &SeedPattern,
    h: &Homography,
    textures: &TextureSource,
    rng: &mut Rng,
    cfg: &SynthConfig,
) -> Result<SyntheticSample> {
    if textures.is_empty() {
        return Err(Error::EmptyTextures);
    }
    let n = cfg.image_size;
    let canvas = Raster::from_gray(&pattern.canvas);
    let inv = h.inverse()?;
    let pat = textures.patch(n, PATTERN_BAND, rng);
    let bg = textures.patch(n, BACKGROUND_BAND, rng);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("valid sigma");
    let mut image = Raster::new(n, n, 1);
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let mask = match inv.warp_point(Point2::new(x as f64, y as f64)) {
                Ok(src) => 1.0 - canvas.sample_bilinear(0, src, Border::Constant(255.0)) / 255.0,
                Err(_) => 0.0,
            };
            let mut v = mask * pat[i] + (1.0 - mask) * bg[i];
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(rng) as f32;
            }
            image.data[i] = v.clamp(0.0, 255.0).round();
        }
    }
    let mut coords = Vec::with_capacity(3);
    let mut visible = Vec::with_capacity(3);
    for &c in &pattern.triangle {
        let p = h.warp_point(c)?;
        visible.push(in_frame(p, n, n));
        coords.push(p);
    }
    let landmarks = LandmarkSet {
        names: LANDMARK_NAMES.iter().map(|s| s.to_string()).collect(),
        coords,
        visible,
    };
    Ok(SyntheticSample { image, landmarks })
}

fn hide_one(lms: &mut LandmarkSet, prob: f64, rng: &mut Rng) {
    if prob <= 0.0 || rng.random::<f64>() >= prob {
        return;
    }
    let vis: Vec<usize> = (0..lms.k()).filter(|&i| lms.visible[i]).collect();
    if !vis.is_empty() {
        lms.visible[vis[rng.random_range(0..vis.len())]] = false;
    }
}

pub fn config_digest(cfg: &SynthConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

struct Job {
    split: Split,
    identity_id: usize,
    label: usize,
    example: usize,
    stream_index: usize,
}

/// Renders and writes every split under `root`; returns the written manifest.
pub fn build_dataset(cfg: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let textures = match &cfg.texture_dir {
        Some(dir) => TextureSource::from_dir(dir)?,
        None => TextureSource::procedural(cfg.master_seed, 8, 256.max(cfg.image_size))?,
    };
    let n = cfg.n_identities;
    let counts = cfg.examples_per_split;
    let mut jobs = Vec::new();
    for id in 0..2 * n {
        let train = id < n;
        let plan: Vec<(Split, usize)> = if train {
            vec![(Split::Train, counts.train)]
        } else {
            vec![(Split::Gallery, counts.gallery), (Split::Query, counts.query)]
        };
        let mut stream_index = 0;
        for (split, count) in plan {
            for example in 0..count {
                jobs.push(Job {
                    split,
                    identity_id: id,
                    label: id,
                    example,
                    stream_index,
                });
                stream_index += 1;
            }
        }
    }
    for split in [Split::Train, Split::Gallery, Split::Query] {
        fs::create_dir_all(root.join(split.as_str())).map_err(|e| Error::io(root, e))?;
    }

    let workers = std::thread::available_parallelism().map_or(1, |v| v.get()).min(8);
    let ids: Vec<usize> = (0..2 * n).collect();
    let chunk = ids.len().div_ceil(workers);
    let patterns: Vec<SeedPattern> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|&id| generate_seed_pattern(id, cfg)).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("pattern worker panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
            .map(|v| v.into_iter().flatten().collect())
    })?;

    let jchunk = jobs.len().div_ceil(workers).max(1);
    let samples: Vec<Sample> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(jchunk)
            .map(|c| {
                let patterns = &patterns;
                let textures = &textures;
                s.spawn(move || c.iter().map(|job| render_job(job, patterns, textures, cfg, root)).collect::<Result<Vec<_>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("render worker panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
            .map(|v| v.into_iter().flatten().collect())
    })?;

    let mut samples = samples;
    samples.sort_by_key(|s| s.split);
    let manifest = DatasetManifest {
        landmark_names: LANDMARK_NAMES.iter().map(|s| s.to_string()).collect(),
        samples,
        identity_index: (0..2 * n).map(|i| i.to_string()).collect(),
        provenance: Provenance {
            seed: Some(cfg.master_seed),
            config: Some(serde_json::to_value(cfg)?),
            config_digest: Some(config_digest(cfg)),
        },
    };
    manifest.write(root)?;
    Ok(manifest)
}

fn render_job(job: &Job, patterns: &[SeedPattern], textures: &TextureSource, cfg: &SynthConfig, root: &Path) -> Result<Sample> {
    let pattern = &patterns[job.identity_id];
    let mut rng = seed::stream(cfg.master_seed, &[tag::EXAMPLE, job.identity_id as u64, job.stream_index as u64]);
    let h = sample_homography(&mut rng, cfg)?;
    let mut out = render_sample(pattern, &h, textures, &mut rng, cfg)?;
    let mut hide_rng = seed::stream(cfg.master_seed, &[tag::HIDE, job.identity_id as u64, job.stream_index as u64]);
    hide_one(&mut out.landmarks, cfg.hide_one_landmark_prob, &mut hide_rng);
    let rel = format!("{}/{}/{}.png", job.split.as_str(), job.identity_id, job.example);
    let path = root.join(&rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    out.image.save_gray(&path)?;
    Ok(Sample {
        image_path: rel,
        identity: job.identity_id.to_string(),
        label: job.label,
        landmarks: out.landmarks,
        split: job.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_identities: 4,
            image_size: 64,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn pattern_is_deterministic_and_bounded() {
        let cfg = small();
        let a = generate_seed_pattern(1, &cfg).unwrap();
        let b = generate_seed_pattern(1, &cfg).unwrap();
        assert_eq!(a.canvas.as_raw(), b.canvas.as_raw());
        assert_eq!(a.rng_seed, b.rng_seed);
        let (lo, hi) = cfg.ellipse_count_range;
        assert!((lo..=hi).contains(&a.ellipses.len()));
        assert!(a.ellipses.iter().all(|e| e.inside_triangle(&a.triangle, 0.0)));
        assert!(a.canvas.as_raw().iter().all(|&v| v == 0 || v == 255));
    }

    #[test]
    fn forced_single_ellipse() {
        let cfg = SynthConfig {
            ellipse_count_range: (1, 1),
            ..small()
        };
        for id in 0..8 {
            assert_eq!(generate_seed_pattern(id, &cfg).unwrap().ellipses.len(), 1);
        }
    }

    #[test]
    fn impossible_ellipses_fail() {
        let cfg = SynthConfig {
            ellipse_axis_frac: (0.6, 0.7),
            ..small()
        };
        assert!(matches!(generate_seed_pattern(0, &cfg), Err(Error::DegeneratePattern(_))));
    }

    #[test]
    fn zero_jitter_is_identity() {
        let cfg = SynthConfig {
            corner_jitter_frac: 0.0,
            ..small()
        };
        let mut rng = seed::stream(0, &[]);
        assert_eq!(sample_homography(&mut rng, &cfg).unwrap(), Homography::identity());
    }

    #[test]
    fn identity_render_keeps_corners_and_range() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let p = generate_seed_pattern(0, &cfg).unwrap();
        let mut rng = seed::stream(0, &[]);
        let s = render_sample(&p, &Homography::identity(), &TextureSource::flat(100.0), &mut rng, &cfg).unwrap();
        assert_eq!(s.landmarks.coords, p.triangle.to_vec());
        assert!(s.landmarks.visible.iter().all(|&v| v));
        assert!(s.image.data.iter().all(|&v| (0.0..=255.0).contains(&v)));
        // flat textures land in the middle of their bands
        assert!(s.image.data.iter().any(|&v| v == 60.0));
        assert!(s.image.data.iter().any(|&v| (v - 207.5).abs() <= 0.5));
    }

    #[test]
    fn empty_textures_rejected() {
        assert!(matches!(TextureSource::new(vec![]), Err(Error::EmptyTextures)));
    }
}

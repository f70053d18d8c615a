//! Landmark heatmaps and the augmentations applied to landmarks.
//!
//! A heatmap is a unit disk of radius `r` around the landmark, smoothed by a
//! Gaussian kernel truncated at three standard deviations and rescaled to a
//! peak of one. Inside `r - 3 sigma` the map is exactly flat, so the blob carries
//! no hint of where in the disk the landmark sits.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Similarity};
use crate::raster::{Border, Raster};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub names: Vec<String>,
    pub coords: Vec<Point2>,
    pub visible: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(names: Vec<String>, coords: Vec<Point2>, visible: Vec<bool>) -> Result<Self> {
        let set = Self {
            names,
            coords,
            visible,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.names.len();
        if k == 0 {
            return Err(Error::Shape("landmark set needs at least one landmark".into()));
        }
        if self.coords.len() != k || self.visible.len() != k {
            return Err(Error::Shape(format!(
                "{} names, {} coords, {} flags",
                k,
                self.coords.len(),
                self.visible.len()
            )));
        }
        let unique: HashSet<&str> = self.names.iter().map(String::as_str).collect();
        if unique.len() != k {
            return Err(Error::Shape("landmark names must be unique".into()));
        }
        if let Some(i) = (0..k).find(|&i| self.visible[i] && !self.coords[i].is_finite()) {
            return Err(Error::Shape(format!("visible landmark `{}` has non-finite coords", self.names[i])));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Reorders landmarks so that entry `i` of the result is entry `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            names: order.iter().map(|&i| self.names[i].clone()).collect(),
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            visible: order.iter().map(|&i| self.visible[i]).collect(),
        }
    }

    /// Maps coordinates to a grid `factor` times finer, keeping pixel centers aligned.
    pub fn scaled(&self, factor: f64) -> Self {
        let f = |v: f64| (v + 0.5) * factor - 0.5;
        Self {
            coords: self.coords.iter().map(|p| Point2::new(f(p.x), f(p.y))).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub radius_frac: f64,
    pub smoothing_sigma: f64,
    pub image_size: usize,
}

impl HeatmapConfig {
    /// Uses the default smoothing `sigma = max(1, r / 4)`.
    pub fn new(radius_frac: f64, image_size: usize) -> Self {
        let r = radius_frac * image_size as f64;
        Self {
            radius_frac,
            smoothing_sigma: (r / 4.0).max(1.0),
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_frac > 0.0 && self.radius_frac <= 0.5) {
            return Err(Error::config("heatmap.radius_frac", "must be in (0, 0.5]"));
        }
        if !(self.smoothing_sigma > 0.0) {
            return Err(Error::config("heatmap.smoothing_sigma", "must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::config("heatmap.image_size", "must be positive"));
        }
        Ok(())
    }

    pub fn radius_px(&self) -> f64 {
        self.radius_frac * self.image_size as f64
    }

    /// Same blob geometry expressed at another resolution.
    pub fn at_size(&self, image_size: usize) -> Self {
        let f = image_size as f64 / self.image_size as f64;
        Self {
            radius_frac: self.radius_frac,
            smoothing_sigma: self.smoothing_sigma * f,
            image_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlaConfig {
    pub min_visible: usize,
    pub drop_prob: f64,
}

impl MlaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::config("mla.drop_prob", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// `k` maps of `size x size`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub k: usize,
    pub size: usize,
    pub maps: Vec<f32>,
}

impl HeatmapStack {
    pub fn channel(&self, i: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.maps[i * n..(i + 1) * n]
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.size,
            height: self.size,
            channels: self.k,
            data: self.maps.clone(),
        }
    }

    /// Writes one grayscale PNG per channel as `<stem>-<name>.png`.
    pub fn save_pngs(&self, dir: &std::path::Path, stem: &str, names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for i in 0..self.k {
            let mut r = Raster::new(self.size, self.size, 1);
            r.data.iter_mut().zip(self.channel(i)).for_each(|(d, &v)| *d = v * 255.0);
            let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            r.save_gray(&dir.join(format!("{stem}-{name}.png")))?;
        }
        Ok(())
    }
}

/// Normalized circular Gaussian kernel as `(dx, dy, weight)` taps.
fn kernel_taps(sigma: f64) -> (Vec<(i64, i64, f64)>, f64) {
    let support = 3.0 * sigma;
    let reach = support.floor() as i64;
    let mut taps = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 <= support * support {
                taps.push((dx, dy, (-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    let total: f64 = taps.iter().map(|t| t.2).sum();
    taps.iter_mut().for_each(|t| t.2 /= total);
    (taps, support)
}

/// Effective disk radius: never below one pixel so a visible blob always covers a lattice point.
fn disk_radius(cfg: &HeatmapConfig) -> f64 {
    cfg.radius_px().max(1.0)
}

/// Renders one landmark into a `image_size x image_size` map.
pub fn render_heatmap(center: Point2, visible: bool, cfg: &HeatmapConfig) -> Vec<f32> {
    let n = cfg.image_size;
    let mut out = vec![0.0f32; n * n];
    if !visible || !center.is_finite() {
        return out;
    }
    let r = disk_radius(cfg);
    let (taps, support) = kernel_taps(cfg.smoothing_sigma);
    let inside = |x: i64, y: i64| {
        let dx = x as f64 - center.x;
        let dy = y as f64 - center.y;
        dx * dx + dy * dy <= r * r
    };
    let reach = r + support;
    let x0 = (center.x - reach).floor() as i64;
    let x1 = (center.x + reach).ceil() as i64;
    let y0 = (center.y - reach).floor() as i64;
    let y1 = (center.y + reach).ceil() as i64;
    let bw = (x1 - x0 + 1) as usize;
    let mut local = vec![0.0f64; bw * (y1 - y0 + 1) as usize];
    let mut peak = 0.0f64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = (x as f64 - center.x).hypot(y as f64 - center.y);
            let v = if d <= r - support {
                1.0
            } else if d > r + support {
                0.0
            } else {
                taps.iter()
                    .filter(|&&(dx, dy, _)| inside(x + dx, y + dy))
                    .map(|t| t.2)
                    .sum()
            };
            local[(y - y0) as usize * bw + (x - x0) as usize] = v;
            peak = peak.max(v);
        }
    }
    if peak <= 0.0 {
        return out;
    }
    for y in y0.max(0)..=y1.min(n as i64 - 1) {
        for x in x0.max(0)..=x1.min(n as i64 - 1) {
            let v = local[(y - y0) as usize * bw + (x - x0) as usize] / peak;
            out[y as usize * n + x as usize] = v as f32;
        }
    }
    out
}

/// One channel per landmark, in the set's name order.
pub fn render_stack(lms: &LandmarkSet, cfg: &HeatmapConfig) -> HeatmapStack {
    let mut maps = Vec::with_capacity(lms.k() * cfg.image_size * cfg.image_size);
    for (p, &v) in lms.coords.iter().zip(&lms.visible) {
        maps.extend(render_heatmap(*p, v, cfg));
    }
    HeatmapStack {
        k: lms.k(),
        size: cfg.image_size,
        maps,
    }
}

/// Noisy landmark augmentation: shifts every visible blob center by a vector
/// drawn uniformly from the disk of the blob radius.
pub fn apply_nla(lms: &LandmarkSet, cfg: &HeatmapConfig, rng: &mut Rng) -> LandmarkSet {
    let r = cfg.radius_px();
    let mut out = lms.clone();
    if r <= 0.0 {
        return out;
    }
    for (p, &v) in out.coords.iter_mut().zip(&lms.visible) {
        if !v {
            continue;
        }
        let rho = r * rng.random::<f64>().sqrt();
        let theta = std::f64::consts::TAU * rng.random::<f64>();
        p.x += rho * theta.cos();
        p.y += rho * theta.sin();
    }
    out
}

/// Missing landmark augmentation: visits visible landmarks in random order and
/// hides each with probability `drop_prob` while more than `min_visible` remain.
pub fn apply_mla(lms: &LandmarkSet, cfg: &MlaConfig, rng: &mut Rng) -> LandmarkSet {
    let mut out = lms.clone();
    let mut order: Vec<usize> = (0..lms.k()).filter(|&i| lms.visible[i]).collect();
    order.shuffle(rng);
    let mut remaining = order.len();
    for i in order {
        if remaining > cfg.min_visible && rng.random::<f64>() < cfg.drop_prob {
            out.visible[i] = false;
            remaining -= 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentLimits {
    pub rotation_deg: f64,
    pub zoom: f64,
    pub translate: f64,
}

impl Default for AugmentLimits {
    fn default() -> Self {
        Self {
            rotation_deg: 360.0,
            zoom: 0.2,
            translate: 0.2,
        }
    }
}

impl AugmentLimits {
    pub const NONE: AugmentLimits = AugmentLimits {
        rotation_deg: 0.0,
        zoom: 0.0,
        translate: 0.0,
    };

    pub fn sample(&self, width: usize, height: usize, rng: &mut Rng) -> Similarity {
        let center = Point2::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let sym = |rng: &mut Rng, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        Similarity {
            angle_rad: sym(rng, self.rotation_deg).to_radians(),
            scale: 1.0 + sym(rng, self.zoom),
            tx: sym(rng, self.translate * width as f64),
            ty: sym(rng, self.translate * height as f64),
            center,
        }
    }
}

pub fn in_frame(p: Point2, width: usize, height: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f64 && p.y <= (height - 1) as f64
}

/// Applies one transform to landmark coordinates; landmarks leaving the frame become hidden.
pub fn transform_landmarks(lms: &LandmarkSet, t: &Similarity, width: usize, height: usize) -> LandmarkSet {
    let mut out = lms.clone();
    for (i, p) in out.coords.iter_mut().enumerate() {
        *p = t.apply(*p);
        if out.visible[i] && !in_frame(*p, width, height) {
            out.visible[i] = false;
        }
    }
    out
}

/// Samples one similarity transform and applies it to the image (bilinear,
/// edge-clamped) and analytically to the landmarks.
pub fn joint_augment(
    image: &Raster,
    lms: &LandmarkSet,
    rng: &mut Rng,
    limits: &AugmentLimits,
) -> (Raster, LandmarkSet, Similarity) {
    let t = limits.sample(image.width, image.height, rng);
    let warped = image.warp_similarity(&t, Border::Clamp);
    let moved = transform_landmarks(lms, &t, image.width, image.height);
    (warped, moved, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn set3(visible: [bool; 3]) -> LandmarkSet {
        LandmarkSet::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![Point2::new(20.0, 30.0), Point2::new(64.0, 64.0), Point2::new(100.0, 90.0)],
            visible.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn invisible_is_zero_map() {
        let cfg = HeatmapConfig::new(0.1, 64);
        assert!(render_heatmap(Point2::new(30.0, 30.0), false, &cfg).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plateau_and_decay_bounds() {
        let cfg = HeatmapConfig::new(0.05, 128);
        let c = Point2::new(64.0, 64.0);
        let m = render_heatmap(c, true, &cfg);
        let r = cfg.radius_px();
        let s3 = 3.0 * cfg.smoothing_sigma;
        for y in 0..128 {
            for x in 0..128 {
                let d = Point2::new(x as f64, y as f64).dist(c);
                let v = m[y * 128 + x];
                assert!((0.0..=1.0).contains(&v));
                if d <= r - s3 {
                    assert_eq!(v, 1.0, "plateau at d={d}");
                }
                if d > r + s3 {
                    assert!(v < 0.01, "tail at d={d}: {v}");
                }
            }
        }
    }

    #[test]
    fn stack_follows_name_order_and_permutation() {
        let cfg = HeatmapConfig::new(0.05, 128);
        let lms = set3([true, true, true]);
        let s = render_stack(&lms, &cfg);
        assert_eq!(s.k, 3);
        assert!((0..3).all(|i| s.channel(i).iter().any(|&v| v > 0.0)));
        let p = lms.permuted(&[2, 0, 1]);
        let sp = render_stack(&p, &cfg);
        assert_eq!(sp.channel(0), s.channel(2));
        assert_eq!(sp.channel(1), s.channel(0));
        assert_eq!(sp.channel(2), s.channel(1));
    }

    #[test]
    fn nla_zero_radius_is_identity() {
        let cfg = HeatmapConfig {
            radius_frac: 0.0,
            smoothing_sigma: 1.0,
            image_size: 128,
        };
        let lms = set3([true, false, true]);
        let mut rng = seed::stream(1, &[]);
        assert_eq!(apply_nla(&lms, &cfg, &mut rng), lms);
    }

    #[test]
    fn mla_forced_drops_and_guard() {
        let names: Vec<String> = (0..5).map(|i| format!("l{i}")).collect();
        let lms = LandmarkSet::new(names, vec![Point2::new(1.0, 1.0); 5], vec![true; 5]).unwrap();
        let mut rng = seed::stream(2, &[]);
        let forced = MlaConfig {
            min_visible: 3,
            drop_prob: 1.0,
        };
        for _ in 0..50 {
            assert_eq!(apply_mla(&lms, &forced, &mut rng).visible_count(), 3);
        }
        let guard = MlaConfig {
            min_visible: 5,
            drop_prob: 1.0,
        };
        assert_eq!(apply_mla(&lms, &guard, &mut rng), lms);
    }

    #[test]
    fn zero_limit_augment_is_identity() {
        let mut img = Raster::new(16, 16, 1);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        let lms = LandmarkSet::new(vec!["a".into()], vec![Point2::new(3.0, 4.0)], vec![true]).unwrap();
        let mut rng = seed::stream(4, &[]);
        let (out, moved, _) = joint_augment(&img, &lms, &mut rng, &AugmentLimits::NONE);
        assert_eq!(out, img);
        assert_eq!(moved, lms);
    }

    #[test]
    fn out_of_frame_landmarks_become_hidden() {
        let lms = set3([true, true, true]);
        let t = Similarity {
            tx: 60.0,
            ..Similarity::identity(Point2::new(63.5, 63.5))
        };
        let moved = transform_landmarks(&lms, &t, 128, 128);
        assert_eq!(moved.visible, vec![true, true, false]);
        assert_eq!(moved.k(), 3);
    }

    #[test]
    fn landmark_set_validation() {
        assert!(LandmarkSet::new(vec![], vec![], vec![]).is_err());
        assert!(LandmarkSet::new(
            vec!["a".into(), "a".into()],
            vec![Point2::default(); 2],
            vec![true; 2]
        )
        .is_err());
        assert!(LandmarkSet::new(vec!["a".into()], vec![Point2::new(f64::NAN, 0.0)], vec![false]).is_ok());
        assert!(LandmarkSet::new(vec!["a".into()], vec![Point2::new(f64::NAN, 0.0)], vec![true]).is_err());
    }
}

//! Browser bindings for a static page: render a synthetic sample, overlay its
//! landmark heatmaps at a chosen radius, and apply noisy / missing landmark
//! augmentation interactively.

use wasm_bindgen::prelude::*;

use landmark_reid::heatmap::{apply_mla, apply_nla, render_stack, HeatmapConfig, LandmarkSet, MlaConfig};
use landmark_reid::raster::Raster;
use landmark_reid::seed::{self, tag};
use landmark_reid::synthgen::{generate_seed_pattern, render_sample, sample_homography, SynthConfig, TextureSource};

const COLORS: [[f32; 3]; 3] = [[230.0, 40.0, 40.0], [40.0, 200.0, 60.0], [50.0, 110.0, 255.0]];

fn js_err(e: landmark_reid::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One rendered synthetic example and its true landmarks.
#[wasm_bindgen]
pub struct Demo {
    image: Raster,
    landmarks: LandmarkSet,
    fed: LandmarkSet,
}

#[wasm_bindgen]
impl Demo {
    /// Renders example `example` of identity `identity` at 128 px.
    #[wasm_bindgen(constructor)]
    pub fn new(identity: u32, example: u32, seed: u32, corner_jitter: f64) -> Result<Demo, JsError> {
        let cfg = SynthConfig {
            n_identities: identity as usize + 1,
            corner_jitter_frac: corner_jitter,
            master_seed: seed as u64,
            ..SynthConfig::default()
        };
        cfg.validate().map_err(js_err)?;
        let pattern = generate_seed_pattern(identity as usize, &cfg).map_err(js_err)?;
        let textures = TextureSource::procedural(cfg.master_seed, 2, cfg.image_size).map_err(js_err)?;
        let mut rng = seed::stream(cfg.master_seed, &[tag::EXAMPLE, identity as u64, example as u64]);
        let h = sample_homography(&mut rng, &cfg).map_err(js_err)?;
        let s = render_sample(&pattern, &h, &textures, &mut rng, &cfg).map_err(js_err)?;
        Ok(Demo {
            image: s.image,
            fed: s.landmarks.clone(),
            landmarks: s.landmarks,
        })
    }

    pub fn size(&self) -> u32 {
        self.image.width as u32
    }

    /// Re-draws the fed landmarks from the truth: NLA shifts each blob center
    /// within the radius, MLA hides landmarks down to `min_visible`.
    pub fn augment(&mut self, radius_frac: f64, nla: bool, mla: bool, min_visible: u32, drop_prob: f64, seed: u32) -> Result<(), JsError> {
        let hm = self.heatmap_config(radius_frac)?;
        let mut rng = seed::stream(seed as u64, &[tag::AUGMENT]);
        let mut lms = self.landmarks.clone();
        if mla {
            let m = MlaConfig {
                min_visible: min_visible as usize,
                drop_prob,
            };
            m.validate().map_err(js_err)?;
            lms = apply_mla(&lms, &m, &mut rng);
        }
        if nla {
            lms = apply_nla(&lms, &hm, &mut rng);
        }
        self.fed = lms;
        Ok(())
    }

    /// Restores the fed landmarks to the truth.
    pub fn reset(&mut self) {
        self.fed = self.landmarks.clone();
    }

    /// `[x, y, visible]` per landmark, truth first then fed.
    pub fn landmarks(&self) -> Vec<f64> {
        [&self.landmarks, &self.fed]
            .iter()
            .flat_map(|l| {
                l.coords
                    .iter()
                    .zip(&l.visible)
                    .flat_map(|(p, &v)| [p.x, p.y, if v { 1.0 } else { 0.0 }])
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// RGBA pixels of the grayscale image with the fed heatmaps tinted one colour per landmark.
    pub fn overlay_rgba(&self, radius_frac: f64, show_heatmaps: bool) -> Result<Vec<u8>, JsError> {
        let n = self.image.width * self.image.height;
        let stack = if show_heatmaps {
            Some(render_stack(&self.fed, &self.heatmap_config(radius_frac)?))
        } else {
            None
        };
        let mut out = Vec::with_capacity(4 * n);
        for i in 0..n {
            let g = self.image.data[i];
            let mut rgb = [g, g, g];
            if let Some(st) = &stack {
                for (c, color) in COLORS.iter().enumerate().take(st.k) {
                    let a = 0.6 * st.channel(c)[i];
                    for j in 0..3 {
                        rgb[j] = (1.0 - a) * rgb[j] + a * color[j];
                    }
                }
            }
            out.extend(rgb.iter().map(|v| v.clamp(0.0, 255.0) as u8));
            out.push(255);
        }
        Ok(out)
    }

    /// Heatmap channel `index` alone as RGBA.
    pub fn heatmap_rgba(&self, radius_frac: f64, index: u32) -> Result<Vec<u8>, JsError> {
        let stack = render_stack(&self.fed, &self.heatmap_config(radius_frac)?);
        if index as usize >= stack.k {
            return Err(JsError::new("landmark index out of range"));
        }
        Ok(stack
            .channel(index as usize)
            .iter()
            .flat_map(|&v| {
                let b = (v * 255.0).clamp(0.0, 255.0) as u8;
                [b, b, b, 255]
            })
            .collect())
    }
}

impl Demo {
    fn heatmap_config(&self, radius_frac: f64) -> Result<HeatmapConfig, JsError> {
        let hm = HeatmapConfig::new(radius_frac, self.image.width);
        hm.validate().map_err(js_err)?;
        Ok(hm)
    }
}

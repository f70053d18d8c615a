//! The landmark-aware re-identification network.
//!
//! Input is `3 + k` channels (image plus one heatmap per landmark). A residual
//! backbone is globally average pooled, reduced by one linear layer to the
//! embedding, and followed by a batch-norm neck and the identity classifier.
//! The optional decoder reconstructs the `k` heatmaps at 64x64 from the embedding.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::raster::Raster;
use crate::nn::{Act, BatchNorm, Conv2d, Linear, Mat, MaxPool, Module, Param, Real, Upsample2x};
use crate::seed::{self, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// 50-layer bottleneck residual network.
    Resnet50,
    /// Four basic residual blocks, for desk-scale runs.
    SmallResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    pub n_train_classes: usize,
    pub embed_dim: usize,
    pub backbone: BackboneKind,
    /// Block widths of the small backbone.
    pub small_widths: Vec<usize>,
    pub decoder_out: usize,
    pub decoder_seed_channels: usize,
    /// Output channels of the three upsampling blocks.
    pub decoder_channels: [usize; 3],
    pub pretrained: bool,
    pub pretrained_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 3,
            n_train_classes: 750,
            embed_dim: 256,
            backbone: BackboneKind::Resnet50,
            small_widths: vec![32, 64, 128, 256],
            decoder_out: 64,
            decoder_seed_channels: 128,
            decoder_channels: [64, 32, 32],
            pretrained: false,
            pretrained_path: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be positive"));
        }
        if self.n_train_classes == 0 {
            return Err(Error::config("model.n_train_classes", "must be positive"));
        }
        if self.decoder_out == 0 || self.decoder_out % 8 != 0 {
            return Err(Error::config("model.decoder_out", "must be a positive multiple of 8"));
        }
        if self.backbone == BackboneKind::SmallResidual && self.small_widths.len() != 4 {
            return Err(Error::config("model.small_widths", "needs four widths"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        3 + self.k
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    FirstConv,
    Backbone,
    Head,
    Classifier,
    Decoder,
}

pub const FIRST_CONV: &str = "backbone.conv1.weight";

pub fn param_group(name: &str) -> ParamGroup {
    if name == FIRST_CONV {
        ParamGroup::FirstConv
    } else if name.starts_with("backbone.") {
        ParamGroup::Backbone
    } else if name.starts_with("head.") {
        ParamGroup::Head
    } else if name.starts_with("classifier.") {
        ParamGroup::Classifier
    } else {
        ParamGroup::Decoder
    }
}

/// Training stages: adapt new layers, fine-tune, warm the decoder, fine-tune all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1a")]
    S1a,
    #[serde(rename = "1b")]
    S1b,
    #[serde(rename = "2a")]
    S2a,
    #[serde(rename = "2b")]
    S2b,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::S1a, Stage::S1b, Stage::S2a, Stage::S2b];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::S1a => "1a",
            Stage::S1b => "1b",
            Stage::S2a => "2a",
            Stage::S2b => "2b",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|v| v.tag() == s)
    }

    pub fn uses_decoder(self) -> bool {
        matches!(self, Stage::S2a | Stage::S2b)
    }

    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            Stage::S1a => matches!(group, ParamGroup::FirstConv | ParamGroup::Classifier),
            Stage::S1b => group != ParamGroup::Decoder,
            Stage::S2a => group == ParamGroup::Decoder,
            Stage::S2b => true,
        }
    }
}

#[derive(Debug, Clone)]
struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    down: Option<(Conv2d<T>, BatchNorm<T>)>,
    a1: Option<Act<T>>,
    out: Option<Act<T>>,
}

impl<T: Real> BasicBlock<T> {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(&format!("{name}.downsample.0"), cin, cout, 1, stride, 0, false, rng),
                BatchNorm::new(&format!("{name}.downsample.1"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm::new(&format!("{name}.bn1"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(&format!("{name}.bn2"), cout),
            down,
            a1: None,
            out: None,
        }
    }

    fn forward(&mut self, x: &Act<T>, train: bool, record: bool) -> Act<T> {
        let mut a1 = self.bn1.forward(self.conv1.forward(x, record), train, record);
        a1.relu_inplace();
        let mut out = self.bn2.forward(self.conv2.forward(&a1, record), train, record);
        match &mut self.down {
            Some((c, b)) => out.add_assign(&b.forward(c.forward(x, record), train, record)),
            None => out.add_assign(x),
        }
        out.relu_inplace();
        if record {
            self.a1 = Some(a1);
            self.out = Some(out.clone());
        }
        out
    }

    fn backward(&mut self, mut dy: Act<T>) -> Act<T> {
        self.out.take().expect("recorded").relu_backward(&mut dy);
        let g = self.bn2.backward(dy.clone(), true);
        let mut g = self.conv2.backward(&g, true).expect("dx");
        self.a1.take().expect("recorded").relu_backward(&mut g);
        let g = self.bn1.backward(g, true);
        let mut dx = self.conv1.backward(&g, true).expect("dx");
        match &mut self.down {
            Some((c, b)) => {
                let g = b.backward(dy, true);
                dx.add_assign(&c.backward(&g, true).expect("dx"));
            }
            None => dx.add_assign(&dy),
        }
        dx
    }

    fn visit(&self, f: &mut dyn FnMut(&dyn Module<T>)) {
        f(&self.conv1);
        f(&self.bn1);
        f(&self.conv2);
        f(&self.bn2);
        if let Some((c, b)) = &self.down {
            f(c);
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut dyn Module<T>)) {
        f(&mut self.conv1);
        f(&mut self.bn1);
        f(&mut self.conv2);
        f(&mut self.bn2);
        if let Some((c, b)) = &mut self.down {
            f(c);
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
struct Bottleneck<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm<T>,
    down: Option<(Conv2d<T>, BatchNorm<T>)>,
    a1: Option<Act<T>>,
    a2: Option<Act<T>>,
    out: Option<Act<T>>,
}

impl<T: Real> Bottleneck<T> {
    fn new(name: &str, cin: usize, width: usize, stride: usize, rng: &mut Rng) -> Self {
        let cout = width * 4;
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(&format!("{name}.downsample.0"), cin, cout, 1, stride, 0, false, rng),
                BatchNorm::new(&format!("{name}.downsample.1"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, width, 1, 1, 0, false, rng),
            bn1: BatchNorm::new(&format!("{name}.bn1"), width),
            conv2: Conv2d::new(&format!("{name}.conv2"), width, width, 3, stride, 1, false, rng),
            bn2: BatchNorm::new(&format!("{name}.bn2"), width),
            conv3: Conv2d::new(&format!("{name}.conv3"), width, cout, 1, 1, 0, false, rng),
            bn3: BatchNorm::new(&format!("{name}.bn3"), cout),
            down,
            a1: None,
            a2: None,
            out: None,
        }
    }

    fn forward(&mut self, x: &Act<T>, train: bool, record: bool) -> Act<T> {
        let mut a1 = self.bn1.forward(self.conv1.forward(x, record), train, record);
        a1.relu_inplace();
        let mut a2 = self.bn2.forward(self.conv2.forward(&a1, record), train, record);
        a2.relu_inplace();
        let mut out = self.bn3.forward(self.conv3.forward(&a2, record), train, record);
        match &mut self.down {
            Some((c, b)) => out.add_assign(&b.forward(c.forward(x, record), train, record)),
            None => out.add_assign(x),
        }
        out.relu_inplace();
        if record {
            self.a1 = Some(a1);
            self.a2 = Some(a2);
            self.out = Some(out.clone());
        }
        out
    }

    fn backward(&mut self, mut dy: Act<T>) -> Act<T> {
        self.out.take().expect("recorded").relu_backward(&mut dy);
        let g = self.bn3.backward(dy.clone(), true);
        let mut g = self.conv3.backward(&g, true).expect("dx");
        self.a2.take().expect("recorded").relu_backward(&mut g);
        let g = self.bn2.backward(g, true);
        let mut g = self.conv2.backward(&g, true).expect("dx");
        self.a1.take().expect("recorded").relu_backward(&mut g);
        let g = self.bn1.backward(g, true);
        let mut dx = self.conv1.backward(&g, true).expect("dx");
        match &mut self.down {
            Some((c, b)) => {
                let g = b.backward(dy, true);
                dx.add_assign(&c.backward(&g, true).expect("dx"));
            }
            None => dx.add_assign(&dy),
        }
        dx
    }

    fn visit(&self, f: &mut dyn FnMut(&dyn Module<T>)) {
        f(&self.conv1);
        f(&self.bn1);
        f(&self.conv2);
        f(&self.bn2);
        f(&self.conv3);
        f(&self.bn3);
        if let Some((c, b)) = &self.down {
            f(c);
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut dyn Module<T>)) {
        f(&mut self.conv1);
        f(&mut self.bn1);
        f(&mut self.conv2);
        f(&mut self.bn2);
        f(&mut self.conv3);
        f(&mut self.bn3);
        if let Some((c, b)) = &mut self.down {
            f(c);
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
enum Block<T> {
    Basic(BasicBlock<T>),
    Bottleneck(Bottleneck<T>),
}

impl<T: Real> Block<T> {
    fn forward(&mut self, x: &Act<T>, train: bool, record: bool) -> Act<T> {
        match self {
            Block::Basic(b) => b.forward(x, train, record),
            Block::Bottleneck(b) => b.forward(x, train, record),
        }
    }

    fn backward(&mut self, dy: Act<T>) -> Act<T> {
        match self {
            Block::Basic(b) => b.backward(dy),
            Block::Bottleneck(b) => b.backward(dy),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&dyn Module<T>)) {
        match self {
            Block::Basic(b) => b.visit(f),
            Block::Bottleneck(b) => b.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut dyn Module<T>)) {
        match self {
            Block::Basic(b) => b.visit_mut(f),
            Block::Bottleneck(b) => b.visit_mut(f),
        }
    }
}

#[derive(Debug, Clone)]
struct Backbone<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    pool: Option<MaxPool>,
    blocks: Vec<Block<T>>,
    out_channels: usize,
    stem_out: Option<Act<T>>,
    feat_hw: (usize, usize),
}

impl<T: Real> Backbone<T> {
    fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let cin = cfg.in_channels();
        match cfg.backbone {
            BackboneKind::Resnet50 => {
                let mut blocks = Vec::new();
                let mut ch = 64;
                for (li, (&n, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
                    for bi in 0..n {
                        let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                        let name = format!("backbone.layer{}.{bi}", li + 1);
                        blocks.push(Block::Bottleneck(Bottleneck::new(&name, ch, width, stride, rng)));
                        ch = width * 4;
                    }
                }
                Self {
                    conv1: Conv2d::new("backbone.conv1", cin, 64, 7, 2, 3, false, rng),
                    bn1: BatchNorm::new("backbone.bn1", 64),
                    pool: Some(MaxPool::default()),
                    blocks,
                    out_channels: ch,
                    stem_out: None,
                    feat_hw: (0, 0),
                }
            }
            BackboneKind::SmallResidual => {
                let w = &cfg.small_widths;
                let mut blocks = Vec::new();
                let mut ch = w[0];
                for (i, &width) in w.iter().enumerate() {
                    let name = format!("backbone.layer{}.0", i + 1);
                    blocks.push(Block::Basic(BasicBlock::new(&name, ch, width, 2, rng)));
                    ch = width;
                }
                Self {
                    conv1: Conv2d::new("backbone.conv1", cin, w[0], 3, 2, 1, false, rng),
                    bn1: BatchNorm::new("backbone.bn1", w[0]),
                    pool: None,
                    blocks,
                    out_channels: ch,
                    stem_out: None,
                    feat_hw: (0, 0),
                }
            }
        }
    }

    fn forward(&mut self, x: &Act<T>, train: bool, record: bool) -> Mat<T> {
        let mut h = self.bn1.forward(self.conv1.forward(x, record), train, record);
        h.relu_inplace();
        if record {
            self.stem_out = Some(h.clone());
        }
        if let Some(p) = &mut self.pool {
            h = p.forward(&h, record);
        }
        for b in &mut self.blocks {
            h = b.forward(&h, train, record);
        }
        self.feat_hw = (h.h, h.w);
        h.global_avg_pool()
    }

    fn backward(&mut self, d_pooled: &Mat<T>, need_dx: bool) -> Option<Act<T>> {
        let mut g = Act::global_avg_pool_backward(d_pooled, self.feat_hw.0, self.feat_hw.1);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(g);
        }
        if let Some(p) = &mut self.pool {
            g = p.backward(&g);
        }
        self.stem_out.take().expect("recorded").relu_backward(&mut g);
        let g = self.bn1.backward(g, true);
        self.conv1.backward(&g, need_dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&dyn Module<T>)) {
        f(&self.conv1);
        f(&self.bn1);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut dyn Module<T>)) {
        f(&mut self.conv1);
        f(&mut self.bn1);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock<T> {
    up: Upsample2x,
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
    out: Option<Act<T>>,
}

/// Embedding -> seed map -> three (upsample, 3x3 conv, BN, ReLU) blocks -> 1x1 conv to k logits.
#[derive(Debug, Clone)]
struct Decoder<T> {
    fc: Linear<T>,
    blocks: Vec<DecoderBlock<T>>,
    head: Conv2d<T>,
    seed_c: usize,
    seed_hw: usize,
}

impl<T: Real> Decoder<T> {
    fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let seed_hw = cfg.decoder_out / 8;
        let seed_c = cfg.decoder_seed_channels;
        let fc = Linear::new(
            "decoder.fc",
            cfg.embed_dim,
            seed_c * seed_hw * seed_hw,
            (1.0 / cfg.embed_dim as f64).sqrt(),
            true,
            rng,
        );
        let mut cin = seed_c;
        let blocks = cfg
            .decoder_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let b = DecoderBlock {
                    up: Upsample2x::default(),
                    conv: Conv2d::new(&format!("decoder.block{i}.conv"), cin, cout, 3, 1, 1, false, rng),
                    bn: BatchNorm::new(&format!("decoder.block{i}.bn"), cout),
                    out: None,
                };
                cin = cout;
                b
            })
            .collect();
        let mut head = Conv2d::new("decoder.head", cin, cfg.k, 1, 1, 0, true, rng);
        head.weight.value.iter_mut().for_each(|v| *v *= T::from_f64c(0.1));
        Self {
            fc,
            blocks,
            head,
            seed_c,
            seed_hw,
        }
    }

    fn forward(&mut self, emb: &Mat<T>, train: bool, record: bool) -> Act<T> {
        let s = self.fc.forward(emb, record);
        let mut h = s.to_act(self.seed_c, self.seed_hw, self.seed_hw);
        for b in &mut self.blocks {
            let up = b.up.forward(&h);
            h = b.bn.forward(b.conv.forward(&up, record), train, record);
            h.relu_inplace();
            if record {
                b.out = Some(h.clone());
            }
        }
        self.head.forward(&h, record)
    }

    fn backward(&mut self, d_logits: &Act<T>, need_dx: bool) -> Option<Mat<T>> {
        let mut g = self.head.backward(d_logits, true).expect("dx");
        for b in self.blocks.iter_mut().rev() {
            b.out.take().expect("recorded").relu_backward(&mut g);
            let gb = b.bn.backward(g, true);
            let gc = b.conv.backward(&gb, true).expect("dx");
            g = b.up.backward(&gc);
        }
        let gm = Mat::from_act(&g);
        self.fc.backward(&gm, need_dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&dyn Module<T>)) {
        f(&self.fc);
        for b in &self.blocks {
            f(&b.conv);
            f(&b.bn);
        }
        f(&self.head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut dyn Module<T>)) {
        f(&mut self.fc);
        for b in &mut self.blocks {
            f(&mut b.conv);
            f(&mut b.bn);
        }
        f(&mut self.head);
    }
}

fn mat_to_act<T: Real>(m: &Mat<T>) -> Act<T> {
    m.to_act(m.cols, 1, 1)
}

fn act_to_mat<T: Real>(a: &Act<T>) -> Mat<T> {
    Mat::from_act(a)
}

const IMAGE_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGE_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Packs images (three planes in `[0, 255]`) and optional heatmap stacks into the
/// batch-major network input `[n][3 + k][h][w]`.
pub fn encode_batch(images: &[&Raster], heatmaps: &[Option<&HeatmapStack>], k: usize) -> Result<Vec<f32>> {
    let n = images.len();
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let c = 3 + k;
    let mut out = vec![0.0f32; n * c * plane];
    for (i, img) in images.iter().enumerate() {
        if (img.width, img.height, img.channels) != (w, h, 3) {
            return Err(Error::Shape(format!(
                "image {i} is {}x{}x{}; expected {w}x{h}x3",
                img.width, img.height, img.channels
            )));
        }
        let base = i * c * plane;
        for ch in 0..3 {
            let dst = &mut out[base + ch * plane..base + (ch + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(img.plane(ch)) {
                *d = (v / 255.0 - IMAGE_MEAN[ch]) / IMAGE_STD[ch];
            }
        }
        if k == 0 {
            continue;
        }
        let stack = heatmaps
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Shape(format!("image {i} has no heatmaps but k = {k}")))?;
        if stack.k != k || stack.size != h || h != w {
            return Err(Error::Shape(format!(
                "heatmap stack {i} is {}x{}x{}; expected {k}x{h}x{w}",
                stack.k, stack.size, stack.size
            )));
        }
        out[base + 3 * plane..base + c * plane].copy_from_slice(&stack.maps);
    }
    Ok(out)
}

/// Raw network outputs for a batch.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// Pre-neck features `[n, embed_dim]`, used by the metric losses and at inference.
    pub embedding: Mat<T>,
    pub logits: Mat<T>,
    /// Pre-sigmoid reconstruction `[k][n][64][64]` when the decoder is attached.
    pub recon_logits: Option<Act<T>>,
}

/// Network outputs in plain layout: recon is `[n][k][64][64]` probabilities.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub embedding: Mat<f32>,
    pub logits: Mat<f32>,
    pub recon: Vec<f32>,
    pub recon_shape: [usize; 4],
}

impl<T: Real> Forward<T> {
    pub fn output(&self) -> ModelOutput {
        let (recon, recon_shape) = match &self.recon_logits {
            Some(r) => (
                r.to_nchw()
                    .iter()
                    .map(|v| {
                        let x = v.to_f64().unwrap();
                        (1.0 / (1.0 + (-x).exp())) as f32
                    })
                    .collect(),
                [r.n, r.c, r.h, r.w],
            ),
            None => (Vec::new(), [self.embedding.rows, 0, 0, 0]),
        };
        ModelOutput {
            embedding: self.embedding.cast(),
            logits: self.logits.cast(),
            recon,
            recon_shape,
        }
    }
}

/// Gradients of the loss with respect to each network output.
#[derive(Debug, Clone)]
pub struct OutputGrads<T> {
    pub embedding: Mat<T>,
    pub logits: Mat<T>,
    pub recon_logits: Option<Act<T>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub pretrained: Vec<String>,
    pub random: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LandmarkNet<T> {
    pub config: ModelConfig,
    backbone: Backbone<T>,
    embed: Linear<T>,
    neck: BatchNorm<T>,
    classifier: Linear<T>,
    decoder: Option<Decoder<T>>,
}

impl<T: Real> LandmarkNet<T> {
    /// Randomly initialized network without a decoder.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(config.seed, &[tag::INIT, 0]);
        let backbone = Backbone::new(&config, &mut rng);
        let c = backbone.out_channels;
        let embed = Linear::new("head.embed", c, config.embed_dim, (2.0 / c as f64).sqrt(), true, &mut rng);
        let neck = BatchNorm::new("head.neck", config.embed_dim);
        let classifier = Linear::new("classifier", config.embed_dim, config.n_train_classes, 0.001, false, &mut rng);
        Ok(Self {
            config,
            backbone,
            embed,
            neck,
            classifier,
            decoder: None,
        })
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    /// Attaches a freshly initialized decoder (no-op if present).
    pub fn attach_decoder(&mut self) {
        if self.decoder.is_none() {
            let mut rng = seed::stream(self.config.seed, &[tag::INIT, 1]);
            self.decoder = Some(Decoder::new(&self.config, &mut rng));
        }
    }

    fn visit_modules(&self, f: &mut dyn FnMut(&dyn Module<T>)) {
        self.backbone.visit(f);
        f(&self.embed);
        f(&self.neck);
        f(&self.classifier);
        if let Some(d) = &self.decoder {
            d.visit(f);
        }
    }

    fn visit_modules_mut(&mut self, f: &mut dyn FnMut(&mut dyn Module<T>)) {
        self.backbone.visit_mut(f);
        f(&mut self.embed);
        f(&mut self.neck);
        f(&mut self.classifier);
        if let Some(d) = &mut self.decoder {
            d.visit_mut(f);
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.visit_modules(&mut |m| m.visit_params(f));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.visit_modules_mut(&mut |m| m.visit_params_mut(f));
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Vec<T>)) {
        self.visit_modules(&mut |m| m.visit_buffers(&mut |n, v| f(n, v)));
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.visit_modules_mut(&mut |m| m.visit_buffers_mut(f));
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit_params(&mut |p| v.push(p.name.clone()));
        v
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Sets `requires_grad` from the stage's trainable groups.
    pub fn set_stage(&mut self, stage: Stage) {
        self.visit_params_mut(&mut |p| p.requires_grad = stage.trains(param_group(&p.name)));
    }

    /// SHA-256 over the values of every parameter accepted by `filter`.
    pub fn digest(&self, filter: &dyn Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |p| {
            if filter(&p.name) {
                h.update(p.name.as_bytes());
                for v in &p.value {
                    h.update(v.to_f64().unwrap().to_le_bytes());
                }
            }
        });
        hex::encode(h.finalize())
    }

    /// `input` is batch-major `[n][3 + k][h][w]`. `train` selects batch statistics in
    /// normalization layers; `record` keeps what the backward pass needs.
    pub fn forward(&mut self, n: usize, h: usize, w: usize, input: &[T], train: bool, record: bool) -> Result<Forward<T>> {
        let c = self.config.in_channels();
        if input.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "input has {} values; expected {n}x{c}x{h}x{w} for k = {}",
                input.len(),
                self.config.k
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!("input {h}x{w} must be divisible by 32")));
        }
        let x = Act::from_nchw(n, c, h, w, input);
        self.forward_act(&x, train, record)
    }

    pub fn forward_act(&mut self, x: &Act<T>, train: bool, record: bool) -> Result<Forward<T>> {
        if x.c != self.config.in_channels() {
            return Err(Error::Shape(format!(
                "input has {} channels; model expects 3 + k = {}",
                x.c,
                self.config.in_channels()
            )));
        }
        let pooled = self.backbone.forward(x, train, record);
        let embedding = self.embed.forward(&pooled, record);
        let necked = act_to_mat(&self.neck.forward(mat_to_act(&embedding), train, record));
        let logits = self.classifier.forward(&necked, record);
        let recon_logits = match &mut self.decoder {
            Some(d) => Some(d.forward(&embedding, train, record)),
            None => None,
        };
        Ok(Forward {
            embedding,
            logits,
            recon_logits,
        })
    }

    fn any_trainable(&self, pred: &dyn Fn(ParamGroup) -> bool) -> bool {
        let mut any = false;
        self.visit_params(&mut |p| any |= p.requires_grad && pred(param_group(&p.name)));
        any
    }

    /// Accumulates parameter gradients from a recorded forward pass. The trunk is
    /// skipped when none of its parameters train and no input gradient is requested.
    pub fn backward(&mut self, grads: OutputGrads<T>, need_input_grad: bool) -> Option<Act<T>> {
        let trunk = need_input_grad
            || self.any_trainable(&|g| matches!(g, ParamGroup::FirstConv | ParamGroup::Backbone | ParamGroup::Head));
        let mut d_emb = grads.embedding;
        let d_neck = self.classifier.backward(&grads.logits, trunk);
        if let (Some(dec), Some(dr)) = (&mut self.decoder, &grads.recon_logits) {
            if let Some(g) = dec.backward(dr, trunk) {
                d_emb.add_assign(&g);
            }
        }
        if !trunk {
            return None;
        }
        let d_neck = d_neck.expect("requested");
        let g = self.neck.backward(mat_to_act(&d_neck), true);
        d_emb.add_assign(&act_to_mat(&g));
        let d_pooled = self.embed.backward(&d_emb, true).expect("dx");
        self.backbone.backward(&d_pooled, need_input_grad)
    }

    pub fn cast<U: Real>(&self) -> LandmarkNet<U> {
        let mut out = LandmarkNet::<U>::new(self.config.clone()).expect("validated config");
        if self.has_decoder() {
            out.attach_decoder();
        }
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        self.visit_params(&mut |p| {
            values.insert(p.name.clone(), p.value.iter().map(|v| v.to_f64().unwrap()).collect());
        });
        self.visit_buffers(&mut |n, b| {
            values.insert(n.to_string(), b.iter().map(|v| v.to_f64().unwrap()).collect());
        });
        out.visit_params_mut(&mut |p| {
            p.value = values[&p.name].iter().map(|&v| U::from_f64c(v)).collect();
            p.requires_grad = true;
        });
        out.visit_buffers_mut(&mut |n, b| *b = values[n].iter().map(|&v| U::from_f64c(v)).collect());
        out
    }
}

/// Builds the network; with `pretrained`, copies every backbone tensor except the
/// first convolution from the checkpoint at `pretrained_path`.
pub fn init_parameters(cfg: &ModelConfig) -> Result<(LandmarkNet<f32>, InitReport)> {
    let mut net = LandmarkNet::<f32>::new(cfg.clone())?;
    let mut report = InitReport::default();
    if !cfg.pretrained {
        report.random = net.param_names();
        return Ok((net, report));
    }
    let path = cfg
        .pretrained_path
        .as_ref()
        .ok_or_else(|| Error::PretrainedUnavailable("no pretrained_path configured".into()))?;
    if !path.is_file() {
        return Err(Error::PretrainedUnavailable(format!("{} not found", path.display())));
    }
    let ckpt = Checkpoint::read(path).map_err(|e| Error::PretrainedUnavailable(e.to_string()))?;
    let mut missing = Vec::new();
    net.visit_params_mut(&mut |p| {
        let eligible = param_group(&p.name) == ParamGroup::Backbone;
        match ckpt.tensors.get(&p.name) {
            Some(t) if eligible && t.shape == p.shape => {
                p.value = t.data.clone();
                report.pretrained.push(p.name.clone());
            }
            _ => {
                if eligible {
                    missing.push(p.name.clone());
                }
                report.random.push(p.name.clone());
            }
        }
    });
    if !missing.is_empty() {
        return Err(Error::PretrainedUnavailable(format!(
            "{} backbone tensors missing or mis-shaped, e.g. {}",
            missing.len(),
            missing[0]
        )));
    }
    net.visit_buffers_mut(&mut |n, b| {
        if let Some(t) = ckpt.tensors.get(n) {
            if t.data.len() == b.len() {
                *b = t.data.clone();
            }
        }
    });
    Ok((net, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    stage: Option<Stage>,
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

const CKPT_MAGIC: &[u8; 8] = b"LMRCKPT1";

/// Parameters, buffers and any extra named tensors, plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: Option<Stage>,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(net: &LandmarkNet<f32>, stage: Option<Stage>) -> Self {
        let mut tensors = BTreeMap::new();
        net.visit_params(&mut |p| {
            tensors.insert(
                p.name.clone(),
                TensorEntry {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                },
            );
        });
        net.visit_buffers(&mut |n, b| {
            tensors.insert(
                n.to_string(),
                TensorEntry {
                    shape: vec![b.len()],
                    data: b.clone(),
                },
            );
        });
        Self {
            config: net.config.clone(),
            stage,
            meta: serde_json::Value::Null,
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<LandmarkNet<f32>> {
        let mut net = LandmarkNet::<f32>::new(self.config.clone())?;
        if self.tensors.keys().any(|k| k.starts_with("decoder.")) {
            net.attach_decoder();
        }
        let mut problems = Vec::new();
        net.visit_params_mut(&mut |p| match self.tensors.get(&p.name) {
            Some(t) if t.data.len() == p.numel() => p.value = t.data.clone(),
            _ => problems.push(p.name.clone()),
        });
        net.visit_buffers_mut(&mut |n, b| match self.tensors.get(n) {
            Some(t) if t.data.len() == b.len() => *b = t.data.clone(),
            _ => problems.push(n.to_string()),
        });
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("missing or mis-shaped tensors: {problems:?}")));
        }
        Ok(net)
    }

    pub fn insert_extra(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.to_string(), TensorEntry { shape, data });
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            stage: self.stage,
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.shape.clone())).collect(),
        };
        let hjson = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut buf = Vec::with_capacity(16 + hjson.len() + self.tensors.values().map(|t| t.data.len() * 4).sum::<usize>());
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        buf.extend_from_slice(&hjson);
        for t in self.tensors.values() {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(
            bytes
                .get(16..16 + hlen)
                .ok_or_else(|| Error::Checkpoint("truncated header".into()))?,
        )?;
        let mut off = 16 + hlen;
        let mut tensors = BTreeMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(off..off + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {name}")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            off += 4 * n;
            tensors.insert(name, TensorEntry { shape, data });
        }
        Ok(Self {
            config: header.config,
            stage: header.stage,
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize) -> ModelConfig {
        ModelConfig {
            k,
            n_train_classes: 5,
            embed_dim: 16,
            backbone: BackboneKind::SmallResidual,
            small_widths: vec![4, 8, 8, 16],
            decoder_seed_channels: 8,
            decoder_channels: [8, 4, 4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn small_backbone_shapes() {
        let mut net = LandmarkNet::<f32>::new(tiny(3)).unwrap();
        net.attach_decoder();
        let x = vec![0.1f32; 2 * 6 * 64 * 64];
        let out = net.forward(2, 64, 64, &x, true, false).unwrap().output();
        assert_eq!((out.embedding.rows, out.embedding.cols), (2, 16));
        assert_eq!((out.logits.rows, out.logits.cols), (2, 5));
        assert_eq!(out.recon_shape, [2, 3, 64, 64]);
        assert!(out.recon.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut net = LandmarkNet::<f32>::new(tiny(3)).unwrap();
        let x = vec![0.0f32; 3 * 64 * 64];
        assert!(matches!(net.forward(1, 64, 64, &x, false, false), Err(Error::Shape(_))));
    }

    #[test]
    fn stage_partitions() {
        let mut net = LandmarkNet::<f32>::new(tiny(3)).unwrap();
        net.attach_decoder();
        for stage in Stage::ALL {
            net.set_stage(stage);
            let mut trainable = 0;
            let mut frozen = 0;
            net.visit_params(&mut |p| if p.requires_grad { trainable += 1 } else { frozen += 1 });
            assert_eq!(trainable + frozen, net.param_names().len());
        }
        net.set_stage(Stage::S1a);
        net.visit_params(&mut |p| {
            let g = param_group(&p.name);
            assert_eq!(p.requires_grad, g == ParamGroup::FirstConv || g == ParamGroup::Classifier, "{}", p.name);
        });
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = LandmarkNet::<f32>::new(tiny(2)).unwrap();
        net.attach_decoder();
        let mut ck = Checkpoint::from_model(&net, Some(Stage::S2a));
        ck.insert_extra("centers", vec![5, 16], vec![0.5; 80]);
        ck.meta = serde_json::json!({"step": 3});
        let path = dir.path().join("m.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        let net2 = back.to_model().unwrap();
        assert_eq!(net2.digest(&|_| true), net.digest(&|_| true));
    }
}

//! Staged optimization: the baseline and landmark pipelines, metrics logging,
//! stage checkpoints and periodic evaluation.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{LoadedSample, PkSampler};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, RetrievalReport};
use crate::heatmap::{apply_mla, apply_nla, joint_augment, render_stack, AugmentLimits, HeatmapConfig, LandmarkSet, MlaConfig};
use crate::losses::{center_loss, id_loss, recon_loss, total_loss, triplet_loss, CenterState, LossParts, LossWeights};
use crate::model::{encode_batch, init_parameters, Checkpoint, InitReport, LandmarkNet, ModelConfig, OutputGrads, Stage};
use crate::nn::{Act, Mat, Param};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Image-only input, stage 1 only.
    Baseline,
    LandmarkStage1,
    /// Continues a landmark stage-1 run with the decoder stages.
    LandmarkStage2,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Self::Baseline),
            "landmark-stage1" => Some(Self::LandmarkStage1),
            "landmark-stage2" => Some(Self::LandmarkStage2),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::LandmarkStage1 => "landmark-stage1",
            Self::LandmarkStage2 => "landmark-stage2",
        }
    }

    pub fn stages(self) -> &'static [Stage] {
        match self {
            Self::Baseline | Self::LandmarkStage1 => &[Stage::S1a, Stage::S1b],
            Self::LandmarkStage2 => &[Stage::S2a, Stage::S2b],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSet {
    pub id: bool,
    pub triplet: bool,
    pub center: bool,
    pub hr: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    /// Learning rate after warmup and before any decay.
    pub lr: f64,
    pub losses: LossSet,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("trainer.epochs.s{}{}", self.stage.tag(), if f.is_empty() { "" } else { f });
        if self.epochs == 0 {
            return Err(Error::config(field(""), "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("trainer.base_lr", "must be positive"));
        }
        if self.losses.hr && !self.stage.uses_decoder() {
            return Err(Error::config(field(""), "reconstruction loss is only active with the decoder"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageEpochs {
    pub s1a: usize,
    pub s1b: usize,
    pub s2a: usize,
    pub s2b: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        Self {
            s1a: 10,
            s1b: 110,
            s2a: 10,
            s2b: 60,
        }
    }
}

impl StageEpochs {
    pub fn get(&self, stage: Stage) -> usize {
        match stage {
            Stage::S1a => self.s1a,
            Stage::S1b => self.s1b,
            Stage::S2a => self.s2a,
            Stage::S2b => self.s2b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub geometric: bool,
    pub rotation_deg: f64,
    pub zoom: f64,
    pub translate: f64,
    pub nla: bool,
    pub mla: bool,
    pub mla_min_visible: usize,
    pub mla_drop_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let l = AugmentLimits::default();
        Self {
            geometric: true,
            rotation_deg: l.rotation_deg,
            zoom: l.zoom,
            translate: l.translate,
            nla: true,
            mla: true,
            mla_min_visible: 2,
            mla_drop_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn limits(&self) -> AugmentLimits {
        if self.geometric {
            AugmentLimits {
                rotation_deg: self.rotation_deg,
                zoom: self.zoom,
                translate: self.translate,
            }
        } else {
            AugmentLimits::NONE
        }
    }

    pub fn mla_config(&self) -> MlaConfig {
        MlaConfig {
            min_visible: self.mla_min_visible,
            drop_prob: self.mla_drop_prob,
        }
    }
}

/// Which coordinates the reconstruction target is rendered from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconTarget {
    /// Annotated coordinates (after geometric augmentation, before NLA and MLA).
    True,
    /// The noisy, possibly hidden landmarks fed to the network.
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Linear warmup over the first stage-1 epochs, starting at `warmup_factor * base_lr`.
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    /// Stage-1 epochs (counted from the start of 1a) after which the rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Decoder warm-up rate relative to `base_lr`.
    pub decoder_lr_factor: f64,
    /// Whole-network stage-2 rate relative to `base_lr`.
    pub finetune_lr_factor: f64,
    pub epochs: StageEpochs,
    pub p: usize,
    pub k: usize,
    pub input_size: usize,
    /// Evaluate every this many epochs (0: only after the final stage).
    pub eval_every: usize,
    /// Mid-stage checkpoint interval in epochs (0: stage ends only).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub recon_target: ReconTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3.5e-4,
            weight_decay: 5e-4,
            warmup_epochs: 10,
            warmup_factor: 0.1,
            lr_milestones: vec![40, 70],
            lr_gamma: 0.1,
            decoder_lr_factor: 1.0,
            finetune_lr_factor: 0.1,
            epochs: StageEpochs::default(),
            p: 16,
            k: 4,
            input_size: 128,
            eval_every: 10,
            checkpoint_every: 0,
            seed: 0,
            augment: AugmentConfig::default(),
            recon_target: ReconTarget::True,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("trainer.base_lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("trainer.weight_decay", "must be >= 0"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config("trainer.input_size", "must be a positive multiple of 32"));
        }
        if self.k < 2 {
            return Err(Error::config("trainer.k", "must be at least 2"));
        }
        if self.p < 2 {
            return Err(Error::config("trainer.p", "must be at least 2"));
        }
        for (name, v) in [("s1a", self.epochs.s1a), ("s1b", self.epochs.s1b), ("s2a", self.epochs.s2a), ("s2b", self.epochs.s2b)] {
            if v == 0 {
                return Err(Error::config(format!("trainer.epochs.{name}"), "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.augment.mla_drop_prob) {
            return Err(Error::config("trainer.augment.mla_drop_prob", "must be in [0, 1]"));
        }
        if self.augment.zoom >= 1.0 || self.augment.zoom < 0.0 {
            return Err(Error::config("trainer.augment.zoom", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn plan(&self, stage: Stage, with_landmarks: bool) -> StagePlan {
        let losses = LossSet {
            id: true,
            triplet: true,
            center: true,
            hr: with_landmarks && stage.uses_decoder(),
        };
        let lr = match stage {
            Stage::S1a | Stage::S1b => self.base_lr,
            Stage::S2a => self.base_lr * self.decoder_lr_factor,
            Stage::S2b => self.base_lr * self.finetune_lr_factor,
        };
        StagePlan {
            stage,
            epochs: self.epochs.get(stage),
            lr,
            losses,
        }
    }

    /// Rate for `epoch` of `plan`: warmup and step decay apply across stage 1.
    pub fn lr_at(&self, plan: &StagePlan, epoch: usize) -> f64 {
        let e = match plan.stage {
            Stage::S1a => epoch,
            Stage::S1b => self.epochs.s1a + epoch,
            _ => return plan.lr,
        };
        let mut lr = plan.lr;
        if e < self.warmup_epochs {
            let t = e as f64 / self.warmup_epochs as f64;
            lr *= self.warmup_factor + (1.0 - self.warmup_factor) * t;
        }
        let decays = self.lr_milestones.iter().filter(|&&m| e >= m).count();
        lr * self.lr_gamma.powi(decays as i32)
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub t: u64,
    pub m: HashMap<String, Vec<f32>>,
    pub v: HashMap<String, Vec<f32>>,
}

impl Adam {
    pub fn step(&mut self, net: &mut LandmarkNet<f32>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_B1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_B2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let (b1, b2, wd, eps) = (ADAM_B1 as f32, ADAM_B2 as f32, weight_decay as f32, (ADAM_EPS * c2.sqrt()) as f32);
        net.visit_params_mut(&mut |p: &mut Param<f32>| {
            if !p.requires_grad {
                return;
            }
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        });
    }
}

/// Training samples plus optional evaluation sets, already decoded at the input size.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<LoadedSample>,
    pub gallery: Vec<LoadedSample>,
    pub query: Vec<LoadedSample>,
}

impl TrainData {
    pub fn labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.sample.label).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.train.iter().map(|s| s.sample.label + 1).max().unwrap_or(0)
    }

    pub fn k(&self) -> usize {
        self.train.first().map_or(0, |s| s.sample.landmarks.k())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: Stage,
    /// Epochs completed since the start of stage 1.
    pub epoch: usize,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVE_FILE: &str = "eval_curve.csv";
pub const STAGES_FILE: &str = "stages.csv";

pub fn checkpoint_name(stage: Stage) -> String {
    format!("stage-{}-final.ckpt", stage.tag())
}

/// Trainer state stored in checkpoint metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerMeta {
    pub mode: Option<Mode>,
    pub global_step: usize,
    /// Epochs finished inside the tagged stage when the checkpoint is mid-stage.
    pub epochs_done: Option<usize>,
    pub adam_t: u64,
    /// Heatmap geometry at `input_size`, needed to embed new images.
    pub heatmap: Option<HeatmapConfig>,
    pub input_size: Option<usize>,
    pub config_digest: String,
}

impl TrainerMeta {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        serde_json::from_value(ck.meta.clone()).unwrap_or_default()
    }
}

/// Owns the network and everything else mutated by the optimizer loop.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub weights: &'a LossWeights,
    pub hm: HeatmapConfig,
    pub data: &'a TrainData,
    pub out_dir: PathBuf,
    pub net: LandmarkNet<f32>,
    pub centers: CenterState,
    pub global_step: usize,
    pub curve: Vec<CurvePoint>,
    pub config_digest: String,
    pub last_report: Option<RetrievalReport>,
    /// When set, the first batch of every stage is written here as PNGs.
    pub dump_dir: Option<PathBuf>,
    labels: Vec<usize>,
    sampler: PkSampler,
}

struct Batch {
    input: Vec<f32>,
    labels: Vec<usize>,
    target: Option<Act<f32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &'a TrainConfig,
        weights: &'a LossWeights,
        hm: HeatmapConfig,
        data: &'a TrainData,
        net: LandmarkNet<f32>,
        out_dir: &Path,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        let labels = data.labels();
        let sampler = PkSampler::new(&labels, cfg.p, cfg.k)?;
        let centers = CenterState::new(net.config.n_train_classes, net.config.embed_dim, weights.center_lr);
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Self {
            cfg,
            weights,
            hm: hm.at_size(cfg.input_size),
            data,
            out_dir: out_dir.to_path_buf(),
            net,
            centers,
            global_step: 0,
            curve: Vec::new(),
            config_digest: String::new(),
            last_report: None,
            dump_dir: None,
            labels,
            sampler,
        })
    }

    fn stage_index(stage: Stage) -> u64 {
        Stage::ALL.iter().position(|&s| s == stage).expect("known stage") as u64
    }

    fn assemble(&self, idx: &[usize], plan: &StagePlan, epoch: usize, bi: usize) -> Result<Batch> {
        let k = self.net.config.k;
        let mut rng = seed::stream(self.cfg.seed, &[tag::AUGMENT, Self::stage_index(plan.stage), epoch as u64, bi as u64]);
        let limits = self.cfg.augment.limits();
        let mla = self.cfg.augment.mla_config();
        let out_size = self.net.config.decoder_out;
        let target_hm = self.hm.at_size(out_size);
        let mut images = Vec::with_capacity(idx.len());
        let mut stacks = Vec::with_capacity(idx.len());
        let mut targets: Vec<f32> = Vec::new();
        for &i in idx {
            let s = &self.data.train[i];
            let (img, truth, _) = joint_augment(&s.image, &s.sample.landmarks, &mut rng, &limits);
            images.push(img);
            if k == 0 {
                continue;
            }
            let mut fed: LandmarkSet = truth.clone();
            if self.cfg.augment.mla {
                fed = apply_mla(&fed, &mla, &mut rng);
            }
            if self.cfg.augment.nla {
                fed = apply_nla(&fed, &self.hm, &mut rng);
            }
            stacks.push(render_stack(&fed, &self.hm));
            if plan.losses.hr {
                let src = match self.cfg.recon_target {
                    ReconTarget::True => &truth,
                    ReconTarget::Shifted => &fed,
                };
                let scaled = src.scaled(out_size as f64 / self.cfg.input_size as f64);
                targets.extend_from_slice(&render_stack(&scaled, &target_hm).maps);
            }
        }
        let refs: Vec<_> = images.iter().collect();
        let maps: Vec<_> = stacks.iter().map(Some).collect();
        let input = encode_batch(&refs, &maps, k)?;
        let target = plan
            .losses
            .hr
            .then(|| Act::from_nchw(idx.len(), k, out_size, out_size, &targets));
        Ok(Batch {
            input,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            target,
        })
    }

    fn persist_batch(&self, plan: &StagePlan, epoch: usize, bi: usize, idx: &[usize], parts: &LossParts) -> PathBuf {
        let path = self
            .out_dir
            .join(format!("diverged-stage-{}-step-{}.json", plan.stage.tag(), self.global_step));
        let record = serde_json::json!({
            "stage": plan.stage,
            "epoch": epoch,
            "batch": bi,
            "step": self.global_step,
            "seed": self.cfg.seed,
            "indices": idx,
            "images": idx.iter().map(|&i| &self.data.train[i].sample.image_path).collect::<Vec<_>>(),
            "losses": parts,
        });
        let _ = fs::write(&path, serde_json::to_string_pretty(&record).unwrap_or_default());
        path
    }

    /// One optimizer step; returns the loss parts and total.
    fn step(&mut self, plan: &StagePlan, batch: &Batch, lr: f64, adam: &mut Adam) -> Result<(LossParts, std::result::Result<f64, Error>)> {
        let n = batch.labels.len();
        let size = self.cfg.input_size;
        self.net.zero_grad();
        let fwd = self.net.forward(n, size, size, &batch.input, true, true)?;
        let l = &plan.losses;
        let w = self.weights;
        let mut parts = LossParts::default();
        let mut g_emb = Mat::<f32>::zeros(n, fwd.embedding.cols);
        let mut g_logits = Mat::<f32>::zeros(n, fwd.logits.cols);
        if l.id {
            let (v, g) = id_loss(&fwd.logits, &batch.labels, w.smooth_eps);
            parts.id = v;
            g_logits = g;
        }
        if l.triplet {
            let (v, g) = triplet_loss(&fwd.embedding, &batch.labels, w.triplet_margin)?;
            parts.triplet = v;
            g_emb.add_assign(&g);
        }
        if l.center {
            let (v, g) = center_loss(&fwd.embedding, &batch.labels, &self.centers);
            parts.center = v;
            let scale = w.beta as f32;
            g_emb.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += scale * b);
        }
        let mut g_recon = None;
        if let (true, Some(logits), Some(target)) = (l.hr, &fwd.recon_logits, &batch.target) {
            let (v, mut g) = recon_loss(logits, target)?;
            parts.hr = Some(v);
            let scale = w.alpha as f32;
            g.data.iter_mut().for_each(|x| *x *= scale);
            g_recon = Some(g);
        }
        let total = total_loss(&parts, w);
        if !matches!(total, Ok(t) if t.is_finite()) {
            return Ok((parts, total.and(Err(Error::NonFiniteLoss("total")))));
        }
        self.net.backward(
            OutputGrads {
                embedding: g_emb,
                logits: g_logits,
                recon_logits: g_recon,
            },
            false,
        );
        adam.step(&mut self.net, lr, self.cfg.weight_decay);
        if l.center {
            self.centers.update(&fwd.embedding, &batch.labels);
        }
        Ok((parts, total))
    }

    fn metrics_writer(&self) -> Result<csv::Writer<fs::File>> {
        let path = self.out_dir.join(METRICS_FILE);
        let fresh = !path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            w.write_record(["step", "loss_total", "loss_id", "loss_triplet", "loss_center", "loss_hr"])?;
        }
        Ok(w)
    }

    fn append_line(&self, file: &str, header: &str, line: &str) -> Result<()> {
        let path = self.out_dir.join(file);
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
        }
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    /// Epochs of stage 1 (and stage 2) finished before `stage` starts.
    fn epochs_before(&self, stage: Stage) -> usize {
        Stage::ALL
            .iter()
            .take_while(|&&s| s != stage)
            .map(|&s| self.cfg.epochs.get(s))
            .sum()
    }

    pub fn evaluate_now(&mut self) -> Result<Option<RetrievalReport>> {
        if self.data.gallery.is_empty() || self.data.query.is_empty() {
            return Ok(None);
        }
        let r = evaluate(&mut self.net, &self.data.gallery, &self.data.query, &self.hm, &self.config_digest)?;
        Ok(Some(r))
    }

    fn record_eval(&mut self, stage: Stage, epoch: usize) -> Result<()> {
        if let Some(r) = self.evaluate_now()? {
            let p = CurvePoint {
                stage,
                epoch,
                top1: r.top1,
                top5: r.top5,
                top10: r.top10,
            };
            self.append_line(
                CURVE_FILE,
                "stage,epoch,top1,top5,top10",
                &format!("{},{},{},{},{}", stage.tag(), epoch, p.top1, p.top5, p.top10),
            )?;
            self.curve.push(p);
            self.last_report = Some(r);
        }
        Ok(())
    }

    pub fn checkpoint(&self, stage: Stage, meta: &TrainerMetaView, adam: Option<&Adam>) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.net, Some(stage));
        ck.insert_extra(
            "trainer.centers",
            vec![self.centers.centers.rows, self.centers.centers.cols],
            self.centers.centers.data.clone(),
        );
        let mut m = TrainerMeta {
            mode: meta.mode,
            global_step: self.global_step,
            epochs_done: meta.epochs_done,
            adam_t: 0,
            heatmap: Some(self.hm),
            input_size: Some(self.cfg.input_size),
            config_digest: self.config_digest.clone(),
        };
        if let Some(a) = adam {
            m.adam_t = a.t;
            for (name, v) in &a.m {
                ck.insert_extra(&format!("adam.m.{name}"), vec![v.len()], v.clone());
            }
            for (name, v) in &a.v {
                ck.insert_extra(&format!("adam.v.{name}"), vec![v.len()], v.clone());
            }
        }
        ck.meta = serde_json::to_value(m).expect("plain struct");
        ck
    }

    /// Restores centers, step counter and (for mid-stage checkpoints) optimizer state.
    fn restore(&mut self, ck: &Checkpoint) -> Result<(Option<usize>, Adam)> {
        self.net = ck.to_model()?;
        if let Some(t) = ck.tensors.get("trainer.centers") {
            if t.data.len() == self.centers.centers.data.len() {
                self.centers.centers.data = t.data.clone();
            }
        }
        let meta = TrainerMeta::from_checkpoint(ck);
        self.global_step = meta.global_step;
        let mut adam = Adam {
            t: meta.adam_t,
            ..Adam::default()
        };
        for (name, t) in &ck.tensors {
            if let Some(p) = name.strip_prefix("adam.m.") {
                adam.m.insert(p.to_string(), t.data.clone());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                adam.v.insert(p.to_string(), t.data.clone());
            }
        }
        Ok((meta.epochs_done, adam))
    }

    /// Runs one stage from `start_epoch`, writing metrics and the stage-end checkpoint.
    pub fn run_stage(&mut self, plan: &StagePlan, mode: Mode, start_epoch: usize, mut adam: Adam) -> Result<PathBuf> {
        plan.validate()?;
        if plan.stage.uses_decoder() {
            self.net.attach_decoder();
        } else if self.net.has_decoder() {
            return Err(Error::Checkpoint(format!("stage {} must not have a decoder", plan.stage.tag())));
        }
        if plan.losses.hr && self.net.config.k == 0 {
            return Err(Error::config("model.k", "reconstruction needs landmark channels"));
        }
        self.net.set_stage(plan.stage);
        let mut metrics = self.metrics_writer()?;
        let first_step = self.global_step;
        let offset = self.epochs_before(plan.stage);
        for epoch in start_epoch..plan.epochs {
            let lr = self.cfg.lr_at(plan, epoch);
            let mut srng = seed::stream(self.cfg.seed, &[tag::SAMPLER, Self::stage_index(plan.stage), epoch as u64]);
            let batches = self.sampler.epoch(&mut srng);
            for (bi, idx) in batches.iter().enumerate() {
                let batch = self.assemble(idx, plan, epoch, bi)?;
                if epoch == start_epoch && bi == 0 {
                    if let Some(dir) = &self.dump_dir {
                        dump_batch(&dir.join(format!("stage-{}", plan.stage.tag())), &batch.input, idx.len(), self.cfg.input_size)?;
                    }
                }
                let (parts, total) = self.step(plan, &batch, lr, &mut adam)?;
                let total = match total {
                    Ok(t) => t,
                    Err(_) => {
                        metrics.flush().map_err(|e| Error::io(&self.out_dir, e))?;
                        let batch_file = self.persist_batch(plan, epoch, bi, idx, &parts);
                        return Err(Error::Diverged {
                            stage: plan.stage.tag().to_string(),
                            step: self.global_step,
                            batch_file,
                        });
                    }
                };
                let hr = parts.hr.map(|v| v.to_string()).unwrap_or_default();
                metrics.write_record([
                    self.global_step.to_string(),
                    total.to_string(),
                    parts.id.to_string(),
                    parts.triplet.to_string(),
                    parts.center.to_string(),
                    hr,
                ])?;
                self.global_step += 1;
            }
            metrics.flush().map_err(|e| Error::io(&self.out_dir, e))?;
            let done = epoch + 1;
            if self.cfg.eval_every > 0 && (offset + done) % self.cfg.eval_every == 0 {
                self.record_eval(plan.stage, offset + done)?;
            }
            if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 && done < plan.epochs {
                let view = TrainerMetaView {
                    mode: Some(mode),
                    epochs_done: Some(done),
                };
                let path = self.out_dir.join(format!("stage-{}-epoch-{done}.ckpt", plan.stage.tag()));
                self.checkpoint(plan.stage, &view, Some(&adam)).write(&path)?;
            }
        }
        self.append_line(
            STAGES_FILE,
            "stage,first_step,last_step,epochs,lr",
            &format!("{},{},{},{},{}", plan.stage.tag(), first_step, self.global_step, plan.epochs, plan.lr),
        )?;
        let path = self.out_dir.join(checkpoint_name(plan.stage));
        let view = TrainerMetaView {
            mode: Some(mode),
            epochs_done: None,
        };
        self.checkpoint(plan.stage, &view, None).write(&path)?;
        Ok(path)
    }
}

/// Writes each sample's heatmap channels (already in `[0, 1]`) as grayscale PNGs.
fn dump_batch(dir: &Path, input: &[f32], n: usize, size: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = size * size;
    let c = input.len() / (n * plane).max(1);
    for i in 0..n {
        for ch in 3..c {
            let start = (i * c + ch) * plane;
            let mut r = crate::raster::Raster::new(size, size, 1);
            r.data.iter_mut().zip(&input[start..start + plane]).for_each(|(d, &v)| *d = v * 255.0);
            r.save_gray(&dir.join(format!("{i:03}-hm{}.png", ch - 3)))?;
        }
    }
    Ok(())
}

/// The caller-supplied part of checkpoint metadata.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainerMetaView {
    pub mode: Option<Mode>,
    pub epochs_done: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub final_checkpoint: PathBuf,
    pub net: LandmarkNet<f32>,
    pub curve: Vec<CurvePoint>,
    pub init_report: InitReport,
    pub report: Option<RetrievalReport>,
}

/// Settings shared by every stage of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineSpec<'a> {
    pub train: &'a TrainConfig,
    pub model: &'a ModelConfig,
    pub losses: &'a LossWeights,
    pub heatmap: HeatmapConfig,
    pub config_digest: String,
    pub dump_heatmaps: Option<PathBuf>,
}

/// Runs the stages of `mode`. Stage 2 starts from `resume` or from the stage-1
/// checkpoint already in `out_dir`; a mid-stage checkpoint continues where it stopped.
pub fn run_pipeline(spec: &PipelineSpec, data: &TrainData, mode: Mode, resume: Option<&Path>, out_dir: &Path) -> Result<PipelineOutput> {
    let with_landmarks = mode != Mode::Baseline;
    let mut mcfg = spec.model.clone();
    mcfg.k = if with_landmarks { data.k() } else { 0 };
    mcfg.n_train_classes = data.n_classes();
    if mcfg.seed == 0 {
        mcfg.seed = spec.train.seed;
    }
    let resume_ck = match (mode, resume) {
        (_, Some(p)) => Some(Checkpoint::read(p)?),
        (Mode::LandmarkStage2, None) => {
            let p = out_dir.join(checkpoint_name(Stage::S1b));
            if !p.is_file() {
                return Err(Error::MissingStageOneCheckpoint);
            }
            Some(Checkpoint::read(&p)?)
        }
        _ => None,
    };
    if mode == Mode::LandmarkStage2 {
        match &resume_ck {
            Some(ck) if ck.config.k > 0 && ck.stage.is_some() => {}
            _ => return Err(Error::MissingStageOneCheckpoint),
        }
    }
    let (net, init_report) = match &resume_ck {
        Some(ck) => (ck.to_model()?, InitReport::default()),
        None => init_parameters(&mcfg)?,
    };
    let mut trainer = Trainer::new(spec.train, spec.losses, spec.heatmap, data, net, out_dir)?;
    trainer.config_digest = spec.config_digest.clone();
    trainer.dump_dir = spec.dump_heatmaps.clone();
    let mut start = (0usize, 0usize, Adam::default());
    if let Some(ck) = &resume_ck {
        let (epochs_done, adam) = trainer.restore(ck)?;
        let stages = mode.stages();
        let ck_stage = ck.stage.ok_or_else(|| Error::Checkpoint("checkpoint has no stage tag".into()))?;
        start = match (stages.iter().position(|&s| s == ck_stage), epochs_done) {
            (Some(i), Some(done)) => (i, done, adam),
            (Some(i), None) => (i + 1, 0, Adam::default()),
            (None, _) => (0, 0, Adam::default()),
        };
    }
    let mut final_checkpoint = resume.map(Path::to_path_buf).unwrap_or_default();
    let (first, first_epoch, adam) = start;
    let mut adam = Some(adam);
    for (i, &stage) in mode.stages().iter().enumerate().skip(first) {
        let plan = spec.train.plan(stage, with_landmarks);
        let (e0, a) = if i == first {
            (first_epoch, adam.take().unwrap_or_default())
        } else {
            (0, Adam::default())
        };
        final_checkpoint = trainer.run_stage(&plan, mode, e0, a)?;
    }
    if trainer.last_report.is_none() || trainer.cfg.eval_every == 0 {
        let last_stage = *mode.stages().last().expect("non-empty");
        let epoch = trainer.epochs_before(last_stage) + spec.train.epochs.get(last_stage);
        if trainer.curve.last().map(|p| p.epoch) != Some(epoch) {
            trainer.record_eval(last_stage, epoch)?;
        }
    }
    Ok(PipelineOutput {
        final_checkpoint,
        report: trainer.last_report.take(),
        curve: trainer.curve,
        net: trainer.net,
        init_report,
    })
}

//! Training loop, learning-rate schedule, evaluation and ablation runs.

mod checkpoint;
mod optim;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{batch_tiles, BackboneConfig, BackboneName, FeaturePyramid, FeatureSource};
use crate::data::{LabelMask, Sample, NUM_CLASSES};
use crate::decoder::predict_mask;
use crate::depth::{fetch_pseudo_label, InMemoryProvider, PseudoLabelProvider};
use crate::error::{Error, Result};
use crate::losses::{class_loss, depth_loss, pseudo_label_targets, total_loss, SsimParams};
use crate::metrics::{compute_report, ConfusionMatrix, MetricReport};
use crate::model::{DepthSeg, ModelConfig};

pub use checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use optim::{AdamW, AdamWParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: BackboneName,
    pub adapter_enabled: bool,
    pub prompter_enabled: bool,
    pub lr0: f64,
    pub weight_decay: f64,
    /// AdamW β1, the optimiser's momentum term.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Fractions of the total step count at which the rate is cut.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    /// Defaults per backbone when absent.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub ssim_window: usize,
    pub pretrained_weights: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneName::Tiny,
            adapter_enabled: true,
            prompter_enabled: true,
            lr0: 1e-4,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            milestones: vec![0.3, 0.6],
            gamma: 0.2,
            batch_size: None,
            seed: 0,
            ssim_window: 11,
            pretrained_weights: None,
        }
    }
}

pub fn default_batch_size(backbone: BackboneName) -> usize {
    match backbone {
        BackboneName::Tiny | BackboneName::VitS => 8,
        BackboneName::VitB => 4,
        BackboneName::VitL => 2,
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Every field, with the batch size resolved.
    pub fn to_toml(&self) -> String {
        let mut resolved = self.clone();
        resolved.batch_size = Some(self.batch_size());
        toml::to_string(&resolved).expect("train config serialises")
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or_else(|| default_batch_size(self.backbone))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0))
            || self.milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "milestones must be strictly increasing in (0, 1), got {:?}",
                self.milestones
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.epochs == 0 || self.batch_size() == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        SsimParams::with_window(self.ssim_window)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut backbone = BackboneConfig::preset(self.backbone);
        backbone.pretrained_weights = self.pretrained_weights.clone();
        ModelConfig::new(backbone, self.adapter_enabled, self.prompter_enabled)
    }

    pub fn steps_per_epoch(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.batch_size())
    }

    pub fn total_steps(&self, num_samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(num_samples)
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// First step of each reduced-rate segment, ⌈fraction · total⌉.
pub fn milestone_steps(total_steps: usize, cfg: &TrainConfig) -> Vec<usize> {
    cfg.milestones
        .iter()
        // the slack keeps products such as 0.3 · 1000 from rounding up
        .map(|m| (m * total_steps as f64 - 1e-9).ceil() as usize)
        .collect()
}

/// Piecewise-constant rate: lr0 divided by (1/γ) once per milestone passed.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Input(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let passed = milestone_steps(total_steps, cfg)
        .iter()
        .filter(|&&m| step >= m)
        .count();
    Ok(cfg.lr0 / (1.0 / cfg.gamma).powi(passed as i32))
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Optimiser steps completed, starting at 1.
    pub step: usize,
    pub lr: f64,
    pub depth_loss: Option<f64>,
    pub class_loss: f64,
    pub total: f64,
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Input(format!("bad loss log `{}`: {other:?}", path.display())),
    }
}

/// Owns the model and optimiser for one training run.
pub struct Trainer {
    cfg: TrainConfig,
    model: DepthSeg,
    optim: AdamW,
    /// Frozen-encoder output per sample, computed once.
    encoded: Vec<FeaturePyramid>,
    masks: Vec<LabelMask>,
    /// Per-sample pseudo-label targets at the three depth strides.
    depth_targets: Option<Vec<Vec<Tensor>>>,
    ssim: SsimParams,
    step: usize,
    total_steps: usize,
    log: Vec<LogRow>,
}

impl Trainer {
    /// Validates the dataset and pseudo-label coverage and prepares step 1.
    /// Without a provider, depth targets come from the samples themselves.
    pub fn new(
        cfg: &TrainConfig,
        samples: &[Sample],
        provider: Option<&dyn PseudoLabelProvider>,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = DepthSeg::new(&cfg.model_config(), cfg.seed)?;
        Self::with_model(cfg, model, samples, provider)
    }

    fn with_model(
        cfg: &TrainConfig,
        model: DepthSeg,
        samples: &[Sample],
        provider: Option<&dyn PseudoLabelProvider>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let depth_targets = if model.has_depth_branch() {
            let own;
            let provider = match provider {
                Some(p) => p,
                None => {
                    own = samples_provider(samples)?;
                    &own
                }
            };
            let labels = samples
                .iter()
                .map(|s| fetch_pseudo_label(provider, s.tile_id()))
                .collect::<Result<Vec<_>>>()?;
            Some(
                labels
                    .iter()
                    .map(|l| pseudo_label_targets(std::slice::from_ref(l), DType::F32))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let encoded = samples
            .iter()
            .map(|s| model.encode(&s.tile.to_tensor(&Device::Cpu)?))
            .collect::<Result<Vec<_>>>()?;
        let optim = AdamW::new(model.store().trainable_vars(), cfg.adamw())?;
        Ok(Self {
            cfg: cfg.clone(),
            total_steps: cfg.total_steps(samples.len()),
            model,
            optim,
            encoded,
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
            depth_targets,
            ssim: SsimParams::with_window(cfg.ssim_window),
            step: 0,
            log: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint on the same samples.
    pub fn resume(
        ckpt: &Checkpoint,
        samples: &[Sample],
        provider: Option<&dyn PseudoLabelProvider>,
    ) -> Result<Self> {
        let meta = &ckpt.meta;
        let model = ckpt.model()?;
        let mut t = Self::with_model(&meta.config, model, samples, provider)?;
        if t.total_steps != meta.total_steps {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {} steps, dataset gives {}",
                meta.total_steps, t.total_steps
            )));
        }
        t.optim
            .load_state(meta.step, &ckpt.scoped("optim.m."), &ckpt.scoped("optim.v."))?;
        t.step = meta.step;
        t.log = meta.log.clone();
        Ok(t)
    }

    pub fn model(&self) -> &DepthSeg {
        &self.model
    }

    pub fn into_model(self) -> DepthSeg {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Sample indices of the batch taken at `step`. Each epoch uses its own
    /// seeded permutation, so any step can be reproduced in isolation.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.masks.len();
        let per_epoch = self.cfg.steps_per_epoch(n);
        let epoch = (step / per_epoch) as u64;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let b = self.cfg.batch_size();
        let start = (step % per_epoch) * b;
        order[start..(start + b).min(n)].to_vec()
    }

    fn batch_features(&self, idx: &[usize]) -> Result<FeaturePyramid> {
        let levels = (0..self.encoded[0].levels.len())
            .map(|l| {
                let parts: Vec<&Tensor> = idx.iter().map(|&i| &self.encoded[i].levels[l]).collect();
                Ok(Tensor::cat(&parts, 0)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid {
            levels,
            source: FeatureSource::Encoder,
        })
    }

    /// One optimiser step on the next batch.
    pub fn step(&mut self) -> Result<LogRow> {
        if self.is_done() {
            return Err(Error::Input(format!("all {} steps already taken", self.total_steps)));
        }
        let idx = self.batch_indices(self.step);
        let out = self.model.forward_features(&self.batch_features(&idx)?, true)?;
        let masks: Vec<&LabelMask> = idx.iter().map(|&i| &self.masks[i]).collect();
        let lcls = class_loss(&out.logits.scores, &masks)?;
        let ld = match (&out.depth, &self.depth_targets) {
            (Some(pred), Some(targets)) => {
                let batch = (0..pred.maps.len())
                    .map(|s| {
                        let parts: Vec<&Tensor> = idx.iter().map(|&i| &targets[i][s]).collect();
                        Ok(Tensor::cat(&parts, 0)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(depth_loss(pred, &batch, &self.ssim)?)
            }
            _ => None,
        };
        let report = total_loss(
            ld.as_ref().map(scalar).transpose()?,
            scalar(&lcls)?,
        );
        if !report.total.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                reason: format!("loss is {}", report.total),
            });
        }
        let loss = match ld {
            Some(ld) => (ld + lcls)?,
            None => lcls,
        };
        let lr = lr_at(self.step, self.total_steps, &self.cfg)?;
        self.optim.step(&loss.backward()?, lr)?;
        self.step += 1;
        let row = LogRow {
            step: self.step,
            lr,
            depth_loss: report.depth_loss,
            class_loss: report.class_loss,
            total: report.total,
        };
        log::debug!("step {} lr {:e} loss {:.6}", row.step, lr, row.total);
        self.log.push(row);
        Ok(row)
    }

    /// Steps until `step` optimiser steps have been taken in total.
    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.step < step.min(self.total_steps) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = std::collections::HashMap::new();
        for (name, t) in self.model.backbone().store().tensors() {
            tensors.insert(format!("backbone.{name}"), t);
        }
        for (name, t) in self.model.store().tensors() {
            tensors.insert(format!("model.{name}"), t);
        }
        for (name, m, v) in self.optim.state() {
            tensors.insert(format!("optim.m.{name}"), m.clone());
            tensors.insert(format!("optim.v.{name}"), v.clone());
        }
        let mut model = self.model.config().clone();
        model.backbone.pretrained_weights = None;
        Ok(Checkpoint {
            meta: CheckpointMeta {
                format: FORMAT_VERSION,
                config: self.cfg.clone(),
                model,
                seed: self.cfg.seed,
                step: self.step,
                total_steps: self.total_steps,
                backbone_checksum: self.model.backbone().checksum()?,
                log: self.log.clone(),
            },
            tensors,
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn samples_provider(samples: &[Sample]) -> Result<InMemoryProvider> {
    let mut p = InMemoryProvider::new();
    for s in samples {
        let Some(depth) = &s.depth else {
            return Err(Error::MissingLabel(s.tile_id().to_string()));
        };
        p.insert(crate::depth::PseudoLabel {
            tile_id: s.tile_id().to_string(),
            depth: depth.clone(),
            provenance: crate::depth::Provenance::TeacherFile,
        })?;
    }
    Ok(p)
}

/// Trains from scratch for the configured number of epochs.
pub fn train(
    cfg: &TrainConfig,
    samples: &[Sample],
    provider: Option<&dyn PseudoLabelProvider>,
) -> Result<Trainer> {
    let mut t = Trainer::new(cfg, samples, provider)?;
    t.run()?;
    Ok(t)
}

/// Inference-mode confusion matrix over `samples`.
pub fn evaluate(model: &DepthSeg, samples: &[Sample], batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for chunk in samples.chunks(batch_size.max(1)) {
        let tiles: Vec<_> = chunk.iter().map(|s| &s.tile).collect();
        let logits = model.forward(&batch_tiles(&tiles, &Device::Cpu)?, false)?.logits;
        for (pred, s) in predict_mask(&logits)?.iter().zip(chunk) {
            cm.accumulate(pred, &s.mask)?;
        }
    }
    Ok(cm)
}

/// Differences against the (×, ×) row of the same seed, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub m_f1: f64,
    pub m_iou: f64,
    pub oa: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub adapter: bool,
    pub prompter: bool,
    pub report: MetricReport,
    pub delta: Deltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ALL_TOGGLES: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

impl AblationTable {
    pub fn row(&self, seed: u64, adapter: bool, prompter: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.adapter == adapter && r.prompter == prompter)
    }

    /// Mean over seeds and adapter states of mIoU(prompter on) − mIoU(prompter off).
    pub fn prompter_gain(&self) -> Option<f64> {
        let mut diffs = Vec::new();
        for on in self.rows.iter().filter(|r| r.prompter) {
            if let Some(off) = self.row(on.seed, on.adapter, false) {
                diffs.push(on.report.m_iou - off.report.m_iou);
            }
        }
        (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64)
    }

    /// Table with metrics and deltas in percentage points.
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "√" } else { "×" };
        let mut out = String::from(
            "| seed | Adapter | Depth Prompter | mF1 | mIoU | OA | Kappa | ΔmF1 | ΔmIoU | ΔOA | ΔKappa |\n\
             |---|---|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let m = &r.report;
            out.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:+.2} | {:+.2} | {:+.2} | {:+.2} |\n",
                r.seed,
                mark(r.adapter),
                mark(r.prompter),
                100.0 * m.m_f1,
                100.0 * m.m_iou,
                100.0 * m.oa,
                100.0 * m.kappa,
                100.0 * r.delta.m_f1,
                100.0 * r.delta.m_iou,
                100.0 * r.delta.oa,
                100.0 * r.delta.kappa,
            ));
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("ablation table serialises")
    }
}

/// Trains every toggle combination for every seed on the same data order
/// and evaluates each on `eval`. The (×, ×) baseline is always included.
pub fn run_ablation(
    base: &TrainConfig,
    toggles: &[(bool, bool)],
    seeds: &[u64],
    train_set: &[Sample],
    eval_set: &[Sample],
    provider: Option<&dyn PseudoLabelProvider>,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let combos: Vec<(bool, bool)> = ALL_TOGGLES
        .into_iter()
        .filter(|t| *t == (false, false) || toggles.contains(t))
        .collect();
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut base_report: Option<MetricReport> = None;
        for &(adapter, prompter) in &combos {
            let cfg = TrainConfig {
                adapter_enabled: adapter,
                prompter_enabled: prompter,
                seed,
                ..base.clone()
            };
            log::info!("ablation seed {seed} adapter {adapter} prompter {prompter}");
            let trainer = train(&cfg, train_set, provider)?;
            let report = compute_report(&evaluate(trainer.model(), eval_set, cfg.batch_size())?)?;
            let b = base_report.get_or_insert_with(|| report.clone());
            let delta = Deltas {
                m_f1: report.m_f1 - b.m_f1,
                m_iou: report.m_iou - b.m_iou,
                oa: report.oa - b.oa,
                kappa: report.kappa - b.kappa,
            };
            rows.push(AblationRow {
                seed,
                adapter,
                prompter,
                report,
                delta,
            });
        }
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_values_are_exact() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(500, 1000, &cfg).unwrap(), 2e-5);
        assert_eq!(lr_at(900, 1000, &cfg).unwrap(), 4e-6);
        assert_eq!(milestone_steps(1000, &cfg), vec![300, 600]);
        assert_eq!(lr_at(299, 1000, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(300, 1000, &cfg).unwrap(), 2e-5);
        assert_eq!(lr_at(599, 1000, &cfg).unwrap(), 2e-5);
        assert_eq!(lr_at(600, 1000, &cfg).unwrap(), 4e-6);
        assert!(matches!(lr_at(1000, 1000, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn milestones_round_up() {
        let cfg = TrainConfig::default();
        // 0.3 · 7 = 2.1 and 0.6 · 7 = 4.2
        assert_eq!(milestone_steps(7, &cfg), vec![3, 5]);
        assert_eq!(milestone_steps(10, &cfg), vec![3, 6]);
        assert_eq!(milestone_steps(20, &cfg), vec![6, 12]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::from_toml("backbone = \"vit_l\"\n").unwrap();
        assert_eq!(cfg.batch_size(), 2);
        assert_eq!(cfg.lr0, 1e-4);
        assert_eq!(cfg.weight_decay, 0.001);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(TrainConfig::from_toml("backbone = \"vit_b\"").unwrap().batch_size(), 4);
        assert_eq!(TrainConfig::from_toml("backbone = \"vit_s\"").unwrap().batch_size(), 8);
        assert_eq!(TrainConfig::default().batch_size(), 8);
        for bad in [
            "lr0 = 0.0",
            "gamma = 1.0",
            "milestones = [0.6, 0.3]",
            "milestones = [0.3, 1.0]",
            "epochs = 0",
            "ssim_window = 4",
            "unknown_key = 1",
            "backbone = \"resnet\"",
        ] {
            assert!(matches!(TrainConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap().batch_size(), 8);
    }

    #[test]
    fn loss_log_round_trip_with_absent_depth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rows = vec![
            LogRow { step: 1, lr: 1e-4, depth_loss: None, class_loss: 1.9, total: 1.9 },
            LogRow { step: 2, lr: 2e-5, depth_loss: Some(0.1), class_loss: 0.2, total: 0.1 + 0.2 },
        ];
        write_loss_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,lr,depth_loss,class_loss,total\n1,0.0001,,1.9,1.9\n"));
        assert_eq!(read_loss_log(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn schedule_is_a_three_level_staircase(total in 4usize..5000) {
            let cfg = TrainConfig::default();
            let lrs: Vec<f64> = (0..total).map(|s| lr_at(s, total, &cfg).unwrap()).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let mut distinct = lrs.clone();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), 3);
        }
    }
}

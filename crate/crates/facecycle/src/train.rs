//! Two-stage training.
//!
//! Stage 1 trains the expression encoder and the flow/face decoders with the
//! flow cycle loss and the facial-motion cycle loss on same-identity pairs.
//! Stage 2 freezes everything from stage 1, generates neutral faces on the
//! fly through the frozen de-expression path, and trains the identity
//! encoder, identity decoder and modulation MLPs with the identity cycle
//! loss plus the mean-face margin loss on cross-identity pairs.
//!
//! Checkpoints are written atomically (temp file + rename) and carry the
//! optimizer moments and the sampler stream position, so training resumes
//! without a loss spike.

use crate::autograd::{ops, Tape, Var};
use crate::config::Config;
use crate::dataset::{
    sample_stage1_pair, sample_stage2_pair, scan_corpus, write_manifest, Corpus, FaceLoader,
    PairSample,
};
use crate::error::{FaceCycleError, Result};
use crate::losses::{
    loss_flow_var, loss_margin_var, perceptual_var, LossReport, LossWeights,
};
use crate::nets::{
    decode_identity_var, decode_warped, forward, is_stage1_param, is_stage2_param, ArchSpec,
    BackboneDepth, BackboneSource, CheckpointMeta, Model, CHECKPOINT_FORMAT_VERSION,
};
use crate::nn::{clip_global_norm, Adam, BoundParams};
use ndarray::{Array4, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Resolved training configuration. Defaults mirror the published recipe:
/// Adam(0.5, 0.999), batch 32, stage learning rates 5e-5 / 1e-4 dropped by
/// 10x at half of the epochs, 40 + 20 epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub arch: String,
    pub corpus_root: PathBuf,
    pub out_dir: PathBuf,
    pub image_size: usize,
    pub flip_probability: f64,
    pub batch_size: usize,
    pub lr_stage1: f32,
    pub lr_stage2: f32,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// 0 derives ceil(corpus frames / batch size).
    pub steps_per_epoch: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub lr_drop_factor: f32,
    pub grad_clip_norm: f32,
    pub seed: u64,
    pub checkpoint_every_epochs: usize,
    pub stage1_checkpoint: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    pub log_every: usize,
    pub backbone_weights: Option<PathBuf>,
    pub backbone_seed: Option<u64>,
    pub weights: LossWeights,
}

impl TrainConfig {
    pub fn from_config(cfg: &Config, out_dir: PathBuf) -> Result<Self> {
        let weights = LossWeights {
            lambda_perc: cfg.get_f32("loss.lambda_perc")?,
            alpha_margin: cfg.get_f32("loss.alpha_margin")?,
            w_flow: cfg.get_f32("loss.w_flow")?,
            w_exp: cfg.get_f32("loss.w_exp")?,
            w_id: cfg.get_f32("loss.w_id")?,
            w_margin: cfg.get_f32("loss.w_margin")?,
        };
        let tc = TrainConfig {
            stage: cfg.get_usize("train.stage")? as u8,
            arch: cfg.get_string("arch.profile")?,
            corpus_root: cfg.get_path("data.corpus_root")?,
            out_dir,
            image_size: cfg.get_usize("data.image_size")?,
            flip_probability: cfg.get_f64("data.flip_probability")?,
            batch_size: cfg.get_usize("train.batch_size")?,
            lr_stage1: cfg.get_f32("train.lr_stage1")?,
            lr_stage2: cfg.get_f32("train.lr_stage2")?,
            epochs_stage1: cfg.get_usize("train.epochs_stage1")?,
            epochs_stage2: cfg.get_usize("train.epochs_stage2")?,
            steps_per_epoch: cfg.get_usize("train.steps_per_epoch")?,
            adam_beta1: cfg.get_f32("train.adam_beta1")?,
            adam_beta2: cfg.get_f32("train.adam_beta2")?,
            lr_drop_factor: cfg.get_f32("train.lr_drop_factor")?,
            grad_clip_norm: cfg.get_f32("train.grad_clip_norm")?,
            seed: cfg.get_u64("train.seed")?,
            checkpoint_every_epochs: cfg.get_usize("train.checkpoint_every_epochs")?,
            stage1_checkpoint: cfg.get_opt_path("train.stage1_checkpoint"),
            resume_from: cfg.get_opt_path("train.resume_from"),
            log_every: cfg.get_usize("train.log_every")?.max(1),
            backbone_weights: cfg.get_opt_path("backbone.weights"),
            backbone_seed: cfg
                .get("backbone.synthetic_seed")
                .filter(|v| !v.is_empty())
                .map(|v| {
                    v.parse::<u64>().map_err(|_| {
                        FaceCycleError::Config("backbone.synthetic_seed must be an integer".into())
                    })
                })
                .transpose()?,
            weights,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(FaceCycleError::Config(format!(
                "train.stage must be 1 or 2, got {}",
                self.stage
            )));
        }
        if self.batch_size == 0 {
            return Err(FaceCycleError::Config("train.batch_size must be positive".into()));
        }
        if self.lr_stage1 <= 0.0 || self.lr_stage2 <= 0.0 || self.lr_drop_factor <= 0.0 {
            return Err(FaceCycleError::Config("learning rates must be positive".into()));
        }
        if self.epochs() == 0 {
            return Err(FaceCycleError::Config("epoch count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(FaceCycleError::Config(
                "data.flip_probability must be within [0, 1]".into(),
            ));
        }
        if self.stage == 2 && self.stage1_checkpoint.is_none() && self.resume_from.is_none() {
            return Err(FaceCycleError::Config(
                "stage 2 requires train.stage1_checkpoint (or train.resume_from)".into(),
            ));
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        match self.stage {
            1 => self.epochs_stage1,
            _ => self.epochs_stage2,
        }
    }

    pub fn initial_lr(&self) -> f32 {
        match self.stage {
            1 => self.lr_stage1,
            _ => self.lr_stage2,
        }
    }

    pub fn backbone_source(&self) -> Result<BackboneSource> {
        match (&self.backbone_weights, self.backbone_seed) {
            (Some(path), _) => Ok(BackboneSource::File(path.clone())),
            (None, Some(seed)) => Ok(BackboneSource::Synthetic { seed }),
            (None, None) => Err(FaceCycleError::Config(
                "set backbone.weights (weight file) or backbone.synthetic_seed (seeded init)"
                    .into(),
            )),
        }
    }
}

/// Learning rate for a 0-indexed epoch: the initial rate divided by the drop
/// factor from epoch `floor(total / 2)` on.
pub fn lr_for_epoch(epoch: usize, total_epochs: usize, lr0: f32, drop_factor: f32) -> f32 {
    if epoch >= total_epochs / 2 {
        lr0 / drop_factor
    } else {
        lr0
    }
}

/// Gradient diagnostics of one optimizer step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradInfo {
    pub norm: f32,
    pub clipped: bool,
}

/// Owns model, optimizer and loss weights during one training stage.
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub weights: LossWeights,
    pub grad_clip_norm: f32,
    stage: u8,
}

fn stack_pairs(pairs: &[PairSample]) -> (Array4<f32>, Array4<f32>) {
    assert!(!pairs.is_empty(), "empty batch");
    let s = pairs[0].face_a.size();
    let n = pairs.len();
    let mut a = Array4::<f32>::zeros((n, 3, s, s));
    let mut b = Array4::<f32>::zeros((n, 3, s, s));
    for (i, p) in pairs.iter().enumerate() {
        a.index_axis_mut(Axis(0), i).assign(p.face_a.pixels());
        b.index_axis_mut(Axis(0), i).assign(p.face_b.pixels());
    }
    (a, b)
}

impl Trainer {
    pub fn new(model: Model, stage: u8, weights: LossWeights, beta1: f32, beta2: f32, grad_clip_norm: f32) -> Self {
        Trainer {
            model,
            optimizer: Adam::new(beta1, beta2),
            weights,
            grad_clip_norm,
            stage,
        }
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    fn finish_step(
        &mut self,
        tape: &Tape,
        total: Var,
        bound: &BoundParams,
        report: &mut LossReport,
        lr: f32,
    ) -> Result<GradInfo> {
        report.total = tape.scalar(total);
        if !report.is_finite() {
            return Err(FaceCycleError::NonFiniteLoss {
                step: self.optimizer.step_count + 1,
                detail: format!("{:?}", report.terms),
            });
        }
        let mut store = tape.backward(total);
        let mut grads = bound.collect_grads(&mut store);
        let (norm, clipped) = clip_global_norm(&mut grads, self.grad_clip_norm);
        self.optimizer.step(&mut self.model.params, &grads, lr);
        Ok(GradInfo { norm, clipped })
    }

    /// One stage-1 optimizer step on a batch of same-identity pairs.
    ///
    /// For each pair member the forward flow, its inversion and the flow
    /// cycle loss are computed; the neutral faces are decoded from warped
    /// backbone features; each face is then cross-reconstructed from the
    /// other member's neutral features through its own backward flow.
    pub fn stage1_step(&mut self, pairs: &[PairSample], lr: f32) -> Result<(LossReport, GradInfo)> {
        assert_eq!(self.stage, 1, "stage1_step on a stage-{} trainer", self.stage);
        let (batch_a, batch_b) = stack_pairs(pairs);
        let arch = self.model.arch.clone();
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, &is_stage1_param);
        let fa = tape.constant(batch_a.into_dyn());
        let fb = tape.constant(batch_b.into_dyn());

        let code_a = forward::encoder(&arch, &mut tape, &p, "e_exp", fa);
        let code_b = forward::encoder(&arch, &mut tape, &p, "e_exp", fb);
        let fw_a = forward::flow_decoder(&arch, &mut tape, &p, code_a);
        let fw_b = forward::flow_decoder(&arch, &mut tape, &p, code_b);

        let flow_a = loss_flow_var(&mut tape, fa, fw_a);
        let flow_b = loss_flow_var(&mut tape, fb, fw_b);
        let flow_term = ops::add(&mut tape, flow_a, flow_b);

        // Backbone features of the inputs are constants (frozen backbone,
        // constant images): targets for the perceptual loss and sources for
        // de-expression.
        let feats_a = forward::backbone(&arch, &mut tape, &p, fa, BackboneDepth::Loss);
        let feats_b = forward::backbone(&arch, &mut tape, &p, fb, BackboneDepth::Loss);

        let neutral_a = decode_warped(&mut tape, &p, "d_exp", &feats_a, fw_a, false);
        let neutral_b = decode_warped(&mut tape, &p, "d_exp", &feats_b, fw_b, false);

        let bw_a = crate::warpflow::invert_flow_var(&mut tape, fw_a);
        let bw_b = crate::warpflow::invert_flow_var(&mut tape, fw_b);

        let featsn_a = forward::backbone(&arch, &mut tape, &p, neutral_a, BackboneDepth::Decode);
        let featsn_b = forward::backbone(&arch, &mut tape, &p, neutral_b, BackboneDepth::Decode);

        // Cross reconstruction: the other member's neutral features,
        // re-expressed through this member's backward flow.
        let recon_a = decode_warped(&mut tape, &p, "d_exp", &featsn_b, bw_a, false);
        let recon_b = decode_warped(&mut tape, &p, "d_exp", &featsn_a, bw_b, false);

        let l1_a = ops::l1_mean(&mut tape, fa, recon_a);
        let l1_b = ops::l1_mean(&mut tape, fb, recon_b);
        let l1_term = ops::add(&mut tape, l1_a, l1_b);

        let featsr_a = forward::backbone(&arch, &mut tape, &p, recon_a, BackboneDepth::Loss);
        let featsr_b = forward::backbone(&arch, &mut tape, &p, recon_b, BackboneDepth::Loss);
        let perc_a = perceptual_var(
            &mut tape,
            &[feats_a.fine, feats_a.coarse, feats_a.deep.unwrap()],
            &[featsr_a.fine, featsr_a.coarse, featsr_a.deep.unwrap()],
        );
        let perc_b = perceptual_var(
            &mut tape,
            &[feats_b.fine, feats_b.coarse, feats_b.deep.unwrap()],
            &[featsr_b.fine, featsr_b.coarse, featsr_b.deep.unwrap()],
        );
        let perc_term = ops::add(&mut tape, perc_a, perc_b);

        let w = self.weights.clone();
        let flow_w = ops::scale(&mut tape, flow_term, w.w_flow);
        let l1_w = ops::scale(&mut tape, l1_term, w.w_exp);
        let perc_w = ops::scale(&mut tape, perc_term, w.w_exp * w.lambda_perc);
        let total = ops::sum_scalars(&mut tape, &[flow_w, l1_w, perc_w]);

        let mut report = LossReport::default();
        report.push("flow", tape.scalar(flow_term), w.w_flow);
        report.push("exp_l1", tape.scalar(l1_term), w.w_exp);
        report.push("exp_perc", tape.scalar(perc_term), w.w_exp * w.lambda_perc);
        report.total = 0.0; // recomputed from the graph total in finish_step
        let info = self.finish_step(&tape, total, &p, &mut report, lr)?;
        Ok((report, info))
    }

    /// One stage-2 optimizer step on a batch of cross-identity pairs.
    ///
    /// Neutral faces come from the frozen stage-1 path (on the fly, inside
    /// the same tape; they are constants there). Identity codes are encoded
    /// from the raw faces. Mean faces are decoded through de-identity
    /// renormalization; each neutral face is then reconstructed from the
    /// *other* identity's mean face with its own re-identity statistics.
    pub fn stage2_step(&mut self, pairs: &[PairSample], lr: f32) -> Result<(LossReport, GradInfo)> {
        assert_eq!(self.stage, 2, "stage2_step on a stage-{} trainer", self.stage);
        assert!(self.model.has_stage2(), "stage-2 subnetworks missing");
        let (batch_1, batch_2) = stack_pairs(pairs);
        let arch = self.model.arch.clone();
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, &is_stage2_param);
        let f1 = tape.constant(batch_1.into_dyn());
        let f2 = tape.constant(batch_2.into_dyn());

        // Frozen de-expression: every node here is constant.
        let neutral_of = |tape: &mut Tape, f: Var| {
            let code = forward::encoder(&arch, tape, &p, "e_exp", f);
            let fw = forward::flow_decoder(&arch, tape, &p, code);
            let feats = forward::backbone(&arch, tape, &p, f, BackboneDepth::Decode);
            decode_warped(tape, &p, "d_exp", &feats, fw, false)
        };
        let neutral_1 = neutral_of(&mut tape, f1);
        let neutral_2 = neutral_of(&mut tape, f2);

        let id_1 = forward::encoder(&arch, &mut tape, &p, "e_id", f1);
        let id_2 = forward::encoder(&arch, &mut tape, &p, "e_id", f2);
        let (de_mean_1, de_std_1) = forward::modulation_mlp(&mut tape, &p, "mlp_de", id_1);
        let (de_mean_2, de_std_2) = forward::modulation_mlp(&mut tape, &p, "mlp_de", id_2);
        let (re_mean_1, re_std_1) = forward::modulation_mlp(&mut tape, &p, "mlp_re", id_1);
        let (re_mean_2, re_std_2) = forward::modulation_mlp(&mut tape, &p, "mlp_re", id_2);

        let featsn_1 = forward::backbone(&arch, &mut tape, &p, neutral_1, BackboneDepth::Loss);
        let featsn_2 = forward::backbone(&arch, &mut tape, &p, neutral_2, BackboneDepth::Loss);

        let mean_1 = decode_identity_var(&mut tape, &p, &featsn_1, de_mean_1, de_std_1);
        let mean_2 = decode_identity_var(&mut tape, &p, &featsn_2, de_mean_2, de_std_2);

        let featsm_1 = forward::backbone(&arch, &mut tape, &p, mean_1, BackboneDepth::Decode);
        let featsm_2 = forward::backbone(&arch, &mut tape, &p, mean_2, BackboneDepth::Decode);

        // Cross-identity reconstruction: identity 1's statistics applied to
        // the mean face obtained from identity 2, and vice versa.
        let recon_1 = decode_identity_var(&mut tape, &p, &featsm_2, re_mean_1, re_std_1);
        let recon_2 = decode_identity_var(&mut tape, &p, &featsm_1, re_mean_2, re_std_2);

        let l1_1 = ops::l1_mean(&mut tape, neutral_1, recon_1);
        let l1_2 = ops::l1_mean(&mut tape, neutral_2, recon_2);
        let l1_term = ops::add(&mut tape, l1_1, l1_2);

        let featsr_1 = forward::backbone(&arch, &mut tape, &p, recon_1, BackboneDepth::Loss);
        let featsr_2 = forward::backbone(&arch, &mut tape, &p, recon_2, BackboneDepth::Loss);
        let perc_1 = perceptual_var(
            &mut tape,
            &[featsn_1.fine, featsn_1.coarse, featsn_1.deep.unwrap()],
            &[featsr_1.fine, featsr_1.coarse, featsr_1.deep.unwrap()],
        );
        let perc_2 = perceptual_var(
            &mut tape,
            &[featsn_2.fine, featsn_2.coarse, featsn_2.deep.unwrap()],
            &[featsr_2.fine, featsr_2.coarse, featsr_2.deep.unwrap()],
        );
        let perc_term = ops::add(&mut tape, perc_1, perc_2);

        let w = self.weights.clone();
        let margin_1 = loss_margin_var(&mut tape, mean_1, neutral_1, w.alpha_margin);
        let margin_2 = loss_margin_var(&mut tape, mean_2, neutral_2, w.alpha_margin);
        let margin_term = ops::add(&mut tape, margin_1, margin_2);

        let l1_w = ops::scale(&mut tape, l1_term, w.w_id);
        let perc_w = ops::scale(&mut tape, perc_term, w.w_id * w.lambda_perc);
        let margin_w = ops::scale(&mut tape, margin_term, w.w_margin);
        let total = ops::sum_scalars(&mut tape, &[l1_w, perc_w, margin_w]);

        let mut report = LossReport::default();
        report.push("id_l1", tape.scalar(l1_term), w.w_id);
        report.push("id_perc", tape.scalar(perc_term), w.w_id * w.lambda_perc);
        report.push("margin", tape.scalar(margin_term), w.w_margin);
        report.total = 0.0;
        let info = self.finish_step(&tape, total, &p, &mut report, lr)?;
        Ok((report, info))
    }
}

#[derive(Serialize)]
struct MetricLine<'a> {
    event: &'a str,
    step: u64,
    epoch: usize,
    stage: u8,
    lr: f32,
    terms: &'a BTreeMap<String, f32>,
    total: f32,
    grad_norm: f32,
    clipped: bool,
}

struct MetricsLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| FaceCycleError::io(path, e))?;
        Ok(MetricsLog {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    fn write_json(&mut self, value: &serde_json::Value) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| FaceCycleError::Other(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| FaceCycleError::io(&self.path, e))?;
        self.file.flush().map_err(|e| FaceCycleError::io(&self.path, e))
    }

    fn write_line(&mut self, line: &MetricLine<'_>) -> Result<()> {
        let value = serde_json::to_value(line).map_err(|e| FaceCycleError::Other(e.to_string()))?;
        self.write_json(&value)
    }
}

/// Run the configured training stage to completion and return the final
/// checkpoint path.
pub fn run_training(config: &TrainConfig) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| FaceCycleError::io(&config.out_dir, e))?;
    let arch = ArchSpec::by_name(&config.arch)?;
    if config.image_size != arch.image_size {
        return Err(FaceCycleError::Config(format!(
            "data.image_size {} does not match profile {} (image_size {})",
            config.image_size, arch.name, arch.image_size
        )));
    }

    let (records, manifest) = scan_corpus(&config.corpus_root)?;
    write_manifest(&records, &config.corpus_root, &config.out_dir.join("manifest.tsv"))?;
    log::info!("corpus: {manifest}");
    let corpus = Corpus::from_records(records);
    let mut loader = FaceLoader::new(&corpus, config.image_size);

    // Model + optimizer, fresh or resumed.
    let mut start_epoch = 0usize;
    let mut step: u64 = 0;
    let mut trainer;
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(config.stage as u64));
    let resuming = config.resume_from.is_some();
    if let Some(resume_path) = &config.resume_from {
        let (model, meta, extra) = Model::load(resume_path)?;
        if meta.stage != config.stage {
            return Err(FaceCycleError::Config(format!(
                "resume checkpoint is stage {}, config wants stage {}",
                meta.stage, config.stage
            )));
        }
        trainer = Trainer::new(
            model,
            config.stage,
            config.weights.clone(),
            config.adam_beta1,
            config.adam_beta2,
            config.grad_clip_norm,
        );
        trainer.optimizer.import_state(extra, meta.optimizer_steps);
        start_epoch = meta.epoch;
        step = meta.step;
        if let Some(pos) = &meta.sampler_pos {
            let parsed: u128 = pos
                .parse()
                .map_err(|_| FaceCycleError::Config("bad sampler_pos in checkpoint".into()))?;
            sampler.set_word_pos(parsed);
        }
    } else {
        let model = match config.stage {
            1 => Model::new(arch.clone(), &config.backbone_source()?, config.seed)?,
            _ => {
                let ckpt = config.stage1_checkpoint.as_ref().expect("validated");
                if !ckpt.exists() {
                    return Err(FaceCycleError::Checkpoint {
                        path: ckpt.clone(),
                        msg: "stage-1 checkpoint not found".into(),
                    });
                }
                let (mut model, meta, _) = Model::load(ckpt)?;
                if meta.arch != arch.name {
                    return Err(FaceCycleError::Config(format!(
                        "stage-1 checkpoint uses profile {}, config wants {}",
                        meta.arch, arch.name
                    )));
                }
                model.ensure_stage2(config.seed.wrapping_add(0x51a6e2));
                model
            }
        };
        trainer = Trainer::new(
            model,
            config.stage,
            config.weights.clone(),
            config.adam_beta1,
            config.adam_beta2,
            config.grad_clip_norm,
        );
    }

    let steps_per_epoch = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        corpus.records().len().div_ceil(config.batch_size)
    };
    let total_epochs = config.epochs();
    let ckpt_every = if config.checkpoint_every_epochs > 0 {
        config.checkpoint_every_epochs
    } else {
        (total_epochs / 5).max(1)
    };

    let metrics_path = config.out_dir.join("metrics.jsonl");
    let mut metrics = MetricsLog::open(&metrics_path, resuming)?;
    // Log header: the full effective configuration, so every run records the
    // hyperparameters it used.
    metrics.write_json(&serde_json::json!({
        "event": "config",
        "config": config,
        "corpus": {
            "identities": manifest.num_identities,
            "clips": manifest.num_clips,
            "frames": manifest.num_frames,
            "skipped": manifest.num_skipped,
        },
        "steps_per_epoch": steps_per_epoch,
    }))?;

    let latest_path = config.out_dir.join(format!("stage{}_latest.fckpt", config.stage));
    let final_path = config.out_dir.join(format!("stage{}_final.fckpt", config.stage));

    let save = |trainer: &Trainer, sampler: &ChaCha8Rng, epoch: usize, step: u64, path: &Path| -> Result<()> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: trainer.model.arch.name.clone(),
            d_exp: trainer.model.arch.code_dim,
            d_id: trainer.model.arch.code_dim,
            image_size: trainer.model.arch.image_size,
            stage: config.stage,
            step,
            epoch,
            optimizer_steps: trainer.optimizer.step_count,
            sampler_pos: Some(sampler.get_word_pos().to_string()),
        };
        trainer.model.save(path, &meta, &trainer.optimizer.export_state())
    };

    for epoch in start_epoch..total_epochs {
        let lr = lr_for_epoch(epoch, total_epochs, config.initial_lr(), config.lr_drop_factor);
        for _ in 0..steps_per_epoch {
            let pairs: Vec<PairSample> = (0..config.batch_size)
                .map(|_| match config.stage {
                    1 => sample_stage1_pair(&corpus, &mut loader, &mut sampler, config.flip_probability),
                    _ => sample_stage2_pair(&corpus, &mut loader, &mut sampler),
                })
                .collect::<Result<_>>()?;
            let outcome = match config.stage {
                1 => trainer.stage1_step(&pairs, lr),
                _ => trainer.stage2_step(&pairs, lr),
            };
            let (report, info) = match outcome {
                Ok(ok) => ok,
                Err(FaceCycleError::NonFiniteLoss { step: s, detail }) => {
                    // Diagnostic dump of the offending batch, then abort.
                    let dump = config.out_dir.join(format!("diagnostic_step{step}.fctf"));
                    let mut tensors = BTreeMap::new();
                    let (a, b) = stack_pairs(&pairs);
                    tensors.insert("batch_a".to_string(), a.into_dyn());
                    tensors.insert("batch_b".to_string(), b.into_dyn());
                    let _ = crate::nets::container::write_tensor_file(
                        &dump,
                        &serde_json::json!({"step": step, "detail": detail}),
                        &tensors,
                    );
                    return Err(FaceCycleError::NonFiniteLoss { step: s, detail });
                }
                Err(other) => return Err(other),
            };
            step += 1;
            if step % config.log_every as u64 == 0 {
                metrics.write_line(&MetricLine {
                    event: "step",
                    step,
                    epoch,
                    stage: config.stage,
                    lr,
                    terms: &report.terms,
                    total: report.total,
                    grad_norm: info.norm,
                    clipped: info.clipped,
                })?;
            }
        }
        if (epoch + 1) % ckpt_every == 0 || epoch + 1 == total_epochs {
            save(&trainer, &sampler, epoch + 1, step, &latest_path)?;
        }
    }
    save(&trainer, &sampler, total_epochs, step, &final_path)?;
    Ok(final_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_drops_exactly_at_half_rounded_down() {
        assert_eq!(lr_for_epoch(0, 2, 1.0, 10.0), 1.0);
        assert_eq!(lr_for_epoch(1, 2, 1.0, 10.0), 0.1);
        // Odd totals round down: 5 epochs drop from epoch 2 on.
        assert_eq!(lr_for_epoch(1, 5, 1.0, 10.0), 1.0);
        assert_eq!(lr_for_epoch(2, 5, 1.0, 10.0), 0.1);
        assert_eq!(lr_for_epoch(4, 5, 1.0, 10.0), 0.1);
        // 40 epochs: drop at epoch 20.
        assert_eq!(lr_for_epoch(19, 40, 5e-5, 10.0), 5e-5);
        assert!((lr_for_epoch(20, 40, 5e-5, 10.0) - 5e-6).abs() < 1e-12);
    }

    #[test]
    fn config_validation_catches_contract_violations() {
        let mut cfg = Config::empty();
        cfg.set("data.corpus_root", "/tmp/x").unwrap();
        cfg.set("backbone.synthetic_seed", "1").unwrap();
        let base = TrainConfig::from_config(&cfg, PathBuf::from("/tmp/out")).unwrap();
        assert_eq!(base.batch_size, 32);
        assert_eq!(base.epochs(), 40);

        let mut stage2 = base.clone();
        stage2.stage = 2;
        assert!(stage2.validate().is_err(), "stage 2 without checkpoint must fail");
        stage2.stage1_checkpoint = Some(PathBuf::from("s1.fckpt"));
        assert!(stage2.validate().is_ok());

        let mut bad = base.clone();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.flip_probability = 1.5;
        assert!(bad.validate().is_err());
    }
}

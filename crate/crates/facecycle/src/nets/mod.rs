//! All learnable functions: the expression/identity encoders, the flow /
//! face / identity decoders, the modulation MLPs, and the frozen perceptual
//! feature backbone.
//!
//! Every subnetwork's layer plan lives in the [`ArchSpec`] registry so the
//! whole architecture can be revised in one place. Two profiles exist:
//! `paper` (the full-scale configuration: 16-layer encoders with 256-d
//! codes, a VGG-19-width backbone) and `tiny` (a reduced-width profile for
//! desk-scale runs and CI).

pub mod container;
pub mod forward;

use crate::autograd::Tape;
use crate::dataset::FaceImage;
use crate::error::{FaceCycleError, Result};
use crate::nn::{he_normal, ones, zeros, BoundParams, ParamSet};
use crate::warpflow::FlowField;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub use forward::{BackboneDepth, BackboneFeats};

/// Expression code: everything separating a face from its neutral face.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprCode {
    pub vector: Array1<f32>,
}

/// Identity code: everything separating a neutral face from the mean face.
#[derive(Debug, Clone, PartialEq)]
pub struct IdCode {
    pub vector: Array1<f32>,
}

/// Multi-scale perceptual feature maps of one face, produced by the frozen
/// backbone. `level_deep` participates in losses only.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub level_fine: Array3<f32>,
    pub level_coarse: Array3<f32>,
    pub level_deep: Array3<f32>,
}

/// Per-channel target statistics predicted from an identity code. `std` is
/// strictly positive by construction (softplus + eps).
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    pub mean: Array1<f32>,
    pub std: Array1<f32>,
}

/// Architecture registry: one entry per subnetwork dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub image_size: usize,
    pub code_dim: usize,
    /// Channel width of each stride-2 encoder stage.
    pub enc_channels: [usize; 5],
    /// Convolutions per encoder stage (first one strided).
    pub enc_convs: [usize; 5],
    /// Backbone widths per block (conv1*, conv2*, conv3*, conv4_1).
    pub backbone_channels: [usize; 4],
    /// Flow decoder seed width at 4x4.
    pub flow_seed_ch: usize,
    /// Flow decoder widths after each upsample block (8, 16, 32, 64 px).
    pub flow_channels: [usize; 4],
    /// Face decoder trunk width.
    pub dec_main: usize,
    /// Face decoder width at full resolution.
    pub dec_head: usize,
    /// Modulation MLP hidden width.
    pub mlp_hidden: usize,
}

impl ArchSpec {
    /// Full-scale profile: 16 learnable encoder convolutions across five
    /// stride-2 stages (64->128->256->256->256), 256-d codes, VGG-19 widths
    /// in the backbone.
    pub fn paper() -> Self {
        ArchSpec {
            name: "paper".into(),
            image_size: 64,
            code_dim: 256,
            enc_channels: [64, 128, 256, 256, 256],
            enc_convs: [3, 3, 3, 3, 4],
            backbone_channels: [64, 128, 256, 512],
            flow_seed_ch: 256,
            flow_channels: [128, 64, 32, 16],
            dec_main: 64,
            dec_head: 32,
            mlp_hidden: 256,
        }
    }

    /// Reduced-width profile with the same topology, small enough to train
    /// on a CPU test box.
    pub fn tiny() -> Self {
        ArchSpec {
            name: "tiny".into(),
            image_size: 64,
            code_dim: 64,
            enc_channels: [8, 12, 16, 16, 16],
            enc_convs: [3, 3, 3, 3, 4],
            backbone_channels: [8, 12, 16, 24],
            flow_seed_ch: 32,
            flow_channels: [16, 12, 8, 8],
            dec_main: 12,
            dec_head: 8,
            mlp_hidden: 48,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(FaceCycleError::Config(format!(
                "unknown architecture profile '{other}' (expected 'paper' or 'tiny')"
            ))),
        }
    }

    /// Channel count modulated by the identity MLPs (the coarse level).
    pub fn modulated_channels(&self) -> usize {
        self.backbone_channels[2]
    }

    fn validate(&self) -> Result<()> {
        if self.image_size != 64 {
            return Err(FaceCycleError::Config(format!(
                "architecture assumes 64x64 inputs, got image_size {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone)]
pub enum BackboneSource {
    /// A tensor-container weight file; missing or mismatched files are fatal
    /// at model build.
    File(PathBuf),
    /// Deterministic seeded initialization, for desk-scale runs where no
    /// pretrained weight file is available. The frozen random projections
    /// still provide a usable perceptual basis.
    Synthetic { seed: u64 },
}

fn init_conv(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, c_in: usize, c_out: usize, k: usize) {
    params.insert(format!("{prefix}.w"), he_normal(rng, &[c_out, c_in, k, k], c_in * k * k));
    params.insert(format!("{prefix}.b"), zeros(&[c_out]));
}

fn init_conv_norm(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, c_in: usize, c_out: usize) {
    init_conv(params, rng, prefix, c_in, c_out, 3);
    params.insert(format!("{prefix}.gamma"), ones(&[c_out]));
    params.insert(format!("{prefix}.beta"), zeros(&[c_out]));
}

fn init_linear(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, d_out: usize) {
    params.insert(format!("{prefix}.w"), he_normal(rng, &[d_out, d_in], d_in));
    params.insert(format!("{prefix}.b"), zeros(&[d_out]));
}

fn init_encoder(params: &mut ParamSet, rng: &mut ChaCha8Rng, arch: &ArchSpec, net: &str) {
    let mut c_in = 3;
    for (stage, (&c_out, &convs)) in arch.enc_channels.iter().zip(arch.enc_convs.iter()).enumerate() {
        for conv in 0..convs {
            let ci = if conv == 0 { c_in } else { c_out };
            init_conv_norm(params, rng, &format!("{net}.s{stage}.c{conv}"), ci, c_out);
        }
        c_in = c_out;
    }
    init_linear(params, rng, &format!("{net}.head"), c_in, arch.code_dim);
}

fn init_face_decoder(params: &mut ParamSet, rng: &mut ChaCha8Rng, arch: &ArchSpec, net: &str, project_fine: bool) {
    let fine_ch = arch.backbone_channels[1];
    let coarse_ch = arch.backbone_channels[2];
    init_conv(params, rng, &format!("{net}.conv_in"), coarse_ch, arch.dec_main, 3);
    init_conv(params, rng, &format!("{net}.conv_a"), arch.dec_main, arch.dec_main, 3);
    if project_fine {
        init_conv(params, rng, &format!("{net}.fine_proj"), fine_ch, fine_ch, 1);
    }
    init_conv(params, rng, &format!("{net}.conv_b"), fine_ch + arch.dec_main, arch.dec_main, 3);
    init_conv(params, rng, &format!("{net}.conv_c"), arch.dec_main, arch.dec_head, 3);
    init_conv(params, rng, &format!("{net}.out"), arch.dec_head, 3, 3);
}

fn init_mlp(params: &mut ParamSet, rng: &mut ChaCha8Rng, arch: &ArchSpec, net: &str) {
    init_linear(params, rng, &format!("{net}.l0"), arch.code_dim, arch.mlp_hidden);
    init_linear(params, rng, &format!("{net}.l1"), arch.mlp_hidden, arch.mlp_hidden);
    init_linear(params, rng, &format!("{net}.l2"), arch.mlp_hidden, 2 * arch.modulated_channels());
}

fn init_backbone_params(arch: &ArchSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let [c1, c2, c3, c4] = arch.backbone_channels;
    init_conv(&mut params, &mut rng, "backbone.conv1_1", 3, c1, 3);
    init_conv(&mut params, &mut rng, "backbone.conv1_2", c1, c1, 3);
    init_conv(&mut params, &mut rng, "backbone.conv2_1", c1, c2, 3);
    init_conv(&mut params, &mut rng, "backbone.conv2_2", c2, c2, 3);
    init_conv(&mut params, &mut rng, "backbone.conv3_1", c2, c3, 3);
    init_conv(&mut params, &mut rng, "backbone.conv3_2", c3, c3, 3);
    init_conv(&mut params, &mut rng, "backbone.conv3_3", c3, c3, 3);
    init_conv(&mut params, &mut rng, "backbone.conv3_4", c3, c3, 3);
    init_conv(&mut params, &mut rng, "backbone.conv4_1", c3, c4, 3);
    params
}

fn load_backbone_params(arch: &ArchSpec, path: &Path) -> Result<ParamSet> {
    if !path.exists() {
        return Err(FaceCycleError::MissingBackboneWeights(path.to_path_buf()));
    }
    let (_, tensors) = container::read_tensor_file(path)?;
    let reference = init_backbone_params(arch, 0);
    let mut params = ParamSet::new();
    for (name, expected) in reference.iter() {
        let tensor = tensors.get(name).ok_or_else(|| FaceCycleError::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("backbone weights missing tensor {name}"),
        })?;
        if tensor.shape() != expected.shape() {
            return Err(FaceCycleError::Checkpoint {
                path: path.to_path_buf(),
                msg: format!(
                    "backbone tensor {name} has shape {:?}, expected {:?} for profile {}",
                    tensor.shape(),
                    expected.shape(),
                    arch.name
                ),
            });
        }
        params.insert(name.clone(), tensor.clone());
    }
    Ok(params)
}

/// Write a seeded backbone weight file (the desk-scale stand-in for a
/// pretrained one).
pub fn write_synthetic_backbone(arch: &ArchSpec, seed: u64, path: &Path) -> Result<()> {
    let params = init_backbone_params(arch, seed);
    let mut tensors = BTreeMap::new();
    for (name, value) in params.iter() {
        tensors.insert(name.clone(), value.clone());
    }
    let meta = serde_json::json!({
        "kind": "backbone",
        "arch": arch.name,
        "channels": arch.backbone_channels.to_vec(),
        "seed": seed,
    });
    container::write_tensor_file(path, &meta, &tensors)
}

/// Checkpoint metadata header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: String,
    pub d_exp: usize,
    pub d_id: usize,
    pub image_size: usize,
    /// Highest initialized stage (1 or 2).
    pub stage: u8,
    /// Global training step of the stage being trained.
    pub step: u64,
    pub epoch: usize,
    /// Optimizer step count, for Adam bias correction on resume.
    #[serde(default)]
    pub optimizer_steps: u64,
    /// Sampler stream position (ChaCha word position), for exact resume.
    #[serde(default)]
    pub sampler_pos: Option<String>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// The full model: frozen backbone plus stage-1 nets, and after
/// [`Model::ensure_stage2`] also the identity nets.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchSpec,
    pub params: ParamSet,
    stage: u8,
}

pub const STAGE1_PREFIXES: [&str; 3] = ["e_exp.", "d_flow.", "d_exp."];
pub const STAGE2_PREFIXES: [&str; 4] = ["e_id.", "d_id.", "mlp_de.", "mlp_re."];

pub fn is_stage1_param(name: &str) -> bool {
    STAGE1_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub fn is_stage2_param(name: &str) -> bool {
    STAGE2_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.")
}

impl Model {
    /// Build a stage-1 model: backbone (from file or seed) plus freshly
    /// initialized expression encoder and flow/face decoders.
    pub fn new(arch: ArchSpec, backbone: &BackboneSource, init_seed: u64) -> Result<Model> {
        arch.validate()?;
        let mut params = match backbone {
            BackboneSource::File(path) => load_backbone_params(&arch, path)?,
            BackboneSource::Synthetic { seed } => init_backbone_params(&arch, *seed),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        init_encoder(&mut params, &mut rng, &arch, "e_exp");
        // Flow decoder; the output projection is zeroed afterwards so the
        // model starts at the identity warp.
        init_linear(&mut params, &mut rng, "d_flow.seed", arch.code_dim, arch.flow_seed_ch * 16);
        let mut c_in = arch.flow_seed_ch;
        for (i, &c_out) in arch.flow_channels.iter().enumerate() {
            init_conv(&mut params, &mut rng, &format!("d_flow.b{i}"), c_in, c_out, 3);
            c_in = c_out;
        }
        init_conv(&mut params, &mut rng, "d_flow.out", c_in, 2, 3);
        *params.get_mut("d_flow.out.w") = zeros(&[2, c_in, 3, 3]);
        *params.get_mut("d_flow.out.b") = zeros(&[2]);
        init_face_decoder(&mut params, &mut rng, &arch, "d_exp", false);
        Ok(Model { arch, params, stage: 1 })
    }

    /// Add the stage-2 subnetworks (identity encoder/decoder, modulation
    /// MLPs) if not present.
    pub fn ensure_stage2(&mut self, init_seed: u64) {
        if self.stage >= 2 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        init_encoder(&mut self.params, &mut rng, &self.arch, "e_id");
        init_face_decoder(&mut self.params, &mut rng, &self.arch, "d_id", true);
        init_mlp(&mut self.params, &mut rng, &self.arch, "mlp_de");
        init_mlp(&mut self.params, &mut rng, &self.arch, "mlp_re");
        self.stage = 2;
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn has_stage2(&self) -> bool {
        self.stage >= 2
    }

    fn require_stage2(&self) -> Result<()> {
        if self.has_stage2() {
            Ok(())
        } else {
            Err(FaceCycleError::Config(
                "operation requires identity subnetworks; train or load a stage-2 checkpoint"
                    .into(),
            ))
        }
    }

    /// Bind every parameter as a constant for inference passes.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        self.params.bind(tape, &|_| false)
    }

    fn batch_of(faces: &[&FaceImage]) -> Array4<f32> {
        let s = faces[0].size();
        let mut batch = Array4::<f32>::zeros((faces.len(), 3, s, s));
        for (i, face) in faces.iter().enumerate() {
            batch.index_axis_mut(Axis(0), i).assign(face.pixels());
        }
        batch
    }

    fn check_face(&self, face: &FaceImage) -> Result<()> {
        if face.size() != self.arch.image_size {
            return Err(FaceCycleError::ShapeMismatch(format!(
                "face is {} px but the model expects {}",
                face.size(),
                self.arch.image_size
            )));
        }
        Ok(())
    }

    /// Encode a batch of faces to expression codes (rows).
    pub fn encode_expression_batch(&self, faces: &[&FaceImage]) -> Result<Array2<f32>> {
        for f in faces {
            self.check_face(f)?;
        }
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(Self::batch_of(faces).into_dyn());
        let code = forward::encoder(&self.arch, &mut tape, &p, "e_exp", x);
        Ok(tape.value(code).clone().into_dimensionality().unwrap())
    }

    pub fn encode_expression(&self, face: &FaceImage) -> Result<ExprCode> {
        let m = self.encode_expression_batch(&[face])?;
        Ok(ExprCode { vector: m.index_axis(Axis(0), 0).to_owned() })
    }

    pub fn encode_identity_batch(&self, faces: &[&FaceImage]) -> Result<Array2<f32>> {
        self.require_stage2()?;
        for f in faces {
            self.check_face(f)?;
        }
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(Self::batch_of(faces).into_dyn());
        let code = forward::encoder(&self.arch, &mut tape, &p, "e_id", x);
        Ok(tape.value(code).clone().into_dimensionality().unwrap())
    }

    pub fn encode_identity(&self, face: &FaceImage) -> Result<IdCode> {
        let m = self.encode_identity_batch(&[face])?;
        Ok(IdCode { vector: m.index_axis(Axis(0), 0).to_owned() })
    }

    /// Decode an expression code to a forward flow field at image resolution.
    pub fn decode_flow(&self, code: &ExprCode) -> Result<FlowField> {
        if code.vector.len() != self.arch.code_dim {
            return Err(FaceCycleError::ShapeMismatch(format!(
                "code length {} does not match model dimension {}",
                code.vector.len(),
                self.arch.code_dim
            )));
        }
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let c = tape.constant(
            code.vector
                .clone()
                .insert_axis(Axis(0))
                .into_dyn(),
        );
        let flow = forward::flow_decoder(&self.arch, &mut tape, &p, c);
        let v: Array4<f32> = tape.value(flow).clone().into_dimensionality().unwrap();
        FlowField::new(v.index_axis(Axis(0), 0).to_owned())
    }

    /// Run the frozen backbone on one face and return all three levels.
    pub fn extract_features(&self, face: &FaceImage) -> Result<FeaturePyramid> {
        self.check_face(face)?;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(Self::batch_of(&[face]).into_dyn());
        let feats = forward::backbone(&self.arch, &mut tape, &p, x, BackboneDepth::Loss);
        let take3 = |v: crate::autograd::Var| -> Array3<f32> {
            let a: Array4<f32> = tape.value(v).clone().into_dimensionality().unwrap();
            a.index_axis(Axis(0), 0).to_owned()
        };
        Ok(FeaturePyramid {
            level_fine: take3(feats.fine),
            level_coarse: take3(feats.coarse),
            level_deep: take3(feats.deep.expect("loss depth includes deep level")),
        })
    }

    /// Decode a face from pyramid levels (fine + coarse) without warping.
    pub fn decode_face_from_features(&self, pyramid: &FeaturePyramid) -> Result<FaceImage> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let fine = tape.constant(pyramid.level_fine.clone().insert_axis(Axis(0)).into_dyn());
        let coarse = tape.constant(pyramid.level_coarse.clone().insert_axis(Axis(0)).into_dyn());
        let img = forward::face_decoder(&mut tape, &p, "d_exp", fine, coarse, false);
        let v: Array4<f32> = tape.value(img).clone().into_dimensionality().unwrap();
        Ok(FaceImage::from_raw_clamped(v.index_axis(Axis(0), 0).to_owned()))
    }

    fn modulation(&self, net: &str, code: &IdCode) -> Result<ModulationParams> {
        self.require_stage2()?;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let c = tape.constant(code.vector.clone().insert_axis(Axis(0)).into_dyn());
        let (mean, std) = forward::modulation_mlp(&mut tape, &p, net, c);
        let m: Array2<f32> = tape.value(mean).clone().into_dimensionality().unwrap();
        let s: Array2<f32> = tape.value(std).clone().into_dimensionality().unwrap();
        Ok(ModulationParams {
            mean: m.index_axis(Axis(0), 0).to_owned(),
            std: s.index_axis(Axis(0), 0).to_owned(),
        })
    }

    /// Modulation parameters for de-identity (toward the mean face).
    pub fn modulation_de(&self, code: &IdCode) -> Result<ModulationParams> {
        self.modulation("mlp_de", code)
    }

    /// Modulation parameters for re-identity (back toward the neutral face).
    pub fn modulation_re(&self, code: &IdCode) -> Result<ModulationParams> {
        self.modulation("mlp_re", code)
    }

    /// Renormalize then decode with the identity decoder.
    pub fn decode_identity_face(
        &self,
        pyramid: &FeaturePyramid,
        params: &ModulationParams,
    ) -> Result<FaceImage> {
        self.require_stage2()?;
        let renormed = renormalize(pyramid, params)?;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let fine = tape.constant(renormed.level_fine.clone().insert_axis(Axis(0)).into_dyn());
        let coarse = tape.constant(renormed.level_coarse.clone().insert_axis(Axis(0)).into_dyn());
        let img = forward::face_decoder(&mut tape, &p, "d_id", fine, coarse, true);
        let v: Array4<f32> = tape.value(img).clone().into_dimensionality().unwrap();
        Ok(FaceImage::from_raw_clamped(v.index_axis(Axis(0), 0).to_owned()))
    }

    /// De-expression: encode, decode the forward flow, warp the perceptual
    /// features and decode the neutral face. Returns the neutral face and
    /// the forward flow.
    pub fn neutral_face(&self, face: &FaceImage) -> Result<(FaceImage, FlowField)> {
        self.check_face(face)?;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(Self::batch_of(&[face]).into_dyn());
        let code = forward::encoder(&self.arch, &mut tape, &p, "e_exp", x);
        let fw = forward::flow_decoder(&self.arch, &mut tape, &p, code);
        let feats = forward::backbone(&self.arch, &mut tape, &p, x, BackboneDepth::Decode);
        let neutral = decode_warped(&mut tape, &p, "d_exp", &feats, fw, false);
        let img: Array4<f32> = tape.value(neutral).clone().into_dimensionality().unwrap();
        let flow: Array4<f32> = tape.value(fw).clone().into_dimensionality().unwrap();
        Ok((
            FaceImage::from_raw_clamped(img.index_axis(Axis(0), 0).to_owned()),
            FlowField::new(flow.index_axis(Axis(0), 0).to_owned())?,
        ))
    }

    /// Re-expression: warp a neutral face's features by a backward flow and
    /// decode.
    pub fn reexpress(&self, neutral: &FaceImage, bw: &FlowField) -> Result<FaceImage> {
        self.check_face(neutral)?;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(Self::batch_of(&[neutral]).into_dyn());
        let feats = forward::backbone(&self.arch, &mut tape, &p, x, BackboneDepth::Decode);
        let flow = tape.constant(bw.values().clone().insert_axis(Axis(0)).into_dyn());
        let img = decode_warped(&mut tape, &p, "d_exp", &feats, flow, false);
        let v: Array4<f32> = tape.value(img).clone().into_dimensionality().unwrap();
        Ok(FaceImage::from_raw_clamped(v.index_axis(Axis(0), 0).to_owned()))
    }

    /// De-identity: decode the mean face from a neutral face.
    pub fn mean_face(&self, neutral: &FaceImage, code: &IdCode) -> Result<FaceImage> {
        let params = self.modulation_de(code)?;
        let pyramid = self.extract_features(neutral)?;
        self.decode_identity_face(&pyramid, &params)
    }

    /// Re-identity: recover a neutral face from a mean face.
    pub fn reidentify(&self, mean_face: &FaceImage, code: &IdCode) -> Result<FaceImage> {
        let params = self.modulation_re(code)?;
        let pyramid = self.extract_features(mean_face)?;
        self.decode_identity_face(&pyramid, &params)
    }

    /// Serialize the model plus optional extra tensors (optimizer state).
    pub fn save(
        &self,
        path: &Path,
        meta: &CheckpointMeta,
        extra: &BTreeMap<String, ArrayD<f32>>,
    ) -> Result<()> {
        let mut tensors: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
        for (name, value) in self.params.iter() {
            tensors.insert(name.clone(), value.clone());
        }
        for (name, value) in extra {
            assert!(name.starts_with("optim."), "extra tensors must use the optim. prefix");
            tensors.insert(name.clone(), value.clone());
        }
        let meta_value = serde_json::to_value(meta).map_err(|e| FaceCycleError::Other(e.to_string()))?;
        // Atomic write: temp file in the same directory, then rename.
        let tmp = path.with_extension("tmp");
        container::write_tensor_file(&tmp, &meta_value, &tensors)?;
        std::fs::rename(&tmp, path).map_err(|e| FaceCycleError::io(path, e))
    }

    /// Load a checkpoint; returns the model, its metadata, and any extra
    /// (optimizer) tensors.
    pub fn load(path: &Path) -> Result<(Model, CheckpointMeta, BTreeMap<String, ArrayD<f32>>)> {
        let (meta_value, tensors) = container::read_tensor_file(path)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta_value).map_err(|e| FaceCycleError::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("metadata: {e}"),
            })?;
        let arch = ArchSpec::by_name(&meta.arch)?;
        let mut params = ParamSet::new();
        let mut extra = BTreeMap::new();
        for (name, tensor) in tensors {
            if name.starts_with("optim.") {
                extra.insert(name, tensor);
            } else {
                params.insert(name, tensor);
            }
        }
        for required in ["backbone.conv1_1.w", "e_exp.s0.c0.w", "d_flow.out.w", "d_exp.out.w"] {
            if !params.contains(required) {
                return Err(FaceCycleError::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("missing tensor {required}"),
                });
            }
        }
        if meta.stage >= 2 && !params.contains("e_id.s0.c0.w") {
            return Err(FaceCycleError::Checkpoint {
                path: path.to_path_buf(),
                msg: "stage-2 checkpoint without identity subnetworks".into(),
            });
        }
        let model = Model {
            arch,
            params,
            stage: meta.stage,
        };
        Ok((model, meta, extra))
    }

    pub fn checkpoint_meta(&self, stage: u8, step: u64, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: self.arch.name.clone(),
            d_exp: self.arch.code_dim,
            d_id: self.arch.code_dim,
            image_size: self.arch.image_size,
            stage,
            step,
            epoch,
            optimizer_steps: 0,
            sampler_pos: None,
        }
    }
}

/// Warp pyramid levels by a full-resolution flow (rescaled per level) and
/// decode a face. Shared by training cycles and inference helpers.
pub fn decode_warped(
    tape: &mut Tape,
    p: &BoundParams,
    net: &str,
    feats: &BackboneFeats,
    flow: crate::autograd::Var,
    project_fine: bool,
) -> crate::autograd::Var {
    let fine_hw = {
        let s = tape.value(feats.fine).shape();
        (s[2], s[3])
    };
    let coarse_hw = {
        let s = tape.value(feats.coarse).shape();
        (s[2], s[3])
    };
    let flow_fine = crate::warpflow::rescale_flow_var(tape, flow, fine_hw.0, fine_hw.1);
    let flow_coarse = crate::warpflow::rescale_flow_var(tape, flow, coarse_hw.0, coarse_hw.1);
    let fine = crate::warpflow::warp(tape, feats.fine, flow_fine);
    let coarse = crate::warpflow::warp(tape, feats.coarse, flow_coarse);
    forward::face_decoder(tape, p, net, fine, coarse, project_fine)
}

/// Tape-level de-/re-identity decode: renormalize the coarse level to the
/// predicted statistics and decode with the identity decoder.
pub fn decode_identity_var(
    tape: &mut Tape,
    p: &BoundParams,
    feats: &BackboneFeats,
    target_mean: crate::autograd::Var,
    target_std: crate::autograd::Var,
) -> crate::autograd::Var {
    let coarse_mod = crate::nn::norm::adain(tape, feats.coarse, target_mean, target_std);
    forward::face_decoder(tape, p, "d_id", feats.fine, coarse_mod, true)
}

/// Renormalize the modulated level of a pyramid to the target statistics.
/// Unmodulated levels pass through unchanged.
pub fn renormalize(pyramid: &FeaturePyramid, params: &ModulationParams) -> Result<FeaturePyramid> {
    let c = pyramid.level_coarse.dim().0;
    if params.mean.len() != c || params.std.len() != c {
        return Err(FaceCycleError::ShapeMismatch(format!(
            "modulation has {} channels but the modulated level has {c}",
            params.mean.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(pyramid.level_coarse.clone().insert_axis(Axis(0)).into_dyn());
    let m = tape.constant(params.mean.clone().insert_axis(Axis(0)).into_dyn());
    let s = tape.constant(params.std.clone().insert_axis(Axis(0)).into_dyn());
    let y = crate::nn::norm::adain(&mut tape, x, m, s);
    let out: Array4<f32> = tape.value(y).clone().into_dimensionality().unwrap();
    Ok(FeaturePyramid {
        level_fine: pyramid.level_fine.clone(),
        level_coarse: out.index_axis(Axis(0), 0).to_owned(),
        level_deep: pyramid.level_deep.clone(),
    })
}

/// Every parameter name and shape of a profile, for the registry golden
/// test.
pub fn parameter_manifest(arch: &ArchSpec) -> Vec<(String, Vec<usize>)> {
    let mut model = Model::new(arch.clone(), &BackboneSource::Synthetic { seed: 0 }, 0)
        .expect("manifest model");
    model.ensure_stage2(0);
    model
        .params
        .iter()
        .map(|(name, value)| (name.clone(), value.shape().to_vec()))
        .collect()
}

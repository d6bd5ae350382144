//! Self-supervised fitting loop: heatmap logits, descriptor fields and the
//! parameter MLP are optimized with Adam so the decoded Gaussian model
//! re-renders the input views. Cameras and depth maps come from the scene
//! bundle (oracle or teacher); depth maps can optionally be optimized too.

mod adam;
mod pipeline;

pub use pipeline::{pixel_detections, Gradients, StepOutput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::FuseMode;
use crate::buffer::Grid;
use crate::decode::{
    DescriptorField, MlpWeights, ScaleBounds, DESCRIPTOR_CHANNELS, MLP_HIDDEN, MLP_OUTPUTS,
};
use crate::density::{DensityAssignment, DensityLevel};
use crate::detection::{HeatmapField, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::gaussian::GaussianModel;
use crate::io::TraceRow;
use crate::losses::LossWeights;
use crate::synth::SceneBundle;

use adam::AdamState;

/// How primitives are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitMode {
    /// Sub-pixel detection with the entropy-adaptive per-patch budget.
    #[serde(rename = "detection")]
    Detection,
    /// Detection with every patch at medium density (adaptive off).
    #[serde(rename = "detection-fixed-density", alias = "fixed-density")]
    FixedDensity,
    /// One Gaussian per pixel center, detection bypassed.
    #[serde(rename = "pixel-aligned", alias = "pixel")]
    PixelAligned,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    /// Adam rate for heatmap logits and descriptor fields.
    pub lr_fields: f64,
    /// Adam rate for the MLP weights.
    pub lr_mlp: f64,
    /// Adam rate for depth maps (only used with `optimize_depth`).
    pub lr_depth: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub mode: FitMode,
    /// Inference-time prune threshold on opacity * confidence.
    pub prune_threshold: f64,
    pub optimize_depth: bool,
    pub scale_bounds: ScaleBounds,
    pub temperature: f64,
    pub descriptor_channels: usize,
    pub mlp_hidden: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 200,
            lr_fields: 1e-2,
            lr_mlp: 1e-3,
            lr_depth: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            mode: FitMode::Detection,
            prune_threshold: 0.1,
            optimize_depth: false,
            scale_bounds: ScaleBounds::default(),
            temperature: DEFAULT_TEMPERATURE,
            descriptor_channels: DESCRIPTOR_CHANNELS,
            mlp_hidden: MLP_HIDDEN,
        }
    }
}

/// All optimized parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct FitState {
    pub mode: FitMode,
    /// Per-view heatmap logits (empty in pixel-aligned mode).
    pub logits: Vec<HeatmapField>,
    pub descriptors: Vec<DescriptorField>,
    pub mlp: MlpWeights,
    /// Per-view student depth values (flat, row-major). Equal to the bundle
    /// depths unless depth optimization is on.
    pub depths: Vec<Vec<f64>>,
    pub step: usize,
    adam_logits: Vec<AdamState>,
    adam_descriptors: Vec<AdamState>,
    adam_mlp: AdamState,
    adam_depths: Vec<AdamState>,
}

/// Density assignments the fit uses for each view, depending on mode.
pub fn densities_for_mode(
    bundle: &SceneBundle,
    mode: FitMode,
) -> Result<Vec<DensityAssignment>> {
    match mode {
        FitMode::Detection => bundle
            .images
            .iter()
            .map(DensityAssignment::from_image)
            .collect(),
        FitMode::FixedDensity => Ok(bundle
            .images
            .iter()
            .map(|img| {
                DensityAssignment::uniform(
                    img.width() / crate::PATCH_SIZE,
                    img.height() / crate::PATCH_SIZE,
                    DensityLevel::Medium,
                )
            })
            .collect()),
        FitMode::PixelAligned => Ok(Vec::new()),
    }
}

/// Fresh state: zero logits (patch-center detections), small seeded random
/// descriptors and MLP, depths copied from the bundle.
pub fn init_state(
    bundle: &SceneBundle,
    densities: &[DensityAssignment],
    config: &FitConfig,
) -> Result<FitState> {
    bundle.validate()?;
    config.scale_bounds.validate()?;
    if config.temperature <= 0.0 {
        return Err(Error::InvalidSpec(format!(
            "temperature must be positive, got {}",
            config.temperature
        )));
    }
    let views = bundle.num_views();
    if config.mode != FitMode::PixelAligned && densities.len() != views {
        return Err(Error::shape(
            format!("{views} density assignments"),
            format!("{}", densities.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let logits = if config.mode == FitMode::PixelAligned {
        Vec::new()
    } else {
        densities
            .iter()
            .map(|d| HeatmapField::zeros(d, config.temperature))
            .collect()
    };
    let descriptors: Vec<DescriptorField> = bundle
        .images
        .iter()
        .map(|img| {
            DescriptorField::random(
                img.width(),
                img.height(),
                config.descriptor_channels,
                0.1,
                &mut rng,
            )
        })
        .collect();
    let mlp = MlpWeights::random(
        config.descriptor_channels,
        config.mlp_hidden,
        MLP_OUTPUTS,
        &mut rng,
    );
    let depths: Vec<Vec<f64>> = bundle
        .depths
        .iter()
        .map(|d| d.depth_data().to_vec())
        .collect();
    let adam_logits = logits
        .iter()
        .map(|f: &HeatmapField| AdamState::new(f.total_logits()))
        .collect();
    let adam_descriptors = descriptors
        .iter()
        .map(|d| AdamState::new(d.values().len()))
        .collect();
    let adam_mlp = AdamState::new(mlp.num_params());
    let adam_depths = depths.iter().map(|d| AdamState::new(d.len())).collect();
    Ok(FitState {
        mode: config.mode,
        logits,
        descriptors,
        mlp,
        depths,
        step: 0,
        adam_logits,
        adam_descriptors,
        adam_mlp,
        adam_depths,
    })
}

impl FitState {
    fn apply_gradients(&mut self, grads: &Gradients, config: &FitConfig) {
        let t = self.step + 1;
        if config.lr_fields != 0.0 {
            for (v, field) in self.logits.iter_mut().enumerate() {
                // The flat gradient layout matches the field's patch-major
                // storage, updated patch by patch.
                let mut offset = 0usize;
                let g = &grads.logits[v];
                // Collect into one flat vector view of the parameters.
                let mut flat: Vec<f64> = Vec::with_capacity(g.len());
                for p in &field.patches {
                    flat.extend_from_slice(&p.logits);
                }
                self.adam_logits[v].update(&mut flat, g, config.lr_fields, t);
                for p in &mut field.patches {
                    let n = p.logits.len();
                    p.logits.copy_from_slice(&flat[offset..offset + n]);
                    offset += n;
                }
            }
            for (v, desc) in self.descriptors.iter_mut().enumerate() {
                self.adam_descriptors[v].update(
                    desc.data_mut(),
                    &grads.descriptors[v],
                    config.lr_fields,
                    t,
                );
            }
        }
        if config.lr_mlp != 0.0 {
            let mlp = &mut self.mlp;
            let mut flat =
                Vec::with_capacity(mlp.w1.len() + mlp.b1.len() + mlp.w2.len() + mlp.b2.len());
            flat.extend_from_slice(&mlp.w1);
            flat.extend_from_slice(&mlp.b1);
            flat.extend_from_slice(&mlp.w2);
            flat.extend_from_slice(&mlp.b2);
            let mut g = Vec::with_capacity(flat.len());
            g.extend_from_slice(&grads.mlp.w1);
            g.extend_from_slice(&grads.mlp.b1);
            g.extend_from_slice(&grads.mlp.w2);
            g.extend_from_slice(&grads.mlp.b2);
            self.adam_mlp.update(&mut flat, &g, config.lr_mlp, t);
            let (a, b) = (mlp.w1.len(), mlp.b1.len());
            let c = mlp.w2.len();
            mlp.w1.copy_from_slice(&flat[..a]);
            mlp.b1.copy_from_slice(&flat[a..a + b]);
            mlp.w2.copy_from_slice(&flat[a + b..a + b + c]);
            mlp.b2.copy_from_slice(&flat[a + b + c..]);
        }
        if config.optimize_depth && config.lr_depth != 0.0 {
            for (v, depth) in self.depths.iter_mut().enumerate() {
                self.adam_depths[v].update(depth, &grads.depths[v], config.lr_depth, t);
                for d in depth.iter_mut() {
                    if d.is_finite() && *d < 1e-6 {
                        *d = 1e-6;
                    }
                }
            }
        }
        self.step += 1;
    }

    /// Everything finite? Used for the divergence check after each step.
    fn is_finite(&self) -> bool {
        self.logits
            .iter()
            .flat_map(|f| f.patches.iter())
            .all(|p| p.logits.iter().all(|v| v.is_finite()))
            && self
                .descriptors
                .iter()
                .all(|d| d.values().iter().all(|v| v.is_finite()))
            && self.mlp.w1.iter().all(|v| v.is_finite())
            && self.mlp.b1.iter().all(|v| v.is_finite())
            && self.mlp.w2.iter().all(|v| v.is_finite())
            && self.mlp.b2.iter().all(|v| v.is_finite())
    }
}

/// Full forward/backward without touching the state; exposed for gradient
/// verification.
pub fn evaluate(
    state: &FitState,
    bundle: &SceneBundle,
    config: &FitConfig,
) -> Result<(StepOutput, Gradients)> {
    pipeline::forward_backward(state, bundle, config)
}

/// One optimization step: full forward/backward plus an Adam update.
/// With every learning rate zero the state is untouched.
pub fn step(
    state: &mut FitState,
    bundle: &SceneBundle,
    config: &FitConfig,
) -> Result<StepOutput> {
    let (out, grads) = pipeline::forward_backward(state, bundle, config)?;
    pipeline::check_finite(&out, state.step)?;
    state.apply_gradients(&grads, config);
    if !state.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            what: "parameters became non-finite".into(),
        });
    }
    Ok(out)
}

/// Result of a complete fit.
#[derive(Debug, Clone)]
pub struct FitRun {
    /// Fused model with the inference prune rule applied.
    pub model: GaussianModel,
    pub trace: Vec<TraceRow>,
}

/// Incremental fitting session; [`fit`] drives it to completion, the CLI
/// uses it directly so it can dump the last finite state on divergence.
pub struct FitSession {
    pub state: FitState,
    pub config: FitConfig,
    bundle: SceneBundle,
    pub trace: Vec<TraceRow>,
}

impl FitSession {
    pub fn new(bundle: SceneBundle, config: FitConfig) -> Result<Self> {
        let densities = densities_for_mode(&bundle, config.mode)?;
        let state = init_state(&bundle, &densities, &config)?;
        Ok(FitSession {
            state,
            config,
            bundle,
            trace: Vec::new(),
        })
    }

    pub fn bundle(&self) -> &SceneBundle {
        &self.bundle
    }

    pub fn step_once(&mut self) -> Result<&TraceRow> {
        let out = step(&mut self.state, &self.bundle, &self.config)?;
        self.trace.push(TraceRow {
            step: self.state.step - 1,
            total: out.total,
            l1_self: out.breakdown.l1_self,
            l1_full: out.breakdown.l1_full,
            ssim_self: out.breakdown.ssim_self,
            ssim_full: out.breakdown.ssim_full,
            depth: out.breakdown.depth,
            normal: out.breakdown.normal,
            teach_depth: out.breakdown.teach_depth,
            teach_t: out.breakdown.teach_t,
            teach_r: out.breakdown.teach_r,
            opacity: out.breakdown.opacity,
            intrinsics: out.breakdown.intrinsics,
            psnr_self: out.psnr_self,
            psnr_full: out.psnr_full,
            primitives: out.primitives,
        });
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Fused, pruned model of the current parameters.
    pub fn current_model(&self) -> Result<GaussianModel> {
        let (model, _) =
            pipeline::forward_model(&self.state, &self.bundle, &self.config, FuseMode::Inference)?;
        Ok(model)
    }

    /// Training-mode (unpruned) model of the current parameters.
    pub fn current_model_unpruned(&self) -> Result<GaussianModel> {
        let (model, _) =
            pipeline::forward_model(&self.state, &self.bundle, &self.config, FuseMode::Training)?;
        Ok(model)
    }
}

/// Run the configured number of steps and return the pruned model plus the
/// per-step metrics trace. Divergence propagates as an error.
pub fn fit(bundle: &SceneBundle, config: &FitConfig) -> Result<FitRun> {
    let mut session = FitSession::new(bundle.clone(), config.clone())?;
    for _ in 0..config.steps {
        session.step_once()?;
    }
    Ok(FitRun {
        model: session.current_model()?,
        trace: session.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, NoiseSpec, RingSpec, SceneKind, SceneSpec, TextureSpec};

    fn small_scene(views: usize) -> SceneBundle {
        let spec = SceneSpec {
            kind: SceneKind::TexturedPlane,
            texture: TextureSpec::ValueNoise {
                scale: 0.4,
                octaves: 2,
                color_a: [0.15, 0.2, 0.3],
                color_b: [0.9, 0.8, 0.6],
            },
            cameras: RingSpec {
                count: views,
                radius: 2.0,
                tilt_deg: 12.0,
                jitter_deg: 0.0,
                fov_deg: 40.0,
                look_at: [0.0, 0.0, 0.0],
                start_azimuth_deg: 0.0,
            },
            width: 28,
            height: 28,
            seed: 9,
            teacher_noise: NoiseSpec::default(),
        };
        synth::generate(&spec).unwrap()
    }

    fn quick_config(mode: FitMode) -> FitConfig {
        FitConfig {
            mode,
            seed: 11,
            ..FitConfig::default()
        }
    }

    #[test]
    fn fresh_state_detects_patch_centers() {
        let bundle = small_scene(1);
        let config = quick_config(FitMode::Detection);
        let densities = densities_for_mode(&bundle, config.mode).unwrap();
        let state = init_state(&bundle, &densities, &config).unwrap();
        let detections = crate::detection::detect_all(&state.logits[0]);
        for d in &detections {
            let (ox, oy) = state.logits[0].patch_origin(d.patch_index);
            assert!((d.x - (ox + 7.0)).abs() < 1e-12);
            assert!((d.y - (oy + 7.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let bundle = small_scene(2);
        let config = quick_config(FitMode::Detection);
        let densities = densities_for_mode(&bundle, config.mode).unwrap();
        let a = init_state(&bundle, &densities, &config).unwrap();
        let b = init_state(&bundle, &densities, &config).unwrap();
        assert_eq!(a.descriptors[0], b.descriptors[0]);
        assert_eq!(a.mlp, b.mlp);

        let mut other = config.clone();
        other.seed = 12;
        let c = init_state(&bundle, &densities, &other).unwrap();
        assert_ne!(a.descriptors[0], c.descriptors[0]);
    }

    #[test]
    fn zero_learning_rates_leave_state_unchanged() {
        let bundle = small_scene(1);
        let mut config = quick_config(FitMode::Detection);
        config.lr_fields = 0.0;
        config.lr_mlp = 0.0;
        let densities = densities_for_mode(&bundle, config.mode).unwrap();
        let mut state = init_state(&bundle, &densities, &config).unwrap();
        let before = state.clone();
        let out = step(&mut state, &bundle, &config).unwrap();
        assert!(out.total.is_finite() && out.total > 0.0);
        assert_eq!(state.logits, before.logits);
        assert_eq!(state.descriptors, before.descriptors);
        assert_eq!(state.mlp, before.mlp);
        assert_eq!(state.step, before.step + 1);
    }

    #[test]
    fn single_step_keeps_model_valid() {
        let bundle = small_scene(2);
        let config = quick_config(FitMode::Detection);
        let mut session = FitSession::new(bundle, config).unwrap();
        session.step_once().unwrap();
        let model = session.current_model_unpruned().unwrap();
        model.validate(2).unwrap();
        for g in &model.gaussians {
            assert!((g.rotation.norm() - 1.0).abs() < 1e-9, "unit quaternions");
        }
    }

    #[test]
    fn teacher_losses_start_at_zero_with_oracle_teacher() {
        let bundle = small_scene(2);
        let config = quick_config(FitMode::Detection);
        let mut session = FitSession::new(bundle, config).unwrap();
        let row = session.step_once().unwrap();
        assert_eq!(row.teach_depth, 0.0);
        assert_eq!(row.teach_t, 0.0);
        assert_eq!(row.teach_r, 0.0);
        assert_eq!(row.intrinsics, 0.0, "ring cameras share intrinsics");
    }

    #[test]
    fn trace_length_matches_steps_and_zero_steps_gives_centers() {
        let bundle = small_scene(1);
        let mut config = quick_config(FitMode::Detection);
        config.steps = 3;
        let run = fit(&bundle, &config).unwrap();
        assert_eq!(run.trace.len(), 3);

        config.steps = 0;
        let run = fit(&bundle, &config).unwrap();
        assert!(run.trace.is_empty());
        assert!(!run.model.is_empty());
    }

    #[test]
    fn pixel_mode_places_one_per_pixel() {
        let bundle = small_scene(1);
        let mut config = quick_config(FitMode::PixelAligned);
        config.steps = 0;
        let densities = densities_for_mode(&bundle, config.mode).unwrap();
        assert!(densities.is_empty());
        let state = init_state(&bundle, &densities, &config).unwrap();
        let (model, dropped) = super::pipeline::forward_model(
            &state,
            &bundle,
            &config,
            crate::aggregate::FuseMode::Training,
        )
        .unwrap();
        assert_eq!(model.len() + dropped, 28 * 28);
    }

    #[test]
    fn config_mode_names_round_trip() {
        for (mode, name) in [
            (FitMode::Detection, "\"detection\""),
            (FitMode::FixedDensity, "\"detection-fixed-density\""),
            (FitMode::PixelAligned, "\"pixel-aligned\""),
        ] {
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(json, name);
            let back: FitMode = serde_json::from_str(&json).unwrap();
            assert_eq!(back, mode);
        }
        // CLI short aliases parse too.
        let m: FitMode = serde_json::from_str("\"pixel\"").unwrap();
        assert_eq!(m, FitMode::PixelAligned);
        let m: FitMode = serde_json::from_str("\"fixed-density\"").unwrap();
        assert_eq!(m, FitMode::FixedDensity);
    }
}

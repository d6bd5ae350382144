//! One full forward/backward pass of the training objective: detect ->
//! decode -> aggregate -> render (self + full per view) -> losses, then the
//! hand-written chain rule all the way back to heatmap logits, descriptor
//! fields, MLP weights and (optionally) depth maps.


use crate::aggregate::{fuse, to_world, FuseMode};
use crate::buffer::{DepthMap, Grid};
use crate::decode::{
    activate_backward, bilinear_backward, bilinear_sample, decode_view, mlp_backward,
    mlp_forward_cached, ActivatedGrads, DecodeResult, MlpGrads,
};
use crate::detection::{detect_all, dsnt_backward, spatial_softmax, Detection, HeatmapField};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianModel, Quaternion};
use crate::losses::{
    loss_depth_consistency, loss_l1, loss_normal, loss_opacity_reg, loss_ssim,
    loss_teacher_rotation, loss_teacher_translation, loss_teacher_depth, loss_intrinsics_var,
    normals_from_depth, normals_from_depth_backward, LossBreakdown,
};
use crate::rasterizer::{
    project_gaussian_backward, project_model, rasterize, rasterize_backward, GaussianGrads,
    OpacitySource, ProjectedSplat, RenderGrads, ViewProjection,
};
use crate::synth::SceneBundle;

use super::{FitConfig, FitMode, FitState};

/// Everything a step reports besides the parameter gradients.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub total: f64,
    /// Mean self-render PSNR over views.
    pub psnr_self: f64,
    /// Mean full-render PSNR over views.
    pub psnr_full: f64,
    /// Primitives in the (training-mode) fused model.
    pub primitives: usize,
    /// Detections dropped for invalid sampled depth.
    pub dropped: usize,
    /// Views whose depth-consistency mask was empty this step.
    pub empty_masks: usize,
}

/// Parameter gradients, laid out exactly like the state vectors.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub logits: Vec<Vec<f64>>,
    pub descriptors: Vec<Vec<f64>>,
    pub mlp: MlpGrads,
    pub depths: Vec<Vec<f64>>,
}

/// Per-detection flat offset into a view's logit vector.
fn logit_offsets(field: &HeatmapField) -> Vec<usize> {
    let cells = field.patch_size * field.patch_size;
    let mut offsets = Vec::with_capacity(field.num_patches());
    let mut acc = 0usize;
    for p in &field.patches {
        offsets.push(acc);
        acc += p.channels * cells;
    }
    offsets
}

/// Pixel-aligned baseline: one detection per pixel center.
pub fn pixel_detections(width: usize, height: usize) -> Vec<Detection> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push(Detection {
                x: x as f64 + 0.5,
                y: y as f64 + 0.5,
                patch_index: y * width + x,
                channel_index: 0,
            });
        }
    }
    out
}

fn student_depth_map(state: &FitState, bundle: &SceneBundle, view: usize) -> Result<DepthMap> {
    let d = &bundle.depths[view];
    DepthMap::new(
        d.width(),
        d.height(),
        state.depths[view].clone(),
        d.confidence_data().to_vec(),
    )
}

struct ViewForward {
    detections: Vec<Detection>,
    decode: DecodeResult,
    /// Model index of this view's first primitive.
    model_offset: usize,
    depth_map: DepthMap,
}

pub(super) fn forward_backward(
    state: &FitState,
    bundle: &SceneBundle,
    config: &FitConfig,
) -> Result<(StepOutput, Gradients)> {
    config.weights.validate()?;
    let views = bundle.num_views();
    let weights = &config.weights;
    let vnorm = 1.0 / views as f64;

    // ---- forward ----------------------------------------------------
    let mut per_view = Vec::with_capacity(views);
    let mut world_lists = Vec::with_capacity(views);
    let mut model_offset = 0usize;
    let mut dropped = 0usize;
    for v in 0..views {
        let detections = match state.mode {
            FitMode::PixelAligned => {
                pixel_detections(bundle.cameras[v].width, bundle.cameras[v].height)
            }
            _ => detect_all(&state.logits[v]),
        };
        let depth_map = student_depth_map(state, bundle, v)?;
        let decode = decode_view(
            &detections,
            &depth_map,
            &bundle.images[v],
            &state.descriptors[v],
            &state.mlp,
            &bundle.cameras[v],
            &config.scale_bounds,
        )?;
        dropped += decode.dropped;
        let world: Vec<_> = decode
            .gaussians
            .iter()
            .map(|g| to_world(g, &bundle.cameras[v]))
            .collect();
        per_view.push(ViewForward {
            detections,
            decode,
            model_offset,
            depth_map,
        });
        model_offset += world.len();
        world_lists.push(world);
    }
    let model = fuse(&world_lists, config.prune_threshold, FuseMode::Training)?;

    let mut breakdown = LossBreakdown::default();
    let mut self_projs: Vec<ViewProjection> = Vec::with_capacity(views);
    let mut full_projs: Vec<ViewProjection> = Vec::with_capacity(views);
    let mut psnr_self = 0.0;
    let mut psnr_full = 0.0;
    let mut empty_masks = 0usize;

    // Per-view upstream gradients kept for the backward phase.
    struct ViewLossGrads {
        self_color: Vec<f64>,
        full_color: Vec<f64>,
        full_median: Vec<f64>,
        full_normal: Vec<f64>,
        depth_predicted: Vec<f64>,
        normal_derived: Vec<f64>,
        teacher_depth: Vec<f64>,
    }
    let mut loss_grads = Vec::with_capacity(views);

    for v in 0..views {
        let cam = &bundle.cameras[v];
        let image = &bundle.images[v];
        let n_px = cam.width * cam.height;

        let proj_self = project_model(&model, cam, OpacitySource::Raw, Some(v));
        let render_self = rasterize(&proj_self.splats, cam.width, cam.height)?;
        let proj_full = project_model(&model, cam, OpacitySource::Effective, None);
        let render_full = rasterize(&proj_full.splats, cam.width, cam.height)?;

        let self_image = render_self.color_image();
        let full_image = render_full.color_image();
        let (l1_s, g_l1_s) = loss_l1(&self_image, image)?;
        let (l1_f, g_l1_f) = loss_l1(&full_image, image)?;
        let (ssim_s, g_ssim_s) = loss_ssim(&self_image, image)?;
        let (ssim_f, g_ssim_f) = loss_ssim(&full_image, image)?;
        breakdown.l1_self += l1_s * vnorm;
        breakdown.l1_full += l1_f * vnorm;
        breakdown.ssim_self += ssim_s * vnorm;
        breakdown.ssim_full += ssim_f * vnorm;
        psnr_self += crate::eval::psnr(&self_image, image)? * vnorm;
        psnr_full += crate::eval::psnr(&full_image, image)? * vnorm;

        // Geometry consistency against the student depth map.
        let mask: Vec<bool> = render_full.alpha.iter().map(|&a| a >= 0.5).collect();
        let depth_term =
            loss_depth_consistency(&render_full.median_depth, &per_view[v].depth_map, &mask)?;
        if depth_term.masked == 0 {
            empty_masks += 1;
        }
        breakdown.depth += depth_term.value * vnorm;

        let derived = normals_from_depth(&per_view[v].depth_map, cam);
        let normal_term = loss_normal(&render_full.normal, &derived, &mask)?;
        breakdown.normal += normal_term.value * vnorm;

        // Teacher regularizers.
        let (td, g_td) = loss_teacher_depth(&state.depths[v], &bundle.teacher_depths[v])?;
        let (tt, _g_tt) =
            loss_teacher_translation(&cam.translation, &bundle.teacher_cameras[v].translation);
        let (tr, _g_tr) =
            loss_teacher_rotation(&cam.rotation, &bundle.teacher_cameras[v].rotation);
        breakdown.teach_depth += td * vnorm;
        breakdown.teach_t += tt * vnorm;
        breakdown.teach_r += tr * vnorm;

        // Assemble upstream per-pixel gradients, already loss-weighted.
        let photo = |g_l1: &[f64], g_ssim: &[f64]| -> Vec<f64> {
            g_l1.iter()
                .zip(g_ssim)
                .map(|(a, b)| (weights.l1 * a + weights.ssim * b) * 0.5 * vnorm)
                .collect()
        };
        let w_depth = weights.depth * vnorm;
        let w_normal = weights.normal * vnorm;
        loss_grads.push(ViewLossGrads {
            self_color: photo(&g_l1_s, &g_ssim_s),
            full_color: photo(&g_l1_f, &g_ssim_f),
            full_median: depth_term
                .grad_rendered
                .iter()
                .map(|g| g * w_depth)
                .collect(),
            full_normal: normal_term
                .grad_rendered
                .iter()
                .map(|g| g * w_normal)
                .collect(),
            depth_predicted: depth_term
                .grad_predicted
                .iter()
                .map(|g| g * w_depth)
                .collect(),
            normal_derived: normal_term
                .grad_derived
                .iter()
                .map(|g| g * w_normal)
                .collect(),
            teacher_depth: g_td
                .iter()
                .map(|g| g * weights.teach_depth * vnorm)
                .collect(),
        });
        debug_assert_eq!(loss_grads[v].full_median.len(), n_px);

        self_projs.push(proj_self);
        full_projs.push(proj_full);
    }

    let (op_value, op_grads) = loss_opacity_reg(&model);
    breakdown.opacity = op_value;
    let (intr_value, _intr_grads) = loss_intrinsics_var(&bundle.cameras);
    breakdown.intrinsics = intr_value;

    let total = breakdown.total(weights);

    // ---- backward ---------------------------------------------------
    // Accumulated world-frame gradients per model primitive, with opacity
    // and confidence tracked separately (self renders see raw opacity, full
    // renders see opacity * confidence).
    let mut world_grads = vec![GaussianGrads::default(); model.len()];
    let mut conf_grads = vec![0.0f64; model.len()];
    for (m, (da, dc)) in op_grads.iter().enumerate() {
        world_grads[m].opacity += weights.opacity * da;
        conf_grads[m] += weights.opacity * dc;
    }

    for v in 0..views {
        let cam = &bundle.cameras[v];
        let n_px = cam.width * cam.height;
        // Self render: photometric color gradient only.
        let mut upstream = RenderGrads::zeros(cam.width, cam.height);
        upstream.color.copy_from_slice(&loss_grads[v].self_color);
        if !upstream.is_zero() {
            let splat_grads =
                rasterize_backward(&self_projs[v].splats, cam.width, cam.height, &upstream)?;
            for (s, grad) in splat_grads.iter().enumerate() {
                let m = self_projs[v].model_index[s];
                let projected = ProjectedSplat {
                    splat: self_projs[v].splats[s].clone(),
                    shortest_axis: self_projs[v].axes[s].0,
                    normal_sign: self_projs[v].axes[s].1,
                };
                let (gg, _) =
                    project_gaussian_backward(&model.gaussians[m], cam, &projected, grad);
                // Raw opacity: the splat opacity was alpha itself.
                world_grads[m].accumulate(&gg);
            }
        }

        // Full render: photometric + median depth + normals.
        let mut upstream = RenderGrads::zeros(cam.width, cam.height);
        upstream.color.copy_from_slice(&loss_grads[v].full_color);
        upstream
            .median_depth
            .copy_from_slice(&loss_grads[v].full_median);
        upstream.normal.copy_from_slice(&loss_grads[v].full_normal);
        debug_assert_eq!(upstream.alpha.len(), n_px);
        if !upstream.is_zero() {
            let splat_grads =
                rasterize_backward(&full_projs[v].splats, cam.width, cam.height, &upstream)?;
            for (s, grad) in splat_grads.iter().enumerate() {
                let m = full_projs[v].model_index[s];
                let projected = ProjectedSplat {
                    splat: full_projs[v].splats[s].clone(),
                    shortest_axis: full_projs[v].axes[s].0,
                    normal_sign: full_projs[v].axes[s].1,
                };
                let (mut gg, _) =
                    project_gaussian_backward(&model.gaussians[m], cam, &projected, grad);
                // The composited opacity was alpha * confidence.
                let g = &model.gaussians[m];
                let d_eff = gg.opacity;
                gg.opacity = d_eff * g.confidence;
                conf_grads[m] += d_eff * g.opacity;
                world_grads[m].accumulate(&gg);
            }
        }
    }

    // ---- chain world gradients down to the parameters ---------------
    let mut grad_logits: Vec<Vec<f64>> = state
        .logits
        .iter()
        .map(|f| vec![0.0; f.total_logits()])
        .collect();
    let mut grad_desc: Vec<Vec<f64>> = state
        .descriptors
        .iter()
        .map(|d| vec![0.0; d.values().len()])
        .collect();
    let mut grad_mlp = MlpGrads::zeros(&state.mlp);
    let mut grad_depths: Vec<Vec<f64>> = state
        .depths
        .iter()
        .map(|d| vec![0.0; d.len()])
        .collect();

    // Depth-map gradients that do not go through primitives.
    for v in 0..views {
        for (g, out) in loss_grads[v]
            .teacher_depth
            .iter()
            .zip(grad_depths[v].iter_mut())
        {
            *out += g;
        }
        for (g, out) in loss_grads[v]
            .depth_predicted
            .iter()
            .zip(grad_depths[v].iter_mut())
        {
            *out += g;
        }
        if loss_grads[v].normal_derived.iter().any(|&g| g != 0.0) {
            let back = normals_from_depth_backward(
                &per_view[v].depth_map,
                &bundle.cameras[v],
                &loss_grads[v].normal_derived,
            );
            for (g, out) in back.iter().zip(grad_depths[v].iter_mut()) {
                *out += g;
            }
        }
    }

    let offsets_per_view: Vec<Vec<usize>> = state.logits.iter().map(logit_offsets).collect();
    let cells = crate::PATCH_SIZE * crate::PATCH_SIZE;

    for v in 0..views {
        let cam = &bundle.cameras[v];
        let vf = &per_view[v];
        let pose_quat = crate::gaussian::matrix_to_quat(&cam.rotation.transpose());
        let depth_grid = &vf.depth_map;
        for local in 0..vf.decode.gaussians.len() {
            let m = vf.model_offset + local;
            let wg = &world_grads[m];
            let det = vf.detections[vf.decode.detection_index[local]];

            // to_world backward: mean_w = R^T (m_c - t), q_w = q_pose * q_c.
            let d_mean_cam = cam.rotation * wg.mean;
            let d_q_world = Quaternion::new(
                wg.rotation[0],
                wg.rotation[1],
                wg.rotation[2],
                wg.rotation[3],
            );
            let d_q_cam = Quaternion::multiply_backward_rhs(&pose_quat, &d_q_world);

            // Recompute the decode intermediates for this detection.
            let mut depth_sample = [0.0];
            bilinear_sample(depth_grid, det.x, det.y, &mut depth_sample);
            let d = depth_sample[0];
            let mut desc_sample = vec![0.0; state.descriptors[v].channels()];
            bilinear_sample(&state.descriptors[v], det.x, det.y, &mut desc_sample);
            let (raw, cache) = mlp_forward_cached(&state.mlp, &desc_sample)?;

            // mean_c = ray_direction * depth
            let dir = cam.ray_direction(det.x, det.y);
            let mut d_depth = dir.dot(&d_mean_cam);
            let mut d_x = d_mean_cam.x * d / cam.fx;
            let mut d_y = d_mean_cam.y * d / cam.fy;

            // activation backward (scale, rotation, opacity, confidence)
            let act_grads = ActivatedGrads {
                scale: [wg.scale.x, wg.scale.y, wg.scale.z],
                rotation: d_q_cam.as_array(),
                opacity: wg.opacity,
                confidence: conf_grads[m],
            };
            let (d_raw, dd_scale) =
                activate_backward(&raw, d, &config.scale_bounds, &act_grads);
            d_depth += dd_scale;

            // MLP backward into the shared weights and the descriptor.
            let d_desc = mlp_backward(&state.mlp, &desc_sample, &cache, &d_raw, &mut grad_mlp);

            // Color was sampled from the input image: coordinates only.
            let d_color = [wg.color.x, wg.color.y, wg.color.z];
            let (gx, gy) = bilinear_backward(&bundle.images[v], det.x, det.y, &d_color, None);
            d_x += gx;
            d_y += gy;

            // Descriptor sampling: buffer + coordinates.
            let (gx, gy) = bilinear_backward(
                &state.descriptors[v],
                det.x,
                det.y,
                &d_desc,
                Some(&mut grad_desc[v]),
            );
            d_x += gx;
            d_y += gy;

            // Depth sampling: coordinates always, buffer when optimized.
            let depth_buf_grad = if config.optimize_depth {
                Some(grad_depths[v].as_mut_slice())
            } else {
                None
            };
            let (gx, gy) =
                bilinear_backward(depth_grid, det.x, det.y, &[d_depth], depth_buf_grad);
            d_x += gx;
            d_y += gy;

            // Sub-pixel coordinates back to heatmap logits.
            if state.mode != FitMode::PixelAligned {
                let field = &state.logits[v];
                let h = spatial_softmax(
                    field.logits(det.patch_index, det.channel_index),
                    field.temperature,
                );
                let origin = field.patch_origin(det.patch_index);
                let g = dsnt_backward(
                    &h,
                    field.patch_size,
                    origin,
                    field.temperature,
                    (d_x, d_y),
                );
                let offset =
                    offsets_per_view[v][det.patch_index] + det.channel_index * cells;
                for (k, gv) in g.iter().enumerate() {
                    grad_logits[v][offset + k] += gv;
                }
            }
        }
    }

    let output = StepOutput {
        breakdown,
        total,
        psnr_self,
        psnr_full,
        primitives: model.len(),
        dropped,
        empty_masks,
    };
    let grads = Gradients {
        logits: grad_logits,
        descriptors: grad_desc,
        mlp: grad_mlp,
        depths: grad_depths,
    };
    Ok((output, grads))
}

/// Forward-only evaluation used by `fit` for the final model and by tests.
pub(super) fn forward_model(
    state: &FitState,
    bundle: &SceneBundle,
    config: &FitConfig,
    mode: FuseMode,
) -> Result<(GaussianModel, usize)> {
    let views = bundle.num_views();
    let mut world_lists = Vec::with_capacity(views);
    let mut dropped = 0usize;
    for v in 0..views {
        let detections = match state.mode {
            FitMode::PixelAligned => {
                pixel_detections(bundle.cameras[v].width, bundle.cameras[v].height)
            }
            _ => detect_all(&state.logits[v]),
        };
        let depth_map = student_depth_map(state, bundle, v)?;
        let decode = decode_view(
            &detections,
            &depth_map,
            &bundle.images[v],
            &state.descriptors[v],
            &state.mlp,
            &bundle.cameras[v],
            &config.scale_bounds,
        )?;
        dropped += decode.dropped;
        world_lists.push(
            decode
                .gaussians
                .iter()
                .map(|g| to_world(g, &bundle.cameras[v]))
                .collect::<Vec<_>>(),
        );
    }
    Ok((fuse(&world_lists, config.prune_threshold, mode)?, dropped))
}

pub(super) fn check_finite(out: &StepOutput, step: usize) -> Result<()> {
    if !out.total.is_finite() {
        return Err(Error::Divergence {
            step,
            what: format!("total loss = {}", out.total),
        });
    }
    Ok(())
}

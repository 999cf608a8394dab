//! Caption-aligned saliency-guided enrichment.
//!
//! Caption token sequences are denoised by one self-attention shared across
//! both modalities, projected into each backbone's channel space, and
//! repeated along time. After the backbone, each stream is self-attended,
//! cross-attended against its caption anchor, refined with the partner
//! modality, and temporally smoothed; a per-frame caption-agreement gate and
//! a per-token saliency mask then control where the refined features are
//! injected back.

use crate::caste::{COSINE_EPS, GATE_INIT};
use crate::nn::{Bottleneck, Linear, MultiHeadAttention, Norm};
use crate::tensor::{Init, ParamId, ParamStore, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct CaseConfig {
    pub c_v: usize,
    pub c_a: usize,
    /// Caption embedding width.
    pub c_t: usize,
    pub heads: usize,
    /// Top-K injection ratio (defaults to the CASTE ratio 0.3).
    pub rho: f64,
    /// Temporal kernel size for the post-refinement smoothing.
    pub conv_k: usize,
    /// Hidden width of the caption bottleneck projections.
    pub bottleneck_hidden: usize,
}

impl CaseConfig {
    pub fn for_widths(c_v: usize, c_a: usize, c_t: usize) -> Self {
        CaseConfig {
            c_v,
            c_a,
            c_t,
            heads: 2,
            rho: 0.3,
            conv_k: 3,
            bottleneck_hidden: (c_t / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(TensorError::Config(format!(
                "case rho must lie in (0, 1], got {}",
                self.rho
            )));
        }
        if self.conv_k % 2 == 0 {
            return Err(TensorError::Config(format!(
                "case conv_k must be odd, got {}",
                self.conv_k
            )));
        }
        Ok(())
    }
}

/// One modality's refinement-side parameters.
#[derive(Debug, Clone)]
struct RefineSide {
    /// Self-attention applied to both backbone and caption tokens of this
    /// modality (its own parameters, not shared with the caption stage).
    self_attn: MultiHeadAttention,
    /// Cross-attention from backbone tokens onto caption tokens.
    cap_cross: MultiHeadAttention,
    /// Cross-attention onto the projected partner stream.
    modal_cross: MultiHeadAttention,
    /// Temporal smoothing (depthwise + pointwise along time).
    dw_kernel: ParamId,
    pw_mix: ParamId,
    /// Injection-side layer norm (fresh parameters) and residual gate.
    inj_norm: Norm,
    gamma: ParamId,
}

impl RefineSide {
    fn new(store: &mut ParamStore, name: &str, c: usize, cfg: &CaseConfig, seed: u64) -> Result<Self> {
        Ok(RefineSide {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), c, cfg.heads, seed, false)?,
            cap_cross: MultiHeadAttention::new(store, &format!("{name}.cap_cross"), c, cfg.heads, seed, false)?,
            modal_cross: MultiHeadAttention::new(store, &format!("{name}.modal_cross"), c, cfg.heads, seed, false)?,
            dw_kernel: store.add_seeded(
                &format!("{name}.tm.depthwise"),
                vec![c, cfg.conv_k],
                Init::UniformFanIn(cfg.conv_k),
                seed,
                false,
            )?,
            pw_mix: store.add_seeded(
                &format!("{name}.tm.pointwise"),
                vec![c, c],
                Init::UniformFanIn(c),
                seed,
                false,
            )?,
            inj_norm: Norm::new(store, &format!("{name}.inj_norm"), c, seed, false)?,
            gamma: store.add_seeded(
                &format!("{name}.gamma"),
                vec![1],
                Init::Const(GATE_INIT),
                seed,
                false,
            )?,
        })
    }
}

/// All parameters of the CASE stage.
#[derive(Debug, Clone)]
pub struct CaseParams {
    pub config: CaseConfig,
    /// Shared caption self-attention: one parameter set, one gradient
    /// accumulator, referenced by both caption branches.
    theta_att: MultiHeadAttention,
    cap_norm_v: Norm,
    cap_norm_a: Norm,
    bottleneck_v: Bottleneck,
    bottleneck_a: Bottleneck,
    /// Partner-stream projections `W^{v←a}` and `W^{a←v}`.
    w_va: Linear,
    w_av: Linear,
    visual: RefineSide,
    audio: RefineSide,
}

impl CaseParams {
    pub fn new(store: &mut ParamStore, name: &str, config: CaseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(CaseParams {
            config,
            theta_att: MultiHeadAttention::new(
                store,
                &format!("{name}.theta_att"),
                config.c_t,
                config.heads.min(config.c_t),
                seed,
                false,
            )?,
            cap_norm_v: Norm::new(store, &format!("{name}.cap_norm_v"), config.c_t, seed, false)?,
            cap_norm_a: Norm::new(store, &format!("{name}.cap_norm_a"), config.c_t, seed, false)?,
            bottleneck_v: Bottleneck::new(
                store,
                &format!("{name}.cap_proj_v"),
                config.c_t,
                config.bottleneck_hidden,
                config.c_v,
                Init::UniformFanIn(config.bottleneck_hidden),
                seed,
                false,
            )?,
            bottleneck_a: Bottleneck::new(
                store,
                &format!("{name}.cap_proj_a"),
                config.c_t,
                config.bottleneck_hidden,
                config.c_a,
                Init::UniformFanIn(config.bottleneck_hidden),
                seed,
                false,
            )?,
            w_va: Linear::no_bias(store, &format!("{name}.w_va"), config.c_a, config.c_v, seed, false)?,
            w_av: Linear::no_bias(store, &format!("{name}.w_av"), config.c_v, config.c_a, seed, false)?,
            visual: RefineSide::new(store, &format!("{name}.v"), config.c_v, &config, seed)?,
            audio: RefineSide::new(store, &format!("{name}.a"), config.c_a, &config, seed)?,
        })
    }
}

/// Caption processing: shared self-attention, per-modality residual norm,
/// bottleneck projection into the backbone channel space, and repetition
/// along a new leading time axis.
pub fn caption_process(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CaseParams,
    s_ori_v: Var,
    s_ori_a: Var,
    t: usize,
) -> Result<(Var, Var)> {
    for (label, s) in [("visual", s_ori_v), ("audio", s_ori_a)] {
        let shape = tape.shape(s);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(TensorError::Input(format!(
                "{label} caption sequence must be non-empty [L_c, C_t], got {shape:?}"
            )));
        }
    }
    if t == 0 {
        return Err(TensorError::Input("caption repetition needs T >= 1".into()));
    }
    let mut out = Vec::with_capacity(2);
    for (s_ori, norm, bottleneck) in [
        (s_ori_v, &params.cap_norm_v, &params.bottleneck_v),
        (s_ori_a, &params.cap_norm_a, &params.bottleneck_a),
    ] {
        let att = params.theta_att.forward_self(tape, store, s_ori)?;
        let residual = tape.add(s_ori, att)?;
        let denoised = norm.forward(tape, store, residual)?;
        let projected = bottleneck.forward(tape, store, denoised)?;
        let shape = tape.shape(projected).to_vec();
        let leading = tape.reshape(projected, vec![1, shape[0], shape[1]])?;
        out.push(tape.broadcast_axis(leading, 0, t)?);
    }
    Ok((out[0], out[1]))
}

/// Cross-modal refinement of backbone streams against caption anchors.
///
/// Per modality: self-attend the backbone tokens and the caption tokens,
/// cross-attend backbone → caption, project the partner's caption-enriched
/// stream into this channel space and cross-attend onto it, then smooth
/// along time with a depthwise + pointwise convolution.
///
/// Every attention stage is residual (`x + Attn(x)`). Without the residual,
/// stacked attention at small widths collapses all tokens of a frame onto
/// one vector and token saliency degenerates into rounding noise.
pub fn cross_refine(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CaseParams,
    v_l: Var,
    a_l: Var,
    v_cap: Var,
    a_cap: Var,
) -> Result<(Var, Var)> {
    let t = tape.shape(v_l)[0];
    for s in [a_l, v_cap, a_cap] {
        if tape.shape(s)[0] != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_refine",
                lhs: tape.shape(v_l).to_vec(),
                rhs: tape.shape(s).to_vec(),
            });
        }
    }
    let tilde_v = caption_attend(tape, store, &params.visual, v_l, v_cap)?;
    let tilde_a = caption_attend(tape, store, &params.audio, a_l, a_cap)?;

    let a_in_v = params.w_va.forward(tape, store, tilde_a)?;
    let vx = params
        .visual
        .modal_cross
        .forward_cross(tape, store, tilde_v, a_in_v)?;
    let vhat = tape.add(tilde_v, vx)?;
    let v_in_a = params.w_av.forward(tape, store, tilde_v)?;
    let ax = params
        .audio
        .modal_cross
        .forward_cross(tape, store, tilde_a, v_in_a)?;
    let ahat = tape.add(tilde_a, ax)?;

    let v_ref = temporal_smooth(tape, store, &params.visual, vhat)?;
    let a_ref = temporal_smooth(tape, store, &params.audio, ahat)?;
    Ok((v_ref, a_ref))
}

/// Residual self-attention on backbone and caption tokens followed by
/// residual cross-attention of the backbone stream onto the captions.
fn caption_attend(
    tape: &mut Tape,
    store: &ParamStore,
    side: &RefineSide,
    x: Var,
    cap: Var,
) -> Result<Var> {
    let sx_att = side.self_attn.forward_self(tape, store, x)?;
    let sx = tape.add(x, sx_att)?;
    let sc_att = side.self_attn.forward_self(tape, store, cap)?;
    let sc = tape.add(cap, sc_att)?;
    let cross = side.cap_cross.forward_cross(tape, store, sx, sc)?;
    tape.add(sx, cross)
}

fn temporal_smooth(tape: &mut Tape, store: &ParamStore, side: &RefineSide, x: Var) -> Result<Var> {
    let k = tape.param(side.dw_kernel, store);
    let smoothed = tape.depthwise_conv1d(x, k)?;
    let mix = tape.param(side.pw_mix, store);
    tape.pointwise_conv1d(smoothed, mix)
}

/// Per-frame caption-agreement gate: cosine of the frame-mean refined
/// stream against the frame-mean caption anchor, squashed by a sigmoid.
pub fn frame_gate(tape: &mut Tape, x_ref: Var, cap: Var) -> Result<Var> {
    if tape.shape(x_ref)[0] != tape.shape(cap)[0] {
        return Err(TensorError::ShapeMismatch {
            op: "frame_gate",
            lhs: tape.shape(x_ref).to_vec(),
            rhs: tape.shape(cap).to_vec(),
        });
    }
    let mx = tape.mean_axis(x_ref, 1)?;
    let mc = tape.mean_axis(cap, 1)?;
    let r = tape.cosine_lastdim(mx, mc, COSINE_EPS)?;
    Ok(tape.sigmoid(r))
}

/// Gated, saliency-masked residual injection for one modality.
fn inject_side(
    tape: &mut Tape,
    store: &ParamStore,
    side: &RefineSide,
    x: Var,
    x_ref: Var,
    gate: Var,
    rho: f64,
) -> Result<(Var, Var)> {
    let t = tape.shape(x)[0];
    let l = tape.shape(x)[1];
    let sq = tape.hadamard(x_ref, x_ref)?;
    let saliency = tape.sum_axis(sq, 2)?;
    let (mask, soft) = tape.topk_mask(saliency, rho)?;
    let mask3 = tape.reshape(mask, vec![t, l, 1])?;

    let normed = side.inj_norm.forward(tape, store, x_ref)?;
    let g3 = tape.reshape(gate, vec![t, 1, 1])?;
    let gated = tape.hadamard(normed, g3)?;
    let masked = tape.hadamard(gated, mask3)?;
    let gamma = tape.param(side.gamma, store);
    let gamma3 = tape.reshape(gamma, vec![1, 1, 1])?;
    let injection = tape.hadamard(masked, gamma3)?;
    let out = tape.add(x, injection)?;
    Ok((out, soft))
}

/// Residual injection for both modalities.
pub fn case_inject(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CaseParams,
    v: Var,
    a: Var,
    v_ref: Var,
    a_ref: Var,
    g_v: Var,
    g_a: Var,
) -> Result<(Var, Var, Var, Var)> {
    let (v_out, soft_v) = inject_side(tape, store, &params.visual, v, v_ref, g_v, params.config.rho)?;
    let (a_out, soft_a) = inject_side(tape, store, &params.audio, a, a_ref, g_a, params.config.rho)?;
    Ok((v_out, a_out, soft_v, soft_a))
}

/// Result of the full CASE stage.
#[derive(Debug, Clone, Copy)]
pub struct CaseOutput {
    pub v: Var,
    pub a: Var,
    /// Per-frame caption-agreement gates, `[T]`, in (0, 1).
    pub g_v: Var,
    pub g_a: Var,
    /// Soft token-selection distributions `[T, L]`.
    pub soft_v: Var,
    pub soft_a: Var,
    /// Processed caption anchors `[T, L_c, C]` (constant along T).
    pub v_cap: Var,
    pub a_cap: Var,
}

/// Full CASE pass: caption processing, cross-modal refinement, frame gates,
/// and selective injection.
pub fn case_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CaseParams,
    v_l: Var,
    a_l: Var,
    s_ori_v: Var,
    s_ori_a: Var,
) -> Result<CaseOutput> {
    let t = tape.shape(v_l)[0];
    let (v_cap, a_cap) = caption_process(tape, store, params, s_ori_v, s_ori_a, t)?;
    let (v_ref, a_ref) = cross_refine(tape, store, params, v_l, a_l, v_cap, a_cap)?;
    let g_v = frame_gate(tape, v_ref, v_cap)?;
    let g_a = frame_gate(tape, a_ref, a_cap)?;
    let (v_out, a_out, soft_v, soft_a) =
        case_inject(tape, store, params, v_l, a_l, v_ref, a_ref, g_v, g_a)?;
    Ok(CaseOutput {
        v: v_out,
        a: a_out,
        g_v,
        g_a,
        soft_v,
        soft_a,
        v_cap,
        a_cap,
    })
}

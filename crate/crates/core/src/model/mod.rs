//! Encoder, attention, detection head, and skip decoder assembled into one
//! network, with the combined loss, the training step, and checkpoints.
//!
//! Dataflow for an `(H, W, 3)` frame:
//!
//! ```text
//! stem (s1, 8) -> stage2 (s2, 16) = v -> stage3 (s4, 32) -> stage4 (s8, c) = x
//! z_self = self_attention(x); z_co = coattention(v, x)
//! head(concat(x, gate(z_self), gate(z_co))) -> pre-output feature -> coarse logits
//! 3 x (upsample 2x + skip prediction from stage3 / stage2 / stem) -> sigmoid
//! ```

pub mod checkpoint;
pub mod params;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use params::{param_shapes, ModelParams, ModelTensors, FEATURE_STRIDE};
pub use train::{
    compute_gradients, sample_minibatch, total_loss, train, train_step, FrameSample, LossRecord, TrainConfig,
};

use crate::attention::{coattention_on, gate_on, self_attention_on};
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::tensor::{GradTape, Tensor, Var};

/// Switches for ablation runs. Disabled attention replaces both gated
/// attention features with zeros; the parameter set is unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOptions {
    pub attention: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { attention: true }
    }
}

/// Handles into the tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `(H, W)` saliency in `[0, 1]`.
    pub saliency: Var,
    /// `(h, w, c)` head feature before the output convolution.
    pub feature: Var,
    /// `(h, w)` coarse saliency at feature resolution.
    pub coarse: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub saliency: Tensor,
    pub feature: Tensor,
    pub coarse: Tensor,
}

fn conv_bias(tape: &mut GradTape, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let y = tape.conv2d(x, w, stride)?;
    tape.add_bias(y, b)
}

fn conv_relu(tape: &mut GradTape, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let y = conv_bias(tape, x, w, b, stride)?;
    Ok(tape.relu(y))
}

pub fn check_frame_shape(frame: &Tensor) -> Result<(usize, usize)> {
    let [h, w, ch] = frame.dims3("forward")?;
    if ch != 3 || h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(Error::InvalidShape {
            shape: frame.shape().to_vec(),
            reason: format!("frames must be (H, W, 3) with H and W divisible by {FEATURE_STRIDE}"),
        });
    }
    Ok((h, w))
}

/// Records the full network on `tape`.
pub fn forward_on(tape: &mut GradTape, p: &ModelTensors<Var>, frame: Var, opts: ModelOptions) -> Result<ForwardVars> {
    let (h, w) = check_frame_shape(tape.value(frame))?;

    let stem = conv_relu(tape, frame, p.stem_w, p.stem_b, 1)?;
    let s2 = conv_relu(tape, stem, p.stage2_w, p.stage2_b, 2)?;
    let s3 = conv_relu(tape, s2, p.stage3_w, p.stage3_b, 2)?;
    let x = conv_relu(tape, s3, p.stage4_w, p.stage4_b, 2)?;

    let (gated_self, gated_co) = if opts.attention {
        let z_self = self_attention_on(tape, x, p.dynamic_w)?;
        let gs = gate_on(tape, z_self, p.gate_self_w, p.gate_self_b)?;
        let z_co = coattention_on(tape, s2, x, p.coattn_w, p.coattn_resize)?;
        let gc = gate_on(tape, z_co, p.gate_co_w, p.gate_co_b)?;
        (gs, gc)
    } else {
        let zeros = Tensor::zeros(tape.value(x).shape());
        (tape.leaf(zeros.clone()), tape.leaf(zeros))
    };

    let joined = tape.concat_channels(&[x, gated_self, gated_co])?;
    let h1 = conv_relu(tape, joined, p.head1_w, p.head1_b, 1)?;
    let feature = conv_relu(tape, h1, p.head2_w, p.head2_b, 1)?;
    let coarse_logits = conv_bias(tape, feature, p.head_out_w, p.head_out_b, 1)?;

    let mut logits = coarse_logits;
    for (skip_in, sw, sb) in [
        (s3, p.skip4_w, p.skip4_b),
        (s2, p.skip2_w, p.skip2_b),
        (stem, p.skip1_w, p.skip1_b),
    ] {
        let up = tape.upsample2x(logits)?;
        let skip = conv_bias(tape, skip_in, sw, sb, 1)?;
        logits = tape.add(up, skip)?;
    }

    let sal = tape.sigmoid(logits);
    let saliency = tape.reshape(sal, &[h, w])?;
    let coarse = tape.sigmoid(coarse_logits);
    let coarse = tape.reshape(coarse, &[h / FEATURE_STRIDE, w / FEATURE_STRIDE])?;
    Ok(ForwardVars {
        saliency,
        feature,
        coarse,
    })
}

/// Registers every tensor of `params` on `tape`; parameter ids follow
/// checkpoint order.
pub fn params_on(tape: &mut GradTape, params: &ModelParams) -> ModelTensors<Var> {
    params.map(|idx, _, t| tape.param(idx, t.clone()))
}

pub fn forward(frame: &Tensor, params: &ModelParams, opts: ModelOptions) -> Result<ForwardOutput> {
    let mut tape = GradTape::new();
    let vars = params_on(&mut tape, params);
    let input = tape.leaf(frame.clone());
    let out = forward_on(&mut tape, &vars, input, opts)?;
    Ok(ForwardOutput {
        saliency: tape.value(out.saliency).clone(),
        feature: tape.value(out.feature).clone(),
        coarse: tape.value(out.coarse).clone(),
    })
}

/// Independent per-frame inference; outputs follow frame order.
pub fn infer_video(seq: &VideoSequence, params: &ModelParams, opts: ModelOptions) -> Result<Vec<Tensor>> {
    let Some(first) = seq.frames.first() else {
        return Ok(Vec::new());
    };
    for f in &seq.frames {
        if f.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "infer_video",
                lhs: first.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
    }
    use rayon::prelude::*;
    seq.frames
        .par_iter()
        .map(|f| forward(f, params, opts).map(|o| o.saliency))
        .collect()
}

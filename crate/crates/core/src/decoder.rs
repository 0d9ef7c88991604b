//! Minimal mask decoder, hierarchical (whole + parts) decoding and the dice
//! objective.
//!
//! `decode` works on batches: tokens `B x T x d`, dense prompts
//! `B x d x h x w`. A leading dimension of 1 (or a rank-3 `d x h x w` dense
//! input) broadcasts across the batch, which is how a single no-mask
//! embedding or placeholder token is shared by every part.

use gradkit::{Scalar, Tensor, Var};

use crate::crossmodal::dims_error;
use crate::error::Result;
use crate::params::Bound;

/// Whole-instrument prompt: tokens `T x d` (or `P x n x d`, flattened
/// before decoding) and a dense map `d x h x w`.
#[derive(Clone, Copy)]
pub struct WholePrompt<'t, T: Scalar> {
    pub sparse: Var<'t, T>,
    pub dense: Var<'t, T>,
}

/// Per-part prompts: tokens `P x n x d` and dense maps `P x d x h x w`.
#[derive(Clone, Copy)]
pub struct PartPrompts<'t, T: Scalar> {
    pub sparse: Var<'t, T>,
    pub dense: Var<'t, T>,
}

#[derive(Clone, Copy)]
pub struct LabelEmbeddings<'t, T: Scalar> {
    pub positive: Var<'t, T>,
    pub negative: Var<'t, T>,
}

impl<'t, T: Scalar> LabelEmbeddings<'t, T> {
    pub fn from_bound(p: &Bound<'t, T>) -> Result<Self> {
        Ok(Self {
            positive: p.get("labels.positive")?,
            negative: p.get("labels.negative")?,
        })
    }

    pub fn select(&self, positive: bool) -> Var<'t, T> {
        if positive {
            self.positive
        } else {
            self.negative
        }
    }
}

/// Whole logits `H x W`; part logits `P x H x W` when parts were decoded.
#[derive(Clone, Copy)]
pub struct HierarchicalPrediction<'t, T: Scalar> {
    pub whole: Var<'t, T>,
    pub parts: Option<Var<'t, T>>,
}

/// One cross-attention block over `f_i + dense`, a frozen output MLP on the
/// token mean, and a per-pixel dot product, upsampled to `height x width`.
/// Returns `B x height x width` logits.
pub fn decode<'t, T: Scalar>(
    p: &Bound<'t, T>,
    f_i: Var<'t, T>,
    tokens: Var<'t, T>,
    dense: Var<'t, T>,
    height: usize,
    width: usize,
) -> Result<Var<'t, T>> {
    let (fs, ts) = (f_i.shape(), tokens.shape());
    if fs.len() != 3 || ts.len() != 3 || ts[1] == 0 || ts[2] != fs[0] {
        return Err(dims_error("decode", &fs, &ts));
    }
    let (d, h, w) = (fs[0], fs[1], fs[2]);
    let ds = dense.shape();
    let dense_ok = match ds.len() {
        3 => ds[0] == d,
        4 => ds[1] == d && (ds[0] == 1 || ts[0] == 1 || ds[0] == ts[0]),
        _ => false,
    };
    if !dense_ok {
        return Err(dims_error("decode", &fs, &ds));
    }

    let fused = dense.add(f_i)?;
    let fshape = fused.shape();
    if fshape[fshape.len() - 2..] != [h, w] {
        return Err(dims_error("decode", &fs, &ds));
    }
    let batch_f = if fshape.len() == 4 { fshape[0] } else { 1 };
    let fused = fused.reshape(&[batch_f, d, h * w])?;

    // Projections act on the channel axis: K^T = W_k F, V^T = W_v F.
    let k_t = p.get("decoder.attn.wk")?.matmul(fused)?;
    let v_t = p.get("decoder.attn.wv")?.matmul(fused)?;
    let q = tokens.matmul(p.get("decoder.attn.wq")?)?;
    let scale = T::one() / T::from_usize(d).expect("dim fits").sqrt();
    let attn = q.matmul(k_t)?.scale(scale).softmax(2)?;
    let attended = attn.matmul(v_t.permute(&[0, 2, 1])?)?;
    let updated = tokens.add(attended.matmul(p.get("decoder.attn.wo")?)?)?;

    let query = updated
        .mean_axis(1, false)?
        .linear(p.get("decoder.output_mlp.fc1.weight")?, p.get("decoder.output_mlp.fc1.bias")?)?
        .relu()
        .linear(p.get("decoder.output_mlp.fc2.weight")?, p.get("decoder.output_mlp.fc2.bias")?)?;
    let batch = query.shape()[0];
    let logits = query.reshape(&[batch, 1, d])?.matmul(fused)?;
    let batch = logits.shape()[0];
    Ok(logits.reshape(&[batch, h, w])?.upsample_bilinear(height, width)?)
}

/// Whole mask from all part tokens plus the label; `H x W`.
pub fn decode_whole<'t, T: Scalar>(
    p: &Bound<'t, T>,
    f_i: Var<'t, T>,
    whole: WholePrompt<'t, T>,
    label: Var<'t, T>,
    height: usize,
    width: usize,
) -> Result<Var<'t, T>> {
    let s = whole.sparse.shape();
    let d = *s.last().ok_or_else(|| dims_error("decode_whole", &s, &[]))?;
    let count = s.iter().product::<usize>() / d.max(1);
    let tokens = whole.sparse.reshape(&[1, count, d])?.add(label)?;
    let ds = whole.dense.shape();
    let dense = if ds.len() == 3 {
        whole.dense.reshape(&[1, ds[0], ds[1], ds[2]])?
    } else {
        whole.dense
    };
    Ok(decode(p, f_i, tokens, dense, height, width)?.reshape(&[height, width])?)
}

/// All part masks in one batched decode; `P x H x W`.
pub fn decode_parts<'t, T: Scalar>(
    p: &Bound<'t, T>,
    f_i: Var<'t, T>,
    parts: PartPrompts<'t, T>,
    label: Var<'t, T>,
    height: usize,
    width: usize,
) -> Result<Var<'t, T>> {
    let tokens = parts.sparse.add(label)?;
    decode(p, f_i, tokens, parts.dense, height, width)
}

/// Decodes the whole prompt and each part prompt with shared weights.
#[allow(clippy::too_many_arguments)]
pub fn decode_hierarchical<'t, T: Scalar>(
    p: &Bound<'t, T>,
    f_i: Var<'t, T>,
    whole: WholePrompt<'t, T>,
    parts: PartPrompts<'t, T>,
    labels: &LabelEmbeddings<'t, T>,
    is_positive: bool,
    height: usize,
    width: usize,
) -> Result<HierarchicalPrediction<'t, T>> {
    let label = labels.select(is_positive);
    Ok(HierarchicalPrediction {
        whole: decode_whole(p, f_i, whole, label, height, width)?,
        parts: Some(decode_parts(p, f_i, parts, label, height, width)?),
    })
}

/// Added to the denominator of slices whose target is empty.
pub const DICE_EPS: f64 = 1e-6;

/// Soft dice of each leading-axis slice: `2 sum(p g) / (sum p^2 + sum g^2)`
/// with `p = sigmoid(logits)`, plus [`DICE_EPS`] in the denominator when `g`
/// is all zero (the dice is then 0). `logits` is `B x ...`, `target` the same
/// shape; returns `B`. A rank-2 input counts as a single slice.
pub fn dice<'t, T: Scalar>(logits: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape != target.shape() || shape.is_empty() {
        return Err(dims_error("dice", &shape, target.shape()));
    }
    let (batch, n) = if shape.len() <= 2 {
        (1, shape.iter().product())
    } else {
        (shape[0], shape[1..].iter().product())
    };
    let tape = logits.tape();
    let g = tape.constant(target.clone().reshaped(vec![batch, n])?);
    let eps = T::from_f64_lossy(DICE_EPS);
    let g_sq: Vec<T> = g
        .value()
        .data()
        .chunks(n)
        .map(|row| {
            let sq = row.iter().fold(T::zero(), |acc, &v| acc + v * v);
            if sq == T::zero() {
                eps
            } else {
                sq
            }
        })
        .collect();
    let prob = logits.reshape(&[batch, n])?.sigmoid();
    let num = prob.mul(g)?.sum_axis(1, false)?.scale(T::from_f64_lossy(2.0));
    let den = prob.square().sum_axis(1, false)?.add(tape.constant(Tensor::new(vec![batch], g_sq)?))?;
    Ok(num.div(den)?)
}

/// `(1 - dice(whole)) + sum_p weight[p] (1 - dice(part p))`. The part term is
/// skipped when the prediction carries no parts.
pub fn hierarchical_loss<'t, T: Scalar>(
    pred: &HierarchicalPrediction<'t, T>,
    gt_whole: &Tensor<T>,
    gt_parts: &Tensor<T>,
    part_weights: &[T],
) -> Result<Var<'t, T>> {
    let whole = dice(pred.whole, gt_whole)?.neg().add_scalar(T::one()).sum();
    let Some(parts) = pred.parts else {
        return Ok(whole);
    };
    let shape = parts.shape();
    if shape.len() != 3 || part_weights.len() != shape[0] {
        return Err(dims_error("hierarchical_loss", &shape, &[part_weights.len()]));
    }
    let count = shape[0];
    let weights = parts.tape().constant(Tensor::new(vec![count], part_weights.to_vec())?);
    let part_term = dice(parts, gt_parts)?.neg().add_scalar(T::one()).mul(weights)?.sum();
    Ok(whole.add(part_term)?)
}

/// Loss of a prediction against all-empty targets. The dice numerator is
/// exactly zero there, so the loss is this constant whatever the logits and
/// its gradient vanishes.
pub fn empty_target_loss<T: Scalar>(part_weights: Option<&[T]>) -> T {
    let parts = part_weights.map_or(T::zero(), |w| w.iter().fold(T::zero(), |acc, &v| acc + v));
    T::one() + parts
}

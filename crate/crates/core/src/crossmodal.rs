//! Cross-modal prompt encoder: part similarity maps, part-activated image
//! features, and the sparse and dense prompt heads.
//!
//! Layouts: part embeddings `P x d`, image embedding `d x h x w`,
//! similarity maps `P x h x w`, activated features `P x d x h x w`.

use gradkit::{Padding, Scalar, Var};

use crate::error::{Error, Result};
use crate::params::Bound;

pub(crate) fn dims_error(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Tensor(gradkit::Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// `S[p, y, x] = sum_k t_part[p, k] * f_i[k, y, x]`.
pub fn similarity_maps<'t, T: Scalar>(t_part: Var<'t, T>, f_i: Var<'t, T>) -> Result<Var<'t, T>> {
    let (ts, fs) = (t_part.shape(), f_i.shape());
    if ts.len() != 2 || fs.len() != 3 || ts[1] != fs[0] {
        return Err(dims_error("similarity_maps", &ts, &fs));
    }
    let (d, h, w) = (fs[0], fs[1], fs[2]);
    Ok(t_part.matmul(f_i.reshape(&[d, h * w])?)?.reshape(&[ts[0], h, w])?)
}

/// `F'_I[p] = S[p] * F_I + F_I`, the similarity map broadcast over channels.
pub fn activate<'t, T: Scalar>(s: Var<'t, T>, f_i: Var<'t, T>) -> Result<Var<'t, T>> {
    let (ss, fs) = (s.shape(), f_i.shape());
    if ss.len() != 3 || fs.len() != 3 || ss[1..] != fs[1..] {
        return Err(dims_error("activate", &ss, &fs));
    }
    Ok(s.reshape(&[ss[0], 1, ss[1], ss[2]])?.mul(f_i)?.add(f_i)?)
}

/// Spatial mean-pool, then a shared two-layer MLP to `n` tokens per part:
/// `P x d x h x w -> P x n x d`.
pub fn sparse_head<'t, T: Scalar>(p: &Bound<'t, T>, f_act: Var<'t, T>, tokens: usize) -> Result<Var<'t, T>> {
    let s = f_act.shape();
    let (parts, d) = (s[0], s[1]);
    let pooled = f_act.reshape(&[parts, d, s[2] * s[3]])?.mean_axis(2, false)?;
    let hidden = pooled
        .linear(p.get("crossmodal.sparse.fc1.weight")?, p.get("crossmodal.sparse.fc1.bias")?)?
        .relu();
    let out = hidden.linear(p.get("crossmodal.sparse.fc2.weight")?, p.get("crossmodal.sparse.fc2.bias")?)?;
    Ok(out.reshape(&[parts, tokens, d])?)
}

/// Three 3x3 convolutions (padding 1, ReLU between) shared across parts:
/// `P x d x h x w -> P x d x h x w`.
pub fn dense_head<'t, T: Scalar>(p: &Bound<'t, T>, f_act: Var<'t, T>) -> Result<Var<'t, T>> {
    let conv = |x: Var<'t, T>, layer: &str| -> Result<Var<'t, T>> {
        Ok(x.conv2d(
            p.get(&format!("crossmodal.dense.{layer}.weight"))?,
            p.get(&format!("crossmodal.dense.{layer}.bias"))?,
            1,
            Padding::Symmetric(1),
        )?)
    };
    let x = conv(f_act, "conv1")?.relu();
    let x = conv(x, "conv2")?.relu();
    conv(x, "conv3")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use gradkit::{Tape, Tensor};

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), f)
    }

    #[test]
    fn one_hot_part_selects_channel() {
        let tape = Tape::new();
        let f = t(&[3, 2, 2], |i| i as f64 * 0.5 - 1.0);
        let mut part = Tensor::zeros(vec![2, 3]);
        part.data_mut()[1] = 1.0; // part 0 -> channel 1
        let s = similarity_maps(tape.constant(part), tape.constant(f.clone())).unwrap().to_tensor();
        assert_eq!(&s.data()[..4], &f.data()[4..8]);
        assert!(s.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_channels_rejected() {
        let tape = Tape::new();
        let part = tape.constant(Tensor::<f64>::zeros(vec![2, 4]));
        let f = tape.constant(Tensor::zeros(vec![3, 2, 2]));
        assert!(similarity_maps(part, f).is_err());
        let s = tape.constant(Tensor::zeros(vec![2, 3, 2]));
        assert!(activate(s, f).is_err());
    }

    #[test]
    fn activation_residual_cases() {
        let tape = Tape::new();
        let f = t(&[3, 2, 2], |i| (i as f64).sin());
        let fv = tape.constant(f.clone());
        let zero = activate(tape.constant(Tensor::zeros(vec![2, 2, 2])), fv).unwrap().to_tensor();
        let ones = activate(tape.constant(Tensor::ones(vec![2, 2, 2])), fv).unwrap().to_tensor();
        for p in 0..2 {
            for i in 0..12 {
                assert_eq!(zero.data()[p * 12 + i], f.data()[i]);
                assert_eq!(ones.data()[p * 12 + i], 2.0 * f.data()[i]);
            }
        }
    }

    fn head_store(d: usize, hidden: usize, tokens: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let w = |shape: &[usize]| t(shape, |i| ((i * 37 % 11) as f64 - 5.0) * 0.05);
        s.insert("crossmodal.sparse.fc1.weight", w(&[d, hidden]), true).unwrap();
        s.insert("crossmodal.sparse.fc1.bias", w(&[hidden]), true).unwrap();
        s.insert("crossmodal.sparse.fc2.weight", w(&[hidden, tokens * d]), true).unwrap();
        s.insert("crossmodal.sparse.fc2.bias", w(&[tokens * d]), true).unwrap();
        s.insert("crossmodal.dense.conv1.weight", w(&[hidden, d, 3, 3]), true).unwrap();
        s.insert("crossmodal.dense.conv1.bias", Tensor::zeros(vec![hidden]), true).unwrap();
        s.insert("crossmodal.dense.conv2.weight", w(&[hidden, hidden, 3, 3]), true).unwrap();
        s.insert("crossmodal.dense.conv2.bias", Tensor::zeros(vec![hidden]), true).unwrap();
        s.insert("crossmodal.dense.conv3.weight", w(&[d, hidden, 3, 3]), true).unwrap();
        s.insert("crossmodal.dense.conv3.bias", Tensor::zeros(vec![d]), true).unwrap();
        s
    }

    #[test]
    fn heads_share_weights_across_parts() {
        let store = head_store(4, 6, 2);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let block = t(&[4, 5, 5], |i| (i as f64 * 0.3).cos());
        let mut both = block.data().to_vec();
        both.extend_from_slice(block.data());
        let x = tape.constant(Tensor::new(vec![2, 4, 5, 5], both).unwrap());
        let sparse = sparse_head(&b, x, 2).unwrap().to_tensor();
        assert_eq!(sparse.shape(), &[2, 2, 4]);
        assert_eq!(&sparse.data()[..8], &sparse.data()[8..]);
        let dense = dense_head(&b, x).unwrap().to_tensor();
        assert_eq!(dense.shape(), &[2, 4, 5, 5]);
        assert_eq!(&dense.data()[..100], &dense.data()[100..]);
    }

    #[test]
    fn dense_head_zero_in_zero_out() {
        let store = head_store(4, 6, 2);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let x = tape.constant(Tensor::zeros(vec![3, 4, 16, 16]));
        let y = dense_head(&b, x).unwrap();
        assert_eq!(y.shape(), vec![3, 4, 16, 16]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}

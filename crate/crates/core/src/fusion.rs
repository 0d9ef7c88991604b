//! Part-to-whole adaptive fusion.
//!
//! Sparse: each part's `n x d` block is scaled by `relu(d_row[p])`.
//! Dense: each part's map is scaled by `d_row[p] * w[p]` and the parts are
//! summed. `w = f_g x t_part^T` comes from a small global CNN.

use gradkit::{Padding, Scalar, Var};

use crate::crossmodal::dims_error;
use crate::error::{Error, Result};
use crate::params::Bound;

/// Three stride-2 3x3 convolutions with ReLU, spatial mean-pool and a
/// linear layer: `d x h x w -> 1 x d`.
pub fn global_descriptor<'t, T: Scalar>(p: &Bound<'t, T>, f_i: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = f_i.shape();
    if s.len() != 3 {
        return Err(dims_error("global_descriptor", &s, &[]));
    }
    if s[1] < 8 || s[2] < 8 {
        return Err(Error::Config(format!(
            "global descriptor needs at least 8x8 features for three stride-2 layers, got {}x{}",
            s[1], s[2]
        )));
    }
    let mut x = f_i;
    for layer in ["conv1", "conv2", "conv3"] {
        x = x
            .conv2d(
                p.get(&format!("fusion.global_cnn.{layer}.weight"))?,
                p.get(&format!("fusion.global_cnn.{layer}.bias"))?,
                2,
                Padding::Same,
            )?
            .relu();
    }
    let xs = x.shape();
    let pooled = x.reshape(&[1, xs[0], xs[1] * xs[2]])?.mean_axis(2, false)?;
    Ok(pooled.linear(p.get("fusion.global_cnn.fc.weight")?, p.get("fusion.global_cnn.fc.bias")?)?)
}

/// `W = f_g x t_part^T`, raw dot products: `1 x d, P x d -> 1 x P`.
pub fn image_part_weights<'t, T: Scalar>(f_g: Var<'t, T>, t_part: Var<'t, T>) -> Result<Var<'t, T>> {
    let (gs, ts) = (f_g.shape(), t_part.shape());
    if gs.len() != 2 || gs[0] != 1 || ts.len() != 2 || gs[1] != ts[1] {
        return Err(dims_error("image_part_weights", &gs, &ts));
    }
    Ok(f_g.matmul(t_part.transpose()?)?)
}

fn check_row(op: &'static str, parts: usize, row: &[usize]) -> Result<()> {
    if row != [1, parts] {
        return Err(dims_error(op, &[1, parts], row));
    }
    Ok(())
}

/// `P x n x d` scaled per part by `relu(d_row)`; the part axis is kept.
pub fn fuse_sparse<'t, T: Scalar>(f_s_part: Var<'t, T>, d_row: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = f_s_part.shape();
    if s.len() != 3 {
        return Err(dims_error("fuse_sparse", &s, &d_row.shape()));
    }
    check_row("fuse_sparse", s[0], &d_row.shape())?;
    Ok(f_s_part.mul(d_row.relu().reshape(&[s[0], 1, 1])?)?)
}

/// `sum_p f_d_part[p] * (d_row[p] * w[p])`: `P x d x h x w -> d x h x w`.
pub fn fuse_dense<'t, T: Scalar>(f_d_part: Var<'t, T>, d_row: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = f_d_part.shape();
    if s.len() != 4 {
        return Err(dims_error("fuse_dense", &s, &d_row.shape()));
    }
    check_row("fuse_dense", s[0], &d_row.shape())?;
    check_row("fuse_dense", s[0], &w.shape())?;
    let coef = d_row.mul(w)?.reshape(&[s[0], 1, 1, 1])?;
    Ok(f_d_part.mul(coef)?.sum_axis(0, false)?)
}

/// Fusion without part attention: sparse blocks kept as they are, dense
/// maps summed over parts.
pub fn concat_sum<'t, T: Scalar>(f_s_part: Var<'t, T>, f_d_part: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((f_s_part, f_d_part.sum_axis(0, false)?))
}

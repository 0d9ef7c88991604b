use crate::error::{Error, Result};
use crate::ops::reduce::split_axis;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{numel_of, strides_of, Tensor};

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    // stride in the source for each output axis
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            offset += src[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let shape = shape.to_vec();
        let value = self.tape.with_values(&[self], |v| v[0].clone().reshaped(shape))?;
        Ok(self.tape.record(
            "reshape",
            value,
            &[self],
            Box::new(|args| vec![Some(args.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Usage(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let perm = perm.to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let value = self
            .tape
            .with_values(&[self], |v| Tensor::new(out_shape.clone(), permute_data(v[0].data(), &shape, &perm)))?;
        Ok(self.tape.record(
            "permute",
            value,
            &[self],
            Box::new(move |args| vec![Some(permute_data(args.grad, &out_shape, &inverse))]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Self> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(Error::Usage("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Usage(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {shape:?}"
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = self.tape.with_values(&[self], |v| {
            let x = v[0].data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
            }
            Tensor::new(out_shape, out)
        })?;
        Ok(self.tape.record(
            "narrow",
            value,
            &[self],
            Box::new(move |args| {
                let mut g = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    g[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&args.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let tape = first.tape;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let base = &shapes[0];
        if axis >= base.len() {
            return Err(Error::Usage(format!("concat: axis {axis} out of range for {base:?}")));
        }
        for s in &shapes[1..] {
            let compatible = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", base, s));
            }
        }
        let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let value = tape.with_values(parts, |v| {
            let mut out = Vec::with_capacity(numel_of(&out_shape));
            for o in 0..outer {
                for (t, &len) in v.iter().zip(&lens) {
                    out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Tensor::new(out_shape, out)
        })?;
        Ok(tape.record(
            "concat",
            value,
            parts,
            Box::new(move |args| {
                let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut at = 0;
                for _ in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&args.grad[at..at + len * inner]);
                        at += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(args.needs)
                    .map(|(g, &need)| need.then_some(g))
                    .collect()
            }),
        ))
    }
}

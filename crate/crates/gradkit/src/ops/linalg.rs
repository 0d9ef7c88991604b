use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{broadcast_strides, for_each_broadcast, Tensor};

// Plain triple loops: every output element accumulates its k terms in
// ascending order starting from zero, so results match a textbook loop.

fn mm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, q: usize) {
    for i in 0..m {
        let row = &mut c[i * q..(i + 1) * q];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * q..(kk + 1) * q];
            row.iter_mut().zip(brow).for_each(|(c, &b)| *c += aik * b);
        }
    }
}

/// c (m x k) += g (m x q) * b^T
fn mm_nt_acc<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, q: usize) {
    for i in 0..m {
        let grow = &g[i * q..(i + 1) * q];
        for kk in 0..k {
            let brow = &b[kk * q..(kk + 1) * q];
            let dot = grow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            c[i * k + kk] += dot;
        }
    }
}

/// c (k x q) += a^T * g, a is m x k, g is m x q
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, q: usize) {
    for i in 0..m {
        let grow = &g[i * q..(i + 1) * q];
        for kk in 0..k {
            let aik = a[i * k + kk];
            c[kk * q..(kk + 1) * q].iter_mut().zip(grow).for_each(|(c, &g)| *c += aik * g);
        }
    }
}

struct Plan {
    m: usize,
    k: usize,
    q: usize,
    out_shape: Vec<usize>,
    lead: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn plan(a: &[usize], b: &[usize]) -> Result<Plan> {
    let err = || Error::shape("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, q) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let (la, lb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let rank = la.len().max(lb.len());
    let pad = |l: &[usize]| {
        let mut v = vec![1; rank - l.len()];
        v.extend_from_slice(l);
        v
    };
    let (pa, pb) = (pad(la), pad(lb));
    let mut lead = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        lead.push(match (x, y) {
            _ if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(err()),
        });
    }
    let mut out_shape = lead.clone();
    out_shape.extend([m, q]);
    // a zero-rank leading shape still has one batch
    let (sa, sb) = if lead.is_empty() {
        (vec![], vec![])
    } else {
        (broadcast_strides(&pa, &lead), broadcast_strides(&pb, &lead))
    };
    Ok(Plan { m, k, q, out_shape, lead, sa, sb })
}

fn for_each_batch(plan: &Plan, mut f: impl FnMut(usize, usize, usize)) {
    if plan.lead.is_empty() {
        f(0, 0, 0);
    } else {
        for_each_broadcast(&plan.lead, &plan.sa, &plan.sb, f);
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Batched matrix product `[.., m, k] x [.., k, q] -> [.., m, q]`.
    ///
    /// Leading dimensions must match exactly or be 1.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Self> {
        let (value, plan) = self.tape.with_values(&[self, rhs], |v| {
            let plan = plan(v[0].shape(), v[1].shape())?;
            let (m, k, q) = (plan.m, plan.k, plan.q);
            let (ad, bd) = (v[0].data(), v[1].data());
            let mut out = vec![T::zero(); plan.out_shape.iter().product()];
            for_each_batch(&plan, |io, ia, ib| {
                mm_nn(
                    &ad[ia * m * k..(ia + 1) * m * k],
                    &bd[ib * k * q..(ib + 1) * k * q],
                    &mut out[io * m * q..(io + 1) * m * q],
                    m,
                    k,
                    q,
                )
            });
            Ok::<_, Error>((Tensor::new(plan.out_shape.clone(), out)?, plan))
        })?;
        Ok(self.tape.record(
            "matmul",
            value,
            &[self, rhs],
            Box::new(move |args| {
                let (m, k, q) = (plan.m, plan.k, plan.q);
                let (ad, bd, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
                let mut ga = args.needs[0].then(|| vec![T::zero(); ad.len()]);
                let mut gb = args.needs[1].then(|| vec![T::zero(); bd.len()]);
                for_each_batch(&plan, |io, ia, ib| {
                    let gs = &g[io * m * q..(io + 1) * m * q];
                    if let Some(ga) = &mut ga {
                        mm_nt_acc(gs, &bd[ib * k * q..(ib + 1) * k * q], &mut ga[ia * m * k..(ia + 1) * m * k], m, k, q);
                    }
                    if let Some(gb) = &mut gb {
                        mm_tn_acc(&ad[ia * m * k..(ia + 1) * m * k], gs, &mut gb[ib * k * q..(ib + 1) * k * q], m, k, q);
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map `x * weight + bias` over the trailing axis.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Self> {
        let shape = self.shape();
        let (ws, bs) = (weight.shape(), bias.shape());
        let a = *shape.last().ok_or_else(|| Error::shape("linear", &shape, &ws))?;
        if ws.len() != 2 || ws[0] != a {
            return Err(Error::shape("linear", &shape, &ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("linear", &ws, &bs));
        }
        let rows = shape.iter().product::<usize>() / a;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("non-empty") = ws[1];
        self.reshape(&[rows, a])?
            .matmul(weight)?
            .add(bias)?
            .reshape(&out_shape)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_and_hand_products() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        assert_eq!(i.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(vec![2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::<f64>::zeros(vec![2, 3, 3]));
        let d = tape.constant(Tensor::<f64>::zeros(vec![4, 3, 3]));
        assert!(c.matmul(d).is_err());
    }

    #[test]
    fn batch_dims_broadcast_from_one() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::ones(vec![3, 2, 4]));
        let b = tape.constant(Tensor::<f64>::ones(vec![1, 4, 5]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![3, 2, 5]);
        assert!(c.value().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn linear_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        let w = tape.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 3.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.linear(w, b).unwrap().value().data(), &[2.0, 0.0]);

        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.constant(Tensor::zeros(vec![2, 1]));
        let b = tape.constant(t(&[1], &[5.0]));
        assert_eq!(x.linear(w, b).unwrap().value().data(), &[5.0, 5.0, 5.0]);
    }
}

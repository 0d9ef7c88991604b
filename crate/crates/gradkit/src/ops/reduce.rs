use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Usage(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Self {
        let value = self.tape.with_values(&[self], |v| Tensor::scalar(v[0].sum()));
        self.tape.record(
            "sum",
            value,
            &[self],
            Box::new(|args| vec![Some(vec![args.grad[0]; args.inputs[0].numel()])]),
        )
    }

    pub fn mean(self) -> Self {
        let n = T::from_usize(self.value().numel()).expect("element count fits");
        self.sum().scale(T::one() / n)
    }

    /// Sums along `axis`, accumulating in ascending index order.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Self> {
        let shape = self.shape();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let value = self.tape.with_values(&[self], |v| {
            let x = v[0].data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for a in 0..len {
                    let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            Tensor::new(out_shape, out)
        })?;
        Ok(self.tape.record(
            "sum_axis",
            value,
            &[self],
            Box::new(move |args| {
                let mut g = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &args.grad[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        g[(o * len + a) * inner..(o * len + a + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Self> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Usage(format!("mean_axis: axis {axis} out of range")))?;
        Ok(self
            .sum_axis(axis, keepdim)?
            .scale(T::one() / T::from_usize(len).expect("axis length fits")))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let value = self.tape.with_values(&[self], |v| {
            let x = v[0].data();
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let max = (0..len).map(|a| x[at(a)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for a in 0..len {
                        let e = (x[at(a)] - max).exp();
                        out[at(a)] = e;
                        total += e;
                    }
                    for a in 0..len {
                        out[at(a)] /= total;
                    }
                }
            }
            Tensor::new(shape.clone(), out)
        })?;
        Ok(self.tape.record(
            "softmax",
            value,
            &[self],
            Box::new(move |args| {
                let (y, g) = (args.output.data(), args.grad);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot = (0..len).fold(T::zero(), |acc, a| acc + g[at(a)] * y[at(a)]);
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn softmax_symmetric_and_stable() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(vec![2]));
        assert_eq!(a.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let b = tape.constant(Tensor::from_f64(vec![2], &[1000.0, 0.0]).unwrap());
        let y = b.softmax(0).unwrap().to_tensor();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
        assert!(y.is_finite());
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64));
        let grads = tape.backward(x.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap(), vec![1.0; 24].as_slice());
    }

    #[test]
    fn sum_axis_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64));
        assert_eq!(x.sum_axis(1, false).unwrap().shape(), vec![2, 4]);
        assert_eq!(x.sum_axis(1, true).unwrap().shape(), vec![2, 1, 4]);
        let s = x.sum_axis(0, false).unwrap().to_tensor();
        assert_eq!(s.data()[0], 12.0);
        assert!(x.sum_axis(3, false).is_err());
    }
}

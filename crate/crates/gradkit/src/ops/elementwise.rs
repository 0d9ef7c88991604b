use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

fn binary<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
    let tape = a.tape;
    let (value, sa, sb, out_shape) = tape.with_values(&[a, b], |v| {
        let (x, y) = (v[0], v[1]);
        let out_shape = broadcast_shape(x.shape(), y.shape())
            .ok_or_else(|| Error::shape(kind.name(), x.shape(), y.shape()))?;
        let sa = broadcast_strides(x.shape(), &out_shape);
        let sb = broadcast_strides(y.shape(), &out_shape);
        let data = if x.shape() == y.shape() {
            x.data().iter().zip(y.data()).map(|(&p, &q)| kind.apply(p, q)).collect()
        } else {
            let mut data = vec![T::zero(); out_shape.iter().product()];
            let (xd, yd) = (x.data(), y.data());
            for_each_broadcast(&out_shape, &sa, &sb, |io, ia, ib| data[io] = kind.apply(xd[ia], yd[ib]));
            data
        };
        Ok::<_, Error>((Tensor::new(out_shape.clone(), data)?, sa, sb, out_shape))
    })?;
    Ok(tape.record(
        kind.name(),
        value,
        &[a, b],
        Box::new(move |args| {
            let (x, y) = (args.inputs[0], args.inputs[1]);
            let (xd, yd, g) = (x.data(), y.data(), args.grad);
            let mut ga = args.needs[0].then(|| vec![T::zero(); x.numel()]);
            let mut gb = args.needs[1].then(|| vec![T::zero(); y.numel()]);
            for_each_broadcast(&out_shape, &sa, &sb, |io, ia, ib| {
                let go = g[io];
                let (da, db) = match kind {
                    Binary::Add => (go, go),
                    Binary::Sub => (go, -go),
                    Binary::Mul => (go * yd[ib], go * xd[ia]),
                    Binary::Div => (go / yd[ib], -go * xd[ia] / (yd[ib] * yd[ib])),
                };
                if let Some(ga) = &mut ga {
                    ga[ia] += da;
                }
                if let Some(gb) = &mut gb {
                    gb[ib] += db;
                }
            });
            vec![ga, gb]
        }),
    ))
}

/// Elementwise op whose derivative is expressed through the input `x` and
/// output `y`.
fn unary<'t, T: Scalar>(
    a: Var<'t, T>,
    op: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let value = a.tape.with_values(&[a], |v| v[0].map(&f));
    a.tape.record(
        op,
        value,
        &[a],
        Box::new(move |args| {
            let (x, y) = (args.inputs[0].data(), args.output.data());
            let g = args
                .grad
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&go, (&xi, &yi))| go * df(xi, yi))
                .collect();
            vec![Some(g)]
        }),
    )
}

// Fallible, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    /// Broadcasting sum.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Self> {
        binary(self, rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Self> {
        binary(self, rhs, Binary::Sub)
    }

    /// Broadcasting Hadamard product.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Self> {
        binary(self, rhs, Binary::Mul)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Self> {
        binary(self, rhs, Binary::Div)
    }

    pub fn scale(self, c: T) -> Self {
        unary(self, "scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Self {
        unary(self, "add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn neg(self) -> Self {
        self.scale(-T::one())
    }

    pub fn square(self) -> Self {
        unary(self, "square", |x| x * x, |x, _| x + x)
    }

    pub fn exp(self) -> Self {
        unary(self, "exp", |x| x.exp(), |_, y| y)
    }

    pub fn tanh(self) -> Self {
        unary(self, "tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Self {
        unary(self, "sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Self {
        if self.tape.tracks_kinks() {
            let pattern: Vec<bool> = self.value().data().iter().map(|&x| x > T::zero()).collect();
            self.tape.record_kinks(pattern.into_iter());
        }
        unary(
            self,
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Spatial padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `p` zero rows/columns on every side; `(h + 2p - k)` must be a
    /// multiple of the stride.
    Symmetric(usize),
    /// Output size `ceil(h / stride)`, with any odd padding remainder on
    /// the bottom/right edge.
    Same,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
}

fn out_dim(n: usize, k: usize, stride: usize, padding: Padding, axis: &str) -> Result<(usize, usize)> {
    match padding {
        Padding::Symmetric(p) => {
            let span = n + 2 * p;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "conv2d: {axis} size {n} with kernel {k}, padding {p}, stride {stride} gives a non-integral output size"
                )));
            }
            Ok(((span - k) / stride + 1, p))
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            Ok((out, total / 2))
        }
    }
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output position `o` and kernel offset `kk` along one axis.
    fn source(o: usize, kk: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        (o * stride + kk).checked_sub(pad).filter(|&i| i < n)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.pixels();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &mut cols[((ci * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let sy = Self::source(oy, ky, self.stride, self.pad_top, self.h);
                        for ox in 0..self.wo {
                            row[oy * self.wo + ox] = match (sy, Self::source(ox, kx, self.stride, self.pad_left, self.w)) {
                                (Some(y), Some(x)) => plane[y * self.w + x],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_acc<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let p = self.pixels();
        for ci in 0..self.c_in {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &cols[((ci * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let Some(y) = Self::source(oy, ky, self.stride, self.pad_top, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(x) = Self::source(ox, kx, self.stride, self.pad_left, self.w) {
                                plane[y * self.w + x] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D cross-correlation (no kernel flip) plus per-channel bias.
    ///
    /// `self` is `[c_in, h, w]` or `[n, c_in, h, w]`, `kernel` is
    /// `[c_out, c_in, k, k]` with odd `k`, and `bias` is `[c_out]`.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Var<'t, T>, stride: usize, padding: Padding) -> Result<Self> {
        let (xs, ks, bs) = (self.shape(), kernel.shape(), bias.shape());
        let batched = match xs.len() {
            3 => false,
            4 => true,
            _ => return Err(Error::shape("conv2d", &xs, &ks)),
        };
        let (n, c_in, h, w) = if batched { (xs[0], xs[1], xs[2], xs[3]) } else { (1, xs[0], xs[1], xs[2]) };
        if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        let (c_out, k) = (ks[0], ks[2]);
        if bs != [c_out] {
            return Err(Error::shape("conv2d", &ks, &bs));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (ho, pad_top) = out_dim(h, k, stride, padding, "height")?;
        let (wo, pad_left) = out_dim(w, k, stride, padding, "width")?;
        let geo = Geometry { c_in, h, w, k, stride, pad_top, pad_left, ho, wo };
        let out_shape = if batched { vec![n, c_out, ho, wo] } else { vec![c_out, ho, wo] };

        let value = self.tape.with_values(&[self, kernel, bias], |v| {
            let (x, kd, bd) = (v[0].data(), v[1].data(), v[2].data());
            let (rows, pix) = (geo.rows(), geo.pixels());
            let mut cols = vec![T::zero(); rows * pix];
            let mut out = vec![T::zero(); n * c_out * pix];
            for img in 0..n {
                geo.im2col(&x[img * c_in * h * w..(img + 1) * c_in * h * w], &mut cols);
                let dst = &mut out[img * c_out * pix..(img + 1) * c_out * pix];
                for (co, chunk) in dst.chunks_mut(pix).enumerate() {
                    chunk.fill(bd[co]);
                }
                T::gemm(c_out, rows, pix, T::one(), kd, rows, 1, &cols, pix, 1, T::one(), dst, pix, 1);
            }
            Tensor::new(out_shape, out)
        })?;

        Ok(self.tape.record(
            "conv2d",
            value,
            &[self, kernel, bias],
            Box::new(move |args| {
                let (x, kd, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
                let (rows, pix) = (geo.rows(), geo.pixels());
                let mut gx = args.needs[0].then(|| vec![T::zero(); x.len()]);
                let mut gk = args.needs[1].then(|| vec![T::zero(); kd.len()]);
                let mut gb = args.needs[2].then(|| vec![T::zero(); c_out]);
                let mut cols = vec![T::zero(); rows * pix];
                let mut gcols = vec![T::zero(); rows * pix];
                for img in 0..n {
                    let gimg = &g[img * c_out * pix..(img + 1) * c_out * pix];
                    let ximg = &x[img * c_in * h * w..(img + 1) * c_in * h * w];
                    if let Some(gk) = &mut gk {
                        geo.im2col(ximg, &mut cols);
                        // gk += g * cols^T
                        T::gemm(c_out, pix, rows, T::one(), gimg, pix, 1, &cols, 1, pix, T::one(), gk, rows, 1);
                    }
                    if let Some(gx) = &mut gx {
                        // gcols = kernel^T * g
                        T::gemm(rows, c_out, pix, T::one(), kd, 1, rows, gimg, pix, 1, T::zero(), &mut gcols, pix, 1);
                        geo.col2im_acc(&gcols, &mut gx[img * c_in * h * w..(img + 1) * c_in * h * w]);
                    }
                    if let Some(gb) = &mut gb {
                        for (co, chunk) in gimg.chunks(pix).enumerate() {
                            gb[co] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    }
                }
                vec![gx, gk, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::Padding;
    use crate::{Error, Tape, Tensor};

    #[test]
    fn sum_of_ones() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(vec![1, 3, 3]));
        let k = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = x.conv2d(k, b, 1, Padding::Symmetric(0)).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1]);
        assert_eq!(y.value().data(), &[9.0]);
    }

    #[test]
    fn centre_kernel_is_identity() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_fn(vec![2, 5, 4], |i| (i as f64 * 0.37).sin());
        let xv = tape.constant(x.clone());
        let mut kernel = Tensor::<f64>::zeros(vec![2, 2, 3, 3]);
        kernel.data_mut()[4] = 1.0; // out 0 <- in 0 centre
        kernel.data_mut()[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 centre
        let k = tape.constant(kernel);
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = xv.conv2d(k, b, 1, Padding::Symmetric(1)).unwrap();
        assert_eq!(y.value().data(), x.data());
    }

    #[test]
    fn bias_is_added_per_channel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(vec![1, 4, 4]));
        let k = tape.constant(Tensor::ones(vec![2, 1, 3, 3]));
        let b = tape.constant(Tensor::from_f64(vec![2], &[1.5, -2.0]).unwrap());
        let y = x.conv2d(k, b, 1, Padding::Symmetric(1)).unwrap().to_tensor();
        assert!(y.data()[..16].iter().all(|&v| v == 1.5));
        assert!(y.data()[16..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn non_integral_output_is_config_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(vec![1, 16, 16]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(matches!(x.conv2d(k, b, 2, Padding::Symmetric(1)), Err(Error::Config(_))));
        let even = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(matches!(x.conv2d(even, b, 1, Padding::Symmetric(0)), Err(Error::Config(_))));
    }

    #[test]
    fn same_padding_halves_even_inputs() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(vec![3, 1, 16, 16]));
        let k = tape.constant(Tensor::ones(vec![2, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = x.conv2d(k, b, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), vec![3, 2, 8, 8]);
        // top-left window sees a full 3x3 block (padding only on the far edge)
        assert_eq!(y.value().get(&[0, 0, 0, 0]), 9.0);
        assert_eq!(y.value().get(&[0, 0, 7, 7]), 4.0);
    }
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Source taps for one output coordinate (half-pixel centres, edges clamped).
#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Scalar>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: T::from_f64_lossy(pos - lo as f64),
            }
        })
        .collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Bilinear resize of the last two axes to `height x width`
    /// (`align_corners = false` convention).
    pub fn upsample_bilinear(self, height: usize, width: usize) -> Result<Self> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::Usage(format!("upsample_bilinear needs rank >= 2, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if height < h || width < w {
            return Err(Error::Usage(format!(
                "upsample_bilinear: target {height}x{width} smaller than input {h}x{w}"
            )));
        }
        let planes = shape[..shape.len() - 2].iter().product::<usize>();
        let (ty, tx) = (taps::<T>(h, height), taps::<T>(w, width));
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([height, width]);

        let value = self.tape.with_values(&[self], |v| {
            let x = v[0].data();
            let mut out = Vec::with_capacity(planes * height * width);
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                for t in &ty {
                    let (r0, r1) = (&src[t.lo * w..(t.lo + 1) * w], &src[t.hi * w..(t.hi + 1) * w]);
                    for s in &tx {
                        // a + f * (b - a) keeps constant inputs exact
                        let top = r0[s.lo] + s.frac * (r0[s.hi] - r0[s.lo]);
                        let bottom = r1[s.lo] + s.frac * (r1[s.hi] - r1[s.lo]);
                        out.push(top + t.frac * (bottom - top));
                    }
                }
            }
            Tensor::new(out_shape, out)
        })?;

        Ok(self.tape.record(
            "upsample_bilinear",
            value,
            &[self],
            Box::new(move |args| {
                let g = args.grad;
                let mut gx = vec![T::zero(); planes * h * w];
                let one = T::one();
                for p in 0..planes {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    let src = &g[p * height * width..(p + 1) * height * width];
                    for (oy, t) in ty.iter().enumerate() {
                        for (ox, s) in tx.iter().enumerate() {
                            let go = src[oy * width + ox];
                            let (wy0, wy1) = (one - t.frac, t.frac);
                            let (wx0, wx1) = (one - s.frac, s.frac);
                            dst[t.lo * w + s.lo] += go * wy0 * wx0;
                            dst[t.lo * w + s.hi] += go * wy0 * wx1;
                            dst[t.hi * w + s.lo] += go * wy1 * wx0;
                            dst[t.hi * w + s.hi] += go * wy1 * wx1;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

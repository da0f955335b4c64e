//! im2col lowering for strided, zero-padded square convolutions.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(n: usize, in_c: usize, in_h: usize, in_w: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1);
        assert!(in_h + 2 * pad >= k && in_w + 2 * pad >= k, "conv2d: kernel larger than padded input");
        ConvGeom {
            n,
            in_c,
            in_h,
            in_w,
            out_c,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Input row/column for output coordinate `o` and kernel offset `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + t) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }
}

/// Lowers `x` `(N, C, H, W)` to a `(C*k*k) x (N*P)` row-major matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let np = g.n * p;
    let mut cols = vec![0.0; g.patch_len() * np];
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                for b in 0..g.n {
                    let plane = &x[(b * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut cols[row * np + b * p..][..p];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.src(oy, ki, g.in_h) else { continue };
                        for ox in 0..g.out_w {
                            if let Some(ix) = g.src(ox, kj, g.in_w) {
                                dst[oy * g.out_w + ox] = plane[iy * g.in_w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let np = g.n * p;
    let mut x = vec![0.0; g.n * g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                for b in 0..g.n {
                    let plane = &mut x[(b * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &cols[row * np + b * p..][..p];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.src(oy, ki, g.in_h) else { continue };
                        for ox in 0..g.out_w {
                            if let Some(ix) = g.src(ox, kj, g.in_w) {
                                plane[iy * g.in_w + ix] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

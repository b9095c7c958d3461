//! 2-D convolution and nearest-neighbour upsampling (channels-last).

use crate::error::{Error, Result};

use super::tensor::Tensor;

impl Tensor {
    /// Convolution over `[B, H, W, Cin]` input with `[kh, kw, Cin, Cout]`
    /// kernel, zero padding `pad` and the given stride.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let is = self.shape();
        let ks = kernel.shape();
        if is.len() != 4 || ks.len() != 4 || is[3] != ks[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: is.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (b, h, w, cin) = (is[0], is[1], is[2], is[3]);
        let (kh, kw, _, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?}", ks, is),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let xd = self.data();
        let kd = kernel.data();
        let mut out = vec![0.0; b * ho * wo * cout];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((bi * ho + oy) * wo + ox) * cout;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ibase = ((bi * h + iy as usize) * w + ix as usize) * cin;
                            let kbase = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[ibase + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                let orow = &mut out[obase..obase + cout];
                                for co in 0..cout {
                                    orow[co] += xv * krow[co];
                                }
                            }
                        }
                    }
                }
            }
        }

        let (xc, kc) = (self.clone(), kernel.clone());
        let backward = Box::new(move |g: &[f64]| {
            let xd = xc.data();
            let kd = kc.data();
            let mut gx = vec![0.0; xd.len()];
            let mut gk = vec![0.0; kd.len()];
            for bi in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let obase = ((bi * ho + oy) * wo + ox) * cout;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ibase = ((bi * h + iy as usize) * w + ix as usize) * cin;
                                let kbase = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let xv = xd[ibase + ci];
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        let gv = g[obase + co];
                                        acc += gv * kd[kbase + ci * cout + co];
                                        gk[kbase + ci * cout + co] += gv * xv;
                                    }
                                    gx[ibase + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, gk]
        });

        Ok(Tensor::from_op(
            out,
            vec![b, ho, wo, cout],
            vec![self.clone(), kernel.clone()],
            backward,
        ))
    }

    /// Nearest-neighbour spatial upsampling of `[B, H, W, C]` by `factor`.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let is = self.shape();
        if is.len() != 4 {
            return Err(Error::invalid(
                "upsample_nearest",
                format!("expected rank-4 input, got {:?}", is),
            ));
        }
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be positive"));
        }
        let (b, h, w, c) = (is[0], is[1], is[2], is[3]);
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.data();
        let mut out = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let src = ((bi * h + oy / factor) * w + ox / factor) * c;
                    let dst = ((bi * ho + oy) * wo + ox) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        let numel = self.numel();
        let backward = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; numel];
            for bi in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let src = ((bi * h + oy / factor) * w + ox / factor) * c;
                        let dst = ((bi * ho + oy) * wo + ox) * c;
                        for ci in 0..c {
                            gx[src + ci] += g[dst + ci];
                        }
                    }
                }
            }
            vec![gx]
        });
        Ok(Tensor::from_op(
            out,
            vec![b, ho, wo, c],
            vec![self.clone()],
            backward,
        ))
    }
}

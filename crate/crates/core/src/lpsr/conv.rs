//! Inference-only CNN layers on `H×W×C` feature maps.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};

use crate::error::{config_err, Result};

/// 2-D convolution with square kernels. Batch norm, when present in the
/// source network, is folded into `weight` and `bias` at load time.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `(k·k·cin/groups) × cout`, rows ordered `(ky, kx, ci)`.
    weight: Array2<f32>,
    bias: Array1<f32>,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    cin: usize,
    cout: usize,
}

/// Per-channel affine parameters of an inference-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub mean: Array1<f32>,
    pub var: Array1<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            mean: Array1::zeros(c),
            var: Array1::ones(c),
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, stride: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, 3, stride)
        }
    }

    /// Number of weights in the `(cout, cin/groups, k, k)` tensor.
    pub fn weight_len(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.kernel * self.kernel
    }
}

impl Conv2d {
    /// Builds a convolution from a weight tensor in `(cout, cin/groups, k, k)`
    /// order, the layout used by common checkpoint formats.
    pub fn from_oihw(spec: ConvSpec, oihw: &[f32], bias: Option<&[f32]>) -> Result<Self> {
        if spec.groups != 1 && !(spec.groups == spec.cin && spec.cin == spec.cout) {
            return Err(config_err!(
                "only dense and depthwise convolutions are supported (groups={})",
                spec.groups
            ));
        }
        if oihw.len() != spec.weight_len() {
            return Err(config_err!(
                "conv weight has {} values, expected {}",
                oihw.len(),
                spec.weight_len()
            ));
        }
        let cin_g = spec.cin / spec.groups;
        let k = spec.kernel;
        let mut weight = Array2::<f32>::zeros((k * k * cin_g, spec.cout));
        for co in 0..spec.cout {
            for ci in 0..cin_g {
                for ky in 0..k {
                    for kx in 0..k {
                        weight[[(ky * k + kx) * cin_g + ci, co]] =
                            oihw[((co * cin_g + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        let bias = match bias {
            Some(b) if b.len() == spec.cout => Array1::from(b.to_vec()),
            Some(b) => return Err(config_err!("conv bias has {} values, expected {}", b.len(), spec.cout)),
            None => Array1::zeros(spec.cout),
        };
        Ok(Self {
            weight,
            bias,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
            cin: spec.cin,
            cout: spec.cout,
        })
    }

    pub fn fold_batch_norm(mut self, bn: &BatchNorm) -> Result<Self> {
        if bn.gamma.len() != self.cout {
            return Err(config_err!("batch norm width {} does not match conv output {}", bn.gamma.len(), self.cout));
        }
        for co in 0..self.cout {
            let scale = bn.gamma[co] / (bn.var[co] + bn.eps).sqrt();
            self.weight.column_mut(co).mapv_inplace(|w| w * scale);
            self.bias[co] = (self.bias[co] - bn.mean[co]) * scale + bn.beta[co];
        }
        Ok(self)
    }

    pub(crate) fn weights_iter(&self) -> impl Iterator<Item = &f32> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let (h, w, c) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        if self.groups == 1 {
            self.forward_dense(x)
        } else {
            self.forward_depthwise(x, h, w)
        }
    }

    fn forward_dense(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let (h, w, cin) = x.dim();
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let cols = k * k * cin;
        let mut out = Array2::<f32>::zeros((oh * ow, self.cout));
        // im2col in row chunks to bound the scratch buffer.
        let chunk = (1 << 22) / cols.max(1);
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < oh * ow {
            let end = (start + chunk).min(oh * ow);
            let mut col = Array2::<f32>::zeros((end - start, cols));
            for (r, mut row) in col.rows_mut().into_iter().enumerate() {
                let (oy, ox) = ((start + r) / ow, (start + r) % ow);
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (ky * k + kx) * cin;
                        row.slice_mut(s![base..base + cin])
                            .assign(&x.slice(s![iy as usize, ix as usize, ..]));
                    }
                }
            }
            let mut dst = out.slice_mut(s![start..end, ..]);
            ndarray::linalg::general_mat_mul(1.0, &col, &self.weight, 0.0, &mut dst);
            start = end;
        }
        out += &self.bias;
        out.into_shape_with_order((oh, ow, self.cout)).expect("conv output shape")
    }

    fn forward_depthwise(&self, x: ArrayView3<f32>, h: usize, w: usize) -> Array3<f32> {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let mut out = Array3::<f32>::zeros((oh, ow, self.cout));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut dst = out.slice_mut(s![oy, ox, ..]);
                dst.assign(&self.bias);
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = x.slice(s![iy as usize, ix as usize, ..]);
                        let wrow = self.weight.row(ky * k + kx);
                        for c in 0..self.cout {
                            dst[c] += src[c] * wrow[c];
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn relu(mut x: Array3<f32>) -> Array3<f32> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

pub fn relu6(mut x: Array3<f32>) -> Array3<f32> {
    x.mapv_inplace(|v| v.clamp(0.0, 6.0));
    x
}

/// Max pooling; padded cells never win.
pub fn max_pool(x: ArrayView3<f32>, kernel: usize, stride: usize, padding: usize) -> Array3<f32> {
    let (h, w, c) = x.dim();
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Array3::<f32>::from_elem((oh, ow, c), f32::NEG_INFINITY);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut dst = out.slice_mut(s![oy, ox, ..]);
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    dst.zip_mut_with(&x.slice(s![iy as usize, ix as usize, ..]), |d, &v| {
                        *d = d.max(v)
                    });
                }
            }
        }
    }
    out
}

pub fn add(mut a: Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    a += b;
    a
}

/// Channel-wise concatenation of equally sized maps.
pub fn concat_channels(maps: &[Array3<f32>]) -> Array3<f32> {
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(2), &views).expect("equal spatial sizes")
}

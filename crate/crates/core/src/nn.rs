//! Small layer library over candle tensors.
//!
//! Convolutions are lowered to matmuls: per-tap products over a padded
//! copy for stride 1, im2col otherwise, shift-add when the layer narrows
//! the channel count. candle's native conv backward is several times
//! slower on CPU.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{Conv2dOp, NormAffine, ShiftSum};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const ADAIN_EPS: f64 = 1e-5;

/// Seeded registry of trainable parameters and non-trainable buffers.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-normal with the given fan-in.
    Kaiming(usize),
    Normal(f64),
    Const(f64),
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn make(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Kaiming(fan_in) => {
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::Shape(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&self.make(shape, init)?)?;
        let t = var.as_tensor().clone();
        self.params.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let var = Var::from_tensor(&self.make(shape, Init::Const(value))?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    /// All trainable variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    /// Deep copy of every parameter and buffer.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        Ok(out)
    }

    /// Overwrites every parameter and buffer; names and shapes must match exactly.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if values.len() != expected {
            return Err(Error::CheckpointMismatch(format!(
                "expected {expected} tensors, found {}",
                values.len()
            )));
        }
        for (k, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = values
                .get(k)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {k}")))?;
            if t.dims() != var.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "{k}: shape {:?} vs {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.param(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::Kaiming(fan_in),
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[out_ch], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        })
    }

    /// `(H + 2·pad − k) / stride + 1`
    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_ch)));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::Shape(format!("{h}x{w} too small for kernel {}", self.kernel)));
        }
        if self.stride == 1 && self.kernel > 1 && self.out_ch < self.in_ch {
            return self.forward_shift_add(x);
        }
        self.forward_lowered(x)
    }

    fn forward_lowered(&self, x: &Tensor) -> Result<Tensor> {
        let op = Conv2dOp {
            stride: self.stride,
            pad: self.pad,
        };
        let y = x.contiguous()?.apply_op2(&self.weight, op)?;
        self.add_bias(y)
    }

    fn add_bias(&self, y: Tensor) -> Result<Tensor> {
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, self.out_ch, 1, 1))?)?),
            None => Ok(y),
        }
    }

    /// Stride-1 lowering for layers that shrink the channel count: one
    /// `(k²·out) × in` matmul over the padded input, then a sum of the k²
    /// shifted output planes. Keeps `k²·out` rather than `k²·in` planes alive.
    fn forward_shift_add(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (k, p, o) = (self.kernel, self.pad, self.out_ch);
        let (oh, ow) = (self.out_dim(h), self.out_dim(w));
        let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        // (o, c, k, k) -> (k, k, o, c) -> (k²·o, c)
        let wm = self
            .weight
            .permute((2, 3, 0, 1))?
            .reshape((k * k * o, c))?
            .unsqueeze(0)?
            .broadcast_as((b, k * k * o, c))?
            .contiguous()?;
        let u = wm
            .matmul(&xp.reshape((b, c, hp * wp))?)?
            .reshape((b, k * k * o, hp, wp))?;
        let y = u.apply_op1(ShiftSum { k, out_ch: o })?;
        debug_assert_eq!(y.dims(), [b, o, oh, ow]);
        self.add_bias(y)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.weight"), &[channels], Init::Const(1.0))?,
            beta: store.param(&format!("{name}.bias"), &[channels], Init::Const(0.0))?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            channels,
        })
    }

    /// Batch statistics (and a running-stat update) when `train`, running
    /// statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.channels;
        if train {
            let (b, _, h, w) = x.dims4()?;
            let xd = x.detach();
            let mean = xd.mean_keepdim((2, 3))?.mean_keepdim(0)?;
            let var = xd.broadcast_sub(&mean)?.sqr()?.mean_keepdim((2, 3))?.mean_keepdim(0)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean.flatten_all()? * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (var.flatten_all()? * (BN_MOMENTUM * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            let op = NormAffine {
                eps: BN_EPS,
                per_sample: false,
            };
            return Ok(x.contiguous()?.apply_op3(&self.gamma, &self.beta, op)?);
        }
        let (mean, var) = (
            self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
            self.running_var.as_tensor().reshape((1, c, 1, 1))?,
        );
        let xn = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[output, input], init)?,
            bias: store.param(&format!("{name}.bias"), &[output], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool needs even dims, got {h}x{w}")));
    }
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?
        .max_keepdim(5)?
        .max_keepdim(3)?
        .reshape((b, c, h / 2, w / 2))?)
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Mean over the spatial dims: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, 1)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Straight-through rounding of values in `[0, 1]`: forward is
/// `1 if x >= 0.5 else 0`, backward is the identity.
///
/// `x + (r - x)` is exact here: `-x + x = 0`, and for `x ∈ [0.5, 1]` both
/// `1 - x` and the sum are representable.
pub fn round_ste(x: &Tensor) -> Result<Tensor> {
    let hard = x.ge(0.5)?.to_dtype(x.dtype())?;
    Ok((x + (hard - x)?.detach())?)
}

/// Per-sample, per-channel instance normalization (population variance,
/// ε = 1e-5) followed by a scale by `gamma` and a shift by `beta`, both
/// shaped `(B, C)`.
pub fn adain(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    if gamma.dims() != [b, c] || beta.dims() != [b, c] {
        return Err(Error::Shape(format!(
            "adain: feature ({b},{c}) but gamma {:?}, beta {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let op = NormAffine {
        eps: ADAIN_EPS,
        per_sample: true,
    };
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?)
}

/// Builds `(B, 4, H, W)` one-hot targets from label grids.
pub fn one_hot(labels: &[&ndarray::Array2<u8>], classes: usize, dtype: DType) -> Result<Tensor> {
    let (h, w) = labels
        .first()
        .map(|l| l.dim())
        .ok_or_else(|| Error::Shape("one_hot of an empty batch".into()))?;
    let mut data = vec![0f32; labels.len() * classes * h * w];
    for (i, l) in labels.iter().enumerate() {
        if l.dim() != (h, w) {
            return Err(Error::Shape("ragged label batch".into()));
        }
        for (p, &v) in l.iter().enumerate() {
            data[(i * classes + v as usize) * h * w + p] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (labels.len(), classes, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks images into a `(B, 1, H, W)` tensor.
pub fn image_batch(images: &[&ndarray::Array2<f32>], dtype: DType) -> Result<Tensor> {
    let (h, w) = images
        .first()
        .map(|l| l.dim())
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.dim() != (h, w) {
            return Err(Error::Shape("ragged image batch".into()));
        }
        data.extend(im.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Row-major `f64` copy of any tensor.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Direct-loop convolution oracle.
    fn conv_oracle(x: &[f64], (c, h, w): (usize, usize, usize), wt: &[f64], o: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * s + dy) as isize - p as isize;
                                let ix = (xx * s + dx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ic * h + iy as usize) * w + ix as usize]
                                        * wt[((oc * c + ic) * k + dy) * k + dx];
                                }
                            }
                        }
                    }
                    out[(oc * oh + y) * ow + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let cases = [(3, 1, 1, 7, 9), (3, 1, 0, 6, 5), (4, 2, 1, 8, 8), (4, 2, 1, 9, 7), (7, 1, 3, 6, 6), (1, 1, 0, 5, 4)];
        for &(cin, cout) in &[(2, 3), (3, 1), (4, 2)] {
            for &(k, s, p, h, w) in &cases {
                let mut store = ParamStore::new(5, DType::F64);
                let conv = Conv2d::new(&mut store, "c", cin, cout, k, s, p, false).unwrap();
                let x: Vec<f64> = (0..2 * cin * h * w).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
                let y = conv.forward(&t(x.clone(), &[2, cin, h, w])).unwrap();
                let wt = to_vec_f64(&conv.weight).unwrap();
                let mut expect = conv_oracle(&x[..cin * h * w], (cin, h, w), &wt, cout, k, s, p);
                expect.extend(conv_oracle(&x[cin * h * w..], (cin, h, w), &wt, cout, k, s, p));
                let got = to_vec_f64(&y).unwrap();
                assert_eq!(got.len(), expect.len(), "k{k} s{s}");
                for (a, b) in got.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-10, "{cin}->{cout} k{k} s{s}: {a} vs {b} at {}", got.iter().position(|g| g == a).unwrap());
                }
            }
        }
    }

    #[test]
    fn conv_lowerings_agree_on_gradients() {
        let mut store = ParamStore::new(9, DType::F64);
        let conv = Conv2d::new(&mut store, "c", 4, 2, 3, 1, 1, true).unwrap();
        let xv = Var::from_tensor(&t((0..4 * 36).map(|i| (i as f64 * 0.37).sin()).collect(), &[1, 4, 6, 6])).unwrap();
        let target = t((0..72).map(|i| (i as f64 * 0.11).cos()).collect(), &[1, 2, 6, 6]);
        let grads = |y: Tensor| {
            let g = (y - &target).unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gw = to_vec_f64(g.get(&conv.weight).unwrap()).unwrap();
            let gx = to_vec_f64(g.get(xv.as_tensor()).unwrap()).unwrap();
            (gw, gx)
        };
        let a = grads(conv.forward_shift_add(xv.as_tensor()).unwrap());
        let b = grads(conv.forward_lowered(xv.as_tensor()).unwrap());
        for (p, q) in a.0.iter().chain(&a.1).zip(b.0.iter().chain(&b.1)) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for &(cin, cout, k, s, p) in &[(2, 3, 3, 1, 1), (2, 2, 3, 1, 0), (1, 2, 4, 2, 1), (3, 1, 7, 1, 3)] {
            let mut store = ParamStore::new(3, DType::F64);
            let conv = Conv2d::new(&mut store, "c", cin, cout, k, s, p, true).unwrap();
            let n = 2 * cin * 8 * 8;
            let x0: Vec<f64> = (0..n).map(|i| (i as f64 * 0.731).sin()).collect();
            let loss = |x: &Tensor| {
                let y = conv.forward(x).unwrap();
                let wts = Tensor::arange(0f64, y.elem_count() as f64, &Device::Cpu)
                    .unwrap()
                    .reshape(y.dims())
                    .unwrap()
                    .affine(0.01, 0.0)
                    .unwrap()
                    .cos()
                    .unwrap();
                (y * wts).unwrap().sum_all().unwrap()
            };
            let xv = Var::from_tensor(&t(x0.clone(), &[2, cin, 8, 8])).unwrap();
            let g = loss(xv.as_tensor()).backward().unwrap();
            let gx = to_vec_f64(g.get(xv.as_tensor()).unwrap()).unwrap();
            let h = 1e-5;
            for i in (0..n).step_by(7) {
                let mut xp = x0.clone();
                xp[i] += h;
                let mut xm = x0.clone();
                xm[i] -= h;
                let fp = scalar(&loss(&t(xp, &[2, cin, 8, 8]))).unwrap();
                let fm = scalar(&loss(&t(xm, &[2, cin, 8, 8]))).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "k{k}: {fd} vs {}", gx[i]);
            }
        }
    }

    #[test]
    fn round_ste_threshold_and_gradient() {
        let x = Var::from_tensor(&t(vec![0.3, 0.7, 0.5, 0.0, 1.0, 0.49999], &[6])).unwrap();
        let y = round_ste(x.as_tensor()).unwrap();
        assert_eq!(to_vec_f64(&y).unwrap(), vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(to_vec_f64(g.get(x.as_tensor()).unwrap()).unwrap(), vec![1.0; 6]);
    }

    /// Central differences of `f` around `x0`, checked against `analytic`.
    fn check_fd(x0: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64, what: &str) {
        let h = 1e-5;
        for i in 0..x0.len() {
            let (mut xp, mut xm) = (x0.to_vec(), x0.to_vec());
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{what}[{i}]: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn norm_gradients_match_finite_differences() {
        let shape = [2usize, 3, 3, 4];
        let x0: Vec<f64> = (0..72).map(|i| (i as f64 * 1.37).sin() * (1.0 + i as f64 / 50.0)).collect();
        let weights = t((0..72).map(|i| (i as f64 * 0.29).cos()).collect(), &shape);
        for per_sample in [true, false] {
            let pshape: Vec<usize> = if per_sample { vec![2, 3] } else { vec![3] };
            let np = pshape.iter().product::<usize>();
            let a0: Vec<f64> = (0..np).map(|i| 0.5 + i as f64 * 0.3).collect();
            let s0: Vec<f64> = (0..np).map(|i| i as f64 * 0.1 - 0.2).collect();
            let op = NormAffine { eps: 1e-5, per_sample };
            let f = |x: &[f64], a: &[f64], s: &[f64]| {
                let y = t(x.to_vec(), &shape)
                    .apply_op3(&t(a.to_vec(), &pshape), &t(s.to_vec(), &pshape), op)
                    .unwrap();
                scalar(&(y * &weights).unwrap().sum_all().unwrap()).unwrap()
            };
            let (xv, av, sv) = (
                Var::from_tensor(&t(x0.clone(), &shape)).unwrap(),
                Var::from_tensor(&t(a0.clone(), &pshape)).unwrap(),
                Var::from_tensor(&t(s0.clone(), &pshape)).unwrap(),
            );
            let y = xv.as_tensor().apply_op3(av.as_tensor(), sv.as_tensor(), op).unwrap();
            let g = (y * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            let grad = |v: &Var| to_vec_f64(g.get(v.as_tensor()).unwrap()).unwrap();
            check_fd(&x0, &grad(&xv), |x| f(x, &a0, &s0), "x");
            check_fd(&a0, &grad(&av), |a| f(&x0, a, &s0), "scale");
            check_fd(&s0, &grad(&sv), |s| f(&x0, &a0, s), "shift");
        }
    }

    #[test]
    fn batch_norm_train_and_eval() {
        let mut store = ParamStore::new(0, DType::F64);
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        // Channel 0 holds 0..8 over both samples, channel 1 is constant 5.
        let mut v = Vec::new();
        for b in 0..2 {
            v.extend((0..4).map(|i| (b * 4 + i) as f64));
            v.extend([5.0; 4]);
        }
        let x = t(v, &[2, 2, 2, 2]);
        let y = to_vec_f64(&bn.forward(&x, true).unwrap()).unwrap();
        let var = (0..8).map(|i| (i as f64 - 3.5).powi(2)).sum::<f64>() / 8.0;
        assert!((y[0] - (0.0 - 3.5) / (var + BN_EPS).sqrt()).abs() < 1e-12);
        assert!(y[4..8].iter().all(|v| v.abs() < 1e-12));
        let rm = to_vec_f64(bn.running_mean.as_tensor()).unwrap();
        let rv = to_vec_f64(bn.running_var.as_tensor()).unwrap();
        assert!((rm[0] - 0.35).abs() < 1e-12 && (rm[1] - 0.5).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * var * 8.0 / 7.0)).abs() < 1e-12);
        let e = to_vec_f64(&bn.forward(&x, false).unwrap()).unwrap();
        assert!((e[1] - (1.0 - 0.35) / (rv[0] + BN_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn adain_three_values() {
        let x = t(vec![1.0, 2.0, 3.0], &[1, 1, 1, 3]);
        let out = adain(&x, &t(vec![2.0], &[1, 1]), &t(vec![1.0], &[1, 1])).unwrap();
        // Oracle: population std sqrt(2/3) with ε inside the root.
        let sd = (2.0f64 / 3.0 + 1e-5).sqrt();
        let expect = [1.0 - 2.0 / sd, 1.0, 1.0 + 2.0 / sd];
        let got = to_vec_f64(&out).unwrap();
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
        for (g, e) in got.iter().zip([-1.4494, 1.0, 3.4494]) {
            assert!((g - e).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_constant_channel_gives_beta() {
        let x = t(vec![4.0; 9], &[1, 1, 3, 3]);
        let out = adain(&x, &t(vec![3.0], &[1, 1]), &t(vec![-0.5], &[1, 1])).unwrap();
        assert!(to_vec_f64(&out).unwrap().iter().all(|v| (v + 0.5).abs() < 1e-12));
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = t((0..32).map(|v| v as f64).collect(), &[1, 2, 4, 4]);
        let p = max_pool2(&x).unwrap();
        assert_eq!(p.dims(), &[1, 2, 2, 2]);
        assert_eq!(to_vec_f64(&p).unwrap()[..4], [5.0, 7.0, 13.0, 15.0]);
        let u = upsample2(&p).unwrap();
        assert_eq!(u.dims(), &[1, 2, 4, 4]);
        assert_eq!(to_vec_f64(&u).unwrap()[..4], [5.0, 5.0, 7.0, 7.0]);
    }

    #[test]
    fn global_pool_is_permutation_invariant() {
        let v: Vec<f64> = (0..2 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut perm = v.clone();
        perm[..16].reverse();
        perm[16..].rotate_left(5);
        let a = to_vec_f64(&global_avg_pool(&t(v, &[1, 2, 4, 4])).unwrap()).unwrap();
        let b = to_vec_f64(&global_avg_pool(&t(perm, &[1, 2, 4, 4])).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut store = ParamStore::new(1, DType::F32);
        let _ = Linear::new(&mut store, "l", 3, 2, Init::Kaiming(3)).unwrap();
        let snap = store.snapshot().unwrap();
        store.params()["l.weight"].set(&Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap()).unwrap();
        store.restore(&snap).unwrap();
        assert_eq!(
            to_vec_f64(store.params()["l.weight"].as_tensor()).unwrap(),
            to_vec_f64(&snap["l.weight"]).unwrap()
        );
    }
}

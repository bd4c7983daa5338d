use rand::Rng;

use super::adam::Param;
use super::tensor::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// 3x3 convolution with zero padding 1 over a `(C, H, W)` plane stack.
#[derive(Clone, Debug)]
pub struct Conv3x3<T = f32> {
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(out, in, 3, 3)`
    pub weight: Param<T>,
    /// `(out)`
    pub bias: Param<T>,
}

/// Fully connected layer over row batches `(N, in) -> (N, out)`.
#[derive(Clone, Debug)]
pub struct Dense<T = f32> {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)`
    pub weight: Param<T>,
    /// `(out)`
    pub bias: Param<T>,
}

#[derive(Clone, Debug)]
pub enum Layer<T = f32> {
    Conv3x3(Conv3x3<T>),
    Dense(Dense<T>),
    Relu,
    MaxPool2x2,
    /// Normalizes along the last axis.
    Softmax,
}

fn glorot<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

impl<T: Real> Conv3x3<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        assert!(stride >= 1);
        let weight = glorot(
            &[out_channels, in_channels, 3, 3],
            in_channels * 9,
            out_channels * 9,
            rng,
        );
        Conv3x3 {
            stride,
            in_channels,
            out_channels,
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize)> {
        let s = input.shape();
        if s.len() != 3 || s[0] != self.in_channels || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape(
                "conv3x3 input (C,H,W)",
                &[self.in_channels, s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0)],
                s,
            ));
        }
        Ok((s[1], s[2]))
    }

    fn im2col(&self, input: &Tensor<T>, h: usize, w: usize) -> Vec<T> {
        let (ho, wo) = self.output_hw(h, w);
        let p = ho * wo;
        let x = input.data();
        let mut cols = vec![T::zero(); self.in_channels * 9 * p];
        for c in 0..self.in_channels {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &x[(c * h + iy as usize) * w..][..w];
                        let dst = &mut row[oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize) -> Vec<T> {
        let (ho, wo) = self.output_hw(h, w);
        let p = ho * wo;
        let mut out = vec![T::zero(); self.in_channels * h * w];
        for c in 0..self.in_channels {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((c * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut out[(c * h + iy as usize) * w..][..w];
                        for (ox, &g) in row[oy * wo..][..wo].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.check_input(input)?;
        let (ho, wo) = self.output_hw(h, w);
        let p = ho * wo;
        let cols = self.im2col(input, h, w);
        let mut out = vec![T::zero(); self.out_channels * p];
        for (o, b) in self.bias.value.data().iter().enumerate() {
            out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = *b);
        }
        gemm(
            T::one(),
            MatRef::row_major(self.weight.value.data(), self.out_channels, self.in_channels * 9),
            MatRef::row_major(&cols, self.in_channels * 9, p),
            T::one(),
            &mut out,
        );
        Tensor::from_vec(&[self.out_channels, ho, wo], out)
    }

    pub fn backward(&mut self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.check_input(input)?;
        let (ho, wo) = self.output_hw(h, w);
        upstream.expect_shape("conv3x3 upstream", &[self.out_channels, ho, wo])?;
        let p = ho * wo;
        let k = self.in_channels * 9;
        let cols = self.im2col(input, h, w);
        let dy = upstream.data();
        gemm(
            T::one(),
            MatRef::row_major(dy, self.out_channels, p),
            MatRef::row_major(&cols, k, p).t(),
            T::one(),
            self.weight.grad.data_mut(),
        );
        for (o, g) in self.bias.grad.data_mut().iter_mut().enumerate() {
            *g += dy[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
        let mut dcols = vec![T::zero(); k * p];
        gemm(
            T::one(),
            MatRef::row_major(self.weight.value.data(), self.out_channels, k).t(),
            MatRef::row_major(dy, self.out_channels, p),
            T::zero(),
            &mut dcols,
        );
        Tensor::from_vec(&[self.in_channels, h, w], self.col2im(&dcols, h, w))
    }
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let weight = glorot(&[out_features, in_features], in_features, out_features, rng);
        Dense {
            in_features,
            out_features,
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_features])),
        }
    }

    fn rows(&self, input: &Tensor<T>) -> Result<usize> {
        let s = input.shape();
        if s.len() != 2 || s[1] != self.in_features {
            return Err(Error::shape(
                "dense input (N,in)",
                &[s.first().copied().unwrap_or(1), self.in_features],
                s,
            ));
        }
        Ok(s[0])
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.rows(input)?;
        let mut out = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            T::one(),
            MatRef::row_major(input.data(), n, self.in_features),
            MatRef::row_major(self.weight.value.data(), self.out_features, self.in_features).t(),
            T::one(),
            &mut out,
        );
        Tensor::from_vec(&[n, self.out_features], out)
    }

    pub fn backward(&mut self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.rows(input)?;
        upstream.expect_shape("dense upstream", &[n, self.out_features])?;
        let dy = upstream.data();
        gemm(
            T::one(),
            MatRef::row_major(dy, n, self.out_features).t(),
            MatRef::row_major(input.data(), n, self.in_features),
            T::one(),
            self.weight.grad.data_mut(),
        );
        let bg = self.bias.grad.data_mut();
        for row in dy.chunks(self.out_features) {
            for (g, d) in bg.iter_mut().zip(row) {
                *g += *d;
            }
        }
        let mut dx = vec![T::zero(); n * self.in_features];
        gemm(
            T::one(),
            MatRef::row_major(dy, n, self.out_features),
            MatRef::row_major(self.weight.value.data(), self.out_features, self.in_features),
            T::zero(),
            &mut dx,
        );
        Tensor::from_vec(&[n, self.in_features], dx)
    }
}

fn pool_dims<T: Real>(input: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) || s[1] == 0 || s[2] == 0 {
        return Err(Error::Contract(format!(
            "maxpool2x2 expects (C, even H, even W), got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Index of the window maximum; the first in scan order wins ties.
fn pool_argmax<T: Real>(x: &[T], w: usize, base: usize) -> usize {
    let candidates = [base, base + 1, base + w, base + w + 1];
    let mut best = candidates[0];
    for &i in &candidates[1..] {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

fn maxpool_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = pool_dims(input)?;
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                out.push(x[pool_argmax(x, w, base)]);
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out)
}

fn maxpool_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = pool_dims(input)?;
    let (ho, wo) = (h / 2, w / 2);
    upstream.expect_shape("maxpool upstream", &[c, ho, wo])?;
    let x = input.data();
    let dy = upstream.data();
    let mut dx = vec![T::zero(); x.len()];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                dx[pool_argmax(x, w, base)] += dy[(ch * ho + oy) * wo + ox];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], dx)
}

fn softmax_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let last = *input
        .shape()
        .last()
        .ok_or_else(|| Error::Contract("softmax on rank-0 tensor".into()))?;
    if last == 0 {
        return Err(Error::Contract("softmax over empty axis".into()));
    }
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(last) {
        softmax_in_place(row);
    }
    Tensor::from_vec(input.shape(), out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn softmax_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.expect_shape("softmax upstream", input.shape())?;
    let y = softmax_forward(input)?;
    let last = *input.shape().last().unwrap();
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(last).zip(upstream.data().chunks(last)) {
        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
        dx.extend(yr.iter().zip(gr).map(|(a, b)| *a * (*b - dot)));
    }
    Tensor::from_vec(input.shape(), dx)
}

impl<T: Real> Layer<T> {
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv3x3(c) => c.forward(input),
            Layer::Dense(d) => d.forward(input),
            Layer::Relu => Ok(input.map(|v| if v > T::zero() { v } else { T::zero() })),
            Layer::MaxPool2x2 => maxpool_forward(input),
            Layer::Softmax => softmax_forward(input),
        }
    }

    /// Input gradient; parameter gradients are accumulated into `Param::grad`.
    pub fn backward(&mut self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv3x3(c) => c.backward(input, upstream),
            Layer::Dense(d) => d.backward(input, upstream),
            Layer::Relu => {
                upstream.expect_shape("relu upstream", input.shape())?;
                let data = input
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(x, g)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                Tensor::from_vec(input.shape(), data)
            }
            Layer::MaxPool2x2 => maxpool_backward(input, upstream),
            Layer::Softmax => softmax_backward(input, upstream),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv3x3(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv3x3(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => vec![],
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Conv3x3(c) => Layer::Conv3x3(Conv3x3 {
                stride: c.stride,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                weight: c.weight.cast(),
                bias: c.bias.cast(),
            }),
            Layer::Dense(d) => Layer::Dense(Dense {
                in_features: d.in_features,
                out_features: d.out_features,
                weight: d.weight.cast(),
                bias: d.bias.cast(),
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2x2 => Layer::MaxPool2x2,
            Layer::Softmax => Layer::Softmax,
        }
    }
}

pub fn layer_forward<T: Real>(layer: &Layer<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    layer.forward(input)
}

pub fn layer_backward<T: Real>(
    layer: &mut Layer<T>,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    layer.backward(input, upstream)
}

/// Layers applied in order, with explicit activation traces for backprop.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Every intermediate activation; `trace[0]` is the input and the last entry the output.
    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(input.clone());
        for layer in &self.layers {
            let next = layer.forward(trace.last().unwrap())?;
            trace.push(next);
        }
        Ok(trace)
    }

    pub fn backward(&mut self, trace: &[Tensor<T>], upstream: &Tensor<T>) -> Result<Tensor<T>> {
        if trace.len() != self.layers.len() + 1 {
            return Err(Error::Contract(format!(
                "activation trace has {} entries for {} layers",
                trace.len(),
                self.layers.len()
            )));
        }
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(&trace[i], &g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        Sequential {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(Layer::Relu.forward(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
        let x = t(&[2], vec![-1.0, 2.0]);
        let g = Layer::Relu.backward(&x, &t(&[2], vec![5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = Layer::Softmax.forward(&Tensor::<f32>::zeros(&[4])).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn maxpool_constant_plane() {
        let y = Layer::MaxPool2x2.forward(&Tensor::<f32>::full(&[1, 4, 4], 3.0)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[3.0; 4]);
    }

    #[test]
    fn maxpool_rejects_odd_planes() {
        assert!(Layer::MaxPool2x2.forward(&Tensor::<f32>::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn dense_zero_weights_block_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dense::<f32>::new("fc", 4, 3, &mut rng);
        d.weight.value.fill(0.0);
        let x = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let up = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let mut layer = Layer::Dense(d);
        let g = layer.backward(&x, &up).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let conv = Conv3x3::<f64>::new("c", 2, 3, stride, &mut rng);
            let x = Tensor::<f64>::uniform(&[2, 5, 6], -1.0, 1.0, &mut rng);
            let y = conv.forward(&x).unwrap();
            let (ho, wo) = conv.output_hw(5, 6);
            assert_eq!(y.shape(), &[3, ho, wo]);
            let wv = conv.weight.value.data();
            for o in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = conv.bias.value.data()[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                        s += wv[((o * 2 + c) * 3 + ky) * 3 + kx]
                                            * x.data()[(c * 5 + iy as usize) * 6 + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((y.data()[(o * ho + oy) * wo + ox] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_names_expected_and_actual() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Layer::Conv3x3(Conv3x3::<f32>::new("c", 2, 3, 1, &mut rng));
        let err = conv.forward(&Tensor::zeros(&[1, 4, 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 4, 4]"), "{msg}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Layer::Conv3x3(Conv3x3::<f32>::new("c", 1, 4, 1, &mut rng));
        let x = Tensor::uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
        assert_eq!(conv.forward(&x).unwrap(), conv.forward(&x).unwrap());
    }
}

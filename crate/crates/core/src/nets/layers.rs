//! Primitive layers with explicit forward/backward passes.
//!
//! Each layer caches what its backward pass needs during `forward`; calling
//! `backward` accumulates parameter gradients and returns the input gradient.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, Matrix, Volume};

/// A named, trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Whether weight decay applies (off for biases and normalization scales).
    pub decay: bool,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, decay: bool) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![0.0; n],
            grad: vec![0.0; n],
            decay,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64, decay: bool) -> Self {
        let mut p = Self::zeros(name, shape, decay);
        p.value.fill(value);
        p
    }

    pub fn gaussian<R: Rng>(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape, true);
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in &mut p.value {
            *v = normal.sample(rng);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything holding trainable parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// How a layer's weights start out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He/Kaiming normal, `std = √(2 / fan_in)`.
    He,
    Gaussian(f64),
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Gaussian(s) => s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::gaussian(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                init.std(fan_in),
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels], false),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cols: Vec::new(),
            in_shape: (0, 0, 0),
            out_hw: (0, 0),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Volume, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let mut cols = vec![0.0; x.channels * k * k * oh * ow];
        let plane = oh * ow;
        for c in 0..x.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = x.index(c, iy as usize, 0);
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * ow + ox] = x.data[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], oh: usize, ow: usize) -> Volume {
        let (c_in, h, w) = self.in_shape;
        let k = self.kernel;
        let mut dx = Volume::zeros(c_in, h, w);
        let plane = oh * ow;
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = dx.index(c, iy as usize, 0);
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx.data[dst_row + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Volume) -> Volume {
        assert_eq!(x.channels, self.in_channels, "{}: channel mismatch", self.weight.name);
        let (oh, ow) = self.output_hw(x.height, x.width);
        self.in_shape = x.shape();
        self.out_hw = (oh, ow);
        self.cols = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, oh, ow)
        };
        let plane = oh * ow;
        let mut out = Volume::zeros(self.out_channels, oh, ow);
        for (o, b) in self.bias.value.iter().enumerate() {
            out.data[o * plane..(o + 1) * plane].fill(*b);
        }
        let kdim = self.in_channels * self.kernel * self.kernel;
        gemm(
            false,
            false,
            self.out_channels,
            plane,
            kdim,
            1.0,
            &self.weight.value,
            &self.cols,
            1.0,
            &mut out.data,
        );
        out
    }

    pub fn backward(&mut self, grad_out: &Volume) -> Volume {
        let (oh, ow) = self.out_hw;
        let plane = oh * ow;
        assert_eq!(grad_out.shape(), (self.out_channels, oh, ow));
        for (o, g) in self.bias.grad.iter_mut().enumerate() {
            *g += grad_out.data[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        let kdim = self.in_channels * self.kernel * self.kernel;
        gemm(
            false,
            true,
            self.out_channels,
            kdim,
            plane,
            1.0,
            &grad_out.data,
            &self.cols,
            1.0,
            &mut self.weight.grad,
        );
        let mut dcols = vec![0.0; kdim * plane];
        gemm(
            true,
            false,
            kdim,
            plane,
            self.out_channels,
            1.0,
            &self.weight.value,
            &grad_out.data,
            0.0,
            &mut dcols,
        );
        if self.is_pointwise() {
            let (c, h, w) = self.in_shape;
            Volume::from_data(c, h, w, dcols)
        } else {
            self.col2im(&dcols, oh, ow)
        }
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward_in_place(&mut self, data: &mut [f64]) {
        self.mask.clear();
        self.mask.extend(data.iter().map(|&v| v > 0.0));
        for (v, &m) in data.iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
    }

    pub fn backward_in_place(&self, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.mask.len());
        for (g, &m) in grad.iter_mut().zip(&self.mask) {
            if !m {
                *g = 0.0;
            }
        }
    }
}

/// Fully connected layer over a batch of row vectors: `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
    input: Matrix,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, in_features: usize, out_features: usize, init: Init, rng: &mut R) -> Self {
        Self {
            weight: Param::gaussian(
                format!("{name}.weight"),
                vec![out_features, in_features],
                init.std(in_features),
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features], false),
            in_features,
            out_features,
            input: Matrix::zeros(0, in_features),
        }
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.in_features, "{}: feature mismatch", self.weight.name);
        self.input = x.clone();
        let mut out = Matrix::zeros(x.rows, self.out_features);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&self.bias.value);
        }
        gemm(
            false,
            true,
            x.rows,
            self.out_features,
            self.in_features,
            1.0,
            &x.data,
            &self.weight.value,
            1.0,
            &mut out.data,
        );
        out
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Matrix {
        let n = self.input.rows;
        assert_eq!((grad_out.rows, grad_out.cols), (n, self.out_features));
        for r in 0..n {
            for (b, g) in self.bias.grad.iter_mut().zip(grad_out.row(r)) {
                *b += g;
            }
        }
        gemm(
            true,
            false,
            self.out_features,
            self.in_features,
            n,
            1.0,
            &grad_out.data,
            &self.input.data,
            1.0,
            &mut self.weight.grad,
        );
        let mut dx = Matrix::zeros(n, self.in_features);
        gemm(
            false,
            false,
            n,
            self.in_features,
            self.out_features,
            1.0,
            &grad_out.data,
            &self.weight.value,
            0.0,
            &mut dx.data,
        );
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Spatial mean per channel, producing a `c×1×1` volume.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_shape: (usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Volume) -> Volume {
        self.in_shape = x.shape();
        let plane = x.plane() as f64;
        let data = x
            .data
            .chunks(x.plane())
            .map(|ch| ch.iter().sum::<f64>() / plane)
            .collect();
        Volume::from_data(x.channels, 1, 1, data)
    }

    pub fn backward(&self, grad_out: &Volume) -> Volume {
        let (c, h, w) = self.in_shape;
        let plane = (h * w) as f64;
        let mut dx = Volume::zeros(c, h, w);
        for (ch, g) in dx.data.chunks_mut(h * w).zip(&grad_out.data) {
            ch.fill(g / plane);
        }
        dx
    }
}

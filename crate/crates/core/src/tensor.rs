use crate::error::{CoreError, Result};
use rand::Rng;

/// Dense 4-D array in (batch, channel, height, width) order, f64 storage.
///
/// The single carrier type for every kernel in this crate. Values are owned
/// and contiguous; kernels never mutate their inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(b: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        let n = b * c * h * w;
        if data.len() != n {
            return Err(CoreError::shape(
                "Tensor::new",
                format!("{} elements for ({b},{c},{h},{w})", n),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { b, c, h, w, data })
    }

    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor { b, c, h, w, data: vec![0.0; b * c * h * w] }
    }

    pub fn full(b: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor { b, c, h, w, data: vec![value; b * c * h * w] }
    }

    pub fn from_fn(b: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(bi, ci, y, x));
                    }
                }
            }
        }
        Tensor { b, c, h, w, data }
    }

    pub fn rand_uniform(b: usize, c: usize, h: usize, w: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..b * c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { b, c, h, w, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.b, self.c, self.h, self.w)
    }

    #[inline]
    pub fn b(&self) -> usize { self.b }
    #[inline]
    pub fn c(&self) -> usize { self.c }
    #[inline]
    pub fn h(&self) -> usize { self.h }
    #[inline]
    pub fn w(&self) -> usize { self.w }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(b, c, y, x);
        &mut self.data[i]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Contiguous row slice for one (b, c, y) triple.
    #[inline]
    pub fn row(&self, b: usize, c: usize, y: usize) -> &[f64] {
        let i = self.idx(b, c, y, 0);
        &self.data[i..i + self.w]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, c: usize, y: usize) -> &mut [f64] {
        let i = self.idx(b, c, y, 0);
        &mut self.data[i..i + self.w]
    }

    /// Contiguous plane slice for one (b, c) pair.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let i = self.idx(b, c, 0, 0);
        &self.data[i..i + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let i = self.idx(b, c, 0, 0);
        &mut self.data[i..i + self.h * self.w]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(CoreError::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            b: self.b,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::zip_map")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { b: self.b, c: self.c, h: self.h, w: self.w, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "Tensor::add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: f64) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack single-channel planes of `parts` along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| CoreError::InvalidArgument("concat_channels: empty input".into()))?;
        let (b, _, h, w) = first.shape();
        let c_total: usize = parts.iter().map(|t| t.c()).sum();
        for t in parts {
            if t.b() != b || t.h() != h || t.w() != w {
                return Err(CoreError::shape(
                    "concat_channels",
                    format!("batch {b}, {h}x{w}"),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        let mut out = Tensor::zeros(b, c_total, h, w);
        for bi in 0..b {
            let mut co = 0;
            for t in parts {
                for ci in 0..t.c() {
                    out.plane_mut(bi, co).copy_from_slice(t.plane(bi, ci));
                    co += 1;
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::concat_channels`] for a gradient: split along channels.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let total: usize = sizes.iter().sum();
        if total != self.c {
            return Err(CoreError::shape(
                "split_channels",
                format!("{} channels", self.c),
                format!("{total}"),
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &sz in sizes {
            let mut t = Tensor::zeros(self.b, sz, self.h, self.w);
            for bi in 0..self.b {
                for ci in 0..sz {
                    t.plane_mut(bi, ci).copy_from_slice(self.plane(bi, start + ci));
                }
            }
            out.push(t);
            start += sz;
        }
        Ok(out)
    }

    /// Order-stable content hash over the exact f64 little-endian bytes.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for byte in v.to_le_bits_bytes() {
                acc ^= byte as u64;
                acc = acc.wrapping_mul(0x1000_0000_01b3);
            }
        }
        acc
    }
}

trait LeBytes {
    fn to_le_bits_bytes(&self) -> [u8; 8];
}

impl LeBytes for f64 {
    fn to_le_bits_bytes(&self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}

/// A value paired with its gradient of matching shape.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor, grad: Tensor) -> Result<Self> {
        value.check_same_shape(&grad, "GradPair::new")?;
        Ok(GradPair { value, grad })
    }

    pub fn zero_grad_like(value: Tensor) -> Self {
        let (b, c, h, w) = value.shape();
        GradPair { value, grad: Tensor::zeros(b, c, h, w) }
    }
}

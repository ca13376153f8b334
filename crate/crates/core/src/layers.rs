use crate::error::Result;
use crate::ops::{conv2d_backward, conv2d_strided};
use crate::tensor::Tensor;
use rand::Rng;

/// One convolution layer: square odd kernel, reflect padding, stride 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvLayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    /// Fan-in scaled uniform init: weights in +-1/sqrt(in_ch * k * k),
    /// biases zero.
    pub fn init(out_ch: usize, in_ch: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        ConvLayer {
            weight: Tensor::rand_uniform(out_ch, in_ch, k, k, -bound, bound, rng),
            bias: Tensor::zeros(1, 1, 1, out_ch),
            stride,
        }
    }

    /// All-zero layer (used for the alignment head so it starts at identity).
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(out_ch, in_ch, k, k),
            bias: Tensor::zeros(1, 1, 1, out_ch),
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.b()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.c()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d_strided(input, &self.weight, &self.bias, self.stride)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(ConvLayerGrads, Tensor)> {
        let g = conv2d_backward(input, &self.weight, grad_out, self.stride)?;
        Ok((ConvLayerGrads { weight: g.weight, bias: g.bias }, g.input))
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *output* (mask on out > 0).
pub fn relu_backward(out: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    out.zip_map(grad_out, |o, g| if o > 0.0 { g } else { 0.0 })
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given the forward output.
pub fn sigmoid_backward(out: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    out.zip_map(grad_out, |y, g| g * y * (1.0 - y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // 16 input channels, 3x3 kernel: 144 inputs, bound 1/12.
        let layer = ConvLayer::init(8, 16, 3, 1, &mut rng);
        let bound = 1.0 / 12.0;
        assert!(layer.weight.abs_max() <= bound);
        assert!(layer.weight.abs_max() > bound * 0.5, "suspiciously small draws");
        assert_eq!(layer.bias.abs_max(), 0.0);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ConvLayer::init(4, 3, 3, 1, &mut ChaCha8Rng::seed_from_u64(42));
        let b = ConvLayer::init(4, 3, 3, 1, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a.weight.checksum(), b.weight.checksum());
    }

    #[test]
    fn activations_and_backwards_agree() {
        let x = Tensor::new(1, 1, 1, 4, vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let r = relu(&x);
        assert_eq!(r.data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = relu_backward(&r, &Tensor::full(1, 1, 1, 4, 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
        let s = sigmoid(&Tensor::zeros(1, 1, 1, 1));
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
    }
}

use crate::fusion::{ConfGate, FusionSite, ImageFuse};
use crate::layers::ConvLayer;
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;
use crate::warp::AlignNet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One backbone residual block: `x + c2(relu(c1(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub c1: ConvLayer,
    pub c2: ConvLayer,
}

/// Every learnable tensor of the model, grouped by component. The same
/// structure doubles as a gradient and optimizer-moment container (see
/// [`ModelParams::zeros_like`]); tensors are visited in a fixed order by
/// [`ModelParams::visit`] / [`ModelParams::visit_mut`].
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Shared matching encoder; stage 0 doubles as the loss embedding.
    pub match_enc: [ConvLayer; 3],
    /// Reference feature pyramid, fine to coarse.
    pub pyramid: [ConvLayer; 3],
    pub align: AlignNet,
    pub backbone_entry: ConvLayer,
    pub blocks: Vec<ResBlock>,
    /// Fusion at backbone resolution (coarse pyramid features).
    pub fuse1: FusionSite,
    /// Fusion at input resolution (middle pyramid features).
    pub fuse2: FusionSite,
    pub dec_d1: ConvLayer,
    pub dec_u1: ConvLayer,
    pub dec_d2: ConvLayer,
    pub dec_u2: ConvLayer,
    pub dec_out: ConvLayer,
    pub image_fuse: ImageFuse,
}

/// Deterministically initialize all parameters from a seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mc = config.match_channels;
    let [p0, p1, p2] = config.pyramid_channels;
    let bc = config.backbone_channels;
    let [d1c, d2c] = config.decoder_channels;
    ModelParams {
        match_enc: [
            ConvLayer::init(mc, 3, 3, 1, &mut rng),
            ConvLayer::init(mc, mc, 3, 2, &mut rng),
            ConvLayer::init(mc, mc, 3, 2, &mut rng),
        ],
        pyramid: [
            ConvLayer::init(p0, 3, 3, 1, &mut rng),
            ConvLayer::init(p1, p0, 3, 2, &mut rng),
            ConvLayer::init(p2, p1, 3, 2, &mut rng),
        ],
        align: AlignNet::init(config.align_hidden, &mut rng),
        backbone_entry: ConvLayer::init(bc, 3, 3, 2, &mut rng),
        blocks: (0..config.backbone_blocks)
            .map(|_| ResBlock {
                c1: ConvLayer::init(bc, bc, 3, 1, &mut rng),
                c2: ConvLayer::init(bc, bc, 3, 1, &mut rng),
            })
            .collect(),
        fuse1: FusionSite::init(bc, config.gate_hidden, &mut rng),
        fuse2: FusionSite::init(d1c, config.gate_hidden, &mut rng),
        dec_d1: ConvLayer::init(bc, bc, 3, 1, &mut rng),
        dec_u1: ConvLayer::init(d1c, bc, 3, 1, &mut rng),
        dec_d2: ConvLayer::init(d1c, d1c, 3, 1, &mut rng),
        dec_u2: ConvLayer::init(d2c, d1c, 3, 1, &mut rng),
        dec_out: ConvLayer::init(3, d2c, 3, 1, &mut rng),
        image_fuse: ImageFuse::init(config.gate_hidden, &mut rng),
    }
}

fn layer_entries<'a>(prefix: String, layer: &'a ConvLayer, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.weight"), &layer.weight));
    out.push((format!("{prefix}.bias"), &layer.bias));
}

fn layer_entries_mut<'a>(prefix: String, layer: &'a mut ConvLayer, out: &mut Vec<(String, &'a mut Tensor)>) {
    out.push((format!("{prefix}.weight"), &mut layer.weight));
    out.push((format!("{prefix}.bias"), &mut layer.bias));
}

fn gate_entries<'a>(prefix: &str, gate: &'a ConfGate, out: &mut Vec<(String, &'a Tensor)>) {
    layer_entries(format!("{prefix}.a"), &gate.a, out);
    layer_entries(format!("{prefix}.b"), &gate.b, out);
}

fn gate_entries_mut<'a>(prefix: &str, gate: &'a mut ConfGate, out: &mut Vec<(String, &'a mut Tensor)>) {
    layer_entries_mut(format!("{prefix}.a"), &mut gate.a, out);
    layer_entries_mut(format!("{prefix}.b"), &mut gate.b, out);
}

impl ModelParams {
    /// All tensors with stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.match_enc.iter().enumerate() {
            layer_entries(format!("match_enc.{i}"), l, &mut out);
        }
        for (i, l) in self.pyramid.iter().enumerate() {
            layer_entries(format!("pyramid.{i}"), l, &mut out);
        }
        for (i, l) in self.align.layers.iter().enumerate() {
            layer_entries(format!("align.{i}"), l, &mut out);
        }
        layer_entries("backbone_entry".into(), &self.backbone_entry, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            layer_entries(format!("blocks.{i}.c1"), &b.c1, &mut out);
            layer_entries(format!("blocks.{i}.c2"), &b.c2, &mut out);
        }
        for (name, site) in [("fuse1", &self.fuse1), ("fuse2", &self.fuse2)] {
            gate_entries(&format!("{name}.gate"), &site.gate, &mut out);
            layer_entries(format!("{name}.merge"), &site.merge, &mut out);
        }
        layer_entries("dec_d1".into(), &self.dec_d1, &mut out);
        layer_entries("dec_u1".into(), &self.dec_u1, &mut out);
        layer_entries("dec_d2".into(), &self.dec_d2, &mut out);
        layer_entries("dec_u2".into(), &self.dec_u2, &mut out);
        layer_entries("dec_out".into(), &self.dec_out, &mut out);
        gate_entries("image_fuse.gate", &self.image_fuse.gate, &mut out);
        out
    }

    /// Mutable variant of [`ModelParams::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.match_enc.iter_mut().enumerate() {
            layer_entries_mut(format!("match_enc.{i}"), l, &mut out);
        }
        for (i, l) in self.pyramid.iter_mut().enumerate() {
            layer_entries_mut(format!("pyramid.{i}"), l, &mut out);
        }
        for (i, l) in self.align.layers.iter_mut().enumerate() {
            layer_entries_mut(format!("align.{i}"), l, &mut out);
        }
        layer_entries_mut("backbone_entry".into(), &mut self.backbone_entry, &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            layer_entries_mut(format!("blocks.{i}.c1"), &mut b.c1, &mut out);
            layer_entries_mut(format!("blocks.{i}.c2"), &mut b.c2, &mut out);
        }
        for (name, site) in [("fuse1", &mut self.fuse1), ("fuse2", &mut self.fuse2)] {
            gate_entries_mut(&format!("{name}.gate"), &mut site.gate, &mut out);
            layer_entries_mut(format!("{name}.merge"), &mut site.merge, &mut out);
        }
        layer_entries_mut("dec_d1".into(), &mut self.dec_d1, &mut out);
        layer_entries_mut("dec_u1".into(), &mut self.dec_u1, &mut out);
        layer_entries_mut("dec_d2".into(), &mut self.dec_d2, &mut out);
        layer_entries_mut("dec_u2".into(), &mut self.dec_u2, &mut out);
        layer_entries_mut("dec_out".into(), &mut self.dec_out, &mut out);
        gate_entries_mut("image_fuse.gate", &mut self.image_fuse.gate, &mut out);
        out
    }

    /// A same-shaped parameter set with every tensor zeroed; the natural
    /// container for gradients and optimizer moments.
    pub fn zeros_like(&self) -> ModelParams {
        let mut copy = self.clone();
        for (_, t) in copy.named_tensors_mut() {
            t.fill(0.0);
        }
        copy
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Accumulate `other` into `self` tensor-wise (used for gradients).
    pub fn add_assign(&mut self, other: &ModelParams) {
        let other_tensors = other.named_tensors();
        for ((name, t), (oname, o)) in self.named_tensors_mut().into_iter().zip(other_tensors) {
            debug_assert_eq!(name, oname);
            t.add_assign(o).expect("parameter shapes agree");
        }
    }

    /// Scale every tensor (used to average gradients over a batch).
    pub fn scale_assign(&mut self, s: f64) {
        for (_, t) in self.named_tensors_mut() {
            t.scale_assign(s);
        }
    }

    /// Checksum over all tensors in visit order; equal for identically
    /// initialized and identically trained models.
    pub fn checksum(&self) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for (_, t) in self.named_tensors() {
            acc = acc.rotate_left(13) ^ t.checksum();
        }
        acc
    }
}

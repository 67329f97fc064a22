//! Shared-encoder / dual-decoder model.
//!
//! A stride-2 convolutional encoder feeds two structurally identical
//! decoders that share no weights: the depth decoder emits left/right
//! disparity pairs at up to four scales, the semantic decoder emits
//! full-resolution class logits.

mod checkpoint;

use crate::data::SplitMix64;
use crate::error::{Error, Result};
use crate::tensor::{Axis, Float, Graph, Shape, Tensor, UpsampleMode, Var};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};

/// Maximum number of disparity scales.
pub const MAX_DISPARITY_SCALES: usize = 4;

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channels of each encoder level; its length is the number of
    /// levels.
    pub encoder_channels: Vec<usize>,
    pub num_classes: usize,
    /// Upper bound of predicted disparity as a fraction of the map width.
    pub d_max_fraction: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_channels: vec![16, 32, 64, 128, 256],
            num_classes: 4,
            d_max_fraction: 0.3,
            height: 64,
            width: 128,
        }
    }
}

impl ModelConfig {
    pub fn num_levels(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn num_disparity_scales(&self) -> usize {
        self.num_levels().min(MAX_DISPARITY_SCALES)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.num_levels();
        if levels == 0 {
            return Err(Error::Config(
                "model needs at least one encoder level".into(),
            ));
        }
        if levels > 16 {
            return Err(Error::Config(format!(
                "{levels} encoder levels is too many"
            )));
        }
        if self.encoder_channels.contains(&0) || self.encoder_channels[0] < 2 {
            return Err(Error::Config(format!(
                "encoder channels {:?} must be positive with at least 2 at the first level",
                self.encoder_channels
            )));
        }
        if !(2..255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes {} outside [2, 255)",
                self.num_classes
            )));
        }
        if !(self.d_max_fraction > 0.0 && self.d_max_fraction < 1.0) {
            return Err(Error::Config(format!(
                "d_max_fraction {} outside (0, 1)",
                self.d_max_fraction
            )));
        }
        let unit = 1usize << levels;
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(unit)
            || !self.width.is_multiple_of(unit)
        {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of {unit} for {levels} levels",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Spatial dims of disparity scale `s`.
    pub fn scale_dims(&self, s: usize) -> (usize, usize) {
        (self.height >> s, self.width >> s)
    }

    fn decoder_out(&self, s: usize) -> usize {
        if s == 0 {
            (self.encoder_channels[0] / 2).max(1)
        } else {
            self.encoder_channels[s - 1]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    DepthDecoder,
    SemanticDecoder,
}

/// One 3x3 convolution of the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub group: ParamGroup,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ConvSpec {
    fn new(
        name: String,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        ConvSpec {
            name,
            group,
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, KERNEL, KERNEL)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * KERNEL * KERNEL + 1)
    }
}

fn decoder_table(cfg: &ModelConfig, group: ParamGroup, prefix: &str, out: &mut Vec<ConvSpec>) {
    let levels = cfg.num_levels();
    let ch = &cfg.encoder_channels;
    for s in (0..levels).rev() {
        let input = if s == levels - 1 {
            ch[levels - 1]
        } else {
            cfg.decoder_out(s + 1)
        };
        let o = cfg.decoder_out(s);
        let skip = if s == 0 { 3 } else { ch[s - 1] };
        out.push(ConvSpec::new(format!("{prefix}.up{s}"), group, input, o, 1));
        out.push(ConvSpec::new(
            format!("{prefix}.iconv{s}"),
            group,
            o + skip,
            o,
            1,
        ));
        match group {
            ParamGroup::DepthDecoder if s < cfg.num_disparity_scales() => {
                out.push(ConvSpec::new(format!("{prefix}.disp{s}"), group, o, 2, 1));
            }
            ParamGroup::SemanticDecoder if s == 0 => {
                out.push(ConvSpec::new(
                    format!("{prefix}.logits"),
                    group,
                    o,
                    cfg.num_classes,
                    1,
                ));
            }
            _ => {}
        }
    }
}

/// Every convolution in parameter order: encoder, depth decoder, semantic
/// decoder.
pub fn layer_table(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let mut t = Vec::new();
    let mut input = 3;
    for (l, &c) in cfg.encoder_channels.iter().enumerate() {
        t.push(ConvSpec::new(
            format!("enc{l}.a"),
            ParamGroup::Encoder,
            input,
            c,
            2,
        ));
        t.push(ConvSpec::new(
            format!("enc{l}.b"),
            ParamGroup::Encoder,
            c,
            c,
            1,
        ));
        input = c;
    }
    decoder_table(cfg, ParamGroup::DepthDecoder, "depth", &mut t);
    decoder_table(cfg, ParamGroup::SemanticDecoder, "sem", &mut t);
    t
}

/// Convolution weights and biases, two tensors per [`ConvSpec`] in
/// [`layer_table`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    cfg: ModelConfig,
    layers: Vec<ConvSpec>,
    tensors: Vec<Tensor<f32>>,
}

impl ModelParams {
    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        cfg.validate()?;
        let layers = layer_table(&cfg);
        if tensors.len() != 2 * layers.len() {
            return Err(Error::invalid(
                "model params",
                format!("{} tensors for {} layers", tensors.len(), layers.len()),
            ));
        }
        for (spec, pair) in layers.iter().zip(tensors.chunks(2)) {
            if pair[0].shape() != spec.weight_shape() || pair[1].shape() != spec.bias_shape() {
                return Err(Error::ShapeMismatch {
                    op: "model params",
                    lhs: pair[0].shape(),
                    rhs: spec.weight_shape(),
                });
            }
        }
        Ok(ModelParams {
            cfg,
            layers,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[ConvSpec] {
        &self.layers
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    /// `(name, tensor)` pairs, names suffixed `.weight` / `.bias`.
    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor<f32>)> {
        self.layers
            .iter()
            .zip(self.tensors.chunks(2))
            .flat_map(|(spec, pair)| {
                [
                    (format!("{}.weight", spec.name), &pair[0]),
                    (format!("{}.bias", spec.name), &pair[1]),
                ]
            })
    }

    /// Group of tensor `i`.
    pub fn group_of(&self, i: usize) -> ParamGroup {
        self.layers[i / 2].group
    }

    /// Number of scalars across all tensors.
    pub fn count_trainable(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        (0..self.tensors.len())
            .filter(|&i| self.group_of(i) == group)
            .map(|i| self.tensors[i].numel())
            .sum()
    }

    /// CRC-32 over every parameter's little-endian bytes, in order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Closed-form parameter total from the layer table.
pub fn count_trainable(cfg: &ModelConfig) -> usize {
    layer_table(cfg).iter().map(ConvSpec::param_count).sum()
}

/// Uniform `±sqrt(6 / fan_in)` weights and zero biases; each layer draws
/// from its own stream of the seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let layers = layer_table(cfg);
    let mut tensors = Vec::with_capacity(2 * layers.len());
    for (i, spec) in layers.iter().enumerate() {
        let mut rng = SplitMix64::derive(seed, i as u64);
        let bound = (6.0 / (spec.in_channels * KERNEL * KERNEL) as f64).sqrt();
        tensors.push(Tensor::from_fn(spec.weight_shape(), |_| {
            rng.uniform(-bound, bound) as f32
        }));
        tensors.push(Tensor::zeros(spec.bias_shape()));
    }
    Ok(ModelParams {
        cfg: cfg.clone(),
        layers,
        tensors,
    })
}

/// Left and right disparity in pixels at one scale, each (batch, 1, H_s, W_s).
#[derive(Clone, Copy, Debug)]
pub struct DisparityPair {
    pub left: Var,
    pub right: Var,
}

/// Disparity pairs ordered from full resolution (scale 0) downwards.
pub type DisparityPyramid = Vec<DisparityPair>;

/// Which decoders a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Both,
    DepthOnly,
}

pub struct ForwardOutput {
    pub pyramid: DisparityPyramid,
    pub logits: Option<Var>,
    /// Graph handle of each parameter tensor; `None` for tensors of a
    /// decoder that was not evaluated.
    pub params: Vec<Option<Var>>,
}

struct Layers<'a> {
    specs: &'a [ConvSpec],
    vars: &'a [Option<Var>],
    next: usize,
}

impl Layers<'_> {
    fn conv<T: Float>(&mut self, g: &mut Graph<T>, x: Var, activate: bool) -> Result<Var> {
        let spec = &self.specs[self.next];
        let (w, b) = (self.vars[2 * self.next], self.vars[2 * self.next + 1]);
        self.next += 1;
        let (w, b) = w.zip(b).expect("evaluated layers are registered");
        let y = g.conv2d(x, w, Some(b), spec.stride, KERNEL / 2)?;
        if activate {
            g.elu(y)
        } else {
            Ok(y)
        }
    }

    fn skip_to(&mut self, group: ParamGroup) {
        while self.next < self.specs.len() && self.specs[self.next].group != group {
            self.next += 1;
        }
    }
}

fn decode<T: Float>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    layers: &mut Layers<'_>,
    image: Var,
    features: &[Var],
    group: ParamGroup,
) -> Result<(Vec<Var>, Option<Var>)> {
    let levels = cfg.num_levels();
    let mut x = features[levels - 1];
    let mut heads = vec![None; cfg.num_disparity_scales()];
    let mut logits = None;
    for s in (0..levels).rev() {
        let up = g.upsample(x, UpsampleMode::Nearest)?;
        let up = layers.conv(g, up, true)?;
        let skip = if s == 0 { image } else { features[s - 1] };
        let cat = g.concat(&[up, skip])?;
        x = layers.conv(g, cat, true)?;
        match group {
            ParamGroup::DepthDecoder if s < heads.len() => {
                let raw = layers.conv(g, x, false)?;
                let d = g.sigmoid(raw)?;
                let width = g.shape(d).width() as f64;
                heads[s] = Some(g.scalar_mul(d, cfg.d_max_fraction * width)?);
            }
            ParamGroup::SemanticDecoder if s == 0 => {
                logits = Some(layers.conv(g, x, false)?);
            }
            _ => {}
        }
    }
    Ok((heads.into_iter().flatten().collect(), logits))
}

/// Runs the model on already-registered parameter handles (one per tensor,
/// in [`layer_table`] order). Handles of skipped decoders may be `None`.
pub fn forward_with<T: Float>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &[Option<Var>],
    image: Var,
    heads: Heads,
) -> Result<(DisparityPyramid, Option<Var>)> {
    let s = g.shape(image);
    if s.channels() != 3 || s.height() != cfg.height || s.width() != cfg.width {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: s,
            rhs: Shape::new(s.batch(), 3, cfg.height, cfg.width),
        });
    }
    let specs = layer_table(cfg);
    if params.len() != 2 * specs.len() {
        return Err(Error::invalid(
            "forward",
            format!(
                "{} parameter handles for {} layers",
                params.len(),
                specs.len()
            ),
        ));
    }
    let mut layers = Layers {
        specs: &specs,
        vars: params,
        next: 0,
    };
    let mut features = Vec::with_capacity(cfg.num_levels());
    let mut x = image;
    for _ in 0..cfg.num_levels() {
        x = layers.conv(g, x, true)?;
        x = layers.conv(g, x, true)?;
        features.push(x);
    }
    let (disp, _) = decode(
        g,
        cfg,
        &mut layers,
        image,
        &features,
        ParamGroup::DepthDecoder,
    )?;
    let mut pyramid = Vec::with_capacity(disp.len());
    for d in disp {
        pyramid.push(DisparityPair {
            left: g.narrow(d, Axis::Channel, 0, 1)?,
            right: g.narrow(d, Axis::Channel, 1, 1)?,
        });
    }
    let logits = match heads {
        Heads::Both => {
            layers.skip_to(ParamGroup::SemanticDecoder);
            decode(
                g,
                cfg,
                &mut layers,
                image,
                &features,
                ParamGroup::SemanticDecoder,
            )?
            .1
        }
        Heads::DepthOnly => None,
    };
    Ok((pyramid, logits))
}

/// Registers the parameters as trainable leaves (converted to `T`) and runs
/// the model on `image`, shaped (batch, 3, H, W).
pub fn forward<T: Float>(
    g: &mut Graph<T>,
    params: &ModelParams,
    image: Var,
    heads: Heads,
) -> Result<ForwardOutput> {
    let vars: Vec<Option<Var>> = params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let skip =
                heads == Heads::DepthOnly && params.group_of(i) == ParamGroup::SemanticDecoder;
            (!skip).then(|| g.param(t.cast::<T>()))
        })
        .collect();
    let (pyramid, logits) = forward_with(g, &params.cfg, &vars, image, heads)?;
    Ok(ForwardOutput {
        pyramid,
        logits,
        params: vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder_channels: vec![4, 8],
            num_classes: 3,
            d_max_fraction: 0.3,
            height: 8,
            width: 16,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let zero = ModelConfig {
            encoder_channels: vec![],
            ..ModelConfig::default()
        };
        assert!(init_params(&zero, 0).is_err());
        let odd = ModelConfig {
            height: 60,
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn tiny_profile_count_matches_layer_arithmetic() {
        let cfg = ModelConfig::default();
        let conv = |i: usize, o: usize| o * (9 * i + 1);
        let c = [16, 32, 64, 128, 256];
        let mut enc = 0;
        let mut prev = 3;
        for &k in &c {
            enc += conv(prev, k) + conv(k, k);
            prev = k;
        }
        // decoder output channels per stage s = 4..0 and skip channels
        let outs = [128, 64, 32, 16, 8];
        let skips = [128, 64, 32, 16, 3];
        let ins = [256, 128, 64, 32, 16];
        let mut dec = 0;
        for i in 0..5 {
            dec += conv(ins[i], outs[i]) + conv(outs[i] + skips[i], outs[i]);
        }
        let disp_heads: usize = [64, 32, 16, 8].iter().map(|&o| conv(o, 2)).sum();
        let sem_head = conv(8, cfg.num_classes);
        let expected = enc + 2 * dec + disp_heads + sem_head;

        let p = init_params(&cfg, 1).unwrap();
        assert_eq!(p.count_trainable(), expected);
        assert_eq!(count_trainable(&cfg), expected);
        assert_eq!(
            p.count_group(ParamGroup::Encoder)
                + p.count_group(ParamGroup::DepthDecoder)
                + p.count_group(ParamGroup::SemanticDecoder),
            expected
        );
        assert_eq!(p.count_group(ParamGroup::SemanticDecoder), dec + sem_head);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(&tiny(), 7).unwrap();
        let b = init_params(&tiny(), 7).unwrap();
        let c = init_params(&tiny(), 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let p = init_params(&tiny(), 3).unwrap();
        for (spec, pair) in p.layers().iter().zip(p.tensors().chunks(2)) {
            let bound = (6.0 / (9 * spec.in_channels) as f64).sqrt() as f32;
            assert!(pair[0].data().iter().all(|v| v.abs() <= bound));
            assert!(pair[1].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_shapes_and_range() {
        let cfg = tiny();
        let p = init_params(&cfg, 2).unwrap();
        let mut g = Graph::<f32>::new();
        let mut rng = SplitMix64::new(5);
        let img = g.constant(Tensor::from_fn(Shape::new(2, 3, 8, 16), |_| {
            rng.next_f64() as f32
        }));
        let out = forward(&mut g, &p, img, Heads::Both).unwrap();
        assert_eq!(out.pyramid.len(), 2);
        for (s, pair) in out.pyramid.iter().enumerate() {
            let (h, w) = cfg.scale_dims(s);
            for v in [pair.left, pair.right] {
                assert_eq!(g.shape(v), Shape::new(2, 1, h, w));
                let dmax = 0.3 * w as f32;
                assert!(g.value(v).data().iter().all(|&d| d > 0.0 && d < dmax));
            }
        }
        assert_eq!(g.shape(out.logits.unwrap()), Shape::new(2, 3, 8, 16));
    }

    #[test]
    fn depth_only_skips_semantic_decoder() {
        let cfg = tiny();
        let p = init_params(&cfg, 2).unwrap();
        let mut g = Graph::<f32>::new();
        let img = g.constant(Tensor::full(Shape::new(1, 3, 8, 16), 0.5));
        let out = forward(&mut g, &p, img, Heads::DepthOnly).unwrap();
        assert!(out.logits.is_none());
        for (i, v) in out.params.iter().enumerate() {
            assert_eq!(v.is_none(), p.group_of(i) == ParamGroup::SemanticDecoder);
        }
    }

    #[test]
    fn wrong_input_dims_rejected() {
        let p = init_params(&tiny(), 2).unwrap();
        let mut g = Graph::<f32>::new();
        let img = g.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        assert!(forward(&mut g, &p, img, Heads::Both).is_err());
    }
}

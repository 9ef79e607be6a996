//! The captioning network: a residual conv backbone, a projection into the
//! textual width, and two causal transformer decoders reading the caption
//! left-to-right and right-to-left. The pooled backbone output is the
//! retrieval embedding.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::captions::{EOS_ID, SOS_ID};
use crate::error::{Error, Result};
use crate::scene::ImageTensor;
use crate::tape::{ConvGeom, Graph, Mat, ParamGroup, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Channels of the stride-2 stem convolution.
    pub stem_channels: usize,
    /// Output channels of each stride-2 residual stage.
    pub stage_channels: Vec<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Longest caption, boundary markers included.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            stem_channels: 16,
            stage_channels: vec![48],
            hidden: 48,
            layers: 1,
            heads: 4,
            ffn: 96,
            vocab_size: 64,
            max_len: 48,
        }
    }
}

impl ModelConfig {
    fn downsample(&self) -> usize {
        1 << (1 + self.stage_channels.len())
    }

    /// Spatial size `(h, w)` of the final feature map.
    pub fn grid(&self) -> (usize, usize) {
        let mut h = self.image_height;
        let mut w = self.image_width;
        for _ in 0..=self.stage_channels.len() {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn cells(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Retrieval embedding width (channels of the last stage).
    pub fn embed_dim(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.stem_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("stem_channels", self.stem_channels),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("model.stage_channels", "must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config("model.hidden", "must be divisible by model.heads"));
        }
        if self.max_len < 3 {
            return Err(Error::config(
                "model.max_len",
                "must fit at least one token plus markers",
            ));
        }
        if self.image_height < self.downsample() || self.image_width < self.downsample() {
            return Err(Error::config(
                "model.image_height",
                "image too small for the stage count",
            ));
        }
        Ok(())
    }
}

pub(crate) fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
    out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            normal(rng, out_c, fan_in, std),
            ParamGroup::Visual,
            true,
        );
        let b = store.add(format!("{name}.b"), Mat::zeros((out_c, 1)), ParamGroup::Visual, false);
        Self {
            w,
            b,
            kernel,
            stride,
            out_channels: out_c,
        }
    }

    /// Returns the output and its spatial size.
    fn apply(&self, g: &mut Graph, x: Var, in_c: usize, h: usize, w: usize) -> (Var, usize, usize) {
        let geom = ConvGeom {
            in_channels: in_c,
            in_h: h,
            in_w: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.kernel / 2,
        };
        let (wv, bv) = (g.param(self.w), g.param(self.b));
        (g.conv2d(x, wv, bv, geom), geom.out_h(), geom.out_w())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Conv,
}

/// Spatial features of the final stage, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `(channels, grid_h * grid_w)`
    pub data: Mat,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn cells(&self) -> usize {
        self.data.ncols()
    }
}

/// Residual conv backbone: stride-2 stem then stride-2 residual stages.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Conv,
    blocks: Vec<ResBlock>,
    image_h: usize,
    image_w: usize,
}

impl Backbone {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let stem = Conv::new(store, rng, "visual.stem", 3, config.stem_channels, 3, 2, 1.0);
        let mut in_c = config.stem_channels;
        let mut blocks = Vec::new();
        for (i, &out_c) in config.stage_channels.iter().enumerate() {
            let name = format!("visual.stage{i}");
            blocks.push(ResBlock {
                conv1: Conv::new(store, rng, &format!("{name}.conv1"), in_c, out_c, 3, 2, 1.0),
                conv2: Conv::new(store, rng, &format!("{name}.conv2"), out_c, out_c, 3, 1, 0.5),
                shortcut: Conv::new(store, rng, &format!("{name}.shortcut"), in_c, out_c, 1, 2, 1.0),
            });
            in_c = out_c;
        }
        Self {
            stem,
            blocks,
            image_h: config.image_height,
            image_w: config.image_width,
        }
    }

    /// Records the backbone on `g`; returns the final feature map node and its grid.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<(Var, usize, usize)> {
        let expected = (3, self.image_h * self.image_w);
        if g.value(image).dim() != expected {
            return Err(Error::Dimension(format!(
                "image of shape {:?}, backbone expects {expected:?}",
                g.value(image).dim()
            )));
        }
        let (x, mut h, mut w) = self.stem.apply(g, image, 3, self.image_h, self.image_w);
        let mut x = g.relu(x);
        let mut c = self.stem.out_channels;
        for block in &self.blocks {
            let (y, oh, ow) = block.conv1.apply(g, x, c, h, w);
            let y = g.relu(y);
            let (y, _, _) = block.conv2.apply(g, y, block.conv1.out_channels, oh, ow);
            let (sc, _, _) = block.shortcut.apply(g, x, c, h, w);
            let sum = g.add(y, sc);
            x = g.relu(sum);
            c = block.conv2.out_channels;
            h = oh;
            w = ow;
        }
        Ok((x, h, w))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.w, self.stem.b];
        for b in &self.blocks {
            for c in [&b.conv1, &b.conv2, &b.shortcut] {
                ids.push(c.w);
                ids.push(c.b);
            }
        }
        ids
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), normal(rng, fan_in, fan_out, std), group, true),
            b: store.add(format!("{name}.b"), Mat::zeros((1, fan_out)), group, false),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Mat::ones((1, dim)), group, false),
            bias: store.add(format!("{name}.b"), Mat::zeros((1, dim)), group, false),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (gn, b) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gn, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, group),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, group),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, group),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, group),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var, context: Var, heads: usize, causal: bool) -> Var {
        let q = self.q.apply(g, x);
        let k = self.k.apply(g, context);
        let v = self.v.apply(g, context);
        let dim = g.value(q).ncols();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.cols(q, h * dh, dh);
            let kh = g.cols(k, h * dh, dh);
            let vh = g.cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, causal);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.apply(g, cat)
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ffn: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// One causal transformer decoder.
#[derive(Debug, Clone)]
pub struct Decoder {
    positions: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: Norm,
}

impl Decoder {
    fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng, direction: Direction) -> Self {
        let (prefix, group) = match direction {
            Direction::Forward => ("fwd", ParamGroup::Forward),
            Direction::Backward => ("bwd", ParamGroup::Backward),
        };
        let h = config.hidden;
        let positions = store.add(
            format!("{prefix}.pos"),
            normal(rng, config.max_len, h, 0.1),
            group,
            true,
        );
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("{prefix}.layer{l}");
                DecoderLayer {
                    norm_self: Norm::new(store, &format!("{name}.norm_self"), h, group),
                    self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), h, group),
                    norm_cross: Norm::new(store, &format!("{name}.norm_cross"), h, group),
                    cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), h, group),
                    norm_ffn: Norm::new(store, &format!("{name}.norm_ffn"), h, group),
                    ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), h, config.ffn, group),
                    ffn_out: Linear::new(store, rng, &format!("{name}.ffn_out"), config.ffn, h, group),
                }
            })
            .collect();
        Self {
            positions,
            layers,
            final_norm: Norm::new(store, &format!("{prefix}.norm_final"), h, group),
        }
    }
}

/// Full captioning model with its parameters.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    projection: Linear,
    memory_positions: ParamId,
    token_embedding: ParamId,
    output_bias: ParamId,
    forward: Decoder,
    backward: Decoder,
}

/// Per-caption negative log-likelihoods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub forward: f64,
    pub backward: f64,
    /// Predicted positions per direction (K + 1).
    pub positions: usize,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.forward + self.backward
    }
}

/// Loss nodes recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub forward: Var,
    pub backward: Var,
}

impl CaptionModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&config, &mut params, rng);
        let h = config.hidden;
        let projection = Linear::new(&mut params, rng, "proj", config.embed_dim(), h, ParamGroup::Projection);
        let memory_positions = params.add(
            "proj.pos",
            normal(rng, config.cells(), h, 0.1),
            ParamGroup::Projection,
            true,
        );
        let token_embedding = params.add(
            "text.embedding",
            normal(rng, config.vocab_size, h, 0.1),
            ParamGroup::Textual,
            true,
        );
        let output_bias = params.add(
            "text.output_bias",
            Mat::zeros((1, config.vocab_size)),
            ParamGroup::Textual,
            false,
        );
        let forward = Decoder::new(&config, &mut params, rng, Direction::Forward);
        let backward = Decoder::new(&config, &mut params, rng, Direction::Backward);
        params.round_to_f32();
        Ok(Self {
            config,
            params,
            backbone,
            projection,
            memory_positions,
            token_embedding,
            output_bias,
            forward,
            backward,
        })
    }

    /// Rebuilds a model around stored arrays; every array of the architecture
    /// must be present with its shape.
    pub fn from_params(config: ModelConfig, stored: &ParamStore) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        for e in model.params.entries_mut() {
            let id = stored
                .id(&e.name)
                .ok_or_else(|| Error::Dimension(format!("stored parameters lack `{}`", e.name)))?;
            let v = stored.get(id);
            if v.dim() != e.value.dim() {
                return Err(Error::Dimension(format!(
                    "`{}` is {:?}, architecture expects {:?}",
                    e.name,
                    v.dim(),
                    e.value.dim()
                )));
            }
            e.value.assign(v);
        }
        Ok(model)
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    pub fn output_bias(&self) -> ParamId {
        self.output_bias
    }

    pub fn projection_weight(&self) -> ParamId {
        self.projection.w
    }

    pub fn projection_bias(&self) -> ParamId {
        self.projection.b
    }

    /// Copies every backward-decoder array from its forward twin.
    pub fn tie_backward_to_forward(&mut self) {
        let pairs: Vec<(ParamId, ParamId)> = self
            .params
            .entries()
            .iter()
            .enumerate()
            .filter_map(|(i, e)| {
                let twin = e.name.strip_prefix("bwd.")?;
                Some((ParamId(i), self.params.id(&format!("fwd.{twin}"))?))
            })
            .collect();
        for (bwd, fwd) in pairs {
            let v = self.params.get(fwd).clone();
            *self.params.get_mut(bwd) = v;
        }
    }

    /// Final-stage feature map for one image.
    pub fn visual_forward(&self, image: &ImageTensor) -> Result<FeatureMap> {
        let mut g = Graph::new(&self.params);
        let x = g.input(image.to_mat());
        let (f, gh, gw) = self.backbone.forward(&mut g, x)?;
        Ok(FeatureMap {
            grid_h: gh,
            grid_w: gw,
            data: g.value(f).clone(),
        })
    }

    /// `(cells × hidden)` memory for the decoders, without positional terms.
    pub fn project_var(&self, g: &mut Graph, features: Var) -> Var {
        let t = g.transpose(features);
        self.projection.apply(g, t)
    }

    pub fn project(&self, features: &FeatureMap) -> Mat {
        let mut g = Graph::new(&self.params);
        let f = g.input(features.data.clone());
        let m = self.project_var(&mut g, f);
        g.value(m).clone()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() < 3 || tokens[0] != SOS_ID || tokens[tokens.len() - 1] != EOS_ID {
            return Err(Error::Caption(
                "token ids must be [SOS] ... [EOS] with at least one interior token".into(),
            ));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Caption(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Inputs and next-token targets in the reading order of `direction`.
    fn reading_order(tokens: &[usize], direction: Direction) -> (Vec<usize>, Vec<usize>) {
        let seq: Vec<usize> = match direction {
            Direction::Forward => tokens.to_vec(),
            Direction::Backward => tokens.iter().rev().copied().collect(),
        };
        (seq[..seq.len() - 1].to_vec(), seq[1..].to_vec())
    }

    /// Records one decoder on `g`; returns `(positions × vocab)` logits and targets.
    pub fn decode_var(
        &self,
        g: &mut Graph,
        memory: Var,
        tokens: &[usize],
        direction: Direction,
    ) -> Result<(Var, Vec<usize>)> {
        self.check_tokens(tokens)?;
        let (inputs, targets) = Self::reading_order(tokens, direction);
        Ok((self.decode_inputs(g, memory, &inputs, direction), targets))
    }

    /// Runs a decoder over raw input ids, already in its reading order.
    fn decode_inputs(&self, g: &mut Graph, memory: Var, inputs: &[usize], direction: Direction) -> Var {
        let decoder = match direction {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        };
        let table = g.param(self.token_embedding);
        let emb = g.embed(table, inputs);
        let pos = g.param(decoder.positions);
        let pos = g.rows(pos, 0, inputs.len());
        let mut x = g.add(emb, pos);
        let mem_pos = g.param(self.memory_positions);
        let memory = g.add(memory, mem_pos);
        for layer in &decoder.layers {
            let h = layer.norm_self.apply(g, x);
            let a = layer.self_attn.apply(g, h, h, self.config.heads, true);
            x = g.add(x, a);
            let h = layer.norm_cross.apply(g, x);
            let c = layer.cross_attn.apply(g, h, memory, self.config.heads, false);
            x = g.add(x, c);
            let h = layer.norm_ffn.apply(g, x);
            let f = layer.ffn_in.apply(g, h);
            let f = g.relu(f);
            let f = layer.ffn_out.apply(g, f);
            x = g.add(x, f);
        }
        let x = decoder.final_norm.apply(g, x);
        let logits = g.matmul_nt(x, table);
        let bias = g.param(self.output_bias);
        g.add_row(logits, bias)
    }

    /// Logits of one direction for a given memory.
    pub fn decode_direction(&self, memory: &Mat, tokens: &[usize], direction: Direction) -> Result<Mat> {
        let mut g = Graph::new(&self.params);
        let m = g.input(memory.clone());
        let (logits, _) = self.decode_var(&mut g, m, tokens, direction)?;
        Ok(g.value(logits).clone())
    }

    /// Summed forward and backward negative log-likelihood of one caption.
    pub fn bicaption_loss_var(&self, g: &mut Graph, memory: Var, tokens: &[usize]) -> Result<LossVars> {
        let (fl, ft) = self.decode_var(g, memory, tokens, Direction::Forward)?;
        let (bl, bt) = self.decode_var(g, memory, tokens, Direction::Backward)?;
        let forward = g.cross_entropy(fl, &ft);
        let backward = g.cross_entropy(bl, &bt);
        Ok(LossVars {
            total: g.add(forward, backward),
            forward,
            backward,
        })
    }

    pub fn bicaption_loss(&self, memory: &Mat, tokens: &[usize]) -> Result<LossBreakdown> {
        let mut g = Graph::new(&self.params);
        let m = g.input(memory.clone());
        let vars = self.bicaption_loss_var(&mut g, m, tokens)?;
        Ok(LossBreakdown {
            forward: g.scalar(vars.forward),
            backward: g.scalar(vars.backward),
            positions: tokens.len() - 1,
        })
    }

    /// Image-to-loss graph for one (image, caption) pair; `image` is channel-major.
    pub fn image_caption_loss<'a>(&'a self, image: &Mat, tokens: &[usize]) -> Result<(Graph<'a>, LossVars)> {
        let mut g = Graph::new(&self.params);
        let x = g.input(image.clone());
        let (f, _, _) = self.backbone.forward(&mut g, x)?;
        let memory = self.project_var(&mut g, f);
        let vars = self.bicaption_loss_var(&mut g, memory, tokens)?;
        Ok((g, vars))
    }

    /// Greedy left-to-right caption for an image, markers included.
    pub fn greedy_caption(&self, image: &ImageTensor) -> Result<Vec<usize>> {
        let features = self.visual_forward(image)?;
        let memory = self.project(&features);
        let mut tokens = vec![SOS_ID];
        while tokens.len() < self.config.max_len {
            let mut g = Graph::new(&self.params);
            let m = g.input(memory.clone());
            let logits = self.decode_inputs(&mut g, m, &tokens, Direction::Forward);
            let row = g.value(logits).row(tokens.len() - 1).to_owned();
            let next = row
                .iter()
                .enumerate()
                .skip(SOS_ID + 1)
                .fold(
                    (EOS_ID, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0;
            tokens.push(next);
            if next == EOS_ID {
                break;
            }
        }
        Ok(tokens)
    }
}

/// Spatial mean per channel: the retrieval embedding.
pub fn global_pool(features: &FeatureMap) -> Vec<f64> {
    let n = features.cells() as f64;
    features.data.rows().into_iter().map(|r| r.sum() / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 8,
            stem_channels: 4,
            stage_channels: vec![6],
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            vocab_size: 12,
            max_len: 12,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_data(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        tiny().validate().unwrap();
        let mut bad = tiny();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        assert_eq!(ModelConfig::default().grid(), (16, 8));
        assert_eq!(tiny().grid(), (4, 2));
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CaptionModel::new(tiny(), &mut rng).unwrap();
        let img = ImageTensor::from_data(16, 8, vec![0.0; 3 * 16 * 8]).unwrap();
        let f = model.visual_forward(&img).unwrap();
        assert_eq!((f.grid_h, f.grid_w, f.channels()), (4, 2, 6));
        assert!(f.data.iter().all(|v| v.is_finite()));
        assert_eq!(f, model.visual_forward(&img).unwrap());
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CaptionModel::new(tiny(), &mut rng).unwrap();
        let img = random_image(&mut rng, 8, 8);
        assert!(matches!(model.visual_forward(&img), Err(Error::Dimension(_))));
    }

    #[test]
    fn pooling_closed_forms() {
        let constant = FeatureMap {
            grid_h: 2,
            grid_w: 3,
            data: Mat::from_elem((4, 6), 0.25),
        };
        assert_eq!(global_pool(&constant), vec![0.25; 4]);
        let single = FeatureMap {
            grid_h: 1,
            grid_w: 1,
            data: Mat::from_shape_vec((3, 1), vec![1.0, -2.0, 3.5]).unwrap(),
        };
        assert_eq!(global_pool(&single), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn projection_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = tiny();
        cfg.hidden = 6;
        cfg.heads = 2;
        let mut model = CaptionModel::new(cfg, &mut rng).unwrap();
        let features = model.visual_forward(&random_image(&mut rng, 16, 8)).unwrap();

        *model.params.get_mut(model.projection_weight()) = Mat::eye(6);
        *model.params.get_mut(model.projection_bias()) = Mat::zeros((1, 6));
        assert_eq!(model.project(&features), features.data.t().to_owned());

        *model.params.get_mut(model.projection_weight()) = Mat::zeros((6, 6));
        assert!(model.project(&features).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlong_caption_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CaptionModel::new(tiny(), &mut rng).unwrap();
        let memory = Mat::zeros((8, 8));
        let mut tokens = vec![SOS_ID];
        tokens.extend(std::iter::repeat_n(5, 11));
        tokens.push(EOS_ID);
        assert!(matches!(
            model.decode_direction(&memory, &tokens, Direction::Forward),
            Err(Error::SequenceLength { len: 13, max: 12 })
        ));
    }

    #[test]
    fn uniform_logits_give_closed_form_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = CaptionModel::new(tiny(), &mut rng).unwrap();
        *model.params.get_mut(model.token_embedding()) = Mat::zeros((12, 8));
        let memory = Mat::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let tokens = [SOS_ID, 4, 5, 6, 7, 8, EOS_ID];
        let loss = model.bicaption_loss(&memory, &tokens).unwrap();
        assert!((loss.total() - 12.0 * 12f64.ln()).abs() < 1e-9);
        assert!((loss.total() - 29.818).abs() < 1e-3);
    }

    #[test]
    fn palindrome_backward_matches_forward_with_shared_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = CaptionModel::new(tiny(), &mut rng).unwrap();
        model.tie_backward_to_forward();
        let memory = Mat::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let tokens = [SOS_ID, 4, 7, 9, 7, 4, EOS_ID];
        let bwd = model.decode_direction(&memory, &tokens, Direction::Backward).unwrap();

        let reversed: Vec<usize> = tokens.iter().rev().copied().collect();
        let mut g = Graph::new(&model.params);
        let m = g.input(memory);
        let fwd = model.decode_inputs(&mut g, m, &reversed[..reversed.len() - 1], Direction::Forward);
        assert_eq!(&bwd, g.value(fwd));
    }
}

use std::collections::HashMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hooks::{CaptureKind, HookRegistry};
use super::{DiffusionError, Result};
use crate::intervention::{InterventionSpec, ResolvedIntervention, SiteCatalog};
use crate::tensor::{Element, Graph, NodeId, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Every hookable layer in forward order. Attention layers are present
/// only when the layout gives their stage at least one head.
pub const LAYER_ORDER: [&str; 13] = [
    "conv_in",
    "enc_early",
    "enc_middle",
    "enc_middle_attn",
    "enc_late",
    "mid_res1",
    "mid_attn",
    "mid_res2",
    "dec_early",
    "dec_middle",
    "dec_middle_attn",
    "dec_late",
    "conv_out",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionStage {
    EncoderMid,
    Bottleneck,
    DecoderMid,
}

pub const ATTENTION_STAGES: [AttentionStage; 3] =
    [AttentionStage::EncoderMid, AttentionStage::Bottleneck, AttentionStage::DecoderMid];

impl AttentionStage {
    pub fn layer_name(self) -> &'static str {
        match self {
            AttentionStage::EncoderMid => "enc_middle_attn",
            AttentionStage::Bottleneck => "mid_attn",
            AttentionStage::DecoderMid => "dec_middle_attn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHeads {
    pub stage: AttentionStage,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Attention width shared by all stages; must divide by each head count.
    pub hidden_dim: usize,
    pub attention_layout: Vec<StageHeads>,
    pub image_size: usize,
    pub channels: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            hidden_dim: 48,
            attention_layout: vec![
                StageHeads {
                    stage: AttentionStage::EncoderMid,
                    heads: 3,
                },
                StageHeads {
                    stage: AttentionStage::Bottleneck,
                    heads: 2,
                },
                StageHeads {
                    stage: AttentionStage::DecoderMid,
                    heads: 3,
                },
            ],
            image_size: 32,
            channels: 3,
            time_embed_dim: 64,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DiffusionError::Config(m));
        if self.channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 4", self.image_size));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim {} must be even", self.time_embed_dim));
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return bad(format!(
                "base_channels {} not divisible into {} norm groups",
                self.base_channels, self.norm_groups
            ));
        }
        for (i, sh) in self.attention_layout.iter().enumerate() {
            if self.attention_layout[..i].iter().any(|o| o.stage == sh.stage) {
                return bad(format!("attention stage {:?} listed twice", sh.stage));
            }
            if sh.heads == 0 {
                return bad(format!("attention stage {:?} has zero heads", sh.stage));
            }
            if self.hidden_dim == 0 || self.hidden_dim % sh.heads != 0 {
                return bad(format!(
                    "hidden_dim {} not divisible by {} heads at {:?}",
                    self.hidden_dim, sh.heads, sh.stage
                ));
            }
        }
        Ok(())
    }

    pub fn heads_at(&self, stage: AttentionStage) -> usize {
        self.attention_layout.iter().find(|s| s.stage == stage).map_or(0, |s| s.heads)
    }

    pub fn total_heads(&self) -> usize {
        self.attention_layout.iter().map(|s| s.heads).sum()
    }

    /// Global head range of a stage; heads are numbered encoder, bottleneck,
    /// decoder.
    pub fn head_range(&self, stage: AttentionStage) -> Range<usize> {
        let start: usize = ATTENTION_STAGES
            .iter()
            .take_while(|&&s| s != stage)
            .map(|&s| self.heads_at(s))
            .sum();
        start..start + self.heads_at(stage)
    }

    fn stage_of(layer: &str) -> Option<AttentionStage> {
        ATTENTION_STAGES.into_iter().find(|s| s.layer_name() == layer)
    }
}

/// Node ids of one residual block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ResBlockParams {
    pub norm_g: NodeId,
    pub norm_b: NodeId,
    pub conv_w: NodeId,
    pub conv_b: NodeId,
    pub temb_w: NodeId,
    pub temb_b: NodeId,
    pub skip_w: Option<NodeId>,
}

/// Node ids of one attention block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub norm_g: NodeId,
    pub norm_b: NodeId,
    pub q_w: NodeId,
    pub q_b: NodeId,
    pub k_w: NodeId,
    pub k_b: NodeId,
    pub v_w: NodeId,
    pub v_b: NodeId,
    pub o_w: NodeId,
    pub o_b: NodeId,
}

/// `relu(skip(x) + conv(relu(norm(x))) + W_t temb)`.
pub fn res_block<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    temb: NodeId,
    p: &ResBlockParams,
    groups: usize,
) -> Result<NodeId> {
    let h = g.group_norm(x, groups, E::of(NORM_EPS))?;
    let h = g.channel_affine(h, p.norm_g, p.norm_b)?;
    let h = g.relu(h);
    let h = g.conv2d(h, p.conv_w, 1)?;
    let h = g.add_channel_bias(h, p.conv_b)?;
    let e = g.matmul(temb, p.temb_w)?;
    let e = g.add_last_bias(e, p.temb_b)?;
    let h = g.add_batch_channel(h, e)?;
    let skip = match p.skip_w {
        Some(w) => g.conv2d(x, w, 0)?,
        None => x,
    };
    let y = g.add(skip, h)?;
    Ok(g.relu(y))
}

/// Hooks into the two per-head points of an attention block.
pub trait AttentionTaps<E: Element> {
    /// Row-softmaxed maps, `[B * H, N, N]`.
    fn maps(&mut self, g: &mut Graph<E>, probs: NodeId) -> Result<NodeId>;
    /// Per-head context vectors, `[B * H, N, d]`.
    fn head_outputs(&mut self, g: &mut Graph<E>, ctx: NodeId) -> Result<NodeId>;
}

pub struct NoTaps;

impl<E: Element> AttentionTaps<E> for NoTaps {
    fn maps(&mut self, _: &mut Graph<E>, probs: NodeId) -> Result<NodeId> {
        Ok(probs)
    }

    fn head_outputs(&mut self, _: &mut Graph<E>, ctx: NodeId) -> Result<NodeId> {
        Ok(ctx)
    }
}

/// Multi-head self-attention over spatial positions with a residual:
/// `relu(x + W_o attn(norm(x)))`.
pub fn attention_block<E: Element, T: AttentionTaps<E>>(
    g: &mut Graph<E>,
    x: NodeId,
    p: &AttentionParams,
    heads: usize,
    groups: usize,
    taps: &mut T,
) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (b, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    let n = hh * ww;
    let hidden = g.shape(p.q_w)[1];
    let d = hidden / heads;

    let xn = g.group_norm(x, groups, E::of(NORM_EPS))?;
    let xn = g.channel_affine(xn, p.norm_g, p.norm_b)?;
    let tokens = g.reshape(xn, &[b, c, n])?;
    let tokens = g.permute(tokens, &[0, 2, 1])?;
    let tokens = g.reshape(tokens, &[b * n, c])?;

    let project = |g: &mut Graph<E>, w: NodeId, bias: NodeId| -> Result<NodeId> {
        let y = g.matmul(tokens, w)?;
        let y = g.add_last_bias(y, bias)?;
        let y = g.reshape(y, &[b, n, heads, d])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        Ok(g.reshape(y, &[b * heads, n, d])?)
    };
    let q = project(g, p.q_w, p.q_b)?;
    let k = project(g, p.k_w, p.k_b)?;
    let v = project(g, p.v_w, p.v_b)?;

    let scores = g.bmm(q, k, false, true)?;
    let scores = g.mul_scalar(scores, E::of(1.0 / (d as f64).sqrt()));
    let probs = g.softmax_rows(scores)?;
    let probs = taps.maps(g, probs)?;
    let ctx = g.bmm(probs, v, false, false)?;
    let ctx = taps.head_outputs(g, ctx)?;

    let ctx = g.reshape(ctx, &[b, heads, n, d])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b * n, hidden])?;
    let out = g.matmul(ctx, p.o_w)?;
    let out = g.add_last_bias(out, p.o_b)?;
    let out = g.reshape(out, &[b, n, c])?;
    let out = g.permute(out, &[0, 2, 1])?;
    let out = g.reshape(out, &[b, c, hh, ww])?;
    let y = g.add(x, out)?;
    Ok(g.relu(y))
}

/// Sinusoidal features `[sin(t w_i), cos(t w_i)]`, `w_i = 10000^(-i / half)`.
pub fn timestep_features(ts: &[usize], dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let row_start = out.len();
        for i in 0..half {
            let w = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            out.push((t as f64 * w).sin() as f32);
        }
        for i in 0..half {
            let w = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            out.push((t as f64 * w).cos() as f32);
        }
        debug_assert_eq!(out.len() - row_start, dim);
    }
    Tensor::new(vec![ts.len(), dim], out).expect("sized above")
}

/// The denoiser `eps_hat = UNet(x_t, t)`.
///
/// Resolution levels S, S/2, S/4 with `C`, `2C`, `2C` channels. Skip
/// connections are additive.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

struct ParamBuilder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

impl ParamBuilder {
    fn normal(&mut self, name: String, shape: &[usize], std: f32) {
        let mut t = Tensor::randn(shape, &mut self.rng);
        t.data_mut().iter_mut().for_each(|v| *v *= std);
        self.names.push(name);
        self.params.push(t);
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f32) {
        self.names.push(name);
        self.params.push(Tensor::full(shape, v));
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, gain: f32) {
        let std = gain * (2.0 / (cin * k * k) as f32).sqrt();
        self.normal(format!("{prefix}.w"), &[cout, cin, k, k], std);
        self.fill(format!("{prefix}.b"), &[cout], 0.0);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.normal(format!("{prefix}.w"), &[fan_in, fan_out], (1.0 / fan_in as f32).sqrt());
        self.fill(format!("{prefix}.b"), &[fan_out], 0.0);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.fill(format!("{prefix}.g"), &[c], 1.0);
        self.fill(format!("{prefix}.b"), &[c], 0.0);
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, temb: usize) {
        self.norm(&format!("{name}.norm"), cin);
        self.conv(&format!("{name}.conv"), cout, cin, 3, 1.0);
        self.linear(&format!("{name}.temb"), temb, cout);
        if cin != cout {
            let std = (1.0 / cin as f32).sqrt();
            self.normal(format!("{name}.skip.w"), &[cout, cin, 1, 1], std);
        }
    }

    fn attn(&mut self, name: &str, c: usize, hidden: usize) {
        self.norm(&format!("{name}.norm"), c);
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.{p}"), c, hidden);
        }
        self.linear(&format!("{name}.o"), hidden, c);
    }
}

/// Parameter node ids for one forward.
struct Bound<'a> {
    ids: Vec<NodeId>,
    index: &'a HashMap<String, usize>,
}

impl Bound<'_> {
    fn get(&self, name: &str) -> NodeId {
        self.ids[self.index[name]]
    }

    fn res(&self, name: &str) -> ResBlockParams {
        let skip = format!("{name}.skip.w");
        ResBlockParams {
            norm_g: self.get(&format!("{name}.norm.g")),
            norm_b: self.get(&format!("{name}.norm.b")),
            conv_w: self.get(&format!("{name}.conv.w")),
            conv_b: self.get(&format!("{name}.conv.b")),
            temb_w: self.get(&format!("{name}.temb.w")),
            temb_b: self.get(&format!("{name}.temb.b")),
            skip_w: self.index.get(&skip).map(|&i| self.ids[i]),
        }
    }

    fn attn(&self, name: &str) -> AttentionParams {
        let f = |s: &str| self.get(&format!("{name}.{s}"));
        AttentionParams {
            norm_g: f("norm.g"),
            norm_b: f("norm.b"),
            q_w: f("q.w"),
            q_b: f("q.b"),
            k_w: f("k.w"),
            k_b: f("k.b"),
            v_w: f("v.w"),
            v_b: f("v.b"),
            o_w: f("o.w"),
            o_b: f("o.b"),
        }
    }
}

/// Applies interventions and records captures at each named site.
struct Sites<'a> {
    hooks: Option<&'a mut HookRegistry>,
    edits: Option<&'a ResolvedIntervention>,
    timestep: u32,
}

impl Sites<'_> {
    fn activation<E: Element>(&mut self, g: &mut Graph<E>, layer: &str, x: NodeId) -> Result<NodeId> {
        let mut x = x;
        if let Some(edits) = self.edits {
            let v = g.value(x);
            if let Some(co) = edits.activation(layer, v.shape(), v.data()) {
                x = g.affine_const(x, co.scale, co.shift)?;
            }
        }
        if let Some(h) = self.hooks.as_deref_mut() {
            if h.wants(layer, CaptureKind::Activation) {
                h.capture_activation(layer, self.timestep, g.value(x));
            }
        }
        Ok(x)
    }
}

struct StageTaps<'s, 'a> {
    sites: &'s mut Sites<'a>,
    layer: &'static str,
    heads: usize,
    head_base: usize,
}

impl<E: Element> AttentionTaps<E> for StageTaps<'_, '_> {
    fn maps(&mut self, g: &mut Graph<E>, probs: NodeId) -> Result<NodeId> {
        let mut probs = probs;
        if let Some(edits) = self.sites.edits {
            let shape = g.shape(probs).to_vec();
            if let Some(co) = edits.attention_maps::<E>(self.layer, self.heads, &shape) {
                probs = g.affine_const(probs, co.scale, co.shift)?;
            }
        }
        if let Some(h) = self.sites.hooks.as_deref_mut() {
            if h.wants(self.layer, CaptureKind::Attention) {
                h.capture_attention(self.layer, self.sites.timestep, self.head_base, self.heads, g.value(probs));
            }
        }
        Ok(probs)
    }

    fn head_outputs(&mut self, g: &mut Graph<E>, ctx: NodeId) -> Result<NodeId> {
        if let Some(edits) = self.sites.edits {
            let v = g.value(ctx);
            if let Some(co) = edits.head_outputs(self.layer, self.heads, v.shape(), v.data()) {
                return Ok(g.affine_const(ctx, co.scale, co.shift)?);
            }
        }
        Ok(ctx)
    }
}

impl SiteCatalog for UNet {
    fn has_layer(&self, name: &str) -> bool {
        self.layer_names().iter().any(|l| l == name)
    }

    fn attention_heads(&self, name: &str) -> Option<Range<usize>> {
        let stage = UNetConfig::stage_of(name)?;
        let r = self.config.head_range(stage);
        (!r.is_empty()).then_some(r)
    }
}

impl UNet {
    /// Freshly initialized network.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let td = config.time_embed_dim;
        let hidden = config.hidden_dim;
        let mut pb = ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            params: Vec::new(),
        };
        pb.linear("time.fc1", td, td);
        pb.linear("time.fc2", td, td);
        pb.conv("conv_in", c, config.channels, 3, 1.0);
        pb.res("enc_early", c, c, td);
        pb.res("enc_middle", c, 2 * c, td);
        if config.heads_at(AttentionStage::EncoderMid) > 0 {
            pb.attn("enc_middle_attn", 2 * c, hidden);
        }
        pb.res("enc_late", 2 * c, 2 * c, td);
        pb.res("mid_res1", 2 * c, 2 * c, td);
        if config.heads_at(AttentionStage::Bottleneck) > 0 {
            pb.attn("mid_attn", 2 * c, hidden);
        }
        pb.res("mid_res2", 2 * c, 2 * c, td);
        pb.res("dec_early", 2 * c, 2 * c, td);
        pb.res("dec_middle", 2 * c, c, td);
        if config.heads_at(AttentionStage::DecoderMid) > 0 {
            pb.attn("dec_middle_attn", c, hidden);
        }
        pb.res("dec_late", c, c, td);
        pb.norm("conv_out.norm", c);
        pb.conv("conv_out.conv", config.channels, c, 3, 0.5);
        Self::from_parts(config, pb.names, pb.params)
    }

    /// Rebuilds a network from named parameters, checking names and shapes
    /// against a fresh initialization of `config`.
    pub fn from_parts(config: UNetConfig, names: Vec<String>, params: Vec<Tensor<f32>>) -> Result<Self> {
        if names.len() != params.len() {
            return Err(DiffusionError::Config("name/parameter count mismatch".into()));
        }
        let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        if index.len() != names.len() {
            return Err(DiffusionError::Config("duplicate parameter names".into()));
        }
        Ok(UNet {
            config,
            names,
            params,
            index,
        })
    }

    pub fn with_params(&self, params: Vec<Tensor<f32>>) -> Result<Self> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(DiffusionError::Config("parameter shapes do not match the model".into()));
        }
        Self::from_parts(self.config.clone(), self.names.clone(), params)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Hookable layers present in this configuration, in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        LAYER_ORDER
            .iter()
            .filter(|l| UNetConfig::stage_of(l).is_none_or(|s| self.config.heads_at(s) > 0))
            .map(|l| l.to_string())
            .collect()
    }

    pub fn attention_layers(&self) -> Vec<String> {
        ATTENTION_STAGES
            .iter()
            .filter(|s| self.config.heads_at(**s) > 0)
            .map(|s| s.layer_name().to_string())
            .collect()
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let c = &self.config;
        let s = x.shape();
        if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(DiffusionError::Shape(format!(
                "expected [B, {}, {}, {}], got {:?}",
                c.channels, c.image_size, c.image_size, s
            )));
        }
        Ok(())
    }

    /// Inserts the parameters into `g`, cast to `E`.
    fn bind<E: Element>(&self, g: &mut Graph<E>, trainable: bool) -> Bound<'_> {
        let ids = self
            .params
            .iter()
            .map(|p| {
                let t = p.cast::<E>();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Bound { ids, index: &self.index }
    }

    fn build<E: Element>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound<'_>,
        x: NodeId,
        ts: &[usize],
        sites: &mut Sites<'_>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let groups = cfg.norm_groups;

        let feats = g.constant(timestep_features(ts, cfg.time_embed_dim).cast::<E>());
        let temb = g.matmul(feats, bound.get("time.fc1.w"))?;
        let temb = g.add_last_bias(temb, bound.get("time.fc1.b"))?;
        let temb = g.silu(temb);
        let temb = g.matmul(temb, bound.get("time.fc2.w"))?;
        let temb = g.add_last_bias(temb, bound.get("time.fc2.b"))?;
        let temb = g.silu(temb);

        let h = g.conv2d(x, bound.get("conv_in.w"), 1)?;
        let h = g.add_channel_bias(h, bound.get("conv_in.b"))?;
        let h = g.relu(h);
        let h0 = sites.activation(g, "conv_in", h)?;

        let res = |g: &mut Graph<E>, sites: &mut Sites<'_>, name: &str, x: NodeId| -> Result<NodeId> {
            let y = res_block(g, x, temb, &bound.res(name), groups)?;
            sites.activation(g, name, y)
        };
        let attn = |g: &mut Graph<E>, sites: &mut Sites<'_>, stage: AttentionStage, x: NodeId| -> Result<NodeId> {
            let heads = cfg.heads_at(stage);
            if heads == 0 {
                return Ok(x);
            }
            let layer = stage.layer_name();
            let mut taps = StageTaps {
                sites,
                layer,
                heads,
                head_base: cfg.head_range(stage).start,
            };
            let y = attention_block(g, x, &bound.attn(layer), heads, groups, &mut taps)?;
            sites.activation(g, layer, y)
        };

        let e1 = res(g, sites, "enc_early", h0)?;
        let p1 = g.avg_pool2(e1)?;
        let e2 = res(g, sites, "enc_middle", p1)?;
        let e2 = attn(g, sites, AttentionStage::EncoderMid, e2)?;
        let p2 = g.avg_pool2(e2)?;
        let e3 = res(g, sites, "enc_late", p2)?;

        let m = res(g, sites, "mid_res1", e3)?;
        let m = attn(g, sites, AttentionStage::Bottleneck, m)?;
        let m = res(g, sites, "mid_res2", m)?;

        let d1 = g.add(m, e3)?;
        let d1 = res(g, sites, "dec_early", d1)?;
        let u1 = g.upsample2(d1)?;
        let d2 = g.add(u1, e2)?;
        let d2 = res(g, sites, "dec_middle", d2)?;
        let d2 = attn(g, sites, AttentionStage::DecoderMid, d2)?;
        let u2 = g.upsample2(d2)?;
        let d3 = g.add(u2, e1)?;
        let d3 = res(g, sites, "dec_late", d3)?;

        let o = g.group_norm(d3, groups, E::of(NORM_EPS))?;
        let o = g.channel_affine(o, bound.get("conv_out.norm.g"), bound.get("conv_out.norm.b"))?;
        let o = g.relu(o);
        let o = g.conv2d(o, bound.get("conv_out.conv.w"), 1)?;
        let o = g.add_channel_bias(o, bound.get("conv_out.conv.b"))?;
        sites.activation(g, "conv_out", o)
    }

    /// Predicted noise for a batch at a shared timestep. Subscribed hooks
    /// receive one capture per site; `intervention` edits its sites before
    /// downstream use.
    pub fn forward(
        &self,
        x_t: &Tensor<f32>,
        t: usize,
        hooks: Option<&mut HookRegistry>,
        intervention: Option<&InterventionSpec>,
    ) -> Result<Tensor<f32>> {
        self.check_input(x_t)?;
        let resolved = intervention
            .map(|spec| spec.resolve(self).map_err(|e| DiffusionError::Intervention(e.to_string())))
            .transpose()?;
        if let Some(h) = hooks.as_deref() {
            h.check_against(self)?;
        }
        let ts = vec![t; x_t.shape()[0]];
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let mut sites = Sites {
            hooks,
            edits: resolved.as_ref().filter(|r| !r.is_empty()),
            timestep: t as u32,
        };
        let out = self.build(&mut g, &bound, x, &ts, &mut sites)?;
        Ok(g.value(out).clone())
    }

    /// Predicted noise with a timestep per example; no hooks or edits.
    pub fn predict(&self, x_t: &Tensor<f32>, ts: &[usize]) -> Result<Tensor<f32>> {
        self.check_input(x_t)?;
        if ts.len() != x_t.shape()[0] {
            return Err(DiffusionError::Shape(format!("{} timesteps for batch of {}", ts.len(), x_t.shape()[0])));
        }
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let mut sites = Sites {
            hooks: None,
            edits: None,
            timestep: 0,
        };
        let out = self.build(&mut g, &bound, x, ts, &mut sites)?;
        Ok(g.value(out).clone())
    }

    /// Noise-prediction MSE and its gradient with respect to every
    /// parameter, in parameter order.
    pub fn loss_and_grads(&self, x_t: &Tensor<f32>, ts: &[usize], eps: &Tensor<f32>) -> Result<(f32, Vec<Vec<f32>>)> {
        self.check_input(x_t)?;
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g, true);
        let x = g.constant(x_t.clone());
        let mut sites = Sites {
            hooks: None,
            edits: None,
            timestep: 0,
        };
        let out = self.build(&mut g, &bound, x, ts, &mut sites)?;
        let target = g.constant(eps.clone());
        let loss = g.mse(out, target)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let grads = bound
            .ids
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| g.grad(id).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
            .collect();
        Ok((value, grads))
    }

    /// Noise-prediction MSE over caller-supplied parameter nodes (in
    /// parameter order), for gradient checks in any precision.
    pub fn loss_with_params<E: Element>(
        &self,
        g: &mut Graph<E>,
        params: &[NodeId],
        x_t: NodeId,
        ts: &[usize],
        eps: NodeId,
    ) -> Result<NodeId> {
        if params.len() != self.params.len() {
            return Err(DiffusionError::Config(format!(
                "{} parameter nodes for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let bound = Bound {
            ids: params.to_vec(),
            index: &self.index,
        };
        let mut sites = Sites {
            hooks: None,
            edits: None,
            timestep: 0,
        };
        let out = self.build(g, &bound, x_t, ts, &mut sites)?;
        Ok(g.mse(out, eps)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::Target;
    use crate::tensor::grad_check_params;

    fn tiny_config() -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            hidden_dim: 12,
            image_size: 8,
            channels: 1,
            time_embed_dim: 8,
            norm_groups: 2,
            ..UNetConfig::default()
        }
    }

    fn input(cfg: &UNetConfig, b: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[b, cfg.channels, cfg.image_size, cfg.image_size], &mut rng)
    }

    #[test]
    fn default_config_is_valid_and_has_eight_heads() {
        let cfg = UNetConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.total_heads(), 8);
        assert_eq!(cfg.head_range(AttentionStage::Bottleneck), 3..5);
        assert_eq!(cfg.head_range(AttentionStage::DecoderMid), 5..8);
    }

    #[test]
    fn config_rejects_indivisible_hidden_dim() {
        let cfg = UNetConfig {
            hidden_dim: 64,
            ..UNetConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(DiffusionError::Config(_))));
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = tiny_config();
        let net = UNet::new(cfg.clone(), 0).unwrap();
        let x = input(&cfg, 2, 1);
        let y = net.forward(&x, 3, None, None).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }

    #[test]
    fn hooks_do_not_change_output_and_fire_once() {
        let cfg = tiny_config();
        let net = UNet::new(cfg.clone(), 0).unwrap();
        let x = input(&cfg, 2, 1);
        let plain = net.forward(&x, 5, None, None).unwrap();
        let mut hooks = HookRegistry::new();
        hooks.subscribe_all(&net);
        let hooked = net.forward(&x, 5, Some(&mut hooks), None).unwrap();
        assert_eq!(plain, hooked);
        let recs = hooks.take_records();
        let attn = recs.iter().filter(|r| r.kind == crate::trace::RecordKind::Attention).count();
        let acts = recs.iter().filter(|r| r.kind == crate::trace::RecordKind::Activation).count();
        assert_eq!(attn, 8);
        assert_eq!(acts, net.layer_names().len());
    }

    #[test]
    fn identity_interventions_are_bit_identical() {
        let cfg = tiny_config();
        let net = UNet::new(cfg.clone(), 0).unwrap();
        let x = input(&cfg, 2, 1);
        let base = net.forward(&x, 5, None, None).unwrap();
        for spec in [
            InterventionSpec::FeatureScaling {
                target: Target::layer("mid_res1"),
                scale: 1.0,
            },
            InterventionSpec::AttentionPerturbation {
                target: Target::layer("mid_attn"),
                blend: 0.0,
            },
            InterventionSpec::CircuitInterruption {
                nodes: vec![],
                mode: Default::default(),
            },
        ] {
            assert_eq!(net.forward(&x, 5, None, Some(&spec)).unwrap(), base);
        }
        let ablate = InterventionSpec::LayerAblation {
            target: Target::layer("mid_res2"),
            mode: Default::default(),
        };
        assert_ne!(net.forward(&x, 5, None, Some(&ablate)).unwrap(), base);
    }

    #[test]
    fn unknown_targets_are_errors() {
        let cfg = tiny_config();
        let net = UNet::new(cfg.clone(), 0).unwrap();
        let x = input(&cfg, 1, 1);
        let spec = InterventionSpec::LayerAblation {
            target: Target::layer("nope"),
            mode: Default::default(),
        };
        assert!(matches!(net.forward(&x, 1, None, Some(&spec)), Err(DiffusionError::Intervention(_))));
        let spec = InterventionSpec::LayerAblation {
            target: Target::head("mid_attn", 0),
            mode: Default::default(),
        };
        assert!(net.forward(&x, 1, None, Some(&spec)).is_err());
    }

    #[test]
    fn full_perturbation_makes_maps_uniform() {
        let cfg = tiny_config();
        let net = UNet::new(cfg.clone(), 0).unwrap();
        let x = input(&cfg, 2, 1);
        let spec = InterventionSpec::AttentionPerturbation {
            target: Target::layer("enc_middle_attn"),
            blend: 1.0,
        };
        let mut hooks = HookRegistry::new();
        hooks.subscribe(&net, "enc_middle_attn", CaptureKind::Attention).unwrap();
        net.forward(&x, 2, Some(&mut hooks), Some(&spec)).unwrap();
        let recs = hooks.take_records();
        assert_eq!(recs.len(), 3);
        for r in recs {
            let k = *r.shape.last().unwrap() as f32;
            assert!(r.payload.iter().all(|&v| (v - 1.0 / k).abs() < 1e-7));
        }
    }

    #[test]
    fn whole_network_gradients_match_finite_differences() {
        let cfg = UNetConfig {
            base_channels: 2,
            hidden_dim: 6,
            image_size: 4,
            channels: 1,
            time_embed_dim: 4,
            norm_groups: 1,
            ..UNetConfig::default()
        };
        let net = UNet::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn_f64(&[1, 1, 4, 4], &mut rng);
        let eps = Tensor::randn_f64(&[1, 1, 4, 4], &mut rng);
        for name in ["conv_in.w", "mid_attn.q.w", "dec_late.temb.w", "conv_out.conv.b"] {
            let i = net.param_names().iter().position(|n| n == name).unwrap();
            let err = grad_check_params(
                |g, leaf| {
                    let ids: Vec<NodeId> = net
                        .params()
                        .iter()
                        .enumerate()
                        .map(|(j, p)| if j == i { leaf[0] } else { g.constant(p.cast::<f64>()) })
                        .collect();
                    let xn = g.constant(x.clone());
                    let en = g.constant(eps.clone());
                    net.loss_with_params(g, &ids, xn, &[7], en).map_err(|e| crate::tensor::TensorError::Invalid {
                        op: "unet",
                        msg: e.to_string(),
                    })
                },
                &[net.params()[i].cast::<f64>()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-3, "{name}: {err}");
        }
    }
}

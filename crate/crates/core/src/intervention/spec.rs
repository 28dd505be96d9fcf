use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{InterventionError, Result};
use crate::tensor::Element;

/// A network site: a layer, optionally narrowed to one attention head.
/// Head indices are global across the network (0..8 in the default layout).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Target {
    pub layer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
}

impl Target {
    pub fn layer(name: impl Into<String>) -> Self {
        Target {
            layer: name.into(),
            head: None,
        }
    }

    pub fn head(name: impl Into<String>, head: usize) -> Self {
        Target {
            layer: name.into(),
            head: Some(head),
        }
    }

    pub fn label(&self) -> String {
        match self.head {
            Some(h) => format!("{}#{h}", self.layer),
            None => self.layer.clone(),
        }
    }
}

/// What replaces an ablated site.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Zero,
    /// Per-channel (or per-feature) batch mean of the site's own output.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterventionSpec {
    LayerAblation {
        target: Target,
        #[serde(default)]
        mode: AblationMode,
    },
    /// `A' = (1 - blend) * A + blend * uniform`.
    AttentionPerturbation { target: Target, blend: f64 },
    /// `F' = scale * F`.
    FeatureScaling { target: Target, scale: f64 },
    /// Ablates every listed site jointly.
    CircuitInterruption {
        nodes: Vec<Target>,
        #[serde(default)]
        mode: AblationMode,
    },
}

impl InterventionSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            InterventionSpec::LayerAblation { .. } => "layer_ablation",
            InterventionSpec::AttentionPerturbation { .. } => "attention_perturbation",
            InterventionSpec::FeatureScaling { .. } => "feature_scaling",
            InterventionSpec::CircuitInterruption { .. } => "circuit_interruption",
        }
    }

    pub fn target_label(&self) -> String {
        match self {
            InterventionSpec::LayerAblation { target, .. }
            | InterventionSpec::AttentionPerturbation { target, .. }
            | InterventionSpec::FeatureScaling { target, .. } => target.label(),
            InterventionSpec::CircuitInterruption { nodes, .. } => {
                nodes.iter().map(Target::label).collect::<Vec<_>>().join("+")
            }
        }
    }

    /// Checks parameters and target names, producing per-site edits.
    pub fn resolve(&self, sites: &dyn SiteCatalog) -> Result<ResolvedIntervention> {
        let mut edits = Vec::new();
        let mut push = |target: &Target, edit: Edit, needs_attention: bool| -> Result<()> {
            let site = resolve_target(sites, target, needs_attention)?;
            if !edit.is_identity() {
                edits.push((site, edit));
            }
            Ok(())
        };
        match self {
            InterventionSpec::LayerAblation { target, mode } => push(target, Edit::ablate(*mode), false)?,
            InterventionSpec::AttentionPerturbation { target, blend } => {
                if !(0.0..=1.0).contains(blend) {
                    return Err(InterventionError::InvalidParam(format!("blend {blend} outside [0, 1]")));
                }
                push(target, Edit::Blend(*blend), true)?
            }
            InterventionSpec::FeatureScaling { target, scale } => {
                if !scale.is_finite() || *scale < 0.0 {
                    return Err(InterventionError::InvalidParam(format!("scale {scale} must be finite and >= 0")));
                }
                push(target, Edit::Scale(*scale), false)?
            }
            InterventionSpec::CircuitInterruption { nodes, mode } => {
                for n in nodes {
                    push(n, Edit::ablate(*mode), false)?;
                }
            }
        }
        Ok(ResolvedIntervention { edits })
    }
}

/// Names the sites a model exposes.
pub trait SiteCatalog {
    fn has_layer(&self, name: &str) -> bool;
    /// Global head range of an attention layer.
    fn attention_heads(&self, name: &str) -> Option<Range<usize>>;
}

fn resolve_target(sites: &dyn SiteCatalog, target: &Target, needs_attention: bool) -> Result<Site> {
    if !sites.has_layer(&target.layer) {
        return Err(InterventionError::UnknownTarget(target.layer.clone()));
    }
    let heads = sites.attention_heads(&target.layer);
    if needs_attention && heads.is_none() {
        return Err(InterventionError::NotAttention(target.layer.clone()));
    }
    let local = match target.head {
        None => None,
        Some(h) => {
            let range = heads.ok_or_else(|| InterventionError::NotAttention(target.layer.clone()))?;
            if !range.contains(&h) {
                return Err(InterventionError::InvalidHead {
                    layer: target.layer.clone(),
                    head: h,
                    range,
                });
            }
            Some(h - range.start)
        }
    };
    Ok(Site {
        layer: target.layer.clone(),
        local_head: local,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Site {
    layer: String,
    local_head: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Edit {
    Zero,
    Mean,
    Scale(f64),
    Blend(f64),
}

impl Edit {
    fn ablate(mode: AblationMode) -> Self {
        match mode {
            AblationMode::Zero => Edit::Zero,
            AblationMode::Mean => Edit::Mean,
        }
    }

    fn is_identity(&self) -> bool {
        matches!(*self, Edit::Scale(s) if s == 1.0) || matches!(*self, Edit::Blend(a) if a == 0.0)
    }
}

/// Per-element `(scale, shift)` coefficients, composed edit by edit.
pub struct Coefficients<E> {
    pub scale: Vec<E>,
    pub shift: Vec<E>,
}

/// Edits bound to concrete sites. Identity edits are dropped, so an
/// identity intervention leaves the forward graph untouched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResolvedIntervention {
    edits: Vec<(Site, Edit)>,
}

impl ResolvedIntervention {
    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    fn matching<'a>(&'a self, layer: &'a str) -> impl Iterator<Item = (Option<usize>, Edit)> + 'a {
        self.edits
            .iter()
            .filter(move |(s, _)| s.layer == layer)
            .map(|(s, e)| (s.local_head, *e))
    }

    /// Whole-layer edits for an activation of shape `[B, C, ...]`.
    pub fn activation<E: Element>(&self, layer: &str, shape: &[usize], data: &[E]) -> Option<Coefficients<E>> {
        let edits: Vec<Edit> = self
            .matching(layer)
            .filter(|(h, e)| h.is_none() && !matches!(e, Edit::Blend(_)))
            .map(|(_, e)| e)
            .collect();
        if edits.is_empty() {
            return None;
        }
        let b = shape[0];
        let c = shape.get(1).copied().unwrap_or(1);
        let sp = data.len() / (b * c).max(1);
        let mut co = identity(data.len());
        for e in edits {
            let means = matches!(e, Edit::Mean).then(|| {
                (0..c)
                    .map(|ci| {
                        let mut s = 0.0;
                        for bi in 0..b {
                            let base = (bi * c + ci) * sp;
                            s += data[base..base + sp].iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                        s / (b * sp).max(1) as f64
                    })
                    .collect::<Vec<_>>()
            });
            let per = |i: usize| (i / sp) % c;
            apply(&mut co, e, 0..data.len(), |i| means.as_ref().map_or(0.0, |m| m[per(i)]));
        }
        Some(co)
    }

    /// Per-head edits on head outputs laid out `[B * H, N, d]`.
    pub fn head_outputs<E: Element>(&self, layer: &str, heads: usize, shape: &[usize], data: &[E]) -> Option<Coefficients<E>> {
        let edits: Vec<(usize, Edit)> = self
            .matching(layer)
            .filter_map(|(h, e)| h.map(|h| (h, e)))
            .filter(|(_, e)| !matches!(e, Edit::Blend(_)))
            .collect();
        if edits.is_empty() {
            return None;
        }
        let (bh, n, d) = (shape[0], shape[1], shape[2]);
        let b = bh / heads;
        let mut co = identity(data.len());
        for (h, e) in edits {
            let means = matches!(e, Edit::Mean).then(|| {
                let mut m = vec![0.0; d];
                for bi in 0..b {
                    let base = (bi * heads + h) * n * d;
                    for (i, v) in data[base..base + n * d].iter().enumerate() {
                        m[i % d] += v.as_f64();
                    }
                }
                m.iter().map(|s| s / (b * n).max(1) as f64).collect::<Vec<_>>()
            });
            for bi in 0..b {
                let base = (bi * heads + h) * n * d;
                apply(&mut co, e, base..base + n * d, |i| means.as_ref().map_or(0.0, |m| m[(i - base) % d]));
            }
        }
        Some(co)
    }

    /// Blends on attention maps laid out `[B * H, Q, K]`.
    pub fn attention_maps<E: Element>(&self, layer: &str, heads: usize, shape: &[usize]) -> Option<Coefficients<E>> {
        let edits: Vec<(Option<usize>, f64)> = self
            .matching(layer)
            .filter_map(|(h, e)| match e {
                Edit::Blend(a) => Some((h, a)),
                _ => None,
            })
            .collect();
        if edits.is_empty() {
            return None;
        }
        let (bh, q, k) = (shape[0], shape[1], shape[2]);
        let mut co = identity(bh * q * k);
        for (h, a) in edits {
            for slab in 0..bh {
                if h.is_some_and(|h| slab % heads != h) {
                    continue;
                }
                let range = slab * q * k..(slab + 1) * q * k;
                apply(&mut co, Edit::Blend(a), range, |_| a / k as f64);
            }
        }
        Some(co)
    }
}

fn identity<E: Element>(n: usize) -> Coefficients<E> {
    Coefficients {
        scale: vec![E::one(); n],
        shift: vec![E::zero(); n],
    }
}

/// Composes `x -> s * x + b` onto the existing coefficients over `range`.
/// For `Mean` and `Blend`, `fill(i)` supplies the additive term.
fn apply<E: Element>(co: &mut Coefficients<E>, edit: Edit, range: Range<usize>, fill: impl Fn(usize) -> f64) {
    for i in range {
        let (s, b) = match edit {
            Edit::Zero => (0.0, 0.0),
            Edit::Mean => (0.0, fill(i)),
            Edit::Scale(s) => (s, 0.0),
            Edit::Blend(a) => (1.0 - a, fill(i)),
        };
        co.scale[i] = co.scale[i] * E::of(s);
        co.shift[i] = co.shift[i] * E::of(s) + E::of(b);
    }
}

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::unet::UNet;
use super::{DiffusionError, Result};
use crate::intervention::SiteCatalog;
use crate::tensor::{Element, Tensor};
use crate::trace::{RecordKind, TraceRecord, NO_HEAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureKind {
    Activation,
    Attention,
}

/// Capture subscriptions plus the records they produced.
///
/// Activations are captured whole (`[B, C, H, W]`); attention is split per
/// head into `[B, N, N]` records tagged with the global head index.
#[derive(Debug, Clone, Default)]
pub struct HookRegistry {
    subscriptions: BTreeSet<(String, CaptureKind)>,
    records: Vec<TraceRecord>,
    batch_index: u32,
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, model: &UNet, layer: &str, kind: CaptureKind) -> Result<()> {
        check(model, layer, kind)?;
        self.subscriptions.insert((layer.to_string(), kind));
        Ok(())
    }

    /// Every activation site and every attention stage.
    pub fn subscribe_all(&mut self, model: &UNet) {
        for layer in model.layer_names() {
            self.subscriptions.insert((layer, CaptureKind::Activation));
        }
        for layer in model.attention_layers() {
            self.subscriptions.insert((layer, CaptureKind::Attention));
        }
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &(String, CaptureKind)> {
        self.subscriptions.iter()
    }

    /// Tag for subsequent records, e.g. the evaluation batch number.
    pub fn set_batch_index(&mut self, index: u32) {
        self.batch_index = index;
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.records)
    }

    pub(crate) fn check_against(&self, model: &UNet) -> Result<()> {
        self.subscriptions.iter().try_for_each(|(l, k)| check(model, l, *k))
    }

    pub(crate) fn wants(&self, layer: &str, kind: CaptureKind) -> bool {
        // Avoid allocating on the hot path for the common empty case.
        !self.subscriptions.is_empty() && self.subscriptions.contains(&(layer.to_string(), kind))
    }

    pub(crate) fn capture_activation<E: Element>(&mut self, layer: &str, t: u32, value: &Tensor<E>) {
        self.records.push(TraceRecord {
            name: layer.to_string(),
            kind: RecordKind::Activation,
            timestep: t,
            head: NO_HEAD,
            batch_index: self.batch_index,
            shape: value.shape().to_vec(),
            payload: value.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }

    /// Splits `[B * H, N, N]` maps into one record per head.
    pub(crate) fn capture_attention<E: Element>(
        &mut self,
        layer: &str,
        t: u32,
        head_base: usize,
        heads: usize,
        maps: &Tensor<E>,
    ) {
        let s = maps.shape();
        let (bh, q, k) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let slab = q * k;
        for h in 0..heads {
            let mut payload = Vec::with_capacity(b * slab);
            for bi in 0..b {
                let start = (bi * heads + h) * slab;
                payload.extend(maps.data()[start..start + slab].iter().map(|v| v.as_f64() as f32));
            }
            self.records.push(TraceRecord {
                name: layer.to_string(),
                kind: RecordKind::Attention,
                timestep: t,
                head: (head_base + h) as u16,
                batch_index: self.batch_index,
                shape: vec![b, q, k],
                payload,
            });
        }
    }
}

fn check(model: &UNet, layer: &str, kind: CaptureKind) -> Result<()> {
    let ok = match kind {
        CaptureKind::Activation => model.has_layer(layer),
        CaptureKind::Attention => model.attention_heads(layer).is_some(),
    };
    if ok {
        Ok(())
    } else {
        Err(DiffusionError::UnknownHook(format!("{layer} ({kind:?})")))
    }
}

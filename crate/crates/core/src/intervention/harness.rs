use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::{AblationMode, InterventionSpec, Target};
use super::{InterventionError, Result};
use crate::diffusion::{EvalBatch, NoiseSchedule, UNet};
use crate::tensor::Tensor;

pub const IMPACT_CSV_HEADER: [&str; 9] = [
    "kind",
    "target",
    "timestep",
    "baseline_mse",
    "intervened_mse",
    "impact",
    "rank",
    "n",
    "seed",
];

/// `(intervened - baseline) / baseline`.
pub fn impact_from_mse(baseline_mse: f64, intervened_mse: f64) -> Result<f64> {
    if baseline_mse <= 0.0 {
        return Err(InterventionError::ZeroBaseline);
    }
    Ok((intervened_mse - baseline_mse) / baseline_mse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactResult {
    pub kind: String,
    pub target: String,
    pub spec: InterventionSpec,
    pub timestep: usize,
    pub baseline_mse: f64,
    pub intervened_mse: f64,
    pub impact: f64,
    pub n: usize,
    /// 1 = largest impact within its table and timestep.
    pub rank: Option<usize>,
    pub seed: u64,
}

/// Named set of layers ablated together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationGroup {
    pub name: String,
    pub layers: Vec<String>,
}

impl AblationGroup {
    pub fn spec(&self) -> InterventionSpec {
        InterventionSpec::CircuitInterruption {
            nodes: self.layers.iter().map(Target::layer).collect(),
            mode: AblationMode::Zero,
        }
    }
}

/// The seven encoder/middle/decoder groups covering every interior block.
/// The input and output convolutions are left out.
pub fn ablation_groups(model: &UNet) -> Vec<AblationGroup> {
    let present = model.layer_names();
    let group = |name: &str, layers: &[&str]| AblationGroup {
        name: name.to_string(),
        layers: layers
            .iter()
            .filter(|l| present.iter().any(|p| p == *l))
            .map(|l| l.to_string())
            .collect(),
    };
    vec![
        group("encoder_early", &["enc_early"]),
        group("encoder_middle", &["enc_middle", "enc_middle_attn"]),
        group("encoder_late", &["enc_late"]),
        group("middle", &["mid_res1", "mid_attn", "mid_res2"]),
        group("decoder_early", &["dec_early"]),
        group("decoder_middle", &["dec_middle", "dec_middle_attn"]),
        group("decoder_late", &["dec_late"]),
    ]
}

/// Element-mean noise-prediction MSE on the evaluation batch at `t`.
fn eval_mse(
    model: &UNet,
    eval: &EvalBatch,
    sched: &NoiseSchedule,
    t: usize,
    spec: Option<&InterventionSpec>,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(InterventionError::EmptyEvalSet);
    }
    let x_t = eval.noised(sched, t)?;
    let pred = EvalBatch::chunked(&x_t, |x, _| model.forward(x, t, None, spec))?;
    Ok(mse(&pred, &eval.eps))
}

fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.numel() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n
}

struct Scorer<'a> {
    model: &'a UNet,
    eval: &'a EvalBatch,
    sched: &'a NoiseSchedule,
    seed: u64,
}

impl Scorer<'_> {
    fn baseline(&self, t: usize) -> Result<f64> {
        eval_mse(self.model, self.eval, self.sched, t, None)
    }

    fn score(&self, spec: InterventionSpec, kind: &str, target: String, t: usize, baseline: f64) -> Result<ImpactResult> {
        spec.resolve(self.model)?;
        let intervened = eval_mse(self.model, self.eval, self.sched, t, Some(&spec))?;
        Ok(ImpactResult {
            kind: kind.to_string(),
            target,
            spec,
            timestep: t,
            baseline_mse: baseline,
            intervened_mse: intervened,
            impact: impact_from_mse(baseline, intervened)?,
            n: self.eval.len(),
            rank: None,
            seed: self.seed,
        })
    }
}

/// Paired impact of one intervention: baseline and intervened passes see the
/// same `(x0, eps, t)` triples.
pub fn impact_score(
    model: &UNet,
    spec: &InterventionSpec,
    eval: &EvalBatch,
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<ImpactResult> {
    sched.check_timestep(t)?;
    let s = Scorer { model, eval, sched, seed };
    let base = s.baseline(t)?;
    s.score(spec.clone(), spec.kind_name(), spec.target_label(), t, base)
}

/// Assigns ranks within each timestep: descending impact, ties broken by
/// ascending target name, every rank distinct.
pub fn rank_results(results: &mut [ImpactResult]) {
    let mut timesteps: Vec<usize> = results.iter().map(|r| r.timestep).collect();
    timesteps.sort_unstable();
    timesteps.dedup();
    for t in timesteps {
        let mut idx: Vec<usize> = (0..results.len()).filter(|&i| results[i].timestep == t).collect();
        idx.sort_by(|&a, &b| {
            results[b]
                .impact
                .total_cmp(&results[a].impact)
                .then_with(|| results[a].target.cmp(&results[b].target))
        });
        for (rank, i) in idx.into_iter().enumerate() {
            results[i].rank = Some(rank + 1);
        }
    }
}

/// One zero-ablation per `(group, timestep)`, ranked per timestep.
pub fn ablation_sweep(
    model: &UNet,
    groups: &[AblationGroup],
    timesteps: &[usize],
    eval: &EvalBatch,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<ImpactResult>> {
    if let Some(g) = groups.iter().find(|g| g.layers.is_empty()) {
        return Err(InterventionError::EmptyGroup(g.name.clone()));
    }
    let s = Scorer { model, eval, sched, seed };
    let mut out = Vec::with_capacity(groups.len() * timesteps.len());
    for &t in timesteps {
        sched.check_timestep(t)?;
        let base = s.baseline(t)?;
        for g in groups {
            out.push(s.score(g.spec(), "layer_ablation", g.name.clone(), t, base)?);
        }
    }
    rank_results(&mut out);
    Ok(out)
}

/// Impact of zero-ablating each attention head's output on its own, in
/// global head order.
pub fn head_importance(
    model: &UNet,
    eval: &EvalBatch,
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<Vec<ImpactResult>> {
    sched.check_timestep(t)?;
    let s = Scorer { model, eval, sched, seed };
    let base = s.baseline(t)?;
    let mut out = Vec::new();
    for layer in model.attention_layers() {
        let range = crate::intervention::SiteCatalog::attention_heads(model, &layer).unwrap_or(0..0);
        for h in range {
            let spec = InterventionSpec::LayerAblation {
                target: Target::head(layer.clone(), h),
                mode: AblationMode::Zero,
            };
            out.push(s.score(spec, "head_ablation", format!("head{h}"), t, base)?);
        }
    }
    rank_results(&mut out);
    Ok(out)
}

/// Group ablations, a half-strength perturbation of every attention stage,
/// and x0.5 / x2 scaling of every attention stage.
pub fn robustness_battery(model: &UNet) -> Vec<(String, InterventionSpec)> {
    let mut out: Vec<(String, InterventionSpec)> = ablation_groups(model)
        .into_iter()
        .filter(|g| !g.layers.is_empty())
        .map(|g| (g.name.clone(), g.spec()))
        .collect();
    for layer in model.attention_layers() {
        out.push((
            format!("{layer}@blend0.5"),
            InterventionSpec::AttentionPerturbation {
                target: Target::layer(layer.clone()),
                blend: 0.5,
            },
        ));
        for s in [0.5, 2.0] {
            out.push((
                format!("{layer}@x{s}"),
                InterventionSpec::FeatureScaling {
                    target: Target::layer(layer.clone()),
                    scale: s,
                },
            ));
        }
    }
    out
}

/// `1 / (1 + mean impact)`, with a negative mean treated as zero so the
/// value stays in `(0, 1]`.
pub fn robustness_from_impacts(impacts: &[f64]) -> f64 {
    if impacts.is_empty() {
        return 1.0;
    }
    let mean = impacts.iter().sum::<f64>() / impacts.len() as f64;
    1.0 / (1.0 + mean.max(0.0))
}

/// Robustness over the standard battery, with the individual results.
pub fn robustness(
    model: &UNet,
    eval: &EvalBatch,
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<(f64, Vec<ImpactResult>)> {
    sched.check_timestep(t)?;
    let s = Scorer { model, eval, sched, seed };
    let base = s.baseline(t)?;
    let mut results = Vec::new();
    for (label, spec) in robustness_battery(model) {
        let kind = spec.kind_name();
        results.push(s.score(spec, kind, label, t, base)?);
    }
    let impacts: Vec<f64> = results.iter().map(|r| r.impact).collect();
    Ok((robustness_from_impacts(&impacts), results))
}

pub fn write_impact_csv(results: &[ImpactResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(IMPACT_CSV_HEADER)?;
    for r in results {
        w.write_record([
            r.kind.clone(),
            r.target.clone(),
            r.timestep.to_string(),
            r.baseline_mse.to_string(),
            r.intervened_mse.to_string(),
            r.impact.to_string(),
            r.rank.map(|v| v.to_string()).unwrap_or_default(),
            r.n.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(target: &str, t: usize, impact: f64) -> ImpactResult {
        ImpactResult {
            kind: "layer_ablation".into(),
            target: target.into(),
            spec: InterventionSpec::CircuitInterruption {
                nodes: vec![],
                mode: AblationMode::Zero,
            },
            timestep: t,
            baseline_mse: 1.0,
            intervened_mse: 1.0 + impact,
            impact,
            n: 1,
            rank: None,
            seed: 0,
        }
    }

    #[test]
    fn impact_arithmetic() {
        assert_eq!(impact_from_mse(0.5, 0.5).unwrap(), 0.0);
        assert!((impact_from_mse(0.0246, 0.0624).unwrap() - 1.538).abs() < 0.002);
        assert!(matches!(impact_from_mse(0.0, 1.0), Err(InterventionError::ZeroBaseline)));
    }

    #[test]
    fn ties_rank_by_name() {
        let mut rs = vec![result("c", 1, 0.2), result("a", 1, 0.2), result("b", 1, 0.2), result("z", 2, 0.1)];
        rank_results(&mut rs);
        let ranks: Vec<_> = rs.iter().map(|r| r.rank.unwrap()).collect();
        assert_eq!(ranks, vec![3, 1, 2, 1]);
    }

    #[test]
    fn robustness_formula() {
        assert_eq!(robustness_from_impacts(&[0.0, 0.0]), 1.0);
        assert_eq!(robustness_from_impacts(&[0.5, 1.5]), 0.5);
    }
}

//! FLOP accounting for selector/classifier pipelines.
//!
//! Rates are GFLOPs per timestep. The built-in registry carries published
//! rates for three heavy backbones and two light selectors; measured rates of
//! the in-crate models can be added under their own tags.
//!
//! The sparse heavy rates (`R2D`, `S3D`, `I3D`) are the 16-timestep budgets
//! divided by 16. The dense 64-timestep budgets are not exact multiples of
//! them, so they live under separate `*-dense` tags.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMEGATE_LIGHT: &str = "timegate";
pub const SCSAMPLER_LIGHT: &str = "scsampler";
pub const NO_LIGHT: &str = "none";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRegistry {
    pub light: BTreeMap<String, f64>,
    pub heavy: BTreeMap<String, f64>,
}

impl Default for CostRegistry {
    fn default() -> Self {
        let light = [
            (TIMEGATE_LIGHT, 7.8 / 128.0),
            (SCSAMPLER_LIGHT, 7.5 / 128.0),
            (NO_LIGHT, 0.0),
        ];
        let heavy = [
            ("R2D", 61.7 / 16.0),
            ("S3D", 17.3 / 16.0),
            ("I3D", 207.8 / 16.0),
            ("R2D-dense", 246.6 / 64.0),
            ("S3D-dense", 61.8 / 64.0),
            ("I3D-dense", 830.7 / 64.0),
        ];
        Self {
            light: light.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            heavy: heavy.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl CostRegistry {
    /// Registers a measured model from its multiply-add count per timestep
    /// (one multiply-add counts as one FLOP).
    pub fn add_measured_light(&mut self, tag: &str, macs_per_timestep: u64) {
        self.light.insert(tag.to_string(), macs_per_timestep as f64 / 1e9);
    }

    pub fn add_measured_heavy(&mut self, tag: &str, macs_per_timestep: u64) {
        self.heavy.insert(tag.to_string(), macs_per_timestep as f64 / 1e9);
    }

    fn rate(table: &BTreeMap<String, f64>, kind: &str, tag: &str) -> Result<f64> {
        table
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown {kind} model tag {tag:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub light_model: String,
    pub heavy_model: String,
    pub n_light: f64,
    pub n_heavy: f64,
    pub light_gflops: f64,
    pub heavy_gflops: f64,
    pub total_gflops: f64,
}

impl CostReport {
    /// Total to the nearest 0.1 GFLOP.
    pub fn total_rounded(&self) -> f64 {
        (self.total_gflops * 10.0).round() / 10.0
    }
}

/// Cost of running the light model on `n_light` timesteps and the heavy model
/// on `n_heavy`. Counts may be fractional means over a dataset.
pub fn pipeline_cost(n_light: f64, n_heavy: f64, light_model: &str, heavy_model: &str, registry: &CostRegistry) -> Result<CostReport> {
    if !(n_heavy >= 0.0) || n_light < n_heavy && n_light > 0.0 {
        return Err(Error::Domain(format!(
            "need n_light >= n_heavy >= 0 (or no light model), got {n_light} / {n_heavy}"
        )));
    }
    let lr = CostRegistry::rate(&registry.light, "light", light_model)?;
    let hr = CostRegistry::rate(&registry.heavy, "heavy", heavy_model)?;
    let light_gflops = n_light * lr;
    let heavy_gflops = n_heavy * hr;
    Ok(CostReport {
        light_model: light_model.to_string(),
        heavy_model: heavy_model.to_string(),
        n_light,
        n_heavy,
        light_gflops,
        heavy_gflops,
        total_gflops: light_gflops + heavy_gflops,
    })
}

/// One published configuration and its total budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceRow {
    pub config: &'static str,
    pub light_model: &'static str,
    pub heavy_model: &'static str,
    pub n_light: f64,
    pub n_heavy: f64,
    pub total_gflops: f64,
    pub accuracy: f64,
}

/// The nine published pipeline budgets the default registry reproduces.
pub fn reference_cost_table() -> Vec<ReferenceRow> {
    let row = |config, light_model, heavy_model, n_light, n_heavy, total_gflops, accuracy| ReferenceRow {
        config,
        light_model,
        heavy_model,
        n_light,
        n_heavy,
        total_gflops,
        accuracy,
    };
    vec![
        row("R2D", NO_LIGHT, "R2D-dense", 0.0, 64.0, 246.6, 72.9),
        row("R2D+SCSampler", SCSAMPLER_LIGHT, "R2D", 128.0, 16.0, 69.2, 68.6),
        row("R2D+TimeGate", TIMEGATE_LIGHT, "R2D", 128.0, 16.0, 69.5, 70.2),
        row("S3D", NO_LIGHT, "S3D-dense", 0.0, 64.0, 61.8, 67.3),
        row("S3D+SCSampler", SCSAMPLER_LIGHT, "S3D", 128.0, 16.0, 24.8, 64.1),
        row("S3D+TimeGate", TIMEGATE_LIGHT, "S3D", 128.0, 16.0, 25.1, 66.2),
        row("I3D", NO_LIGHT, "I3D-dense", 0.0, 64.0, 830.7, 85.7),
        row("I3D+SCSampler", SCSAMPLER_LIGHT, "I3D", 128.0, 16.0, 215.3, 81.8),
        row("I3D+TimeGate", TIMEGATE_LIGHT, "I3D", 128.0, 16.0, 215.6, 85.2),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub model: String,
    pub n_heavy_timesteps: f64,
    pub gflops: f64,
    pub metric: f64,
}

/// A measured operating point: a heavy budget and the metric it reached.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub model: String,
    pub n_light: f64,
    pub n_heavy: f64,
    pub light_model: String,
    pub heavy_model: String,
    pub metric: f64,
}

/// Costs each point and sorts by ascending GFLOPs. Two points of the same
/// model may not share a heavy budget.
pub fn tradeoff_rows(points: &[TradeoffPoint], registry: &CostRegistry) -> Result<Vec<TradeoffRow>> {
    let rows = points
        .iter()
        .map(|p| {
            let cost = pipeline_cost(p.n_light, p.n_heavy, &p.light_model, &p.heavy_model, registry)?;
            Ok(TradeoffRow {
                model: p.model.clone(),
                n_heavy_timesteps: p.n_heavy,
                gflops: cost.total_gflops,
                metric: p.metric,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sorted_tradeoff(rows)
}

/// Rows from already-costed measurements `(model, cost, metric)`.
pub fn tradeoff_from_reports(items: &[(String, CostReport, f64)]) -> Result<Vec<TradeoffRow>> {
    sorted_tradeoff(
        items
            .iter()
            .map(|(model, cost, metric)| TradeoffRow {
                model: model.clone(),
                n_heavy_timesteps: cost.n_heavy,
                gflops: cost.total_gflops,
                metric: *metric,
            })
            .collect(),
    )
}

fn sorted_tradeoff(mut rows: Vec<TradeoffRow>) -> Result<Vec<TradeoffRow>> {
    for (i, a) in rows.iter().enumerate() {
        if rows[i + 1..].iter().any(|b| b.model == a.model && b.n_heavy_timesteps == a.n_heavy_timesteps) {
            return Err(Error::Domain(format!(
                "duplicate budget {} for model {}",
                a.n_heavy_timesteps, a.model
            )));
        }
    }
    rows.sort_by(|a, b| a.gflops.total_cmp(&b.gflops).then(a.model.cmp(&b.model)));
    Ok(rows)
}

/// Rounds to 1e-9 so that sums like `128 · 7.8/128` print as `7.8`.
fn tidy(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

pub const TRADEOFF_HEADER: &str = "model,n_heavy_timesteps,gflops,metric";

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from(TRADEOFF_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.model, tidy(r.n_heavy_timesteps), tidy(r.gflops), r.metric);
    }
    out
}

/// Tradeoff rows for the published I3D pipelines.
pub fn reference_i3d_tradeoff(registry: &CostRegistry) -> Result<Vec<TradeoffRow>> {
    let points: Vec<TradeoffPoint> = reference_cost_table()
        .into_iter()
        .filter(|r| r.heavy_model.starts_with("I3D"))
        .map(|r| TradeoffPoint {
            model: r.config.to_string(),
            n_light: r.n_light,
            n_heavy: r.n_heavy,
            light_model: r.light_model.to_string(),
            heavy_model: r.heavy_model.to_string(),
            metric: r.accuracy / 100.0,
        })
        .collect();
    tradeoff_rows(&points, registry)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn reproduces_every_published_total() {
        let reg = CostRegistry::default();
        for row in reference_cost_table() {
            let c = pipeline_cost(row.n_light, row.n_heavy, row.light_model, row.heavy_model, &reg).unwrap();
            assert!((c.total_gflops - row.total_gflops).abs() <= 0.15, "{}: {}", row.config, c.total_gflops);
            assert_abs_diff_eq!(c.total_gflops, c.light_gflops + c.heavy_gflops, epsilon = 1e-12);
        }
    }

    #[test]
    fn examples() {
        let reg = CostRegistry::default();
        let tg = pipeline_cost(128.0, 16.0, TIMEGATE_LIGHT, "I3D", &reg).unwrap();
        assert_abs_diff_eq!(tg.light_gflops, 7.8, epsilon = 1e-9);
        assert_abs_diff_eq!(tg.heavy_gflops, 207.8, epsilon = 1e-9);
        assert_eq!(tg.total_rounded(), 215.6);
        let dense = pipeline_cost(0.0, 64.0, NO_LIGHT, "I3D-dense", &reg).unwrap();
        assert_eq!(dense.total_rounded(), 830.7);
        let none = pipeline_cost(128.0, 0.0, TIMEGATE_LIGHT, "I3D", &reg).unwrap();
        assert_eq!(none.total_gflops, none.light_gflops);
        assert!(matches!(pipeline_cost(1.0, 0.0, TIMEGATE_LIGHT, "VGG", &reg), Err(Error::Domain(_))));
        assert!(pipeline_cost(4.0, 8.0, TIMEGATE_LIGHT, "I3D", &reg).is_err());
    }

    proptest! {
        #[test]
        fn cost_is_linear(a in 0.0f64..200.0, b in 0.0f64..200.0, h in 0.0f64..50.0) {
            let reg = CostRegistry::default();
            let c = |l: f64, h: f64| pipeline_cost(l.max(h), h, TIMEGATE_LIGHT, "S3D", &reg).unwrap().total_gflops;
            let (la, lb) = (a.max(h), b.max(h));
            let lhs = c(la + lb, 2.0 * h);
            prop_assert!((lhs - (c(la, h) + c(lb, h))).abs() < 1e-9);
        }
    }

    #[test]
    fn tradeoff_sorting_and_csv() {
        let reg = CostRegistry::default();
        let point = |n: f64, m: f64| TradeoffPoint {
            model: "tg".into(),
            n_light: 128.0,
            n_heavy: n,
            light_model: TIMEGATE_LIGHT.into(),
            heavy_model: "I3D".into(),
            metric: m,
        };
        let one = tradeoff_rows(&[point(4.0, 0.5)], &reg).unwrap();
        assert_eq!(one.len(), 1);
        let rows = tradeoff_rows(&[point(16.0, 0.8), point(2.0, 0.4), point(8.0, 0.7)], &reg).unwrap();
        let budgets: Vec<f64> = rows.iter().map(|r| r.n_heavy_timesteps).collect();
        assert_eq!(budgets, vec![2.0, 8.0, 16.0]);
        assert!(tradeoff_rows(&[point(2.0, 0.4), point(2.0, 0.5)], &reg).is_err());

        let csv = tradeoff_csv(&reference_i3d_tradeoff(&reg).unwrap());
        assert_eq!(
            csv,
            "model,n_heavy_timesteps,gflops,metric\n\
             I3D+SCSampler,16,215.3,0.818\n\
             I3D+TimeGate,16,215.6,0.852\n\
             I3D,64,830.7,0.857\n"
        );
    }
}

//! Named sweep configurations.

use std::collections::BTreeMap;

use crate::config::{BenchBlock, Config, EstimatorBlock, OptimizerBlock};

pub const NAMES: [&str; 2] = ["table1-sc", "queue-f2"];

pub fn preset(name: &str) -> Option<Config> {
    match name {
        "table1-sc" => Some(table1_sc()),
        "queue-f2" => Some(queue_f2()),
        _ => None,
    }
}

/// Strongly convex complexity separation on the CSO toy: RT-MLMC against
/// L-SGD over a five-point accuracy grid, with slope bands.
fn table1_sc() -> Config {
    let mut cfg = Config::minimal("cso_toy");
    let bands = BTreeMap::from([("rt-mlmc".to_string(), [-1.3, -0.7]), ("l-sgd".to_string(), [-2.3, -1.7])]);
    cfg.bench = BenchBlock {
        methods: Some(vec!["rt-mlmc".into(), "l-sgd".into()]),
        eps_grid: Some((0..5).map(|i| 10f64.powf(-1.0 - 0.5 * i as f64)).collect()),
        seeds: Some(301),
        budget: Some(1 << 34),
        max_iterations: Some(2_000_000),
        bands: Some(bands),
        ..Default::default()
    };
    cfg.io.seed = 1;
    cfg
}

/// Exponential-service pricing and staffing queue: grid-search reference,
/// then variance-reduced RT-MLMC against L-SGD at level 12 from (9, 9).
fn queue_f2() -> Config {
    let mut cfg = Config::minimal("queue");
    cfg.instance.service = Some("exponential".into());
    cfg.estimator = EstimatorBlock { kind: "rt-mlmc".into(), level: Some(12), ..Default::default() };
    cfg.optimizer = OptimizerBlock {
        framework: "vr".into(),
        iterations: 10_000_000,
        budget: Some(10_000_000),
        x1: Some(vec![9.0, 9.0]),
        d1: Some(20),
        d2: Some(1),
        epoch: Some(10),
        ..Default::default()
    };
    cfg.bench = BenchBlock {
        compare: Some(["vr-rt-mlmc(L=12)".into(), "vr-l-sgd(L=12)".into()]),
        compare_target: Some(0.05),
        compare_stop: Some("gap".into()),
        seeds: Some(10),
        budget: Some(100_000_000),
        resolution: Some(0.01),
        bands: Some(BTreeMap::from([("median_cost_ratio".to_string(), [3.0, 1e9])])),
        ..Default::default()
    };
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_echo_and_reparse() {
        for name in NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(Config::parse(&cfg.echo(), name).unwrap(), cfg, "{name}");
        }
        assert!(preset("table1").is_none());
    }
}

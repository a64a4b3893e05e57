use std::path::Path;

use mlmc_grad::bench::{
    self, configure, paired_compare, probe_bias, probe_cost, probe_sr_bias, probe_variance, reference_value, run_sweep,
    summary_csv, CellSetup, Method, MethodSpec, RateFit, SummaryRow, SweepSpec,
};
use mlmc_grad::io::write_atomic;
use mlmc_grad::optimizers::{run_sgd, run_vr, select_level, StopRule};
use mlmc_grad::problems::{QueueInstance, ServiceLaw, UbsrToy};
use mlmc_grad::{rng, Error, Estimator, EstimatorConfig, EstimatorKind, Oracle, RunOptions};

use crate::config::{parse_method, Config};
use crate::{CliError, Common};

fn write(out: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = out.join(name);
    write_atomic(&path, contents.as_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn check_dim(oracle: &dyn Oracle, x: &[f64], field: &str) -> Result<(), CliError> {
    if x.len() != oracle.meta().d {
        return Err(CliError::Parse(format!("{field}: expected {} coordinates, got {}", oracle.meta().d, x.len())));
    }
    Ok(())
}

/// Configure one method with the optimizer block's overrides applied.
fn setup(cfg: &Config, oracle: &dyn Oracle, method: &MethodSpec, eps: f64, max_iter: usize) -> Result<CellSetup, CliError> {
    let mut m = method.clone().forced(method.force || cfg.estimator.force);
    m.schedule = cfg.schedule().map_err(CliError::Parse)?;
    if let Some(step) = cfg.optimizer.step {
        m = m.with_vr_step(step);
    }
    if let (Some(d1), Some(d2), Some(q)) = (cfg.optimizer.d1, cfg.optimizer.d2, cfg.optimizer.epoch) {
        m = m.with_vr_sizes(d1, d2, q);
    }
    let mut s = configure(oracle, &m, eps, max_iter, rng::derive_seed(cfg.io.seed, &[2]))?;
    if cfg.estimator.batch.is_some() || cfg.estimator.multiplier.is_some() {
        let mut ec = s.estimator.config().clone();
        if let Some(b) = cfg.estimator.batch {
            ec = ec.with_batch(b);
        }
        if let Some(n) = cfg.estimator.multiplier {
            ec = ec.with_multiplier(n);
        }
        s.estimator = Estimator::new(ec, oracle)?;
    }
    if let Some(x1) = &cfg.optimizer.x1 {
        check_dim(oracle, x1, "optimizer.x1")?;
        s.x1 = x1.clone();
    }
    Ok(s)
}

pub fn run(cfg: &Config, common: &Common, out: &Path) -> Result<(), CliError> {
    let oracle = cfg.oracle()?;
    write(out, "config.toml", &cfg.echo())?;
    let method = cfg.method()?;
    let s = setup(cfg, oracle.as_ref(), &method, cfg.estimator.epsilon, cfg.optimizer.iterations)?;
    let mut opts = RunOptions::new(s.iterations, cfg.io.seed);
    if let Some(b) = cfg.optimizer.budget {
        opts = opts.with_budget(b);
    }
    if cfg.optimizer.stop_at_target {
        opts = opts.with_stop(s.stop);
    }
    let rec = match &s.method {
        Method::Sgd(schedule) => run_sgd(oracle.as_ref(), &s.estimator, schedule, &opts, &s.x1),
        Method::Vr(vr) => run_vr(oracle.as_ref(), &s.estimator, vr, &opts, &s.x1),
    }?;
    write(out, "trajectory.csv", &rec.trajectory_csv())?;
    if !common.quiet {
        println!(
            "{} (L={}) on {}: {} iterations, cost {}, stopped by {:?}, output {:?}",
            method.label(),
            s.estimator.level(),
            oracle.name(),
            rec.iterations,
            rec.total_cost,
            rec.stop,
            rec.output
        );
    }
    Ok(())
}

/// Levels 2..9, or the seven levels above a higher floor (7..13 for the queue).
fn default_levels(oracle: &dyn Oracle) -> Vec<u32> {
    match oracle.min_level() {
        0 | 1 => (2..=9).collect(),
        m => (m + 1..=m + 7).collect(),
    }
}

fn rate_outputs(
    out: &Path,
    name: &str,
    statistic: &str,
    fit: &RateFit,
    band: (f64, f64),
    common: &Common,
) -> Result<bool, CliError> {
    write(out, &format!("probe_{statistic}.csv"), &fit.to_csv(statistic))?;
    let value = (!fit.degenerate).then_some(fit.slope);
    let row = SummaryRow::new(name, format!("{statistic}_slope"), value, band.0, band.1);
    write(out, "summary.csv", &summary_csv(std::slice::from_ref(&row)))?;
    if !common.quiet {
        if fit.degenerate {
            println!("{name} {statistic}: degenerate fit (statistic identically zero)");
        } else {
            println!(
                "{name} {statistic} slope {:.3} over levels {:?}, band [{}, {}]: {}",
                fit.slope,
                fit.levels,
                band.0,
                band.1,
                if row.pass() { "pass" } else { "fail" }
            );
        }
    }
    Ok(row.pass())
}

pub fn probe(cfg: &Config, kind: &str, common: &Common, out: &Path) -> Result<bool, CliError> {
    let oracle = cfg.oracle()?;
    let meta = oracle.meta().clone();
    let name = oracle.name().to_string();
    let point = cfg.bench.point.clone().unwrap_or_else(|| oracle.default_start());
    check_dim(oracle.as_ref(), &point, "bench.point")?;
    let levels = cfg.bench.levels.clone().unwrap_or_else(|| default_levels(oracle.as_ref()));
    write(out, "config.toml", &cfg.echo())?;
    match kind {
        "variance" => {
            let reps = cfg.bench.replications.unwrap_or(bench::MIN_VARIANCE_REPS);
            let p = probe_variance(oracle.as_ref(), &point, &levels, reps, cfg.io.seed)?;
            // The queue's windowed estimator only promises the conservative law.
            let band = if name == "queue" { (f64::NEG_INFINITY, -0.7) } else { (-meta.b - 0.3, -meta.b + 0.3) };
            if !common.quiet && !p.h_within_sigma() {
                println!("warning: Var(h) exceeds the declared sigma^2 = {}", p.sigma_sq);
            }
            rate_outputs(out, &name, "variance", &p.fit, band, common)
        }
        "bias" => {
            let fit = probe_bias(oracle.as_ref(), &point, &levels)?;
            rate_outputs(out, &name, "bias", &fit, (-meta.a - 0.3, -meta.a + 0.3), common)
        }
        "sr-bias" => {
            let toy = UbsrToy::default_toy();
            if name != toy.name() {
                return Err(CliError::Parse(format!("sr-bias probes need the ubsr instance, got {name}")));
            }
            let reps = cfg.bench.replications.unwrap_or(100_000);
            let b = probe_sr_bias(&toy, &point, &levels, reps, cfg.io.seed)?;
            rate_outputs(out, &name, "sr_bias", &b.fit, (-1.3, -0.7), common)
        }
        "cost" => {
            let kind: EstimatorKind = cfg.estimator.kind.parse()?;
            let level = match cfg.estimator.level {
                Some(l) => l,
                None => select_level(&meta, cfg.estimator.epsilon, oracle.convexity())?.max(oracle.min_level()),
            };
            let ec = EstimatorConfig::new(kind, level).forced(cfg.estimator.force);
            let est = Estimator::new(ec, oracle.as_ref())?;
            let draws = cfg.bench.replications.unwrap_or(100_000);
            let p = probe_cost(&est, draws, cfg.io.seed)?;
            let row = SummaryRow::new(format!("{name}/{kind}"), "cost_relative_error", Some(p.relative_error()), 0.0, 0.1);
            write(
                out,
                "probe_cost.csv",
                &format!("estimator,expected,empirical,draws\n{kind},{},{},{}\n", p.expected, p.empirical, p.draws),
            )?;
            write(out, "summary.csv", &summary_csv(std::slice::from_ref(&row)))?;
            if !common.quiet {
                println!("{kind} on {name}: mean cost {:.4} vs expected {:.4}", p.empirical, p.expected);
            }
            Ok(row.pass())
        }
        other => Err(CliError::Parse(format!("unknown probe kind '{other}', expected variance, bias, sr-bias or cost"))),
    }
}

fn band_row(cfg: &Config, name: &str, statistic: &str, value: Option<f64>) -> SummaryRow {
    let [lo, hi] = cfg
        .bench
        .bands
        .as_ref()
        .and_then(|b| b.get(name))
        .copied()
        .unwrap_or([f64::NEG_INFINITY, f64::INFINITY]);
    SummaryRow::new(name, statistic, value, lo, hi)
}

pub fn sweep(cfg: &Config, common: &Common, out: &Path) -> Result<bool, CliError> {
    let oracle = cfg.oracle()?;
    if cfg.bench.methods.is_none() && cfg.bench.compare.is_none() {
        return Err(CliError::Parse("sweep needs bench.methods or bench.compare".into()));
    }
    write(out, "config.toml", &cfg.echo())?;
    let mut rows = Vec::new();
    let budget = cfg.bench.budget.unwrap_or(1 << 30);
    let max_iter = cfg.bench.max_iterations.unwrap_or(cfg.optimizer.iterations);
    if let Some(labels) = &cfg.bench.methods {
        let methods = labels
            .iter()
            .map(|l| parse_method(l).map(|m| m.forced(cfg.estimator.force)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::Parse)?;
        let spec = SweepSpec {
            instance: oracle.name().to_string(),
            methods,
            eps_grid: cfg.bench.eps_grid.clone().unwrap_or_else(|| vec![cfg.estimator.epsilon]),
            seeds: cfg.bench.seeds.unwrap_or(5),
            root_seed: cfg.io.seed,
            budget,
            max_iterations: max_iter,
            jobs: common.jobs,
        };
        let res = run_sweep(&spec, oracle.as_ref())?;
        write(out, "sweep.csv", &res.to_csv())?;
        for s in &res.slopes {
            let slope = s.fit.map(|f| f.slope);
            if !common.quiet {
                let costs: Vec<String> =
                    s.points.iter().map(|p| p.1.map(|c| format!("{c:.0}")).unwrap_or_else(|| "-".into())).collect();
                println!("{}: median costs {} slope {}", s.estimator, costs.join("/"), mlmc_grad::io::fmt_opt(slope));
            }
            rows.push(band_row(cfg, &s.estimator, "cost_slope", slope));
        }
    }
    if let Some([a, b]) = &cfg.bench.compare {
        let eps = cfg.bench.compare_target.unwrap_or(cfg.estimator.epsilon);
        let ma = parse_method(a).map_err(CliError::Parse)?;
        let mb = parse_method(b).map_err(CliError::Parse)?;
        let mut grid_out = None;
        if oracle.name() == "queue" {
            let law = ServiceLaw::parse(cfg.instance.service.as_deref().unwrap_or("exponential"))?;
            let q = QueueInstance::with_service(law)?;
            let (mu, p, f) = bench::grid_search(&q, cfg.bench.resolution.unwrap_or(0.01))?;
            grid_out = Some((mu, p, f));
            write(out, "grid.csv", &format!("mu,p,objective\n{mu},{p},{f}\n"))?;
        }
        let stop = match (cfg.bench.compare_stop.as_deref(), reference_value(oracle.as_ref())) {
            (Some("grad-sq"), _) | (None, Err(_)) => StopRule::GradSq { target: eps * eps },
            (_, Ok(reference)) => StopRule::Gap { target: eps, reference },
            (_, Err(e)) => return Err(e.into()),
        };
        let sa = setup(cfg, oracle.as_ref(), &ma, eps, max_iter)?;
        let sb = setup(cfg, oracle.as_ref(), &mb, eps, max_iter)?;
        let seeds: Vec<u64> = (0..cfg.bench.seeds.unwrap_or(10) as u64).map(|i| rng::derive_seed(cfg.io.seed, &[i])).collect();
        let cmp = paired_compare(oracle.as_ref(), &sa, &sb, stop, &seeds, budget)?;
        let mut csv = String::from("seed,cost_a,censored_a,cost_b,censored_b,ratio\n");
        for ((seed, p), r) in seeds.iter().zip(&cmp.pairs).zip(&cmp.ratios) {
            csv.push_str(&format!("{seed},{},{},{},{},{r}\n", p.0, p.1, p.2, p.3));
        }
        write(out, "paired.csv", &csv)?;
        if !common.quiet {
            if let Some((mu, p, f)) = grid_out {
                println!("grid optimum ({mu:.2}, {p:.2}) with F* = {f:.6}");
            }
            println!(
                "{} vs {}: median cost ratio {:.2}, {} wins out of {}",
                ma.label(),
                mb.label(),
                cmp.median_ratio,
                cmp.wins,
                cmp.pairs.len()
            );
        }
        rows.push(band_row(cfg, "median_cost_ratio", "median_cost_ratio", Some(cmp.median_ratio)));
        rows.push(band_row(cfg, "win_rate", "win_rate", Some(cmp.win_rate)));
    }
    write(out, "summary.csv", &summary_csv(&rows))?;
    Ok(rows.iter().all(|r| r.pass()))
}

pub fn grid(cfg: &Config, common: &Common, out: &Path) -> Result<(), CliError> {
    let law = ServiceLaw::parse(cfg.instance.service.as_deref().unwrap_or("exponential"))?;
    if !cfg.instance.kind.eq_ignore_ascii_case("queue") {
        return Err(CliError::Parse(format!("grid search needs the queue instance, got {}", cfg.instance.kind)));
    }
    let q = QueueInstance::with_service(law)?;
    let res = cfg.bench.resolution.unwrap_or(0.01);
    let (mu, p, f) = bench::grid_search(&q, res).map_err(|e| match e {
        Error::InvalidInput(m) => CliError::Parse(m),
        other => other.into(),
    })?;
    write(out, "config.toml", &cfg.echo())?;
    write(out, "grid.csv", &format!("mu,p,objective\n{mu},{p},{f}\n"))?;
    if !common.quiet {
        println!("{} service, resolution {res}: optimum (mu, p) = ({mu}, {p}), F* = {f}", law.name());
    }
    Ok(())
}

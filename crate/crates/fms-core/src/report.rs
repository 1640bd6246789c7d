//! Multi-seed comparison runs and report emission.
//!
//! `compare` fans (method, seed) runs out across worker threads, writes one
//! trace file per run, and renders the aggregate artifacts; `render_reports`
//! rebuilds byte-identical CSVs and the SVG from stored traces alone.
//!
//! CSV schemas (RFC-4180, LF line endings, no timestamps):
//!
//! ```text
//! report.csv  method,seed,budget,regret
//! tau.csv     method,seed,snapshot_budget,tau   (tau empty when undefined)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::benchhub::BenchmarkTable;
use crate::error::{FmsError, Result};
use crate::exec;
use crate::hpo::{run, MethodConfig, MethodId};
use crate::metrics::kendall_tau;
use crate::trace::HpoTrace;

pub const REPORT_CSV: &str = "report.csv";
pub const TAU_CSV: &str = "tau.csv";
pub const REGRET_SVG: &str = "regret.svg";

/// Run every (method, seed) pair against the hub, write traces into
/// `out_dir`, and render the reports. Returns the trace paths.
pub fn compare(
    bench: &BenchmarkTable,
    methods: &[MethodId],
    seeds: &[u64],
    total_budget: u64,
    pool_size: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(FmsError::InvalidArgument(
            "compare needs at least one method and one seed".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let pairs: Vec<(MethodId, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let traces = exec::try_map_indexed(pairs.len(), |i| {
        let (method, seed) = pairs[i];
        let mut cfg = MethodConfig::new(method, total_budget);
        cfg.pool_size = pool_size;
        run(&cfg, bench, seed)
    })?;
    let mut paths = Vec::with_capacity(traces.len());
    for trace in &traces {
        let path = out_dir.join(trace_file_name(&trace.header.method, trace.header.seed));
        trace.write_jsonl(&path)?;
        paths.push(path);
    }
    render_reports(&traces, out_dir)?;
    Ok(paths)
}

pub fn trace_file_name(method: &str, seed: u64) -> String {
    format!("trace_{method}_{seed}.jsonl")
}

/// Render `report.csv`, `tau.csv` and `regret.svg` from traces. Row order is
/// derived from trace contents (method, then seed), so re-rendering from the
/// stored files reproduces identical bytes.
pub fn render_reports(traces: &[HpoTrace], out_dir: &Path) -> Result<()> {
    if traces.is_empty() {
        return Err(FmsError::InvalidArgument("no traces to report on".into()));
    }
    let hub_hash = &traces[0].header.hub_hash;
    if traces.iter().any(|t| &t.header.hub_hash != hub_hash) {
        return Err(FmsError::InvalidArgument(
            "traces come from different hubs".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;

    let mut sorted: Vec<&HpoTrace> = traces.iter().collect();
    sorted.sort_by(|a, b| {
        (a.header.method.as_str(), a.header.seed).cmp(&(b.header.method.as_str(), b.header.seed))
    });

    // report.csv
    let mut report = String::from("method,seed,budget,regret\n");
    for t in &sorted {
        let incumbents = t.incumbent_series();
        for (tick, inc) in incumbents.iter().enumerate() {
            report.push_str(&format!(
                "{},{},{},{}\n",
                t.header.method,
                t.header.seed,
                tick + 1,
                t.header.y_opt - inc
            ));
        }
    }
    fs::write(out_dir.join(REPORT_CSV), report)?;

    // tau.csv
    let mut tau = String::from("method,seed,snapshot_budget,tau\n");
    for t in &sorted {
        for snap in t.snapshots() {
            let value = kendall_tau(&snap.scores, &t.header.true_final_accuracies);
            let cell = value.map_or(String::new(), |v| v.to_string());
            tau.push_str(&format!(
                "{},{},{},{}\n",
                t.header.method, t.header.seed, snap.budget_spent, cell
            ));
        }
    }
    fs::write(out_dir.join(TAU_CSV), tau)?;

    fs::write(out_dir.join(REGRET_SVG), regret_svg(&sorted))?;
    Ok(())
}

/// Mean regret per method at a budget tick; runs that stopped early (table
/// exhausted) extend flat at their final incumbent.
pub fn mean_regret_at(traces: &[&HpoTrace], tick: usize) -> f64 {
    let mut sum = 0.0;
    for t in traces {
        let inc = t.incumbent_series();
        let idx = tick.min(inc.len()).saturating_sub(1);
        sum += t.header.y_opt - inc[idx];
    }
    sum / traces.len() as f64
}

fn regret_svg(sorted: &[&HpoTrace]) -> String {
    const PALETTE: [&str; 10] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        "#bcbd22", "#17becf",
    ];
    let (width, height) = (860.0f64, 520.0f64);
    let (ml, mr, mt, mb) = (70.0f64, 180.0f64, 30.0f64, 50.0f64);
    let plot_w = width - ml - mr;
    let plot_h = height - mt - mb;

    let mut by_method: BTreeMap<&str, Vec<&HpoTrace>> = BTreeMap::new();
    for t in sorted {
        by_method.entry(t.header.method.as_str()).or_default().push(t);
    }
    let max_tick = sorted
        .iter()
        .map(|t| t.header.total_budget as usize)
        .max()
        .unwrap_or(1)
        .max(1);
    let mut max_regret = 0.0f64;
    let mut series: Vec<(&str, Vec<f64>)> = Vec::new();
    for (method, traces) in &by_method {
        let means: Vec<f64> = (1..=max_tick)
            .map(|tick| mean_regret_at(traces, tick))
            .collect();
        for &v in &means {
            max_regret = max_regret.max(v);
        }
        series.push((method, means));
    }
    if max_regret <= 0.0 {
        max_regret = 1.0;
    }

    let x_of = |tick: usize| ml + plot_w * (tick as f64 - 1.0) / (max_tick.max(2) as f64 - 1.0);
    let y_of = |regret: f64| mt + plot_h * (1.0 - regret / max_regret);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">compute budget (epochs)</text>\n",
        ml + plot_w / 2.0,
        height - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" \
         transform=\"rotate(-90 18 {})\">mean regret</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));
    // Tick labels: start, middle, end on x; 0 and max on y.
    for tick in [1, max_tick.div_ceil(2), max_tick] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{tick}</text>\n",
            x_of(tick),
            mt + plot_h + 18.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"12\">0</text>\n",
        ml - 6.0,
        mt + plot_h + 4.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"12\">{max_regret:.3}</text>\n",
        ml - 6.0,
        mt + 4.0
    ));

    for (i, (method, means)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = means
            .iter()
            .enumerate()
            .map(|(idx, &r)| format!("{},{}", x_of(idx + 1), y_of(r)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = mt + 16.0 + 20.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            ml + plot_w + 12.0,
            ml + plot_w + 36.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"13\">{method}</text>\n",
            ml + plot_w + 42.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mean and standard error over a sample.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// τ values per (method, seed) at the given snapshot budget.
pub fn taus_at_snapshot(traces: &[HpoTrace], budget_spent: u64) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in traces {
        for snap in t.snapshots() {
            if snap.budget_spent == budget_spent {
                if let Some(tau) = kendall_tau(&snap.scores, &t.header.true_final_accuracies) {
                    out.entry(t.header.method.clone()).or_default().push(tau);
                }
            }
        }
    }
    out
}

//! Evaluation-metric suite: position error at fixed horizons, wrap-safe
//! heading error, kinematic-infeasibility rate, and Wasserstein distances
//! between the predicted and ground-truth acceleration / turning-rate
//! distributions, plus the side-by-side comparison table.

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::geometry::check_feasibility;
use crate::models::{Model, ModePrediction};

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Aggregated metrics of one method over one test set. Horizon columns are
/// `None` when the prediction horizon is too short to reach them (flagged
/// via [`MetricReport::truncated_horizons`]).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub l2_3s_m: Option<f64>,
    pub l2_6s_m: Option<f64>,
    pub heading_3s_deg: Option<f64>,
    pub heading_6s_deg: Option<f64>,
    pub infeasible_pct: f64,
    pub w1_accel: f64,
    pub w1_turnrate: f64,
    pub truncated_horizons: bool,
}

pub const REPORT_HEADER: &str =
    "method,l2_3s_m,l2_6s_m,heading_3s_deg,heading_6s_deg,infeasible_pct,w1_accel,w1_turnrate";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.method,
            fmt_opt(self.l2_3s_m),
            fmt_opt(self.l2_6s_m),
            fmt_opt(self.heading_3s_deg),
            fmt_opt(self.heading_6s_deg),
            self.infeasible_pct,
            self.w1_accel,
            self.w1_turnrate
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row())
    }
}

/// Parses one or more report CSVs written by [`MetricReport::to_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<MetricReport>> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Schema { line: 1, msg: "empty report".into() });
    };
    if header.trim() != REPORT_HEADER {
        return Err(Error::Schema { line: 1, msg: format!("unexpected report header {header:?}") });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(Error::Schema { line: i + 1, msg: format!("expected 8 columns, got {}", cells.len()) });
        }
        let opt = |s: &str, col: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Schema { line: i + 1, msg: format!("{col}: {e}") })
            }
        };
        let req = |s: &str, col: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Schema { line: i + 1, msg: format!("{col}: {e}") })
        };
        out.push(MetricReport {
            method: cells[0].to_string(),
            l2_3s_m: opt(cells[1], "l2_3s_m")?,
            l2_6s_m: opt(cells[2], "l2_6s_m")?,
            heading_3s_deg: opt(cells[3], "heading_3s_deg")?,
            heading_6s_deg: opt(cells[4], "heading_6s_deg")?,
            infeasible_pct: req(cells[5], "infeasible_pct")?,
            w1_accel: req(cells[6], "w1_accel")?,
            w1_turnrate: req(cells[7], "w1_turnrate")?,
            truncated_horizons: cells[1].is_empty() || cells[2].is_empty(),
        });
    }
    Ok(out)
}

/// Evaluation options; defaults mirror the top-ranked protocol.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Score the best mode per sample (min-over-N) instead of the
    /// top-ranked one for the l2 and heading columns. Infeasibility and the
    /// distribution distances always describe the top-ranked trajectory.
    pub min_over_n: bool,
}

struct SampleRecord {
    id: String,
    l2_3s: Option<f64>,
    l2_6s: Option<f64>,
    h_3s: Option<f64>,
    h_6s: Option<f64>,
    infeasible: bool,
    pred_accels: Vec<f64>,
    pred_rates: Vec<f64>,
    true_accels: Vec<f64>,
    true_rates: Vec<f64>,
}

fn series_accels(speeds: &[f64], dt: f64) -> Vec<f64> {
    speeds.windows(2).map(|w| (w[1] - w[0]) / dt).collect()
}

fn series_rates(headings: &[f64], dt: f64) -> Vec<f64> {
    headings.windows(2).map(|w| wrap_angle(w[1] - w[0]) / dt).collect()
}

fn mode_errors_at(mode: &ModePrediction, sample: &Sample, idx: usize) -> (f64, f64) {
    let p = &mode.trajectory.points[idx];
    let t = &sample.future[idx];
    let l2 = ((p.x - t.x).powi(2) + (p.y - t.y).powi(2)).sqrt();
    let heading = wrap_angle(p.psi - t.psi).abs().to_degrees();
    (l2, heading)
}

/// Evaluates a model over a test set using each sample's top-ranked mode
/// (ties to the lowest index). The l2 and wrap-safe heading errors are read
/// at the 3 s and 6 s horizon points; infeasibility is the share of
/// top-ranked trajectories whose discrete turning radius undercuts the
/// actor's minimum; acceleration and turning-rate values are pooled across
/// the set by finite differences of the predicted (and ground-truth) speeds
/// and headings.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricReport> {
    evaluate_with(model, samples, EvalOptions::default())
}

pub fn evaluate_with(model: &Model, samples: &[Sample], opts: EvalOptions) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidParam("evaluation needs a non-empty test set".into()));
    }
    let h = model.config.horizon;
    let dt = model.config.dt;
    for s in samples {
        if s.future.len() != h || (s.dt - dt).abs() > 1e-12 {
            return Err(Error::LengthMismatch(format!(
                "sample {} has H={} dt={}, model expects H={h} dt={dt}",
                s.id,
                s.future.len(),
                s.dt
            )));
        }
    }
    let idx_at = |secs: f64| -> Option<usize> {
        let idx = (secs / dt).round() as usize;
        (idx >= 1 && idx <= h).then(|| idx - 1)
    };
    let i3 = idx_at(3.0);
    let i6 = idx_at(6.0);

    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model.predict(&s.past, &s.kappa)?;
        let top = pred.top_ranked();
        let pick = |idx: Option<usize>| -> (Option<f64>, Option<f64>) {
            match idx {
                None => (None, None),
                Some(i) => {
                    if opts.min_over_n {
                        let l2 = pred
                            .modes
                            .iter()
                            .map(|m| mode_errors_at(m, s, i).0)
                            .fold(f64::INFINITY, f64::min);
                        let he = pred
                            .modes
                            .iter()
                            .map(|m| mode_errors_at(m, s, i).1)
                            .fold(f64::INFINITY, f64::min);
                        (Some(l2), Some(he))
                    } else {
                        let (l2, he) = mode_errors_at(top, s, i);
                        (Some(l2), Some(he))
                    }
                }
            }
        };
        let (l2_3s, h_3s) = pick(i3);
        let (l2_6s, h_6s) = pick(i6);
        let feas = check_feasibility(&top.trajectory, &s.kappa);

        let pred_speeds: Vec<f64> = top.trajectory.points.iter().map(|p| p.v).collect();
        let pred_headings: Vec<f64> = top.trajectory.points.iter().map(|p| p.psi).collect();
        let true_speeds: Vec<f64> = s.future.iter().map(|p| p.v).collect();
        let true_headings: Vec<f64> = s.future.iter().map(|p| p.psi).collect();

        records.push(SampleRecord {
            id: s.id.clone(),
            l2_3s,
            l2_6s,
            h_3s,
            h_6s,
            infeasible: !feas.feasible,
            pred_accels: series_accels(&pred_speeds, dt),
            pred_rates: series_rates(&pred_headings, dt),
            true_accels: series_accels(&true_speeds, dt),
            true_rates: series_rates(&true_headings, dt),
        });
    }
    // Aggregation in id order makes the report invariant to input order.
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let mean_of = |f: &dyn Fn(&SampleRecord) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = records.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let infeasible_pct =
        100.0 * records.iter().filter(|r| r.infeasible).count() as f64 / records.len() as f64;
    let pool = |f: &dyn Fn(&SampleRecord) -> &Vec<f64>| -> Vec<f64> {
        records.iter().flat_map(|r| f(r).iter().copied()).collect()
    };
    let w1_accel = wasserstein_1d(&pool(&|r| &r.pred_accels), &pool(&|r| &r.true_accels))?;
    let w1_turnrate = wasserstein_1d(&pool(&|r| &r.pred_rates), &pool(&|r| &r.true_rates))?;

    Ok(MetricReport {
        method: model.config.head.name().to_string(),
        l2_3s_m: mean_of(&|r| r.l2_3s),
        l2_6s_m: mean_of(&|r| r.l2_6s),
        heading_3s_deg: mean_of(&|r| r.h_3s),
        heading_6s_deg: mean_of(&|r| r.h_6s),
        infeasible_pct,
        w1_accel,
        w1_turnrate,
        truncated_horizons: i3.is_none() || i6.is_none(),
    })
}

/// Evaluates per scenario label, returning `(scenario, report)` rows in
/// sorted label order.
pub fn evaluate_by_scenario(model: &Model, samples: &[Sample]) -> Result<Vec<(String, MetricReport)>> {
    let mut labels: Vec<String> = samples.iter().map(|s| s.scenario.clone()).collect();
    labels.sort();
    labels.dedup();
    let mut out = Vec::with_capacity(labels.len());
    for label in labels {
        let subset: Vec<Sample> = samples.iter().filter(|s| s.scenario == label).cloned().collect();
        let mut rep = evaluate(model, &subset)?;
        rep.method = format!("{}:{}", rep.method, label);
        out.push((label, rep));
    }
    Ok(out)
}

/// Empirical 1-D Wasserstein-1 distance.
///
/// For equal sizes this is the mean absolute difference of the sorted
/// samples; unequal sizes integrate |F_a^-1 - F_b^-1| over the merged
/// quantile grid.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParam("wasserstein_1d needs non-empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    let (n, m) = (sa.len(), sb.len());
    if n == m {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64);
    }
    // Quantile breakpoints of a at (i+1)/n, of b at (j+1)/m; walk the merge.
    let mut i = 0usize;
    let mut j = 0usize;
    let mut q = 0.0f64;
    let mut total = 0.0f64;
    while i < n && j < m {
        // Next breakpoint: min((i+1)/n, (j+1)/m), compared exactly.
        let qa_num = (i + 1) * m;
        let qb_num = (j + 1) * n;
        let q_next = if qa_num <= qb_num { (i + 1) as f64 / n as f64 } else { (j + 1) as f64 / m as f64 };
        total += (q_next - q) * (sa[i] - sb[j]).abs();
        if qa_num <= qb_num {
            i += 1;
        }
        if qb_num <= qa_num {
            j += 1;
        }
        q = q_next;
    }
    Ok(total)
}

/// Side-by-side table of reports: methods as rows, metrics as columns, the
/// best (lowest) value per column flagged.
#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub reports: Vec<MetricReport>,
    /// Per metric column: index of the best row, if any value is present.
    pub best: Vec<Option<usize>>,
}

const METRIC_COLUMNS: usize = 7;

fn metric(r: &MetricReport, col: usize) -> Option<f64> {
    match col {
        0 => r.l2_3s_m,
        1 => r.l2_6s_m,
        2 => r.heading_3s_deg,
        3 => r.heading_6s_deg,
        4 => Some(r.infeasible_pct),
        5 => Some(r.w1_accel),
        6 => Some(r.w1_turnrate),
        _ => unreachable!(),
    }
}

pub fn compare(reports: &[MetricReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::InvalidParam("compare needs at least one report".into()));
    }
    let mut best = vec![None; METRIC_COLUMNS];
    for (col, slot) in best.iter_mut().enumerate() {
        let mut best_val = f64::INFINITY;
        for (row, r) in reports.iter().enumerate() {
            if let Some(v) = metric(r, col) {
                if v < best_val {
                    best_val = v;
                    *slot = Some(row);
                }
            }
        }
    }
    Ok(ComparisonTable { reports: reports.to_vec(), best })
}

impl ComparisonTable {
    /// Merged CSV: the input rows in order, then a `best` row naming the
    /// winning method per column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out.push_str("best");
        for col in 0..METRIC_COLUMNS {
            out.push(',');
            if let Some(row) = self.best[col] {
                out.push_str(&self.reports[row].method);
            }
        }
        out.push('\n');
        out
    }

    /// Aligned text table with the best value per column starred.
    pub fn to_text(&self) -> String {
        let headers =
            ["method", "l2@3s [m]", "l2@6s [m]", "hdg@3s [deg]", "hdg@6s [deg]", "infeas [%]", "w1 accel", "w1 turnrate"];
        let mut rows: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
        for (row, r) in self.reports.iter().enumerate() {
            let mut cells = vec![r.method.clone()];
            for col in 0..METRIC_COLUMNS {
                let star = if self.best[col] == Some(row) { "*" } else { "" };
                cells.push(match metric(r, col) {
                    Some(v) => format!("{v:.4}{star}"),
                    None => "-".to_string(),
                });
            }
            rows.push(cells);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap())
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> =
                r.iter().zip(&widths).map(|(cell, w)| format!("{cell:>w$}", w = w)).collect();
            out.push_str(&line.join("  "));
            out.push('\n');
        }
        out
    }
}

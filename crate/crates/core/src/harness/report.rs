use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::config::Method;
use super::run::{ResultRow, ResultTable};
use crate::error::{Error, Result};

/// `(base - method) / base`; `None` when the base error is zero.
pub fn relative_improvement(base: f64, method: f64) -> Option<f64> {
    (base > 0.0).then(|| (base - method) / base)
}

/// Aggregate of one method row at one budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub method: Method,
    pub setting: String,
    pub budget: usize,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub mean_error: Option<f64>,
    pub mean_base_error: Option<f64>,
    pub rel_improvement: Option<f64>,
    pub mean_uncovered_error: Option<f64>,
    pub mean_kl: Option<f64>,
    /// Seeds on which the method beat the base network outright.
    pub wins_vs_base: usize,
}

impl ArmSummary {
    pub fn arm(&self) -> String {
        if self.setting == "-" {
            self.method.to_string()
        } else {
            format!("{}[{}]", self.method, self.setting)
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn arm_order(table: &ResultTable) -> Vec<(usize, Method, String)> {
    let mut seen = Vec::new();
    for r in &table.rows {
        let key = (r.budget, r.method, r.setting.clone());
        if !seen.contains(&key) {
            seen.push(key);
        }
    }
    // Budgets ascending; methods in plan order within a budget.
    seen.sort_by_key(|k| k.0);
    seen
}

pub fn summarize(table: &ResultTable) -> Result<Vec<ArmSummary>> {
    if table.rows.is_empty() {
        return Err(Error::invalid("result table is empty"));
    }
    Ok(arm_order(table)
        .into_iter()
        .map(|(budget, method, setting)| {
            let rows: Vec<&ResultRow> = table
                .rows
                .iter()
                .filter(|r| r.budget == budget && r.method == method && r.setting == setting)
                .collect();
            let ok: Vec<&&ResultRow> = rows.iter().filter(|r| r.is_ok()).collect();
            let mean_error = mean(ok.iter().filter_map(|r| r.frame_error));
            let mean_base_error = mean(ok.iter().filter_map(|r| r.base_error));
            ArmSummary {
                method,
                setting,
                budget,
                seeds_ok: ok.len(),
                seeds_failed: rows.len() - ok.len(),
                rel_improvement: mean_base_error
                    .zip(mean_error)
                    .and_then(|(b, m)| relative_improvement(b, m)),
                mean_error,
                mean_base_error,
                mean_uncovered_error: mean(ok.iter().filter_map(|r| r.uncovered_error)),
                mean_kl: mean(ok.iter().filter_map(|r| r.mean_kl)),
                wins_vs_base: ok
                    .iter()
                    .filter(
                        |r| matches!((r.frame_error, r.base_error), (Some(e), Some(b)) if e < b),
                    )
                    .count(),
            }
        })
        .collect())
}

/// Paired standing of one method row against all others at a budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Standing {
    pub arm: String,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

/// Pairwise seed-by-seed comparisons at `budget`, ranked by wins minus
/// losses. Returns an empty list with fewer than two method rows.
pub fn standings(table: &ResultTable, budget: usize) -> Vec<Standing> {
    let mut errors: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in table
        .rows
        .iter()
        .filter(|r| r.budget == budget && r.is_ok())
    {
        if let Some(e) = r.frame_error {
            let arm = r.arm();
            if !errors.contains_key(&arm) {
                order.push(arm.clone());
            }
            errors.entry(arm).or_default().insert(r.seed, e);
        }
    }
    if order.len() < 2 {
        return Vec::new();
    }
    let mut out: Vec<Standing> = order
        .iter()
        .map(|a| {
            let mut s = Standing {
                arm: a.clone(),
                wins: 0,
                losses: 0,
                ties: 0,
            };
            for b in order.iter().filter(|b| *b != a) {
                for (seed, ea) in &errors[a] {
                    if let Some(eb) = errors[b].get(seed) {
                        match ea.partial_cmp(eb) {
                            Some(std::cmp::Ordering::Less) => s.wins += 1,
                            Some(std::cmp::Ordering::Greater) => s.losses += 1,
                            _ => s.ties += 1,
                        }
                    }
                }
            }
            s
        })
        .collect();
    out.sort_by_key(|s| std::cmp::Reverse(s.wins as i64 - s.losses as i64));
    out
}

/// `A > B = C > D`: ranked by net paired wins, equal scores shown as ties.
pub fn ordering_line(standings: &[Standing]) -> String {
    let mut line = String::new();
    for (i, s) in standings.iter().enumerate() {
        if i > 0 {
            let prev = &standings[i - 1];
            let tie = prev.wins as i64 - prev.losses as i64 == s.wins as i64 - s.losses as i64;
            line.push_str(if tie { " = " } else { " > " });
        }
        line.push_str(&s.arm);
    }
    line
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{:.1}%", 100.0 * v))
}

fn num(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

/// Aligned text report: one block per budget with the baseline, input,
/// output and hidden transform rows separated, then the paired ordering.
pub fn render_text(table: &ResultTable) -> Result<String> {
    let summary = summarize(table)?;
    let width = summary
        .iter()
        .map(|s| s.arm().len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = String::new();
    let mut budgets: Vec<usize> = summary.iter().map(|s| s.budget).collect();
    budgets.dedup();
    for budget in budgets {
        let rows: Vec<&ArmSummary> = summary.iter().filter(|s| s.budget == budget).collect();
        let seeds = rows
            .iter()
            .map(|s| s.seeds_ok + s.seeds_failed)
            .max()
            .unwrap_or(0);
        writeln!(out, "budget {budget} sentences, {seeds} seed(s)").unwrap();
        writeln!(
            out,
            "{:<width$}  {:>8}  {:>9}  {:>9}  {:>8}  {:>8}  {:>6}",
            "method", "error", "rel.impr", "uncovered", "kl", "beats", "failed"
        )
        .unwrap();
        let mut block = None;
        for s in rows {
            if block.is_some_and(|b| b != s.method.block()) {
                writeln!(out).unwrap();
            }
            block = Some(s.method.block());
            writeln!(
                out,
                "{:<width$}  {:>8}  {:>9}  {:>9}  {:>8}  {:>8}  {:>6}",
                s.arm(),
                num(s.mean_error),
                pct(s.rel_improvement),
                num(s.mean_uncovered_error),
                num(s.mean_kl),
                format!("{}/{}", s.wins_vs_base, s.seeds_ok),
                s.seeds_failed
            )
            .unwrap();
        }
        let st = standings(table, budget);
        if !st.is_empty() {
            writeln!(out, "ordering: {}", ordering_line(&st)).unwrap();
        }
        writeln!(out).unwrap();
    }
    Ok(out)
}

/// The per-row summary as CSV.
pub fn render_csv(table: &ResultTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in summarize(table)? {
        w.serialize(&s)
            .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::Status;

    fn row(method: Method, seed: u64, err: f64, base: f64) -> ResultRow {
        ResultRow {
            method,
            setting: "-".into(),
            budget: 5,
            seed,
            status: Status::Ok,
            frame_error: Some(err),
            base_error: Some(base),
            adapt_xent: Some(0.5),
            uncovered_error: None,
            mean_kl: Some(0.0),
            note: String::new(),
        }
    }

    #[test]
    fn relative_improvement_example() {
        let r = relative_improvement(0.20, 0.18).unwrap();
        assert!((r - 0.10).abs() < 1e-12);
        assert_eq!(relative_improvement(0.0, 0.1), None);
        let t = ResultTable {
            rows: vec![
                row(Method::Baseline, 0, 0.2, 0.2),
                row(Method::Lhn, 0, 0.18, 0.2),
            ],
        };
        let text = render_text(&t).unwrap();
        assert!(text.contains("10.0%"), "{text}");
        assert!(text.contains("0.0%"));
    }

    #[test]
    fn empty_table_is_an_error() {
        assert!(render_text(&ResultTable::default()).is_err());
        assert!(render_csv(&ResultTable::default()).is_err());
    }

    #[test]
    fn single_cell_has_no_ordering() {
        let t = ResultTable {
            rows: vec![row(Method::Lhn, 0, 0.1, 0.2)],
        };
        let text = render_text(&t).unwrap();
        assert!(!text.contains("ordering"));
        assert!(text.contains("LHN"));
    }

    #[test]
    fn ties_are_reported() {
        let t = ResultTable {
            rows: vec![
                row(Method::Lin, 0, 0.1, 0.3),
                row(Method::Lhn, 0, 0.1, 0.3),
                row(Method::Baseline, 0, 0.3, 0.3),
            ],
        };
        let st = standings(&t, 5);
        assert_eq!(ordering_line(&st), "LIN = LHN > BASELINE");
        assert_eq!(st[0].ties, 1);
        assert_eq!(st[2].losses, 2);
    }

    #[test]
    fn failed_rows_are_counted_not_averaged() {
        let mut bad = row(Method::Lhn, 1, 0.0, 0.0);
        bad.status = Status::Failed;
        bad.frame_error = None;
        let t = ResultTable {
            rows: vec![row(Method::Lhn, 0, 0.1, 0.2), bad],
        };
        let s = &summarize(&t).unwrap()[0];
        assert_eq!((s.seeds_ok, s.seeds_failed), (1, 1));
        assert_eq!(s.mean_error, Some(0.1));
        assert!(render_csv(&t).unwrap().lines().count() == 2);
    }

    #[test]
    fn blocks_are_separated() {
        let t = ResultTable {
            rows: vec![
                row(Method::Baseline, 0, 0.3, 0.3),
                row(Method::Lin, 0, 0.2, 0.3),
                row(Method::MapLin, 0, 0.2, 0.3),
                row(Method::Lhn, 0, 0.1, 0.3),
            ],
        };
        let text = render_text(&t).unwrap();
        let body: Vec<&str> = text.lines().skip(2).take(6).collect();
        assert_eq!(body[1], "");
        assert!(body[2].starts_with("LIN "));
        assert!(body[3].starts_with("MAP_LIN"));
        assert_eq!(body[4], "");
    }
}

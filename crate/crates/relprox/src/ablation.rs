//! The loss-ablation grid: which terms each row enables, running every row
//! over shared seeds, and the directional orderings checked on the results.

use relprox_core::losses::LossWeights;
use relprox_core::metrics::EvalReport;
use relprox_core::synth::{Corpus, Split};
use relprox_core::train::{evaluate_split, train, EvalConfig, TrainConfig};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Table {
    Relational,
    Auxiliary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub table: Table,
    pub label: &'static str,
    pub weights: LossWeights,
}

/// Flags for one row, in column order: p2p, rpl_d, rpl_a, rpl_p, pc, mono, triplet.
fn row(table: Table, label: &'static str, on: [bool; 7], w: f64) -> AblationRow {
    let f = |b: bool| if b { w } else { 0.0 };
    let weights = LossWeights {
        p2p: f(on[0]),
        rpl_d: f(on[1]),
        rpl_a: f(on[2]),
        rpl_p: f(on[3]),
        pc: f(on[4]),
        mono: f(on[5]),
        triplet: f(on[6]),
    };
    AblationRow { table, label, weights }
}

/// Eight relational rows followed by four auxiliary-loss rows.
pub fn ablation_rows(weight: f64) -> Vec<AblationRow> {
    use Table::*;
    let (t, f) = (true, false);
    vec![
        row(Relational, "P2P", [t, f, f, f, f, f, f], weight),
        row(Relational, "P2P+D", [t, t, f, f, f, f, f], weight),
        row(Relational, "P2P+A", [t, f, t, f, f, f, f], weight),
        row(Relational, "P2P+D+A", [t, t, t, f, f, f, f], weight),
        row(Relational, "P2P+D+P", [t, t, f, t, f, f, f], weight),
        row(Relational, "P2P+A+P", [t, f, t, t, f, f, f], weight),
        row(Relational, "D+A+P", [f, t, t, t, f, f, f], weight),
        row(Relational, "P2P+D+A+P", [t, t, t, t, f, f, f], weight),
        row(Auxiliary, "RPL", [t, t, t, t, f, f, f], weight),
        row(Auxiliary, "RPL+pc", [t, t, t, t, t, f, f], weight),
        row(Auxiliary, "RPL+mono+triplet", [t, t, t, t, f, t, t], weight),
        row(Auxiliary, "RPL+pc+mono+triplet", [t, t, t, t, t, t, t], weight),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowResult {
    pub row: AblationRow,
    /// One report per seed, in seed order; `None` marks a failed run.
    pub reports: Vec<Option<EvalReport>>,
    pub error: Option<String>,
}

impl RowResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn aps(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.map_or(f64::NAN, |r| r.ap)).collect()
    }

    pub fn mean_ap(&self) -> f64 {
        mean(&self.aps())
    }

    pub fn mean_eer(&self) -> f64 {
        mean(&self.reports.iter().map(|r| r.map_or(f64::NAN, |r| r.eer)).collect::<Vec<_>>())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains `base` with `weights` for one seed and scores the test split.
pub fn run_one(
    corpus: &Corpus,
    base: &TrainConfig,
    weights: LossWeights,
    seed: u64,
    eval: &EvalConfig,
) -> relprox_core::Result<EvalReport> {
    let mut cfg = base.clone();
    cfg.loss.weights = weights;
    cfg.seed = seed;
    cfg.eval_dev = false;
    let (state, _) = train(corpus, &cfg)?;
    evaluate_split(&state.model, corpus, Split::Test, eval)
}

/// Runs every row over every seed. Rows with identical weights share runs.
/// `map` decides how the independent runs are scheduled (serially or on a pool).
pub fn run_ablation<M>(rows: &[AblationRow], seeds: &[u64], map: M) -> Vec<RowResult>
where
    M: FnOnce(Vec<(LossWeights, u64)>) -> Vec<relprox_core::Result<EvalReport>>,
{
    let mut unique: Vec<LossWeights> = Vec::new();
    for r in rows {
        if !unique.contains(&r.weights) {
            unique.push(r.weights);
        }
    }
    let jobs: Vec<(LossWeights, u64)> = unique.iter().flat_map(|&w| seeds.iter().map(move |&s| (w, s))).collect();
    let outcomes = map(jobs);
    rows.iter()
        .map(|r| {
            let u = unique.iter().position(|w| *w == r.weights).expect("listed");
            let runs = &outcomes[u * seeds.len()..(u + 1) * seeds.len()];
            let error = runs.iter().find_map(|o| o.as_ref().err().map(|e| e.to_string()));
            RowResult { row: *r, reports: runs.iter().map(|o| o.as_ref().ok().copied()).collect(), error }
        })
        .collect()
}

/// Outcome of one directional ordering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub name: String,
    pub better: String,
    pub worse: String,
    pub better_mean: f64,
    pub worse_mean: f64,
    /// Largest per-seed shortfall of `better` below `worse` (0 if none).
    pub worst_inversion: f64,
    pub passed: bool,
}

/// Per-seed inversions smaller than this (in AP, a fraction) are tolerated.
pub const SEED_INVERSION_TOLERANCE: f64 = 0.005;

fn ordering(name: &str, better: &RowResult, worse: &RowResult, strict: bool) -> OrderingCheck {
    let (b, w) = (better.aps(), worse.aps());
    let worst_inversion = b.iter().zip(&w).map(|(x, y)| (y - x).max(0.0)).fold(0.0, f64::max);
    let (bm, wm) = (mean(&b), mean(&w));
    let ordered = if strict { bm > wm } else { bm >= wm };
    OrderingCheck {
        name: name.into(),
        better: better.row.label.into(),
        worse: worse.row.label.into(),
        better_mean: bm,
        worse_mean: wm,
        worst_inversion,
        passed: !better.failed() && !worse.failed() && ordered && worst_inversion < SEED_INVERSION_TOLERANCE,
    }
}

/// The orderings expected from the grid produced by [`ablation_rows`].
pub fn directional_checks(results: &[RowResult]) -> Vec<OrderingCheck> {
    let find = |table: Table, label: &str| {
        results.iter().find(|r| r.row.table == table && r.row.label == label).expect("row present")
    };
    let p2p = find(Table::Relational, "P2P");
    let full = find(Table::Relational, "P2P+D+A+P");
    let all = find(Table::Auxiliary, "RPL+pc+mono+triplet");
    vec![
        ordering("relational: P2P+D beats P2P", find(Table::Relational, "P2P+D"), p2p, true),
        ordering("relational: P2P+A beats P2P", find(Table::Relational, "P2P+A"), p2p, true),
        ordering("relational: P2P+D+A+P beats P2P", full, p2p, true),
        ordering("relational: P2P+D+A+P beats D+A+P", full, find(Table::Relational, "D+A+P"), true),
        ordering("auxiliary: RPL+all at least RPL", all, find(Table::Auxiliary, "RPL"), false),
        ordering("auxiliary: RPL+all beats P2P", all, p2p, true),
    ]
}

impl OrderingCheck {
    pub fn line(&self) -> String {
        format!(
            "{:<44} {:.2} vs {:.2} (worst seed inversion {:.2}) {}",
            self.name,
            100.0 * self.better_mean,
            100.0 * self.worse_mean,
            100.0 * self.worst_inversion,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Text table mirroring the ablation layout, AP and EER in percent.
pub fn render_table(results: &[RowResult], seeds: &[u64]) -> String {
    let mut out = String::new();
    let mark = |w: f64| if w > 0.0 { "x" } else { "-" };
    for (table, title) in [(Table::Relational, "Relational losses"), (Table::Auxiliary, "Auxiliary losses")] {
        out.push_str(&format!("{title} (test split, mean over seeds {seeds:?})\n"));
        match table {
            Table::Relational => out.push_str("P2P  RPL-D  RPL-A  RPL-P |  AP (%)  EER (%)\n"),
            Table::Auxiliary => out.push_str("RPL  L_pc  L_mono  L_triplet |  AP (%)  EER (%)\n"),
        }
        for r in results.iter().filter(|r| r.row.table == table) {
            let w = r.row.weights;
            let cols = match table {
                Table::Relational => {
                    format!("{:<4} {:<6} {:<6} {:<5}", mark(w.p2p), mark(w.rpl_d), mark(w.rpl_a), mark(w.rpl_p))
                }
                Table::Auxiliary => format!("{:<4} {:<5} {:<7} {:<9}", "x", mark(w.pc), mark(w.mono), mark(w.triplet)),
            };
            let metrics = if r.failed() {
                format!("  FAILED: {}", r.error.as_deref().unwrap_or(""))
            } else {
                format!("  {:6.2}  {:7.2}", 100.0 * r.mean_ap(), 100.0 * r.mean_eer())
            };
            out.push_str(&format!("{cols} |{metrics}\n"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_rows_with_expected_terms() {
        let rows = ablation_rows(1.0);
        assert_eq!(rows.len(), 12);
        assert_eq!(rows.iter().filter(|r| r.table == Table::Relational).count(), 8);
        assert_eq!(rows[0].weights, LossWeights::p2p_only());
        assert_eq!(rows[6].weights.p2p, 0.0);
        assert_eq!(rows[7].weights, rows[8].weights);
        let all = rows[11].weights;
        assert!([all.p2p, all.rpl_d, all.rpl_a, all.rpl_p, all.pc, all.mono, all.triplet].iter().all(|&w| w == 1.0));
    }

    fn fake(label: &'static str, aps: &[f64]) -> RowResult {
        let reports = aps
            .iter()
            .map(|&ap| {
                Some(EvalReport {
                    eer: 0.1,
                    eer_threshold: 0.0,
                    ap,
                    n_pos: 1,
                    n_neg: 1,
                    sampled_with_replacement: false,
                })
            })
            .collect();
        RowResult {
            row: AblationRow { table: Table::Relational, label, weights: LossWeights::p2p_only() },
            reports,
            error: None,
        }
    }

    #[test]
    fn ordering_tolerance() {
        let base = fake("a", &[0.50, 0.50, 0.50]);
        assert!(ordering("x", &fake("b", &[0.52, 0.52, 0.497]), &base, true).passed);
        assert!(!ordering("x", &fake("b", &[0.60, 0.52, 0.49]), &base, true).passed, "inversion of 1 point");
        assert!(!ordering("x", &base, &base, true).passed);
        assert!(ordering("x", &base, &base, false).passed);
    }

    #[test]
    fn shared_runs_and_failures() {
        let rows = ablation_rows(1.0);
        let mut calls = 0;
        let results = run_ablation(&rows, &[1, 2], |jobs| {
            calls = jobs.len();
            jobs.iter()
                .map(|(w, s)| {
                    if w.p2p == 0.0 {
                        Err(relprox_core::Error::NonFinite("boom".into()))
                    } else {
                        Ok(EvalReport {
                            eer: 0.2,
                            eer_threshold: 0.0,
                            ap: *s as f64 / 10.0,
                            n_pos: 1,
                            n_neg: 1,
                            sampled_with_replacement: false,
                        })
                    }
                })
                .collect()
        });
        assert_eq!(calls, 11 * 2);
        assert_eq!(results.len(), 12);
        assert!(results[6].failed());
        assert_eq!(results.iter().filter(|r| r.failed()).count(), 1);
        assert!(render_table(&results, &[1, 2]).contains("FAILED"));
    }
}

//! Sweeps over (M, k) grids — the experiment-table shape — with per-point
//! seeding derived from the point's coordinates, so the set of points in a
//! grid never changes any single point's result.

use rayon::prelude::*;
use thiserror::Error;

use crate::protocol::ProtocolParams;
use crate::queueing::is_stable;
use crate::rng::point_seed;
use crate::sim::{replicate, MoAConfig, Verdict};

/// One grid point: layers and fan-out, with optional per-point overrides of
/// the base arrival rate and (homogeneous) service mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub m: u32,
    pub k: u32,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SweepError {
    #[error("sweep grid is empty")]
    Empty,
    #[error("grid point {index} (`{text}`): {reason}")]
    BadPoint {
        index: usize,
        text: String,
        reason: String,
    },
}

/// Parse a grid string: points separated by `;` or newlines, each point
/// `M,k` with optional `,lambda` and `,alpha` — e.g. `0,0; 1,1; 2,2`.
pub fn parse_grid(text: &str) -> Result<Vec<SweepPoint>, SweepError> {
    let mut points = Vec::new();
    for (index, chunk) in text
        .split([';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .enumerate()
    {
        let bad = |reason: String| SweepError::BadPoint {
            index,
            text: chunk.to_string(),
            reason,
        };
        let fields: Vec<&str> = chunk.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(bad(format!(
                "expected `M,k[,lambda[,alpha]]`, got {} fields",
                fields.len()
            )));
        }
        let m: u32 = fields[0]
            .parse()
            .map_err(|e| bad(format!("M: {e}")))?;
        let k: u32 = fields[1]
            .parse()
            .map_err(|e| bad(format!("k: {e}")))?;
        let lambda = fields
            .get(2)
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("lambda: {e}"))))
            .transpose()?;
        let alpha = fields
            .get(3)
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("alpha: {e}"))))
            .transpose()?;
        points.push(SweepPoint { m, k, lambda, alpha });
    }
    if points.is_empty() {
        return Err(SweepError::Empty);
    }
    Ok(points)
}

/// Measured values for one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub m: u32,
    pub k: u32,
    pub utilization: f64,
    pub stable_theory: bool,
    pub mean_latency: Option<f64>,
    pub avg_queue_size: f64,
    pub verdict: Verdict,
}

/// One grid point's result: a measured row, or the failure that aborted it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub m: u32,
    pub k: u32,
    pub outcome: Result<SweepRow, String>,
}

fn worst_verdict(verdicts: impl IntoIterator<Item = Verdict>) -> Verdict {
    let mut worst = Verdict::StableLooking;
    for v in verdicts {
        let rank = |v: Verdict| match v {
            Verdict::StableLooking => 0,
            Verdict::Growing => 1,
            Verdict::AbortedByGuard => 2,
        };
        if rank(v) > rank(worst) {
            worst = v;
        }
    }
    worst
}

fn run_point(base: &MoAConfig, point: &SweepPoint, replications: usize) -> Result<SweepRow, String> {
    let params = ProtocolParams::new(base.params.n, point.k, point.m).map_err(|e| e.to_string())?;
    let mut cfg = base.clone();
    cfg.params = params;
    if let Some(lambda) = point.lambda {
        cfg.lambda = lambda;
    }
    if let Some(alpha) = point.alpha {
        for dist in &mut cfg.service {
            *dist = dist.with_mean(alpha);
        }
    }
    cfg.seed = point_seed(base.seed, point.m, point.k, cfg.lambda);
    let alpha_max = cfg
        .service
        .iter()
        .map(|s| s.mean())
        .fold(f64::NEG_INFINITY, f64::max);
    let summary = is_stable(cfg.lambda, point.k, point.m, alpha_max);
    let rep = replicate(&cfg, replications).map_err(|e| e.to_string())?;
    Ok(SweepRow {
        m: point.m,
        k: point.k,
        utilization: summary.utilization,
        stable_theory: summary.stable,
        mean_latency: rep.summary.mean_latency.map(|l| l.mean),
        avg_queue_size: rep.summary.avg_queue_size.mean,
        verdict: worst_verdict(rep.per_run.iter().map(|r| r.verdict)),
    })
}

/// Run every grid point (in parallel; output order is grid order). A failing
/// point yields an error marker in its row; other rows are unaffected.
pub fn run_sweep(
    base: &MoAConfig,
    grid: &[SweepPoint],
    replications: usize,
) -> Result<Vec<SweepResult>, SweepError> {
    if grid.is_empty() {
        return Err(SweepError::Empty);
    }
    Ok(grid
        .par_iter()
        .map(|point| SweepResult {
            m: point.m,
            k: point.k,
            outcome: run_point(base, point, replications),
        })
        .collect())
}

fn csv_field(raw: &str) -> String {
    if raw.contains(',') || raw.contains('"') || raw.contains('\n') {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

pub const SWEEP_CSV_HEADER: &str = "M,k,utilization,stable_theory,mean_latency,avg_queue_size,verdict";

/// Render sweep results as CSV with the fixed column set.
pub fn render_csv(results: &[SweepResult]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in results {
        match &r.outcome {
            Ok(row) => {
                let latency = row
                    .mean_latency
                    .map(|l| l.to_string())
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    row.m,
                    row.k,
                    row.utilization,
                    row.stable_theory,
                    latency,
                    row.avg_queue_size,
                    row.verdict
                ));
            }
            Err(message) => {
                out.push_str(&format!(
                    "{},{},,,,,{}\n",
                    r.m,
                    r.k,
                    csv_field(&format!("error: {message}"))
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::ServiceDist;

    #[test]
    fn grid_parsing_accepts_all_arities() {
        let grid = parse_grid("0,0; 1,1 ;2,3,0.1\n2,2,0.1,0.5").unwrap();
        assert_eq!(grid.len(), 4);
        assert_eq!(
            grid[0],
            SweepPoint {
                m: 0,
                k: 0,
                lambda: None,
                alpha: None
            }
        );
        assert_eq!(grid[2].lambda, Some(0.1));
        assert_eq!(grid[3].alpha, Some(0.5));
    }

    #[test]
    fn grid_parsing_rejects_garbage() {
        assert_eq!(parse_grid("  "), Err(SweepError::Empty));
        assert!(matches!(
            parse_grid("1"),
            Err(SweepError::BadPoint { index: 0, .. })
        ));
        assert!(matches!(
            parse_grid("1,1; x,2"),
            Err(SweepError::BadPoint { index: 1, .. })
        ));
        assert!(matches!(
            parse_grid("1,2,3,4,5"),
            Err(SweepError::BadPoint { .. })
        ));
    }

    fn tiny_base() -> MoAConfig {
        MoAConfig::homogeneous(
            ProtocolParams::new(4, 0, 0).unwrap(),
            0.1,
            ServiceDist::Exponential { mean: 1.0 },
            500.0,
            21,
        )
    }

    #[test]
    fn failing_point_yields_error_marker_and_leaves_others_alone() {
        let grid = parse_grid("0,0; 1,9").unwrap(); // k=9 > n-1=3
        let results = run_sweep(&tiny_base(), &grid, 1).unwrap();
        assert!(results[0].outcome.is_ok());
        let err = results[1].outcome.as_ref().expect_err("k too big");
        assert!(err.contains("fan-out"), "got {err}");
        let csv = render_csv(&results);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,9,,,,,"));
        assert!(lines[2].contains("error:"));
    }

    #[test]
    fn results_are_independent_of_grid_order() {
        let base = tiny_base();
        let forward = parse_grid("0,0; 1,1; 1,2").unwrap();
        let backward = parse_grid("1,2; 1,1; 0,0").unwrap();
        let fw = run_sweep(&base, &forward, 1).unwrap();
        let bw = run_sweep(&base, &backward, 1).unwrap();
        for (a, b) in fw.iter().zip(bw.iter().rev()) {
            assert_eq!(a, b, "per-point seeding must make order irrelevant");
        }
    }

    #[test]
    fn csv_escapes_fields_with_commas() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}

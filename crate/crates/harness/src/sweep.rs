//! `(M_train, M_test)` sweeps: closed-form and trained optima per training
//! length, Monte Carlo robust error per test length, and the analytic bound.

use crate::config::ExperimentConfig;
use crate::correlation::{correlation, CorrelationReport};
use crate::{HarnessError, Result};
use advicl::{
    closed_form_solution, estimate_robust_error, robust_bound, train_surrogate_restricted,
    RngStream, TrainMode,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str =
    "m_train,m_test,ratio,robust_err,robust_err_se,theory_bound,used_exact_attack,flag";

/// Largest relative Frobenius gap tolerated between the trained and
/// closed-form products before a row is flagged.
pub const TRAIN_AGREEMENT: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub m_train: usize,
    pub m_test: usize,
    /// `√M_test / M_train`; absent when `M_train = 0`.
    pub ratio: Option<f64>,
    pub robust_err: f64,
    pub robust_err_se: f64,
    pub theory_bound: f64,
    pub used_exact_attack: bool,
    /// `;`-separated tags, empty when nothing is flagged.
    pub flag: String,
}

impl SweepRecord {
    pub fn failed(&self) -> bool {
        self.flag.split(';').any(|f| f.starts_with("error:"))
    }

    pub fn bound_holds(&self) -> bool {
        self.robust_err + 3.0 * self.robust_err_se <= self.theory_bound
    }
}

/// Stream for one grid cell; depends only on the seed and the cell.
pub fn cell_stream(seed: u64, m_train: usize, m_test: usize) -> RngStream {
    RngStream::new(seed, ((m_train as u64) << 32) | m_test as u64)
}

fn clean_tag(msg: &str) -> String {
    msg.replace([',', ';', '\n', '\r'], " ")
}

fn static_flags(cfg: &ExperimentConfig, m_train: usize, m_test: usize) -> Vec<String> {
    let mut flags = Vec::new();
    if m_train > 4 * cfg.n || m_test > 4 * cfg.n {
        flags.push("long_suffix".to_string());
    }
    let root_d = (cfg.d as f64).sqrt();
    if cfg.eps < 0.5 * root_d || cfg.eps > 2.0 * root_d {
        flags.push("eps_regime".to_string());
    }
    flags
}

fn failed_record(
    m_train: usize,
    m_test: usize,
    mut flags: Vec<String>,
    err: &dyn std::fmt::Display,
) -> SweepRecord {
    flags.insert(0, format!("error:{}", clean_tag(&err.to_string())));
    SweepRecord {
        m_train,
        m_test,
        ratio: ratio(m_train, m_test),
        robust_err: f64::NAN,
        robust_err_se: f64::NAN,
        theory_bound: f64::NAN,
        used_exact_attack: false,
        flag: flags.join(";"),
    }
}

fn ratio(m_train: usize, m_test: usize) -> Option<f64> {
    (m_train >= 1).then(|| (m_test as f64).sqrt() / m_train as f64)
}

/// Runs every cell of the grid. Failures are recorded per cell with an
/// `error:` tag instead of aborting the sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let cov = cfg.covariance()?;
    let mut records = Vec::new();
    for &m_train in &cfg.m_train_list {
        let rc_train = cfg.regime(m_train)?;
        let solution = match closed_form_solution(&rc_train) {
            Ok(s) => s,
            Err(e) => {
                for &m_test in &cfg.m_test_list {
                    records.push(failed_record(
                        m_train,
                        m_test,
                        static_flags(cfg, m_train, m_test),
                        &e,
                    ));
                }
                continue;
            }
        };
        let mut row_flags = Vec::new();
        let init = cfg.init_spec(&rc_train);
        let tcfg = cfg.train_config(
            &rc_train,
            TrainMode::RestrictedAnalytic,
            RngStream::new(cfg.seed, 0),
        );
        match train_surrogate_restricted(&init, &rc_train, &tcfg) {
            Ok((trained, diag)) => {
                let gap = (trained.product() - &solution.product).norm() / solution.product.norm();
                if !(gap <= TRAIN_AGREEMENT) {
                    row_flags.push("train_mismatch".to_string());
                }
                if !diag.conditions_met {
                    row_flags.push("sigma_above_threshold".to_string());
                }
            }
            Err(e) => row_flags.push(format!("error:train {}", clean_tag(&e.to_string()))),
        }
        let params = solution.restricted().embed();
        for &m_test in &cfg.m_test_list {
            let mut flags = row_flags.clone();
            flags.extend(static_flags(cfg, m_train, m_test));
            let cell = (|| -> Result<SweepRecord> {
                let rc_test = cfg.regime(m_test)?;
                let attack = cfg.attack_config(m_test, cell_stream(cfg.seed, m_train, m_test));
                let est = estimate_robust_error(&params, &cov, cfg.n, &attack, cfg.n_tasks_mc)?;
                let bound = robust_bound(&rc_train, &rc_test)?;
                Ok(SweepRecord {
                    m_train,
                    m_test,
                    ratio: ratio(m_train, m_test),
                    robust_err: est.mean,
                    robust_err_se: est.stderr,
                    theory_bound: bound,
                    used_exact_attack: est.exact,
                    flag: String::new(),
                })
            })();
            match cell {
                Ok(mut rec) => {
                    if !rec.bound_holds() {
                        flags.push("bound_violation".to_string());
                    }
                    rec.flag = flags.join(";");
                    records.push(rec);
                }
                Err(e) => records.push(failed_record(m_train, m_test, flags, &e)),
            }
        }
    }
    Ok(records)
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub fn to_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.m_train,
            r.m_test,
            r.ratio.map(num).unwrap_or_default(),
            num(r.robust_err),
            num(r.robust_err_se),
            num(r.theory_bound),
            r.used_exact_attack,
            r.flag
        );
    }
    out
}

fn parse_num(field: &str, line: usize) -> Result<f64> {
    if field.is_empty() {
        return Ok(f64::NAN);
    }
    field
        .parse()
        .map_err(|_| HarnessError::Csv(format!("line {line}: bad number {field:?}")))
}

pub fn parse_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| HarnessError::Csv(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(HarnessError::Csv(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| HarnessError::Csv(e.to_string()))?;
        let line = i + 2;
        let int = |k: usize| -> Result<usize> {
            row[k]
                .parse()
                .map_err(|_| HarnessError::Csv(format!("line {line}: bad integer {:?}", &row[k])))
        };
        let ratio = parse_num(&row[2], line)?;
        out.push(SweepRecord {
            m_train: int(0)?,
            m_test: int(1)?,
            ratio: (!ratio.is_nan()).then_some(ratio),
            robust_err: parse_num(&row[3], line)?,
            robust_err_se: parse_num(&row[4], line)?,
            theory_bound: parse_num(&row[5], line)?,
            used_exact_attack: match &row[6] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(HarnessError::Csv(format!(
                        "line {line}: bad flag {other:?}"
                    )))
                }
            },
            flag: row[7].to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub pcc: f64,
    pub p_value: f64,
    pub method: String,
}

impl From<CorrelationReport> for CorrelationSummary {
    fn from(r: CorrelationReport) -> Self {
        Self {
            pcc: r.pcc,
            p_value: r.p_value,
            method: r.method,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_hash: String,
    pub records: Vec<SweepRecord>,
    /// Absent when the grid is too degenerate to correlate.
    pub correlation: Option<CorrelationSummary>,
    pub environment: Environment,
}

pub fn summarize(cfg: &ExperimentConfig, records: Vec<SweepRecord>) -> SweepSummary {
    let corr = correlation(&records, cfg.seed).ok().map(Into::into);
    SweepSummary {
        config_hash: cfg.hash(),
        records,
        correlation: corr,
        environment: Environment {
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    }
}

/// Writes `sweep.csv` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, summary: &SweepSummary) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("sweep.csv");
    let json_path = dir.join("summary.json");
    std::fs::write(&csv_path, to_csv(&summary.records))?;
    let mut json = serde_json::to_string_pretty(summary)?;
    json.push('\n');
    std::fs::write(&json_path, json)?;
    Ok((csv_path, json_path))
}

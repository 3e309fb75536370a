//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any fails.

use advicl_harness::sweep::{parse_csv, SweepRecord};
use advicl_harness::verify::{self, CheckResult, RunOutcome, VerifyPlan};
use advicl_harness::{commands, ExperimentConfig, HarnessError, Result};
use std::process::ExitCode;
use std::time::Instant;

const SEED: u64 = 0;

/// Work shared by several criteria, computed once; errors are kept as text
/// so every dependent criterion can report them.
struct Shared {
    cfg: ExperimentConfig,
    reference: std::result::Result<Vec<RunOutcome>, String>,
    config_runs: std::result::Result<Vec<RunOutcome>, String>,
    grid: std::result::Result<Vec<SweepRecord>, String>,
}

fn setup(e: &str) -> HarnessError {
    HarnessError::DegenerateInput(format!("setup failed: {e}"))
}

impl Shared {
    fn new(cfg: ExperimentConfig) -> Self {
        let reference = verify::reference_runs()
            .and_then(|r| verify::execute_runs(&r))
            .map_err(|e| e.to_string());
        let config_runs = verify::config_runs(&cfg)
            .and_then(|r| verify::execute_runs(&r))
            .map_err(|e| e.to_string());
        let grid = commands::sweep(&cfg)
            .and_then(|o| parse_csv(&std::fs::read_to_string(o.csv)?))
            .map_err(|e| e.to_string());
        Self {
            cfg,
            reference,
            config_runs,
            grid,
        }
    }

    fn reference(&self) -> Result<&[RunOutcome]> {
        self.reference.as_deref().map_err(|e| setup(e))
    }

    fn grid(&self) -> Result<&[SweepRecord]> {
        self.grid.as_deref().map_err(|e| setup(e))
    }

    fn all_runs(&self) -> Result<Vec<RunOutcome>> {
        let mut runs = self.reference()?.to_vec();
        runs.extend(
            self.config_runs
                .as_deref()
                .map_err(|e| setup(e))?
                .iter()
                .cloned(),
        );
        Ok(runs)
    }
}

fn named(checks: Vec<CheckResult>, name: &str) -> Vec<CheckResult> {
    checks.into_iter().filter(|c| c.name == name).collect()
}

fn determinism(cfg: &ExperimentConfig) -> Result<Vec<CheckResult>> {
    let tmp = tempfile::tempdir()?;
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let mut c = cfg.clone();
        c.output_dir = tmp.path().join(name);
        commands::sweep(&c)?;
        outputs.push((
            std::fs::read(c.output_dir.join("sweep.csv"))?,
            std::fs::read(c.output_dir.join("summary.json"))?,
        ));
    }
    let differing =
        usize::from(outputs[0].0 != outputs[1].0) + usize::from(outputs[0].1 != outputs[1].1);
    Ok(vec![CheckResult::at_most(
        "sweep_determinism",
        differing as f64,
        0.0,
        "files differing between two sweeps",
    )])
}

type Check = fn(&Shared, &VerifyPlan) -> Result<Vec<CheckResult>>;

const CRITERIA: [(usize, &str, Check); 10] = [
    (
        1,
        "restricted training converges to the closed form",
        |s, _| Ok(verify::check_convergence(s.reference()?)),
    ),
    (
        2,
        "analytic gradient matches central differences",
        |_, p| verify::check_gradient(SEED, p.gradient_cases, false),
    ),
    (3, "surrogate upper-bounds the adversarial loss", |_, p| {
        verify::check_surrogate_upper_bound(SEED, p.prop1_draws_per_class, p.prop1_tasks)
    }),
    (4, "robust error within the bound on the grid", |s, _| {
        let mut out = verify::check_bound(s.grid()?);
        out.extend(named(verify::check_reference_values()?, "reference_bound"));
        Ok(out)
    }),
    (
        5,
        "positive significant correlation with sqrt(M_test)/M_train",
        |s, _| Ok(verify::check_correlation(s.grid()?, s.cfg.seed)),
    ),
    (6, "trajectory lemmas along restricted runs", |s, _| {
        let mut out = verify::check_trajectory_lemmas(&s.all_runs()?);
        out.extend(named(verify::check_reference_values()?, "reference_mu"));
        Ok(out)
    }),
    (7, "off-blocks stay at the noise floor", |s, p| {
        let checks =
            verify::check_zero_gradient(&s.cfg, p.zero_gradient_steps, p.zero_gradient_batch)?;
        Ok(checks.into_iter().filter(|c| !c.informational).collect())
    }),
    (8, "attack oracles", |_, p| {
        verify::check_attacks(SEED, p.attack_instances)
    }),
    (9, "Gaussian moment identities", |_, p| {
        verify::check_moments(SEED, p.moment_samples)
    }),
    (10, "sweep outputs are byte-identical", |s, _| {
        determinism(&s.cfg)
    }),
];

fn main() -> ExitCode {
    let plan = VerifyPlan::default();
    let tmp = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let shared = Shared::new(ExperimentConfig::default_sweep(tmp.path().join("grid")));
    println!(
        "acceptance: shared training runs and grid sweep took {:.1}s",
        start.elapsed().as_secs_f64()
    );

    let mut all_ok = true;
    for (id, title, check) in CRITERIA {
        let start = Instant::now();
        let (ok, detail) = match check(&shared, &plan) {
            Ok(checks) => {
                let ok = !checks.is_empty() && checks.iter().all(|k| k.passed);
                let parts: Vec<String> = checks
                    .iter()
                    .map(|k| format!("{}={:.4e} (limit {:.1e})", k.name, k.measured, k.threshold))
                    .collect();
                (ok, parts.join("; "))
            }
            Err(e) => (false, format!("error: {e}")),
        };
        all_ok &= ok;
        println!(
            "criterion {id:>2} [{}] {title}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if all_ok {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}

//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use cgenn::model::TrainConfig;
use cgenn::properties::{
    run_suite, PropertyReport, Suite, EQUIVARIANCE_TOL, EXACT_TOL, GRADIENT_TOL, METRIC_MATRICES, PROOF_TOL,
};
use cgenn::tasks::Task;
use cgenn_cli::{RunConfig, RunSummary, METRICS_FILE, SUMMARY_FILE};

const SEED: u64 = 1;
const TRIALS: usize = 50;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn cgenn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgenn")).current_dir(dir).args(args).output().expect("spawn cgenn")
}

fn run_ok(dir: &Path, args: &[&str]) -> Result<Output, String> {
    let out = cgenn(dir, args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!("`cgenn {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn read_report(path: &Path) -> PropertyReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Checks every named property ran at least `cases` times within `tol`.
fn within(report: &PropertyReport, names: &[&str], cases: usize, tol: f64) -> Result<String, String> {
    let mut worst = 0.0f64;
    for name in names {
        let p = report.property(name).ok_or_else(|| format!("{name} missing"))?;
        if p.cases < cases {
            return Err(format!("{name} ran {} cases, need {cases}", p.cases));
        }
        if !(p.max_error <= tol) || report.failures.iter().any(|f| f.property == *name) {
            return Err(format!("{name} max error {:.3e} over {tol:e}", p.max_error));
        }
        worst = worst.max(p.max_error);
    }
    Ok(format!("worst {worst:.3e} <= {tol:e}"))
}

fn timed(limit: Duration, elapsed: Duration, v: Result<String, String>) -> Verdict {
    match v {
        Ok(d) if elapsed <= limit => verdict(true, d),
        Ok(d) => verdict(false, format!("{d}, but took {elapsed:.1?} (limit {limit:?})")),
        Err(e) => verdict(false, e),
    }
}

fn algebra(work: &Path) -> Verdict {
    let start = Instant::now();
    let v = run_ok(work, &["verify", "--suite", "algebra", "--trials", "500", "--seed", "1", "--json", "algebra.json"])
        .and_then(|_| {
            let report = read_report(&work.join("algebra.json"));
            if !report.passed() {
                return Err(format!("{} failures, first {:?}", report.failures.len(), report.failures[0]));
            }
            let names = [
                "algebra.associativity",
                "algebra.bilinearity",
                "algebra.vector_product",
                "algebra.reversal",
                "algebra.quadratic_form",
            ];
            within(&report, &names, 500, EXACT_TOL).map(|d| format!("{} cases across n = 2, 3, 4, {d}", report.cases))
        });
    timed(Duration::from_secs(30), start.elapsed(), v)
}

fn metric_pipeline() -> Verdict {
    let start = Instant::now();
    let report = run_suite(Suite::Metric, SEED, METRIC_MATRICES);
    let v = within(&report, &["metric.decomposition", "metric.bilinear_transfer"], METRIC_MATRICES, EXACT_TOL).and_then(
        |a| {
            within(&report, &["metric.anticommutation", "metric.anticommutation_converse", "metric.volume_identity"], 1, PROOF_TOL)
                .map(|b| format!("transfer {a}; proofs {b}"))
        },
    );
    timed(Duration::from_secs(30), start.elapsed(), v)
}

fn differentiation() -> Verdict {
    let start = Instant::now();
    let mut reports = Vec::new();
    for suite in [Suite::Layers, Suite::Metric, Suite::Model] {
        reports.push(run_suite(suite, SEED, TRIALS));
    }
    let mut v = Ok(String::new());
    let mut checked = 0;
    for report in &reports {
        let names: Vec<&str> = report
            .properties
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| n.contains(".gradient") || *n == "metric.backward")
            .collect();
        checked += names.len();
        if let Err(e) = within(report, &names, TRIALS, GRADIENT_TOL) {
            v = Err(e);
            break;
        }
    }
    let v = v.map(|_| format!("{checked} gradient properties within relative {GRADIENT_TOL:e}"));
    timed(Duration::from_secs(120), start.elapsed(), v)
}

fn equivariance() -> Verdict {
    let report = run_suite(Suite::Model, SEED, TRIALS);
    let v = within(&report, &["model.equivariance", "model.equivariance_activated"], TRIALS, EQUIVARIANCE_TOL);
    match v {
        Ok(d) => verdict(true, format!("pre and post activation over {TRIALS} rotors, {d}")),
        Err(e) => verdict(false, e),
    }
}

fn summary(dir: &Path) -> RunSummary {
    serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE)).unwrap()).unwrap()
}

fn signed_volume(work: &Path) -> Verdict {
    let start = Instant::now();
    let steps = Task::SignedVolume.default_steps().to_string();
    let go = || -> Result<(RunSummary, RunSummary), String> {
        run_ok(work, &["gen-data", "--task", "signed-volume", "--n", "1000", "--seed", "0", "--out", "sv_train.jsonl"])?;
        run_ok(work, &["gen-data", "--task", "signed-volume", "--n", "1000", "--seed", "1", "--out", "sv_eval.jsonl"])?;
        let common = ["train", "--task", "signed-volume", "--train-data", "sv_train.jsonl", "--eval-data", "sv_eval.jsonl", "--steps", &steps, "--seed", "0"];
        run_ok(work, &[&common[..], &["--out", "sv_learned"]].concat())?;
        run_ok(work, &[&common[..], &["--out", "sv_fixed", "--metric-activation", "1.0"]].concat())?;
        Ok((summary(&work.join("sv_learned")), summary(&work.join("sv_fixed"))))
    };
    let v = go().and_then(|(learned, fixed)| {
        let (init, last) = (learned.train.initial_train_loss, learned.train.final_train_loss);
        let eval = |s: &RunSummary| s.train.final_eval_loss.unwrap_or(f64::NAN);
        println!("      signed volume, {steps} steps          train MSE      eval MSE");
        let fraction = TrainConfig::default().metric_activation_fraction;
        println!("      learnable metric (activation {fraction:.1})  {last:>12.4e}  {:>12.4e}", eval(&learned));
        println!(
            "      fixed metric (activation 1.0)      {:>12.4e}  {:>12.4e}",
            fixed.train.final_train_loss,
            eval(&fixed)
        );
        let direction = if eval(&learned) <= eval(&fixed) { "learnable <= fixed" } else { "learnable > fixed" };
        let detail = format!("train MSE {init:.3e} -> {last:.3e} ({:.3}% of initial); eval {direction}", 100.0 * last / init);
        if last <= 1e-2 && last <= 0.01 * init {
            Ok(detail)
        } else {
            Err(detail)
        }
    });
    timed(Duration::from_secs(15 * 60), start.elapsed(), v)
}

fn activation_sweep(work: &Path) -> Verdict {
    let start = Instant::now();
    let steps = Task::Nbody.default_steps();
    let go = || -> Result<String, String> {
        run_ok(work, &["gen-data", "--task", "nbody", "--n", "3000", "--seed", "7", "--out", "nb_train.jsonl"])?;
        run_ok(work, &["gen-data", "--task", "nbody", "--n", "1000", "--seed", "8", "--out", "nb_eval.jsonl"])?;
        let mut table = Vec::new();
        for (label, fraction) in [("early", 0.3), ("mid", 0.6), ("late", 0.9), ("never", 1.0)] {
            let dir = work.join(format!("nb_{label}"));
            let config = RunConfig {
                task: Task::Nbody,
                model: Task::Nbody.model_config(0),
                train: TrainConfig { steps, metric_activation_fraction: fraction, ..TrainConfig::default() },
                train_data: work.join("nb_train.jsonl"),
                eval_data: Some(work.join("nb_eval.jsonl")),
                out_dir: dir.clone(),
            };
            config.validate().map_err(|e| e.to_string())?;
            let expected = config.train.activation_step();
            let mut asymmetric = None;
            let mut non_finite = None;
            let result = cgenn_cli::train_observed(&config, |rec, state| {
                let m = state.model().metric().expect("metric");
                if asymmetric.is_none() && m.values() != &m.values().transpose() {
                    asymmetric = Some(rec.step);
                }
                if non_finite.is_none() && !rec.train_loss.is_finite() {
                    non_finite = Some(rec.step);
                }
            });
            let s = result.map_err(|e| format!("{label}: {e:#}"))?;
            if let Some(step) = asymmetric {
                return Err(format!("{label}: M not symmetric at step {step}"));
            }
            if let Some(step) = non_finite {
                return Err(format!("{label}: non-finite loss at step {step}"));
            }
            let csv_step = first_activated_row(&dir.join(METRICS_FILE))?;
            if csv_step != expected || s.train.activation_step != expected {
                return Err(format!("{label}: activation logged at {csv_step:?}, expected {expected:?}"));
            }
            let eval = s.train.final_eval_loss.unwrap_or(f64::NAN);
            if !s.train.final_train_loss.is_finite() || !eval.is_finite() {
                return Err(format!("{label}: non-finite final loss"));
            }
            table.push((label, fraction, expected, s.train.final_train_loss, eval));
        }
        println!("      n-body activation timing, {steps} steps");
        println!("      timing  fraction  activation step  final train MSE  final eval MSE");
        for (label, fraction, at, train, eval) in &table {
            let at = at.map(|s| s.to_string()).unwrap_or_else(|| "never".into());
            println!("      {label:<6}  {fraction:>8.1}  {at:>15}  {train:>15.4e}  {eval:>14.4e}");
        }
        let eval_of = |l: &str| table.iter().find(|r| r.0 == l).map(|r| r.4).unwrap();
        let ordered = eval_of("late") <= eval_of("mid") && eval_of("mid") <= eval_of("early");
        Ok(format!(
            "4 runs finite, M symmetric every step, activation steps logged; late <= mid <= early {}",
            if ordered { "holds" } else { "does not hold (reported only)" }
        ))
    };
    timed(Duration::from_secs(3600), start.elapsed(), go())
}

fn first_activated_row(path: &Path) -> Result<Option<usize>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut first = None;
    let mut previous = false;
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        let active = &row[3] == "true";
        if previous && !active {
            return Err(format!("{}: metric deactivated at step {}", path.display(), &row[0]));
        }
        if active && first.is_none() {
            first = Some(row[0].parse().map_err(|e| format!("{e}"))?);
        }
        previous = active;
    }
    Ok(first)
}

fn snapshot(dir: &Path, files: &[&str]) -> Vec<Vec<u8>> {
    files.iter().map(|f| fs::read(dir.join(f)).unwrap_or_default()).collect()
}

fn determinism(work: &Path) -> Verdict {
    let dir = work.join("det");
    fs::create_dir_all(&dir).unwrap();
    let commands: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (vec!["gen-data", "--task", "nbody", "--n", "40", "--seed", "3", "--out", "nb.jsonl"], vec!["nb.jsonl"]),
        (vec!["gen-data", "--task", "signed-volume", "--n", "200", "--seed", "3", "--out", "sv.jsonl"], vec!["sv.jsonl"]),
        (
            vec!["train", "--task", "nbody", "--train-data", "nb.jsonl", "--eval-data", "nb.jsonl", "--out", "run", "--steps", "120", "--batch-size", "8", "--metric-activation", "0.5"],
            vec!["run/config.json", "run/metrics.csv", "run/checkpoint.json", "run/summary.json"],
        ),
        (vec!["eval", "--checkpoint", "run", "--data", "nb.jsonl", "--json", "eval.json"], vec!["eval.json"]),
        (vec!["verify", "--suite", "all", "--trials", "20", "--json", "verify.json"], vec!["verify.json"]),
        (vec!["cayley", "--dim", "3", "--signature", "1,-1,1"], vec![]),
    ];
    for (args, files) in &commands {
        let mut seen = Vec::new();
        for _ in 0..2 {
            let out = match run_ok(&dir, args) {
                Ok(o) => o,
                Err(e) => return verdict(false, e),
            };
            seen.push((out.stdout, snapshot(&dir, files)));
        }
        if seen[0] != seen[1] {
            return verdict(false, format!("`cgenn {}` differed between runs", args.join(" ")));
        }
    }
    verdict(true, format!("{} commands repeated with bit-identical stdout and files", commands.len()))
}

fn mutations(work: &Path) -> Verdict {
    let mut caught = Vec::new();
    for m in ["cayley-sign", "no-metric-symmetrization"] {
        let out = cgenn(work, &["verify", "--suite", "all", "--inject-mutation", m]);
        if out.status.code() != Some(3) {
            return verdict(false, format!("mutation {m} exited {:?}, expected 3", out.status.code()));
        }
        let last = String::from_utf8_lossy(&out.stdout).lines().last().unwrap_or("").to_string();
        caught.push(format!("{m}: {}", last.rsplit(": ").next().unwrap_or("")));
    }
    let clean = cgenn(work, &["verify", "--suite", "all"]);
    if !clean.status.success() {
        return verdict(false, "unmutated verify failed");
    }
    verdict(true, format!("unmutated passes; {}", caught.join("; ")))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let work: PathBuf = tmp.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("algebra exactness", Box::new(|| algebra(&work))),
        ("metric pipeline", Box::new(metric_pipeline)),
        ("differentiation", Box::new(differentiation)),
        ("equivariance", Box::new(equivariance)),
        ("signed-volume desk run", Box::new(|| signed_volume(&work))),
        ("activation-timing sweep", Box::new(|| activation_sweep(&work))),
        ("determinism", Box::new(|| determinism(&work))),
        ("mutation smoke test", Box::new(|| mutations(&work))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let v = check();
        failed += usize::from(!v.pass);
        println!(
            "{} {name:<24} [{:>7.1}s] {}",
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

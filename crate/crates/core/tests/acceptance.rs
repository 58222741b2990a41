//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any hard criterion fails. The reproduction and
//! ablation criteria train at full budget and take a couple of hours on a
//! single core; artifacts are kept under the cargo target tmp directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use splitvae::config::RunConfig;
use splitvae::corpus::Corpus;
use splitvae::evaluation::{emit_reports, evaluate, Factor, Subspace, MI_CSV, PROBE_CSV};
use splitvae::objective::ObjectiveWeights;
use splitvae::synthesis::build_dataset;
use splitvae::training::{ablate, train, AblationGrid, LOG_FILE};
use splitvae::verify;

struct Outcome {
    passed: bool,
    /// A soft criterion is reported but does not fail the run.
    soft: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        soft: false,
        detail: detail.into(),
    }
}

fn artifacts(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).expect("artifact directory");
    dir
}

fn within(t: Duration, limit_s: u64) -> (bool, String) {
    (t.as_secs() <= limit_s, format!("{:.1}s", t.as_secs_f64()))
}

fn unit_oracles() -> Outcome {
    let t = Instant::now();
    let checks = verify::kernel_references().expect("kernels run");
    let (fast, took) = within(t.elapsed(), 60);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name)
        .collect();
    outcome(
        failed.is_empty() && fast,
        format!("{} checks, failed {failed:?}, {took}", checks.len()),
    )
}

fn gradient() -> Outcome {
    let t = Instant::now();
    let c = verify::objective_gradient(1).expect("gradient check runs");
    let (fast, took) = within(t.elapsed(), 300);
    outcome(c.passed && fast, format!("{}, {took}", c.detail))
}

fn decomposition() -> Outcome {
    let id = verify::decomposition_identity(7, 256, 4, 100).expect("identity runs");
    let tc = verify::single_dimension_tc(5).expect("tc runs");
    outcome(
        id.passed && tc.passed,
        format!("{}; {}", id.detail, tc.detail),
    )
}

fn reproduction() -> (Outcome, Outcome) {
    let dir = artifacts("reproduction");
    let mut cfg = RunConfig::default();
    cfg.synth.n_samples = 8000;
    cfg.training.epochs = 60;
    let t = Instant::now();
    let corpus = build_dataset(&cfg.synth, &cfg.features).expect("corpus");
    let trained = train(&corpus, &cfg, Some(&dir), |_, _| {}).expect("training");
    let ev =
        evaluate(&trained.model, &trained.store, &corpus, &cfg.evaluation).expect("evaluation");
    emit_reports(Some(&ev.mi), Some(&ev.probes), &dir).expect("reports");
    let took = t.elapsed().as_secs_f64() / 60.0;

    let p = |s, f| ev.probes.get(s, f);
    let (st, pt, bt) = (
        p(Subspace::Shared, Factor::Timbre),
        p(Subspace::Private, Factor::Timbre),
        p(Subspace::Both, Factor::Timbre),
    );
    let (pf, sf, bf) = (
        p(Subspace::Private, Factor::Frequency),
        p(Subspace::Shared, Factor::Frequency),
        p(Subspace::Both, Factor::Frequency),
    );
    let probes_ok =
        st >= 0.90 && bt >= 0.90 && pf >= 0.60 && bf >= 0.70 && sf <= 0.45 && st - pt >= 0.10;
    let probes = outcome(
        probes_ok && took <= 120.0,
        format!(
            "private/shared/both timbre {pt:.3}/{st:.3}/{bt:.3}, frequency {pf:.3}/{sf:.3}/{bf:.3}, {took:.1} min"
        ),
    );
    let (tr, fr) = (ev.mi.timbre_ratio(), ev.mi.frequency_ratio());
    let mi = outcome(
        tr >= 1.5 && fr >= 1.5,
        format!("shared/private timbre MI {tr:.3}, private/shared frequency MI {fr:.3}"),
    );
    (probes, mi)
}

fn small_run(dir: &Path) -> Vec<Vec<u8>> {
    let mut cfg = RunConfig::default();
    cfg.synth.n_samples = 400;
    cfg.synth.n_frequency_bins = 4;
    cfg.synth.seed = 11;
    cfg.model.channels = vec![4, 8, 8, 8];
    cfg.training.epochs = 3;
    cfg.training.batch_size = 32;
    cfg.training.seed = 5;
    let corpus = build_dataset(&cfg.synth, &cfg.features).expect("corpus");
    corpus.write(&dir.join("data")).expect("corpus write");
    let corpus = Corpus::read(&dir.join("data")).expect("corpus read");
    let t = train(&corpus, &cfg, Some(dir), |_, _| {}).expect("training");
    let ev = evaluate(&t.model, &t.store, &corpus, &cfg.evaluation).expect("evaluation");
    emit_reports(Some(&ev.mi), Some(&ev.probes), dir).expect("reports");
    [LOG_FILE, MI_CSV, PROBE_CSV]
        .iter()
        .map(|f| fs::read(dir.join(f)).expect("artifact"))
        .collect()
}

fn determinism() -> Outcome {
    let a = small_run(&artifacts("determinism_a"));
    let b = small_run(&artifacts("determinism_b"));
    let same = a == b;
    outcome(
        same,
        format!(
            "training log, MI and probe CSVs {}",
            if same { "byte-identical" } else { "differ" }
        ),
    )
}

fn ablation() -> Outcome {
    let dir = artifacts("ablation");
    let mut base = RunConfig::default();
    base.synth.n_samples = 2000;
    base.training.epochs = 30;
    let w = |alpha, beta| ObjectiveWeights {
        alpha,
        beta,
        gamma: 0.1,
    };
    let grid = AblationGrid {
        points: vec![w(0.0, 0.0), w(1.0, 0.0), w(0.0, 1.0)],
        seeds: vec![0, 1, 2],
        base,
        data: None,
    };
    let corpus = build_dataset(&grid.base.synth, &grid.base.features).expect("corpus");
    let rows = ablate(&corpus, &grid, &dir, |_| {}).expect("ablation");
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for chunk in rows.chunks(grid.points.len()) {
        let scores: Vec<Option<f64>> = chunk
            .iter()
            .map(|r| r.outcome.as_ref().ok().map(|s| s.score()))
            .collect();
        let won = match scores[..] {
            [Some(base), Some(a), Some(b)] => base >= a && base >= b,
            _ => false,
        };
        wins += won as usize;
        let fmt = |s: &Option<f64>| s.map_or("failed".to_string(), |v| format!("{v:.3}"));
        per_seed.push(format!(
            "seed {}: {}/{}/{}",
            chunk[0].seed,
            fmt(&scores[0]),
            fmt(&scores[1]),
            fmt(&scores[2])
        ));
    }
    let mut o = outcome(
        wins >= 2,
        format!("baseline best in {wins}/3 ({})", per_seed.join("; ")),
    );
    o.soft = true;
    o
}

fn main() -> ExitCode {
    let criteria: [(&str, &dyn Fn() -> Vec<Outcome>); 6] = [
        ("1 unit oracles", &|| vec![unit_oracles()]),
        ("2 objective gradient", &|| vec![gradient()]),
        ("3 KL decomposition", &|| vec![decomposition()]),
        ("4 probe pattern / 5 MI concentration", &|| {
            let (a, b) = reproduction();
            vec![a, b]
        }),
        ("6 determinism", &|| vec![determinism()]),
        ("7 ablation direction", &|| vec![ablation()]),
    ];
    let (mut n, mut failed, mut soft_failed) = (0, 0, 0);
    for (group, run) in criteria {
        let outs = run();
        let names: Vec<&str> = group.split(" / ").collect();
        for (i, o) in outs.iter().enumerate() {
            n += 1;
            if !o.passed {
                if o.soft {
                    soft_failed += 1;
                } else {
                    failed += 1;
                }
            }
            let name = names.get(i).copied().unwrap_or(group);
            let soft = if o.soft { " (soft)" } else { "" };
            println!(
                "{} criterion {name}{soft}: {}",
                if o.passed { "PASS" } else { "FAIL" },
                o.detail
            );
        }
    }
    println!(
        "acceptance: {n} criteria, {} passed, {failed} hard failures, {soft_failed} soft failures",
        n - failed - soft_failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Trains several models, so expect tens of minutes on one core.

mod common;

use std::fmt::Write as _;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use echoqa::dataset::{load_dataset, save_dataset, set_split, split_dataset, Split};
use echoqa::geometry::Severity;
use echoqa::metrics::spearman;
use echoqa::model::*;
use echoqa::nn::gradcheck;
use echoqa::phantom::*;
use echoqa::rubric::{Attribute, Column, QualityBand, Rubric};

type Outcome = Result<String, String>;

struct Line {
    name: &'static str,
    budget: Duration,
    elapsed: Duration,
    outcome: Outcome,
}

fn run(name: &'static str, budget_secs: u64, f: impl FnOnce() -> Outcome) -> Line {
    eprintln!("running {name} ...");
    let t = Instant::now();
    let outcome = f();
    let line = Line {
        name,
        budget: Duration::from_secs(budget_secs),
        elapsed: t.elapsed(),
        outcome,
    };
    println!("{}", render(&line));
    line
}

fn passed(l: &Line) -> bool {
    l.outcome.is_ok() && l.elapsed <= l.budget
}

fn render(l: &Line) -> String {
    let detail = match &l.outcome {
        Ok(d) | Err(d) => d.as_str(),
    };
    let over = if l.elapsed > l.budget {
        format!(" over budget of {}s", l.budget.as_secs())
    } else {
        String::new()
    };
    format!(
        "{} {}: {} [{:.1}s{}]",
        if passed(l) { "PASS" } else { "FAIL" },
        l.name,
        detail,
        l.elapsed.as_secs_f64(),
        over
    )
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn fmt4(v: [f64; 4]) -> String {
    format!("[{:.4}, {:.4}, {:.4}, {:.4}]", v[0], v[1], v[2], v[3])
}

fn gradients() -> Outcome {
    let mut detail = String::new();
    let mut ok = true;
    let mut reports = gradcheck::layer_suite(20, 0xacce).map_err(e2s)?;
    reports.push(("four-stream loss", check_model_gradients(&ModelConfig::tiny(), 20, 0xacce).map_err(e2s)?));
    for (name, r) in reports {
        ok &= r.passed();
        write!(detail, "{name} {:.1e}/{}; ", r.max_relative_error, r.checked).unwrap();
    }
    check(ok, format!("max relative error per check ({detail}tolerance {:e}, 20 trials each)", gradcheck::TOLERANCE))
}

fn oracles() -> Outcome {
    let results = common::all(100, 0x0bac1e);
    let ok = results.iter().all(|r| r.passed());
    let detail: Vec<String> = results
        .iter()
        .map(|r| format!("{} {:.1e}", r.name, r.max_deviation))
        .collect();
    check(ok, format!("max deviation over 100 cases each: {}", detail.join(", ")))
}

fn rubric_fidelity() -> Outcome {
    let r = Rubric::default();
    let mut problems = Vec::new();
    for a in Attribute::ALL {
        let want = [
            (Column::Poor, 4.0),
            (Column::Average, if a == Attribute::OnAxis { 6.5 } else { 6.0 }),
            (Column::Optimum, 9.0),
        ];
        for (col, sum) in want {
            let got = r.composite_score(a, &r.column_scores(a, col)).map_err(e2s)?;
            if got != sum {
                problems.push(format!("{a} {col:?} sums to {got}, expected {sum}"));
            }
        }
    }
    let cases = [
        (4.3, QualityBand::Unsuitable),
        (4.399_999_999, QualityBand::Unsuitable),
        (4.4, QualityBand::Poor),
        (4.5, QualityBand::Poor),
        (4.500_000_001, QualityBand::Average),
        (6.0, QualityBand::Average),
        (6.9, QualityBand::Average),
        (6.900_000_001, QualityBand::Optimum),
        (9.0, QualityBand::Optimum),
    ];
    for (raw, band) in cases {
        if r.quality_band(raw) != band {
            problems.push(format!("band({raw}) = {:?}, expected {band:?}", r.quality_band(raw)));
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            "column sums 4.0 / 6.5|6.0 / 9.0 exact; bands split at 4.4, 4.5, 6.9".into()
        } else {
            problems.join("; ")
        },
    )
}

fn overfit() -> Outcome {
    let r = Rubric::default();
    let clips = generate_dataset(32, 7, &DegradationMix::uniform(), &r).map_err(e2s)?;
    let refs: Vec<&CineClip> = clips.iter().collect();
    let mut model = build_model(&ModelConfig::default(), 1).map_err(e2s)?;
    // validation is the training set, so the run can end once it fits
    let cfg = TrainConfig {
        max_epochs: 50,
        patience: 50,
        target_mae: Some(0.05),
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &refs, &refs, &cfg).map_err(e2s)?;
    let mae = evaluate(&model, &refs).map_err(e2s)?.mae().0;
    check(
        mae.iter().all(|&m| m < 0.05),
        format!(
            "train MAE {} after {} epochs (kept epoch {}), need < 0.05 each",
            fmt4(mae),
            outcome.log.len(),
            outcome.best_epoch
        ),
    )
}

struct Generalization {
    line: Outcome,
    isolation: Outcome,
}

fn generalization() -> Generalization {
    match generalization_inner() {
        Ok(g) => g,
        Err(e) => Generalization {
            line: Err(e.clone()),
            isolation: Err(format!("no model: {e}")),
        },
    }
}

fn generalization_inner() -> Result<Generalization, String> {
    let r = Rubric::default();
    let clips = generate_dataset(200, 2024, &DegradationMix::uniform(), &r).map_err(e2s)?;
    let split = split_dataset(&clips, 2024).map_err(e2s)?;
    let pick = |ids: &[String]| -> Vec<&CineClip> {
        ids.iter()
            .map(|id| clips.iter().find(|c| &c.id == id).expect("split names known clips"))
            .collect()
    };
    let (train_set, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let mut model = build_model(&ModelConfig::default(), 1).map_err(e2s)?;
    let outcome = train(&mut model, &train_set, &val, &TrainConfig::default()).map_err(e2s)?;
    let report = evaluate(&model, &test).map_err(e2s)?;
    let mae = report.mae().0;
    let preds = model.predict(&test).map_err(e2s)?;
    let mut rho = [0.0; 4];
    for a in Attribute::ALL {
        let quality = test
            .iter()
            .map(|c| c.params.expect("phantom clip").degradation(a, &r).map(|d| -d))
            .collect::<echoqa::Result<Vec<f64>>>()
            .map_err(e2s)?;
        let predicted: Vec<f64> = preds.iter().map(|p| p[a.index()]).collect();
        rho[a.index()] = spearman(&quality, &predicted).map_err(e2s)?;
    }
    let line = check(
        mae.iter().all(|&m| m <= 0.10) && rho.iter().all(|&p| p > 0.8),
        format!(
            "test MAE {} (need <= 0.10), Spearman {} (need > 0.8); {} epochs, kept {}",
            fmt4(mae),
            fmt4(rho),
            outcome.log.len(),
            outcome.best_epoch
        ),
    );

    // Swap each held-out clip's foreshortening between none and severe,
    // keeping every other parameter.
    let (mut d_fs, mut d_dg) = (0.0, 0.0);
    for (c, p) in test.iter().zip(&preds) {
        let params = c.params.expect("phantom clip");
        let level = if params.foreshorten_level == Severity::Severe {
            Severity::Zero
        } else {
            Severity::Severe
        };
        let alt = generate_clip(
            &PhantomParams {
                foreshorten_level: level,
                ..params
            },
            &r,
        )
        .map_err(e2s)?;
        let q = model.predict(&[&alt]).map_err(e2s)?[0];
        d_fs += (q[Attribute::Foreshorten.index()] - p[Attribute::Foreshorten.index()]).abs();
        d_dg += (q[Attribute::DepthGain.index()] - p[Attribute::DepthGain.index()]).abs();
    }
    let n = test.len() as f64;
    let ratio = d_fs / d_dg;
    let isolation = check(
        ratio >= 3.0,
        format!(
            "foreshortening swap moves Foreshorten by {:.4} and DepthGain by {:.4} on average, ratio {ratio:.1} (need >= 3)",
            d_fs / n,
            d_dg / n
        ),
    );
    Ok(Generalization { line, isolation })
}

fn cross_validation() -> Outcome {
    let r = Rubric::default();
    let clips = generate_dataset(100, 99, &DegradationMix::uniform(), &r).map_err(e2s)?;
    let cfg = TrainConfig {
        max_epochs: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let cv = cross_validate(&clips, &ModelConfig::default(), &cfg).map_err(e2s)?;
    let mut seen: Vec<&str> = cv.folds.iter().flat_map(|f| f.validation.iter().map(String::as_str)).collect();
    seen.sort_unstable();
    let mut ids: Vec<&str> = clips.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    let once = seen == ids;
    let mut mean = [0.0; 4];
    for f in &cv.folds {
        for (m, v) in mean.iter_mut().zip(f.report.mae().0) {
            *m += v / cv.folds.len() as f64;
        }
    }
    let agrees = mean.iter().zip(cv.mean_mae.0).all(|(a, b)| (a - b).abs() <= 1e-12);
    check(
        cv.folds.len() == 5 && once && agrees,
        format!(
            "{} folds, each clip validated once: {once}, aggregate MAE {} equals fold mean: {agrees} (epochs capped at {})",
            cv.folds.len(),
            fmt4(cv.mean_mae.0),
            cfg.max_epochs
        ),
    )
}

struct RunArtifacts {
    manifest: Vec<u8>,
    checkpoint: Vec<u8>,
    report: String,
}

fn pipeline_once(dir: &std::path::Path) -> Result<RunArtifacts, String> {
    let r = Rubric::default();
    let clips = generate_dataset(40, 17, &DegradationMix::uniform(), &r).map_err(e2s)?;
    save_dataset(&clips, dir, None).map_err(e2s)?;
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    set_split(dir, &echoqa::dataset::split_ids(&ids, 17).map_err(e2s)?).map_err(e2s)?;
    let ds = load_dataset(dir).map_err(e2s)?;
    let (t, v) = (ds.split(Split::Train).map_err(e2s)?, ds.split(Split::Val).map_err(e2s)?);
    let mut model = build_model(&ModelConfig::default(), 17).map_err(e2s)?;
    let cfg = TrainConfig {
        max_epochs: 1,
        seed: 17,
        ..TrainConfig::default()
    };
    train(&mut model, &t, &v, &cfg).map_err(e2s)?;
    let ckpt = dir.join("model.ckpt");
    model.save(&ckpt).map_err(e2s)?;
    let reloaded = Model::load(&ckpt).map_err(e2s)?;
    let report = evaluate(&reloaded, &ds.split(Split::Test).map_err(e2s)?).map_err(e2s)?;
    Ok(RunArtifacts {
        manifest: std::fs::read(dir.join("manifest")).map_err(e2s)?,
        checkpoint: std::fs::read(&ckpt).map_err(e2s)?,
        report: serde_json::to_string(&report).map_err(e2s)?,
    })
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(e2s)?;
    let b = tempfile::tempdir().map_err(e2s)?;
    let x = pipeline_once(a.path())?;
    let y = pipeline_once(b.path())?;
    let (m, c, r) = (x.manifest == y.manifest, x.checkpoint == y.checkpoint, x.report == y.report);
    check(
        m && c && r,
        format!(
            "identical manifest: {m}, checkpoint ({} bytes): {c}, EvalReport: {r}",
            x.checkpoint.len()
        ),
    )
}

fn latency() -> Outcome {
    let r = Rubric::default();
    let clips = generate_dataset(8, 3, &DegradationMix::uniform(), &r).map_err(e2s)?;
    let refs: Vec<&CineClip> = clips.iter().collect();
    let model = build_model(&ModelConfig::default(), 0).map_err(e2s)?;
    let stats = benchmark_inference(&model, &refs, 10, 8).map_err(e2s)?;
    let keys: Vec<String> = match serde_json::to_value(&stats).map_err(e2s)? {
        serde_json::Value::Object(m) => m.keys().cloned().collect(),
        _ => Vec::new(),
    };
    let stable = keys
        == [
            "batch",
            "frames_per_run",
            "frames_per_sec",
            "median_ms_per_frame",
            "p95_ms_per_frame",
            "repetitions",
        ];
    let line = stats.line();
    let line_ok = line.starts_with("median ") && line.contains(" ms/frame, p95 ") && line.contains(" frames/s (batch 8, 10 runs)");
    check(
        stats.median_ms_per_frame < 250.0 && stable && line_ok,
        format!("{line}; need median < 250 ms/frame; report fields stable: {}", stable && line_ok),
    )
}

fn main() -> ExitCode {
    // cargo passes harness flags such as --list; this target has no cases
    // to enumerate.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut lines = vec![
        run("gradient suite", 120, gradients),
        run("oracle suite", 60, oracles),
        run("rubric fidelity", 60, rubric_fidelity),
        run("overfit 32 clips", 15 * 60, overfit),
    ];
    eprintln!("running generalization 200 clips ...");
    let t = Instant::now();
    let g = generalization();
    let elapsed = t.elapsed();
    let gen_line = Line {
        name: "generalization 200 clips",
        budget: Duration::from_secs(60 * 60),
        elapsed,
        outcome: g.line,
    };
    println!("{}", render(&gen_line));
    lines.push(gen_line);
    let isolation = Line {
        name: "property: per-stream isolation",
        budget: Duration::from_secs(60 * 60),
        elapsed,
        outcome: g.isolation,
    };
    println!("{}", render(&isolation));
    lines.push(isolation);
    lines.push(run("cross-validation 5 folds on 100 clips", 90 * 60, cross_validation));
    lines.push(run("determinism", 30 * 60, determinism));
    lines.push(run("inference latency", 5 * 60, latency));

    println!("\nacceptance summary");
    for l in &lines {
        println!("{}", render(l));
    }
    let failed = lines.iter().filter(|l| !passed(l)).count();
    println!("{} of {} passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! One function per subcommand. Each returns what it would print so that
//! tests can drive the pipeline without spawning processes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use echoqa::dataset::{decode_pgm, load_dataset, save_dataset, set_split, Split};
use echoqa::metrics::Origin;
use echoqa::model::{benchmark_inference, build_model, evaluate, train_with, EvalReport, LatencyStats, Model, ModelConfig, TrainConfig};
use echoqa::phantom::{generate_dataset, CineClip, DegradationMix};
use echoqa::rubric::{Attribute, AttributeScores, Rubric, View};
use echoqa::{Error, Result};

use crate::server::{router, AppState};
use crate::store::AnnotationStore;

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |e| Error::Dataset(format!("{context}: {e}"))
}

pub fn generate(out: &Path, count: usize, seed: u64, mix: &DegradationMix, rubric: &Rubric) -> Result<String> {
    let clips = generate_dataset(count, seed, mix, rubric)?;
    save_dataset(&clips, out, None)?;
    Ok(format!("wrote {count} clips to {}", out.display()))
}

pub fn split(data: &Path, seed: u64) -> Result<String> {
    let manifest = echoqa::dataset::load_manifest(data)?;
    let ids = manifest.ids();
    let s = echoqa::dataset::split_ids(&ids, seed)?;
    set_split(data, &s)?;
    Ok(format!(
        "split {} clips: {} train, {} val, {} test",
        s.len(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    ))
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Trains on the manifest's train split, early-stopping on val. Each epoch is
/// appended to the log as one JSON line.
pub fn train(args: &TrainArgs) -> Result<String> {
    let ds = load_dataset(&args.data)?;
    let train_set = ds.split(Split::Train)?;
    let val = ds.split(Split::Val)?;
    let mut model = build_model(&args.model, args.train.seed)?;
    let mut log = match &args.log {
        Some(p) => Some(fs::File::create(p).map_err(io_err(format!("creating {}", p.display())))?),
        None => None,
    };
    let outcome = train_with(&mut model, &train_set, &val, &args.train, |e| {
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(e).expect("epoch log serializes");
            writeln!(f, "{line}").map_err(io_err("writing training log".into()))?;
        }
        Ok(())
    })?;
    model.save(&args.out)?;
    Ok(format!(
        "trained {} epochs, kept epoch {} (val MAE {:.4}), saved {}",
        outcome.log.len(),
        outcome.best_epoch,
        outcome.best_val_mae,
        args.out.display()
    ))
}

pub fn evaluate_split(data: &Path, model: &Path, split: Split, out: Option<&Path>) -> Result<(EvalReport, String)> {
    let ds = load_dataset(data)?;
    let m = Model::load(model)?;
    let clips = ds.split(split)?;
    let report = evaluate(&m, &clips)?;
    if let Some(p) = out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(p, text + "\n").map_err(io_err(format!("writing {}", p.display())))?;
    }
    let text = report.table();
    Ok((report, text))
}

/// Reads `frame_*.pgm` from a clip directory in name order.
pub fn read_clip_dir(dir: &Path) -> Result<CineClip> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(format!("reading {}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".pgm"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("{} has no frame_*.pgm files", dir.display())));
    }
    let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or("clip").to_string();
    let frames = names
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(io_err(format!("reading {}", p.display())))?;
            decode_pgm(&bytes, Origin::Imported).map_err(|e| Error::Clip {
                clip: id.clone(),
                message: format!("{}: {e}", p.display()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CineClip {
        id,
        view: View::A4C,
        frames,
        labels: AttributeScores(Default::default()),
        apex_track: None,
        params: None,
        provenance: format!("imported from {}", dir.display()),
    })
}

pub fn score(model: &Path, clip_dir: &Path, rubric: &Rubric) -> Result<String> {
    let m = Model::load(model)?;
    let clip = read_clip_dir(clip_dir)?;
    let scores = echoqa::model::forward_score(&m, &clip, rubric)?;
    let mut out = format!("{:<16} {:>10} {:>7}  band\n", "attribute", "normalized", "raw");
    for a in Attribute::ALL {
        let s = scores.get(a);
        out += &format!(
            "{:<16} {:>10.4} {:>7.3}  {}\n",
            a.label(),
            s.normalized,
            s.raw,
            serde_json::to_value(s.band).expect("band serializes").as_str().unwrap_or("")
        );
    }
    Ok(out)
}

/// Latency of `model` (or an untrained default model; cost does not depend
/// on the weights) over clips from `data`.
pub fn bench(model: Option<&Path>, data: &Path, reps: usize, batch: usize) -> Result<LatencyStats> {
    let m = match model {
        Some(p) => Model::load(p)?,
        None => build_model(&ModelConfig::default(), 0)?,
    };
    let manifest = echoqa::dataset::load_manifest(data)?;
    let clips = manifest
        .clips
        .iter()
        .take(batch)
        .map(|e| echoqa::dataset::load_clip(data, e))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CineClip> = clips.iter().collect();
    benchmark_inference(&m, &refs, reps, batch)
}

pub struct ServeArgs {
    pub data: PathBuf,
    pub model: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub port: u16,
}

pub fn app_state(args: &ServeArgs, rubric: Rubric) -> Result<AppState> {
    let manifest = echoqa::dataset::load_manifest(&args.data)?;
    let model = args.model.as_ref().map(Model::load).transpose()?;
    let store_path = args
        .annotations
        .clone()
        .unwrap_or_else(|| args.data.join("annotations.jsonl"));
    let store = AnnotationStore::open(&store_path, &rubric).map_err(|e| Error::Dataset(e.to_string()))?;
    Ok(AppState::new(args.data.clone(), manifest, rubric, model, store))
}

pub async fn serve(args: ServeArgs, rubric: Rubric) -> Result<()> {
    let state = Arc::new(app_state(&args, rubric)?);
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], args.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(io_err(format!("binding {addr}")))?;
    eprintln!(
        "serving {} clips on {addr} ({})",
        state.manifest.clips.len(),
        if state.model.is_some() { "model loaded" } else { "no model" }
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io_err("serving".into()))
}

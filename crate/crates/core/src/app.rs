//! Experiment drivers behind the command-line subcommands.
//!
//! Output layout of a run directory:
//!
//! ```text
//! config.json         resolved config
//! training.csv        one row per pass
//! episodes.csv        one row per episode
//! evaluation.csv      Chamfer and anisotropy statistics of the final state
//! checkpoint.pmck     training state after the last finished episode
//! frames/epNNNN_*     colour PPM, alpha and depth PGM
//! snapshots/epNNNN.pmgs
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{
    create_dir, decode_checkpoint, encode_checkpoint, encode_pgm16, export_snapshot, read_file, write_file,
    write_frame, write_text, CsvLog,
};
use crate::metrics::{evaluate, Evaluation};
use crate::mpm::ParticleState;
use crate::objective::TargetImages;
use crate::scene::Scene;
use crate::train::{pass_seed, render_state, run_training, PassReport, TrainState};

pub const CHECKPOINT_FILE: &str = "checkpoint.pmck";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub episode: usize,
    /// Physics loss of the state simulated with the updated controls.
    pub l_physics_end: f64,
    pub multiplier_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationRow {
    pub episode: usize,
    pub chamfer: f64,
    pub n_predicted: usize,
    pub n_target: usize,
    pub anisotropy_mean: f64,
    pub anisotropy_median: f64,
    pub anisotropy_max: f64,
    pub n_anchors: usize,
    pub n_render: usize,
}

impl EvaluationRow {
    pub fn new(episode: usize, e: &Evaluation) -> Self {
        EvaluationRow {
            episode,
            chamfer: e.chamfer,
            n_predicted: e.n_predicted,
            n_target: e.n_target,
            anisotropy_mean: e.anisotropy.mean,
            anisotropy_median: e.anisotropy.median,
            anisotropy_max: e.anisotropy.max,
            n_anchors: e.anisotropy.n_anchors,
            n_render: e.anisotropy.n_render,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub state: TrainState,
    pub passes: Vec<PassReport>,
    pub episodes: Vec<EpisodeRow>,
    /// End state of the last episode, or the initial state when none ran.
    pub final_state: ParticleState,
    pub evaluation: Evaluation,
}

fn frame_stem(episode: usize) -> String {
    format!("ep{episode:04}")
}

/// Keeps the header and the rows whose first column is below `episode`.
fn truncate_csv(path: &Path, episode: usize) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < episode);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_text(path, &out)
}

/// Renders the anchor state and writes one frame set named `stem`.
pub fn write_state_frame(
    scene: &Scene,
    state: &ParticleState,
    multipliers: &[f64],
    dir: &Path,
    stem: &str,
) -> Result<()> {
    let (_, eval) = render_state(scene, state, multipliers, pass_seed(scene.cfg.seed, usize::MAX, 0))?;
    write_frame(dir, stem, &eval.output.image, scene.cfg.camera.far)
}

/// Full training run writing every artifact into `out`. With `resume`,
/// training continues from `out/checkpoint.pmck` when it exists.
pub fn run(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<RunSummary> {
    let scene = Scene::build(cfg)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let frames = out.join("frames");
    let snapshots = out.join("snapshots");
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut state = if resume && ckpt_path.exists() {
        decode_checkpoint(&read_file(&ckpt_path)?)?
    } else {
        TrainState::new(&scene)
    };
    let resumed = state.episode > 0;
    if state.controls.n_particles() != scene.initial.len() && !state.controls.is_empty() {
        return Err(Error::Format(
            "checkpoint does not match the config's particle count".into(),
        ));
    }
    let (train_csv, ep_csv) = (out.join("training.csv"), out.join("episodes.csv"));
    if resumed {
        truncate_csv(&train_csv, state.episode)?;
        truncate_csv(&ep_csv, state.episode)?;
    }
    let mut train_log = CsvLog::open(&train_csv, resumed)?;
    let mut ep_log = CsvLog::open(&ep_csv, resumed)?;
    let o = &cfg.output;
    if o.frame_every > 0 {
        create_dir(&frames)?;
    }
    if o.snapshots {
        create_dir(&snapshots)?;
    }
    let mut passes = Vec::new();
    let mut episodes = Vec::new();
    let mut last_end: Option<ParticleState> = None;
    run_training(&scene, &mut state, cfg.training.episodes, |st, outcome| {
        let ep = st.episode - 1;
        for r in &outcome.passes {
            train_log.append(r)?;
        }
        let row = EpisodeRow {
            episode: ep,
            l_physics_end: outcome.end_physics,
            multiplier_mean: st.multipliers.iter().sum::<f64>() / st.multipliers.len().max(1) as f64,
        };
        ep_log.append(&row)?;
        train_log.flush()?;
        ep_log.flush()?;
        if o.frame_every > 0 && (ep % o.frame_every == 0 || st.episode == cfg.training.episodes) {
            write_state_frame(&scene, &outcome.end, &st.multipliers, &frames, &frame_stem(ep))?;
        }
        if o.snapshots {
            export_snapshot(&outcome.end, &snapshots.join(format!("{}.pmgs", frame_stem(ep))))?;
        }
        write_file(&ckpt_path, &encode_checkpoint(st))?;
        passes.extend(outcome.passes.iter().cloned());
        episodes.push(row);
        last_end = Some(outcome.end.clone());
        Ok(())
    })?;
    let final_state = match last_end {
        Some(s) => s,
        None if state.episode > 0 && o.snapshots => {
            let p = snapshots.join(format!("{}.pmgs", frame_stem(state.episode - 1)));
            crate::io::import_snapshot(&p)?
        }
        None => scene.initial.clone(),
    };
    let evaluation = evaluate(&scene, &final_state)?;
    let mut eval_log = CsvLog::open(&out.join("evaluation.csv"), false)?;
    eval_log.append(&EvaluationRow::new(state.episode, &evaluation))?;
    eval_log.flush()?;
    write_text(
        &out.join("evaluation.json"),
        &serde_json::to_string_pretty(&evaluation).expect("evaluation serializes"),
    )?;
    Ok(RunSummary {
        state,
        passes,
        episodes,
        final_state,
        evaluation,
    })
}

/// Chamfer and statistics of a snapshot, appended to `out/evaluation.csv`.
pub fn eval_snapshot(cfg: &ExperimentConfig, snapshot: &Path, out: &Path) -> Result<Evaluation> {
    let scene = Scene::build(cfg)?;
    let state = crate::io::import_snapshot(snapshot)?;
    let e = evaluate(&scene, &state)?;
    create_dir(out)?;
    let path = out.join("evaluation.csv");
    let mut log = CsvLog::open(&path, path.exists())?;
    log.append(&EvaluationRow::new(0, &e))?;
    log.flush()?;
    Ok(e)
}

/// One frame set of a snapshot named after the snapshot file.
pub fn render_snapshot(cfg: &ExperimentConfig, snapshot: &Path, out: &Path) -> Result<PathBuf> {
    let scene = Scene::build(cfg)?;
    let state = crate::io::import_snapshot(snapshot)?;
    create_dir(out)?;
    let stem = snapshot
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("frame")
        .to_string();
    write_state_frame(&scene, &state, &vec![1.0; state.len()], out, &stem)?;
    Ok(out.join(format!("{stem}_color.ppm")))
}

fn write_target_images(t: &TargetImages, far: f64, out: &Path) -> Result<()> {
    write_file(
        &out.join("target_alpha.pgm"),
        &encode_pgm16(t.width, t.height, &t.alpha),
    )?;
    let d = crate::io::normalize_depth(&t.depth, &t.alpha, far);
    write_file(&out.join("target_depth.pgm"), &encode_pgm16(t.width, t.height, &d))
}

/// Target alpha and depth images and the three central slices of the
/// target mass grid, normalized by its maximum.
pub fn write_targets(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let scene = Scene::build(cfg)?;
    create_dir(out)?;
    write_target_images(&scene.target_images, cfg.camera.far, out)?;
    let spec = scene.spec();
    let n = spec.nodes_per_axis();
    let m = &scene.target_mass.mass;
    let max = m.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mid = (n / 2) as i64;
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let mut px = Vec::with_capacity(n * n);
        for r in 0..n as i64 {
            for c in 0..n as i64 {
                let mut idx = [0i64; 3];
                idx[axis] = mid;
                let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                idx[a] = c;
                idx[b] = n as i64 - 1 - r;
                let v = spec.node_index(idx).map_or(0.0, |i| m[i] / max);
                px.push(v);
            }
        }
        write_file(&out.join(format!("target_mass_{name}.pgm")), &encode_pgm16(n, n, &px))?;
    }
    Ok(())
}

//! Per-step scoring with gold history, optional closed-loop rollout.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use afr_core::actions::{parse_str, Action, ActionHistory, ParseError};
use afr_core::agent::{AgentModel, StepInput};
use afr_core::evalkit::{aggregate, score_episode, MetricsReport};
use afr_core::synthgui::Episode;
use afr_core::vision::Screen;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commands::{check_screens, load_episodes, load_model};
use crate::config::RunConfig;
use crate::CliError;

pub struct EvalArgs {
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: PathBuf,
    pub closed_loop: bool,
    pub shuffle_pixels: bool,
    pub predictions_out: Option<PathBuf>,
}

type Prediction = Result<Action, ParseError>;

/// One line of a predictions file; `null` marks an unparseable decode.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    id: String,
    actions: Vec<Option<String>>,
}

pub fn run(rc: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    let mut episodes = load_episodes(&args.data, "evaluation data")?;
    if args.shuffle_pixels {
        shuffle_screens(&mut episodes, rc.agent.seed);
    }
    fs::create_dir_all(&args.out)?;
    let preds = match (&args.checkpoint, &args.predictions) {
        (_, Some(path)) => read_predictions(path, &episodes)?,
        (Some(path), None) => {
            let (model, _) = load_model(rc, path)?;
            check_screens(&episodes, &model.cfg, "evaluation")?;
            if args.closed_loop {
                let rolled = predict_all(&model, &episodes, true)?;
                let report = score(&rolled, &episodes, rc)?;
                emit(&report, &args.out, "report_closed_loop")?;
                println!(
                    "closed loop: step_acc {:.4} completion {:.4}",
                    report.step_accuracy, report.completion_rate
                );
            }
            predict_all(&model, &episodes, false)?
        }
        (None, None) => return Err(CliError::Config("eval needs --checkpoint or --predictions".into())),
    };
    if let Some(path) = &args.predictions_out {
        write_predictions(path, &preds, &episodes)?;
    }
    let report = score(&preds, &episodes, rc)?;
    emit(&report, &args.out, "report")?;
    print!("{}", report.to_text());
    Ok(())
}

fn score(preds: &[Vec<Prediction>], episodes: &[Episode], rc: &RunConfig) -> Result<MetricsReport, CliError> {
    let scores = preds
        .iter()
        .zip(episodes)
        .map(|(p, e)| score_episode(p, e, &rc.matching))
        .collect::<afr_core::Result<Vec<_>>>()?;
    Ok(aggregate(&scores, &rc.matching))
}

fn emit(report: &MetricsReport, dir: &Path, stem: &str) -> Result<(), CliError> {
    fs::write(dir.join(format!("{stem}.txt")), report.to_text())?;
    fs::write(dir.join(format!("{stem}.json")), report.to_json())?;
    Ok(())
}

/// Pixel order of every screen permuted; colours are kept.
fn shuffle_screens(episodes: &mut [Episode], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5107_f1ed);
    for e in episodes {
        for s in &mut e.steps {
            let (w, h) = (s.screen.width(), s.screen.height());
            let px = s.screen.pixels();
            let mut order: Vec<usize> = (0..w * h).collect();
            order.shuffle(&mut rng);
            let data = order.iter().flat_map(|&i| px[i * 3..i * 3 + 3].to_vec()).collect();
            s.screen = Screen::new(w, h, data).expect("same size");
        }
    }
}

fn rollout(model: &AgentModel, episode: &Episode, closed_loop: bool) -> afr_core::Result<Vec<Prediction>> {
    let mut history = ActionHistory::new(model.cfg.history_len);
    let mut out = Vec::with_capacity(episode.steps.len());
    for step in &episode.steps {
        let decoded = model
            .predict(StepInput {
                task: &episode.goal,
                screen: &step.screen,
                history: &history,
            })?
            .decoded;
        let next = if closed_loop {
            decoded.as_ref().ok().cloned()
        } else {
            Some(step.action.clone())
        };
        if let Some(a) = next {
            history.push(a);
        }
        out.push(decoded);
    }
    Ok(out)
}

/// Episodes are split into contiguous chunks, one per worker; order is kept.
fn predict_all(model: &AgentModel, episodes: &[Episode], closed_loop: bool) -> Result<Vec<Vec<Prediction>>, CliError> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(episodes.len().max(1));
    let chunk = episodes.len().div_ceil(workers).max(1);
    let parts: Vec<afr_core::Result<Vec<Vec<Prediction>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = episodes
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|e| rollout(model, e, closed_loop)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(episodes.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn write_predictions(path: &Path, preds: &[Vec<Prediction>], episodes: &[Episode]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (p, e) in preds.iter().zip(episodes) {
        let line = PredictionLine {
            id: e.id.clone(),
            actions: p.iter().map(|a| a.as_ref().ok().map(Action::canonical)).collect(),
        };
        let json = serde_json::to_string(&line).map_err(|e| CliError::Other(e.to_string()))?;
        writeln!(w, "{json}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_predictions(path: &Path, episodes: &[Episode]) -> Result<Vec<Vec<Prediction>>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let mut by_id: HashMap<String, Vec<Prediction>> = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(&line).map_err(|e| CliError::Other(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let actions = p
            .actions
            .iter()
            .map(|a| match a {
                Some(s) => parse_str(s),
                None => Err(ParseError {
                    index: 0,
                    reason: "no decoded action".into(),
                }),
            })
            .collect();
        by_id.insert(p.id, actions);
    }
    episodes
        .iter()
        .map(|e| {
            let p = by_id
                .remove(&e.id)
                .ok_or_else(|| CliError::Mismatch(format!("no predictions for episode {}", e.id)))?;
            if p.len() != e.steps.len() {
                return Err(CliError::Mismatch(format!(
                    "episode {}: {} predictions for {} steps",
                    e.id,
                    p.len(),
                    e.steps.len()
                )));
            }
            Ok(p)
        })
        .collect()
}

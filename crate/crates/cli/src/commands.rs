use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::Path;

use afr_core::ablation::{run_ablation, AblationSettings};
use afr_core::actions::{parse_str, Action, ActionHistory};
use afr_core::agent::{
    flatten_episodes, load_checkpoint, save_checkpoint, train_epochs, AgentConfig, AgentModel, StepInput, TrainOptions,
    Trainer,
};
use afr_core::costmodel::{render_comparison, ArchConfig};
use afr_core::gradcheck::{run_suite_seeded, TOLERANCE};
use afr_core::numerics::Fault;
use afr_core::synthgui::{generate_dataset, read_jsonl, subset_counts, write_jsonl, Episode};
use afr_core::vision::Screen;

use crate::config::RunConfig;
use crate::{eval, Cli, CliError, Command};

pub const LOG_HEADER: &str = "epoch,step,loss,val_step_acc";

pub fn dispatch(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Ablation {
            out,
            epochs,
            train_per_subset,
            test_per_subset,
            seeds,
        } => {
            let mut settings = AblationSettings::default();
            let rc = RunConfig::load(settings.base.clone(), file, overrides)?;
            settings.epochs = epochs.unwrap_or(settings.epochs);
            settings.train_per_subset = train_per_subset.unwrap_or(settings.train_per_subset);
            settings.test_per_subset = test_per_subset.unwrap_or(settings.test_per_subset);
            settings.seeds = seeds.unwrap_or(settings.seeds);
            settings.data_seed = if rc.explicit.iter().any(|k| k == "seed") {
                rc.agent.seed
            } else {
                settings.data_seed
            };
            settings.base = rc.agent;
            settings.match_cfg = rc.matching;
            ablation(&settings, &out)
        }
        command => {
            let rc = RunConfig::load(AgentConfig::default(), file, overrides)?;
            match command {
                Command::GenData { out } => gen_data(&rc, &out),
                Command::Train { data, val, out, resume } => train(&rc, &data, val.as_deref(), &out, resume.as_deref()),
                Command::Eval {
                    data,
                    checkpoint,
                    predictions,
                    out,
                    closed_loop,
                    shuffle_pixels,
                    predictions_out,
                } => eval::run(
                    &rc,
                    &eval::EvalArgs {
                        data,
                        checkpoint,
                        predictions,
                        out,
                        closed_loop,
                        shuffle_pixels,
                        predictions_out,
                    },
                ),
                Command::Gradcheck { fault } => gradcheck(&rc, fault.as_deref()),
                Command::Flops {
                    full_size,
                    text_tokens,
                    action_tokens,
                } => flops(&rc, full_size, text_tokens, action_tokens),
                Command::Predict {
                    checkpoint,
                    screen,
                    goal,
                    history,
                } => predict(&rc, &checkpoint, &screen, &goal, &history),
                Command::Ablation { .. } => unreachable!(),
            }
        }
    }
}

fn gen_data(rc: &RunConfig, out: &Path) -> Result<(), CliError> {
    let episodes = generate_dataset(&rc.data)?;
    write_jsonl(&episodes, out)?;
    println!("wrote {} episodes to {}", episodes.len(), out.display());
    for (subset, n) in subset_counts(&episodes) {
        println!("{subset}\t{n}");
    }
    println!("total\t{}", episodes.len());
    Ok(())
}

pub fn load_episodes(path: &Path, what: &str) -> Result<Vec<Episode>, CliError> {
    read_jsonl(path).map_err(|e| CliError::Other(format!("{what} {}: {e}", path.display())))
}

/// Every screen must have the size the model was built for.
pub fn check_screens(episodes: &[Episode], cfg: &AgentConfig, what: &str) -> Result<(), CliError> {
    let (w, h) = cfg.input_size();
    for e in episodes {
        for (i, s) in e.steps.iter().enumerate() {
            if (s.screen.width(), s.screen.height()) != (w, h) {
                return Err(CliError::Mismatch(format!(
                    "{what} episode {} step {i}: screen {}x{} but the model expects {w}x{h}",
                    e.id,
                    s.screen.width(),
                    s.screen.height()
                )));
            }
        }
    }
    Ok(())
}

/// Loads a checkpoint; its stored configuration wins over shape keys given
/// on the command line.
pub fn load_model(rc: &RunConfig, path: &Path) -> Result<(AgentModel, Option<afr_core::agent::TrainState>), CliError> {
    let (model, state) =
        load_checkpoint(path).map_err(|e| CliError::Other(format!("checkpoint {}: {e}", path.display())))?;
    let given = rc.shape_keys_given();
    for key in given {
        if rc.agent.get(key) != model.cfg.get(key) {
            log::warn!(
                "{key} = {} ignored; checkpoint has {}",
                rc.agent.get(key).unwrap_or_default(),
                model.cfg.get(key).unwrap_or_default()
            );
        }
    }
    Ok((model, state))
}

fn train(rc: &RunConfig, data: &Path, val: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let train_eps = load_episodes(data, "training data")?;
    let val_eps = val
        .map(|p| load_episodes(p, "validation data"))
        .transpose()?
        .unwrap_or_default();
    fs::create_dir_all(out)?;
    let log_path = out.join("train_log.csv");
    let (mut model, mut trainer, start_epoch, mut best) = match resume {
        Some(path) => {
            let (mut model, state) = load_model(rc, path)?;
            let state = state.ok_or_else(|| {
                CliError::Mismatch(format!("{} holds no optimizer state to resume from", path.display()))
            })?;
            model.cfg.epochs = rc.agent.epochs;
            let trainer = Trainer::resume(&model, &state)?;
            (model, trainer, state.epoch as usize, state.best_metric)
        }
        None => {
            let model = AgentModel::new(rc.agent.clone())?;
            let trainer = Trainer::new(&model);
            (model, trainer, 0, f64::NEG_INFINITY)
        }
    };
    check_screens(&train_eps, &model.cfg, "training")?;
    check_screens(&val_eps, &model.cfg, "validation")?;
    fs::write(out.join("config.txt"), model.cfg.to_text())?;
    let mut log = if start_epoch > 0 && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = File::create(&log_path)?;
        writeln!(f, "{LOG_HEADER}")?;
        f
    };
    let train_s = flatten_episodes(&train_eps, model.cfg.history_len);
    let val_s = flatten_episodes(&val_eps, model.cfg.history_len);
    let opts = TrainOptions {
        epochs: model.cfg.epochs,
        batch_size: model.cfg.batch_size,
        seed: model.cfg.seed,
        start_epoch,
        initial_report: true,
        validate: !val_s.is_empty(),
        match_cfg: rc.matching.clone(),
    };
    let (best_path, last_path) = (out.join("best.ckpt"), out.join("last.ckpt"));
    let has_val = !val_s.is_empty();
    train_epochs(&mut model, &mut trainer, &train_s, &val_s, &opts, |r, m, t| {
        writeln!(log, "{},{},{:.6},{:.6}", r.epoch, r.step, r.loss, r.val_step_acc)?;
        log.flush()?;
        println!(
            "epoch {} step {} loss {:.4} val_step_acc {:.4}",
            r.epoch, r.step, r.loss, r.val_step_acc
        );
        let metric = if has_val { r.val_step_acc } else { -r.loss };
        if metric > best {
            best = metric;
            save_checkpoint(m, Some(t.state(r.epoch as u64, best)), &best_path)?;
        }
        save_checkpoint(m, Some(t.state(r.epoch as u64, best)), &last_path)
    })?;
    println!("best checkpoint {}", best_path.display());
    Ok(())
}

fn gradcheck(rc: &RunConfig, fault: Option<&str>) -> Result<(), CliError> {
    let fault = match fault {
        None => None,
        Some("gelu") => Some(Fault::GeluDerivative),
        Some(other) => return Err(CliError::Config(format!("unknown fault {other:?}"))),
    };
    let blocks = run_suite_seeded(rc.agent.seed, fault)?;
    println!("block\tmax_rel_err\tcoordinates\tworst");
    for b in &blocks {
        println!("{}\t{:.3e}\t{}\t{}", b.name, b.max_rel_err, b.coordinates, b.worst);
    }
    let failed: Vec<String> = blocks
        .iter()
        .filter(|b| !b.passed())
        .map(|b| format!("{} ({}: {:.3e})", b.name, b.worst, b.max_rel_err))
        .collect();
    if failed.is_empty() {
        println!("all blocks below {TOLERANCE:e}");
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check above {TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}

fn flops(rc: &RunConfig, full_size: bool, text_tokens: usize, action_tokens: usize) -> Result<(), CliError> {
    let arch = if full_size {
        ArchConfig::full_size()
    } else {
        let vocab = afr_core::actions::ActionVocab::new().len();
        ArchConfig::from_agent(&rc.agent, text_tokens, action_tokens, vocab)
    };
    print!("{}", render_comparison(&arch)?);
    Ok(())
}

fn parse_history(text: &str, capacity: usize) -> Result<ActionHistory, CliError> {
    let actions = text
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_str(s).map_err(|e| CliError::Config(format!("history action {s:?}: {e}"))))
        .collect::<Result<Vec<Action>, _>>()?;
    Ok(ActionHistory::from_actions(&actions, capacity))
}

fn predict(rc: &RunConfig, checkpoint: &Path, screen: &Path, goal: &str, history: &str) -> Result<(), CliError> {
    let (model, _) = load_model(rc, checkpoint)?;
    let file = File::open(screen).map_err(|e| CliError::Other(format!("{}: {e}", screen.display())))?;
    let screen = Screen::read_ppm(BufReader::new(file))?;
    let (w, h) = model.cfg.input_size();
    if (screen.width(), screen.height()) != (w, h) {
        return Err(CliError::Mismatch(format!(
            "screen {}x{} but the model expects {w}x{h}",
            screen.width(),
            screen.height()
        )));
    }
    let history = parse_history(history, model.cfg.history_len)?;
    let out = model.predict(StepInput {
        task: goal,
        screen: &screen,
        history: &history,
    })?;
    match out.decoded {
        Ok(a) => println!("{}", a.canonical()),
        Err(e) => println!("unparseable: {e}"),
    }
    Ok(())
}

fn ablation(settings: &AblationSettings, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let report = run_ablation(settings, |r| {
        println!(
            "{}\tseed {}\tstep_acc {:.4}\tclick_acc {:.4}\tloss {:.4}\t{:.0}s",
            r.variant, r.seed, r.step_acc, r.click_acc, r.final_loss, r.secs
        );
    })?;
    let text = report.to_text();
    print!("{text}");
    fs::write(out.join("ablation.txt"), &text)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(out.join("ablation.json"), json)?;
    Ok(())
}

//! Fusion-strategy comparison on generated episodes.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::afr::FusionStrategy;
use crate::agent::{
    evaluate_steps, flatten_episodes, step_accuracy, train_epochs, AgentConfig, AgentModel, TrainOptions, Trainer,
};
use crate::evalkit::MatchConfig;
use crate::synthgui::{generate_dataset, Episode, GeneratorConfig};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub low: FusionStrategy,
    pub high: FusionStrategy,
}

pub const VARIANTS: [Variant; 4] = [
    Variant {
        name: "afr",
        low: FusionStrategy::Afr,
        high: FusionStrategy::None,
    },
    Variant {
        name: "none",
        low: FusionStrategy::None,
        high: FusionStrategy::None,
    },
    Variant {
        name: "residual",
        low: FusionStrategy::Residual,
        high: FusionStrategy::None,
    },
    Variant {
        name: "afr+high",
        low: FusionStrategy::Afr,
        high: FusionStrategy::Afr,
    },
];

#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub base: AgentConfig,
    pub train_per_subset: usize,
    pub test_per_subset: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub match_cfg: MatchConfig,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            base: AgentConfig {
                lr: 1e-3,
                epochs: 8,
                ..AgentConfig::default()
            },
            train_per_subset: 500,
            test_per_subset: 100,
            data_seed: 2024,
            seeds: vec![1, 2, 3],
            epochs: 8,
            match_cfg: MatchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub variant: &'static str,
    pub seed: u64,
    pub step_acc: f64,
    pub click_acc: f64,
    pub final_loss: f64,
    pub secs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Margin {
    pub name: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub epochs: usize,
    pub runs: Vec<RunResult>,
    pub margins: Vec<Margin>,
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationReport {
    fn pick(&self, variant: &str, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn summary(&self, variant: &str) -> ((f64, f64), (f64, f64)) {
        let rs: Vec<&RunResult> = self.runs.iter().filter(|r| r.variant == variant).collect();
        let steps: Vec<f64> = rs.iter().map(|r| r.step_acc).collect();
        let clicks: Vec<f64> = rs.iter().map(|r| r.click_acc).collect();
        (mean_sd(&steps), mean_sd(&clicks))
    }

    fn compute_margins(&mut self, seeds: &[u64]) {
        let specs: [(&str, &str, &str, bool); 3] = [
            ("afr - none (step acc)", "afr", "none", false),
            ("afr - residual (step acc)", "afr", "residual", false),
            ("afr+high - afr (click acc)", "afr+high", "afr", true),
        ];
        self.margins = specs
            .iter()
            .map(|&(name, a, b, click)| {
                let per_seed: Vec<f64> = seeds
                    .iter()
                    .filter_map(|&s| {
                        let (x, y) = (self.pick(a, s)?, self.pick(b, s)?);
                        Some(if click {
                            x.click_acc - y.click_acc
                        } else {
                            x.step_acc - y.step_acc
                        })
                    })
                    .collect();
                let (mean, sd) = mean_sd(&per_seed);
                Margin {
                    name: name.into(),
                    per_seed,
                    mean,
                    sd,
                }
            })
            .collect();
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "train_episodes {}  test_episodes {}  epochs {}",
            self.train_episodes, self.test_episodes, self.epochs
        );
        let _ = writeln!(s, "variant\tstep_acc mean±sd\tclick_acc mean±sd");
        for v in VARIANTS {
            if !self.runs.iter().any(|r| r.variant == v.name) {
                continue;
            }
            let ((m, d), (cm, cd)) = self.summary(v.name);
            let _ = writeln!(s, "{}\t{m:.4}±{d:.4}\t{cm:.4}±{cd:.4}", v.name);
        }
        for m in &self.margins {
            let per: Vec<String> = m.per_seed.iter().map(|x| format!("{x:+.4}")).collect();
            let _ = writeln!(s, "{}\t{:+.4}±{:.4}\t[{}]", m.name, m.mean, m.sd, per.join(", "));
        }
        s
    }
}

pub fn ablation_data(settings: &AblationSettings) -> Result<(Vec<Episode>, Vec<Episode>)> {
    let gen = |seed, n| GeneratorConfig {
        width: settings.base.screen_width,
        height: settings.base.screen_height * settings.base.crops,
        ..GeneratorConfig::balanced(seed, n)
    };
    let train = generate_dataset(&gen(settings.data_seed, settings.train_per_subset))?;
    let test = generate_dataset(&gen(settings.data_seed ^ 0x5eed_7e57, settings.test_per_subset))?;
    Ok((train, test))
}

/// Trains one model and scores it on the test steps with gold history.
pub fn run_variant(
    settings: &AblationSettings,
    variant: Variant,
    seed: u64,
    train: &[Episode],
    test: &[Episode],
) -> Result<RunResult> {
    let start = Instant::now();
    let cfg = AgentConfig {
        seed,
        fusion_low: variant.low,
        fusion_high: variant.high,
        epochs: settings.epochs,
        ..settings.base.clone()
    };
    let mut model = AgentModel::new(cfg.clone())?;
    let mut trainer = Trainer::new(&model);
    let train_s = flatten_episodes(train, cfg.history_len);
    let test_s = flatten_episodes(test, cfg.history_len);
    let opts = TrainOptions {
        epochs: settings.epochs,
        batch_size: cfg.batch_size,
        seed,
        start_epoch: 0,
        initial_report: false,
        validate: false,
        match_cfg: settings.match_cfg.clone(),
    };
    let reports = train_epochs(&mut model, &mut trainer, &train_s, &[], &opts, |_, _, _| Ok(()))?;
    let verdicts = evaluate_steps(&model, &test_s, &settings.match_cfg)?;
    let click: Vec<_> = verdicts
        .iter()
        .zip(&test_s)
        .filter(|(_, s)| s.subset == "click")
        .map(|(v, _)| *v)
        .collect();
    Ok(RunResult {
        variant: variant.name,
        seed,
        step_acc: step_accuracy(&verdicts),
        click_acc: step_accuracy(&click),
        final_loss: reports.last().map_or(f64::NAN, |r| r.loss),
        secs: start.elapsed().as_secs_f64(),
    })
}

pub fn run_ablation(settings: &AblationSettings, mut on_run: impl FnMut(&RunResult)) -> Result<AblationReport> {
    let (train, test) = ablation_data(settings)?;
    let mut report = AblationReport {
        train_episodes: train.len(),
        test_episodes: test.len(),
        epochs: settings.epochs,
        runs: Vec::new(),
        margins: Vec::new(),
    };
    for &seed in &settings.seeds {
        for v in VARIANTS {
            let r = run_variant(settings, v, seed, &train, &test)?;
            on_run(&r);
            report.runs.push(r);
        }
    }
    report.compute_margins(&settings.seeds);
    Ok(report)
}

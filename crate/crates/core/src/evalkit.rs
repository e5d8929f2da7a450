//! Step-level action matching, episode scoring and metric reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::actions::{Action, ActionKind, ParseError};
use crate::synthgui::{Episode, SUBSETS};
use crate::vision::Rect;
use crate::{Error, Result};

pub const DEFAULT_CLICK_THRESHOLD: f64 = 0.14;
pub const REPORT_VERSION: u32 = 1;
pub const UNTAGGED: &str = "untagged";

/// Slack for distances that equal the threshold in exact arithmetic.
const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub click_threshold: f64,
    pub normalize_text: bool,
    /// Require identical scroll/swipe directions rather than a shared axis.
    pub strict_scroll_direction: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            click_threshold: DEFAULT_CLICK_THRESHOLD,
            normalize_text: true,
            strict_scroll_direction: false,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.click_threshold > 0.0 && self.click_threshold < 1.0) {
            return Err(Error::Config(format!(
                "click threshold {} outside (0, 1)",
                self.click_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchReason {
    Exact,
    WithinDistance,
    InsideRect,
    SameAxis,
    TextContains,
    Mismatch,
    ParseError,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepVerdict {
    pub matched: bool,
    pub reason: MatchReason,
}

impl StepVerdict {
    fn hit(reason: MatchReason) -> Self {
        Self { matched: true, reason }
    }

    fn miss(reason: MatchReason) -> Self {
        Self { matched: false, reason }
    }
}

/// Lowercase, trim and collapse runs of whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn click_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub fn match_step(
    pred: &std::result::Result<Action, ParseError>,
    gold: &Action,
    rect: Option<&Rect>,
    cfg: &MatchConfig,
) -> StepVerdict {
    let Ok(pred) = pred else {
        return StepVerdict::miss(MatchReason::ParseError);
    };
    if pred.kind() != gold.kind() {
        return StepVerdict::miss(MatchReason::Mismatch);
    }
    match (pred, gold) {
        (Action::Click { x, y }, Action::Click { x: gx, y: gy }) => {
            if click_distance((*x, *y), (*gx, *gy)) <= cfg.click_threshold + BOUNDARY_EPS {
                StepVerdict::hit(MatchReason::WithinDistance)
            } else if rect.is_some_and(|r| r.contains(*x, *y)) {
                StepVerdict::hit(MatchReason::InsideRect)
            } else {
                StepVerdict::miss(MatchReason::Mismatch)
            }
        }
        (Action::Scroll(p), Action::Scroll(g)) | (Action::Swipe(p), Action::Swipe(g)) => {
            if p == g {
                StepVerdict::hit(MatchReason::Exact)
            } else if !cfg.strict_scroll_direction && p.is_vertical() == g.is_vertical() {
                StepVerdict::hit(MatchReason::SameAxis)
            } else {
                StepVerdict::miss(MatchReason::Mismatch)
            }
        }
        (Action::Type { text: p }, Action::Type { text: g }) => {
            let (p, g) = if cfg.normalize_text {
                (normalize_text(p), normalize_text(g))
            } else {
                (p.clone(), g.clone())
            };
            if p == g {
                StepVerdict::hit(MatchReason::Exact)
            } else if p.contains(&g) {
                StepVerdict::hit(MatchReason::TextContains)
            } else {
                StepVerdict::miss(MatchReason::Mismatch)
            }
        }
        _ => StepVerdict::hit(MatchReason::Exact),
    }
}

/// Token-level F1 over normalized whitespace tokens (multiset overlap).
pub fn text_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_text(pred);
    let g = normalize_text(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() && gt.is_empty() {
        return 1.0;
    }
    if pt.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn text_em(pred: &str, gold: &str) -> bool {
    normalize_text(pred) == normalize_text(gold)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepScore {
    pub gold_kind: ActionKind,
    pub verdict: StepVerdict,
    /// `(predicted, gold)` text for gold typing steps.
    pub text: Option<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeScore {
    pub id: String,
    pub subset: String,
    pub steps: Vec<StepScore>,
    pub completed: bool,
}

/// Scores each step; an episode completes only if every step, including the
/// terminal `task_complete`, matches.
pub fn score_episode(
    preds: &[std::result::Result<Action, ParseError>],
    episode: &Episode,
    cfg: &MatchConfig,
) -> Result<EpisodeScore> {
    if preds.len() != episode.steps.len() {
        return Err(Error::Length {
            what: "episode predictions",
            expected: episode.steps.len(),
            got: preds.len(),
        });
    }
    let steps: Vec<StepScore> = preds
        .iter()
        .zip(&episode.steps)
        .map(|(p, st)| {
            let verdict = match_step(p, &st.action, st.rect.as_ref(), cfg);
            let text = match &st.action {
                Action::Type { text: g } => {
                    let p = match p {
                        Ok(Action::Type { text }) => text.clone(),
                        _ => String::new(),
                    };
                    Some((p, g.clone()))
                }
                _ => None,
            };
            StepScore {
                gold_kind: st.action.kind(),
                verdict,
                text,
            }
        })
        .collect();
    let terminal = matches!(episode.steps.last().map(|s| &s.action), Some(Action::TaskComplete));
    let completed = terminal && !steps.is_empty() && steps.iter().all(|s| s.verdict.matched);
    Ok(EpisodeScore {
        id: episode.id.clone(),
        subset: episode.subset.clone(),
        steps,
        completed,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub episodes: usize,
    pub steps: usize,
    pub matched: usize,
    pub step_accuracy: f64,
    pub completion_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    pub steps: usize,
    pub matched: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub episodes: usize,
    pub steps: usize,
    pub matched: usize,
    /// Over all steps.
    pub step_accuracy: f64,
    /// Unweighted mean of per-subset step accuracy.
    pub overall: f64,
    pub completion_rate: f64,
    pub subsets: BTreeMap<String, SubsetMetrics>,
    pub per_action: BTreeMap<String, KindMetrics>,
    pub text_steps: usize,
    pub text_f1: f64,
    pub text_em: f64,
    pub parse_errors: usize,
    pub dropped_groups: usize,
    pub click_rule: String,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Groups by subset tag; tags outside the known subsets go to `untagged`
/// and groups without any step are dropped and counted.
pub fn aggregate(scores: &[EpisodeScore], cfg: &MatchConfig) -> MetricsReport {
    let mut groups: BTreeMap<String, Vec<&EpisodeScore>> = BTreeMap::new();
    for s in scores {
        let tag = if SUBSETS.contains(&s.subset.as_str()) {
            s.subset.clone()
        } else {
            UNTAGGED.to_string()
        };
        groups.entry(tag).or_default().push(s);
    }
    let mut dropped = 0;
    let mut subsets = BTreeMap::new();
    for (tag, eps) in &groups {
        let steps: usize = eps.iter().map(|e| e.steps.len()).sum();
        if steps == 0 {
            dropped += 1;
            log::warn!("subset {tag} has no steps; dropped from the report");
            continue;
        }
        let matched = eps.iter().flat_map(|e| &e.steps).filter(|s| s.verdict.matched).count();
        let completed = eps.iter().filter(|e| e.completed).count();
        subsets.insert(
            tag.clone(),
            SubsetMetrics {
                episodes: eps.len(),
                steps,
                matched,
                step_accuracy: ratio(matched, steps),
                completion_rate: ratio(completed, eps.len()),
            },
        );
    }
    let all_steps = || scores.iter().flat_map(|e| &e.steps);
    let steps = all_steps().count();
    let matched = all_steps().filter(|s| s.verdict.matched).count();
    let mut per_action: BTreeMap<String, KindMetrics> = BTreeMap::new();
    for s in all_steps() {
        let k = per_action.entry(s.gold_kind.keyword().to_string()).or_default();
        k.steps += 1;
        k.matched += usize::from(s.verdict.matched);
    }
    for k in per_action.values_mut() {
        k.accuracy = ratio(k.matched, k.steps);
    }
    let texts: Vec<&(String, String)> = all_steps().filter_map(|s| s.text.as_ref()).collect();
    let f1: f64 = texts.iter().map(|(p, g)| text_f1(p, g)).sum();
    let em = texts.iter().filter(|(p, g)| text_em(p, g)).count();
    let overall = if subsets.is_empty() {
        0.0
    } else {
        subsets.values().map(|m| m.step_accuracy).sum::<f64>() / subsets.len() as f64
    };
    MetricsReport {
        version: REPORT_VERSION,
        episodes: scores.len(),
        steps,
        matched,
        step_accuracy: ratio(matched, steps),
        overall,
        completion_rate: ratio(scores.iter().filter(|e| e.completed).count(), scores.len()),
        subsets,
        per_action,
        text_steps: texts.len(),
        text_f1: if texts.is_empty() { 0.0 } else { f1 / texts.len() as f64 },
        text_em: ratio(em, texts.len()),
        parse_errors: all_steps()
            .filter(|s| s.verdict.reason == MatchReason::ParseError)
            .count(),
        dropped_groups: dropped,
        click_rule: format!(
            "euclidean distance in normalized coordinates <= {} or inside gold rect",
            cfg.click_threshold
        ),
    }
}

impl MetricsReport {
    /// One `name<TAB>value` line per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}\t{v}");
        };
        line("format", format!("afr-metrics-v{}", self.version));
        line("episodes", self.episodes.to_string());
        line("steps", self.steps.to_string());
        line("matched", self.matched.to_string());
        line("step_accuracy", format!("{:.6}", self.step_accuracy));
        line("overall", format!("{:.6}", self.overall));
        line("completion_rate", format!("{:.6}", self.completion_rate));
        for (tag, m) in &self.subsets {
            line(&format!("subset.{tag}.episodes"), m.episodes.to_string());
            line(&format!("subset.{tag}.steps"), m.steps.to_string());
            line(
                &format!("subset.{tag}.step_accuracy"),
                format!("{:.6}", m.step_accuracy),
            );
            line(
                &format!("subset.{tag}.completion_rate"),
                format!("{:.6}", m.completion_rate),
            );
        }
        for (kind, m) in &self.per_action {
            line(&format!("action.{kind}.steps"), m.steps.to_string());
            line(&format!("action.{kind}.accuracy"), format!("{:.6}", m.accuracy));
        }
        line("text.steps", self.text_steps.to_string());
        line("text.f1", format!("{:.6}", self.text_f1));
        line("text.em", format!("{:.6}", self.text_em));
        line("parse_errors", self.parse_errors.to_string());
        line("dropped_groups", self.dropped_groups.to_string());
        line("click_rule", self.click_rule.clone());
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::Direction;
    use crate::synthgui::EpisodeStep;
    use crate::vision::Screen;

    fn ok(a: Action) -> std::result::Result<Action, ParseError> {
        Ok(a)
    }

    fn click(x: f64, y: f64) -> Action {
        Action::Click { x, y }
    }

    #[test]
    fn documented_examples() {
        let c = MatchConfig::default();
        let v = match_step(&ok(click(0.55, 0.60)), &click(0.5, 0.5), None, &c);
        assert!(v.matched && v.reason == MatchReason::WithinDistance);
        assert!(!match_step(&ok(click(0.7, 0.7)), &click(0.5, 0.5), None, &c).matched);
        let v = match_step(
            &ok(Action::Scroll(Direction::Down)),
            &Action::Scroll(Direction::Up),
            None,
            &c,
        );
        assert_eq!(v.reason, MatchReason::SameAxis);
        let pred = ok(Action::Type {
            text: "buy new blush now".into(),
        });
        let v = match_step(
            &pred,
            &Action::Type {
                text: "new blush".into(),
            },
            None,
            &c,
        );
        assert_eq!(v.reason, MatchReason::TextContains);
    }

    #[test]
    fn click_grid_equals_integer_oracle() {
        let c = MatchConfig::default();
        for i in 0..=100i64 {
            for j in 0..=100i64 {
                let pred = ok(click(i as f64 / 100.0, j as f64 / 100.0));
                let got = match_step(&pred, &click(0.5, 0.5), None, &c).matched;
                let want = (i - 50).pow(2) + (j - 50).pow(2) <= 14 * 14;
                assert_eq!(got, want, "({i}, {j})");
            }
        }
    }

    #[test]
    fn rect_rule_or_distance() {
        let c = MatchConfig::default();
        let r = Rect::new(0.0, 0.0, 1.0, 0.1).unwrap();
        let v = match_step(&ok(click(0.95, 0.05)), &click(0.5, 0.05), Some(&r), &c);
        assert_eq!(v.reason, MatchReason::InsideRect);
        assert!(!match_step(&ok(click(0.95, 0.5)), &click(0.5, 0.05), Some(&r), &c).matched);
    }

    #[test]
    fn variants_axes_and_parse_errors() {
        let c = MatchConfig::default();
        let strict = MatchConfig {
            strict_scroll_direction: true,
            ..MatchConfig::default()
        };
        let up = Action::Scroll(Direction::Up);
        assert!(!match_step(&ok(Action::Scroll(Direction::Left)), &up, None, &c).matched);
        assert!(!match_step(&ok(Action::Swipe(Direction::Up)), &up, None, &c).matched);
        assert!(!match_step(&ok(Action::Scroll(Direction::Down)), &up, None, &strict).matched);
        assert!(
            match_step(
                &ok(Action::Swipe(Direction::Right)),
                &Action::Swipe(Direction::Left),
                None,
                &c
            )
            .matched
        );
        assert!(match_step(&ok(Action::PressBack), &Action::PressBack, None, &c).matched);
        assert!(!match_step(&ok(Action::PressHome), &Action::PressBack, None, &c).matched);
        let err = Err(ParseError {
            index: 0,
            reason: "x".into(),
        });
        let v = match_step(&err, &Action::TaskComplete, None, &c);
        assert_eq!(v, StepVerdict::miss(MatchReason::ParseError));
        let t = |s: &str| Action::Type { text: s.into() };
        assert!(match_step(&ok(t("new  blush")), &t("new blush"), None, &c).matched);
        assert!(!match_step(&ok(t("blush")), &t("new blush"), None, &c).matched);
    }

    #[test]
    fn binned_clicks_agree_away_from_the_boundary() {
        use crate::actions::{parse, serialize};
        let c = MatchConfig::default();
        let gold = click(0.5, 0.5);
        for i in 0..200 {
            for j in 0..200 {
                let (x, y) = (i as f64 / 199.0, j as f64 / 199.0);
                let d = click_distance((x, y), (0.5, 0.5));
                if (d - 0.14).abs() <= 0.01 {
                    continue;
                }
                let raw = match_step(&ok(click(x, y)), &gold, None, &c).matched;
                let binned = parse(&serialize(&click(x, y))).unwrap();
                assert_eq!(match_step(&ok(binned), &gold, None, &c).matched, raw);
            }
        }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(text_f1("new blush", "new blush"), 1.0);
        assert!((text_f1("blush", "new blush") - 2.0 / 3.0).abs() < 1e-12);
        assert!((text_f1("new blush", "blush") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(text_f1("pizza", "shoes"), 0.0);
        assert_eq!(text_f1("", ""), 1.0);
        assert_eq!(text_f1("a", ""), 0.0);
        assert!(text_em(" New Blush", "new blush"));
    }

    fn episode(subset: &str, actions: Vec<Action>) -> Episode {
        Episode {
            id: format!("{subset}-0"),
            subset: subset.into(),
            goal: "go".into(),
            steps: actions
                .into_iter()
                .map(|action| EpisodeStep {
                    screen: Screen::filled(8, 8, [0, 0, 0]),
                    action,
                    rect: None,
                })
                .collect(),
        }
    }

    #[test]
    fn episode_completion_and_counts() {
        let c = MatchConfig::default();
        let ep = episode("click", vec![click(0.5, 0.5), Action::TaskComplete]);
        let good = [ok(click(0.52, 0.5)), ok(Action::TaskComplete)];
        assert!(score_episode(&good, &ep, &c).unwrap().completed);
        let bad = [ok(click(0.9, 0.9)), ok(Action::TaskComplete)];
        assert!(!score_episode(&bad, &ep, &c).unwrap().completed);
        assert!(score_episode(&good[..1], &ep, &c).is_err());

        let scores: Vec<_> = (0..10)
            .map(|i| {
                let p = if i < 7 { &good } else { &bad };
                score_episode(p, &ep, &c).unwrap()
            })
            .collect();
        let r = aggregate(&scores, &c);
        assert!((r.completion_rate - 0.7).abs() < 1e-12);
        assert_eq!(r.steps, 20);
        assert_eq!(r.subsets["click"].steps, 20);
        assert_eq!(r.overall, r.subsets["click"].step_accuracy);
    }

    #[test]
    fn overall_is_unweighted_mean_and_unknown_tags_are_untagged() {
        let c = MatchConfig::default();
        let a = episode("click", vec![Action::TaskComplete, Action::TaskComplete]);
        let b = episode(
            "weird",
            vec![Action::PressBack, Action::PressBack, Action::TaskComplete],
        );
        let empty = episode("scroll", vec![]);
        let sa = score_episode(&[ok(Action::PressHome), ok(Action::TaskComplete)], &a, &c).unwrap();
        let sb = score_episode(
            &[ok(Action::PressBack), ok(Action::PressBack), ok(Action::TaskComplete)],
            &b,
            &c,
        )
        .unwrap();
        let se = score_episode(&[], &empty, &c).unwrap();
        let r = aggregate(&[sa, sb, se], &c);
        assert_eq!(r.subsets["click"].step_accuracy, 0.5);
        assert_eq!(r.subsets[UNTAGGED].step_accuracy, 1.0);
        assert_eq!(r.overall, 0.75);
        assert_eq!(r.dropped_groups, 1);
        assert!(!r.subsets.contains_key("scroll"));
        let text = r.to_text();
        assert!(text.lines().all(|l| l.split('\t').count() == 2));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}

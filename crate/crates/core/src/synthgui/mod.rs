//! Seeded synthetic GUI episodes: rendered screens, templated goals and gold actions.

mod jsonl;
mod render;

pub use jsonl::{read_jsonl, read_jsonl_from, write_jsonl, write_jsonl_to, FORMAT_NAME, FORMAT_VERSION};
pub use render::{pixel_bounds, render, Widget, WidgetKind, BACKGROUND, HIGHLIGHT, PALETTE};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actions::{Action, Direction};
use crate::vision::{Rect, Screen};
use crate::{Error, Result};

pub const SUBSETS: [&str; 4] = ["click", "type", "scroll", "multi"];
pub const LABELS: [&str; 8] = ["name", "email", "city", "phone", "note", "code", "title", "user"];
pub const TYPED_WORDS: [&str; 12] = [
    "blush", "shoes", "pizza", "music", "maps", "news", "train", "chess", "coffee", "garden", "piano", "hotel",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub screen: Screen,
    pub action: Action,
    pub rect: Option<Rect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub subset: String,
    pub goal: String,
    pub steps: Vec<EpisodeStep>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub widgets_min: usize,
    pub widgets_max: usize,
    pub click: usize,
    pub type_: usize,
    pub scroll: usize,
    pub multi: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 256,
            widgets_min: 3,
            widgets_max: 6,
            click: 100,
            type_: 100,
            scroll: 100,
            multi: 100,
        }
    }
}

impl GeneratorConfig {
    /// Same episode count for every subset.
    pub fn balanced(seed: u64, per_subset: usize) -> Self {
        Self {
            seed,
            click: per_subset,
            type_: per_subset,
            scroll: per_subset,
            multi: per_subset,
            ..Self::default()
        }
    }

    pub fn total(&self) -> usize {
        self.click + self.type_ + self.scroll + self.multi
    }

    fn count(&self, subset: &str) -> usize {
        match subset {
            "click" => self.click,
            "type" => self.type_,
            "scroll" => self.scroll,
            _ => self.multi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "screen {}x{} is too small",
                self.width, self.height
            )));
        }
        if self.widgets_min < 2 || self.widgets_min > self.widgets_max {
            return Err(Error::Config(format!(
                "widget range {}..={} is invalid (minimum 2)",
                self.widgets_min, self.widgets_max
            )));
        }
        Ok(())
    }
}

struct Gen {
    rng: ChaCha8Rng,
    w: usize,
    h: usize,
}

/// A screen's widgets before rendering.
pub type Scene = Vec<Widget>;

impl Gen {
    fn rect_px(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Rect {
        Rect::new(
            x0 as f64 / self.w as f64,
            y0 as f64 / self.h as f64,
            x1 as f64 / self.w as f64,
            y1 as f64 / self.h as f64,
        )
        .expect("pixel rect inside the screen")
    }

    /// Random free spot of `pw x ph` pixels, one pixel of clearance around existing widgets.
    fn place(&mut self, pw: usize, ph: usize, taken: &[Widget]) -> Result<Rect> {
        if pw + 2 > self.w || ph + 2 > self.h {
            return Err(Error::Generation(format!("widget {pw}x{ph} does not fit the screen")));
        }
        for _ in 0..500 {
            let x0 = self.rng.gen_range(1..=self.w - pw - 1);
            let y0 = self.rng.gen_range(1..=self.h - ph - 1);
            let r = self.rect_px(x0, y0, x0 + pw, y0 + ph);
            let pad = self.rect_px(x0 - 1, y0 - 1, x0 + pw + 1, y0 + ph + 1);
            if taken.iter().all(|t| !t.rect.overlaps(&pad)) {
                return Ok(r);
            }
        }
        Err(Error::Generation(format!(
            "could not place a {pw}x{ph} widget next to {} others",
            taken.len()
        )))
    }

    /// Targets no larger than a tenth of the screen on each axis.
    fn small_size(&mut self) -> (usize, usize) {
        let mw = (self.w / 10).max(3);
        let mh = (self.h / 10).max(3);
        (
            self.rng.gen_range((mw * 2 / 3).max(2)..=mw),
            self.rng.gen_range((mh / 3).max(2)..=mh),
        )
    }

    fn colors(&mut self, n: usize) -> Result<Vec<usize>> {
        if n > PALETTE.len() {
            return Err(Error::Generation(format!(
                "{n} widgets cannot have distinct colors ({} available)",
                PALETTE.len()
            )));
        }
        let mut c: Vec<usize> = (0..PALETTE.len()).collect();
        c.shuffle(&mut self.rng);
        c.truncate(n);
        Ok(c)
    }

    fn label(&mut self) -> &'static str {
        LABELS[self.rng.gen_range(0..LABELS.len())]
    }

    fn kind(&mut self) -> WidgetKind {
        WidgetKind::ALL[self.rng.gen_range(0..4)]
    }

    /// `n` small widgets with distinct colors.
    fn small_scene(&mut self, n: usize) -> Result<Scene> {
        let colors = self.colors(n)?;
        let mut out: Scene = Vec::new();
        for c in colors {
            let (pw, ph) = self.small_size();
            let rect = self.place(pw, ph, &out)?;
            let kind = self.kind();
            let label = self.label();
            out.push(Widget::new(kind, rect, c, label));
        }
        Ok(out)
    }

    /// One large widget first, then `extra` small distractors with other colors.
    fn big_scene(&mut self, kind: WidgetKind, label: &str, hfrac: (f64, f64), extra: usize) -> Result<Scene> {
        let colors = self.colors(extra + 1)?;
        let pw = self.rng.gen_range(self.w / 2..=self.w * 9 / 10);
        let ph = ((self.rng.gen_range(hfrac.0..hfrac.1) * self.h as f64) as usize).max(10);
        let rect = self.place(pw, ph, &[])?;
        let mut out = vec![Widget::new(kind, rect, colors[0], label)];
        for &c in &colors[1..] {
            let (pw, ph) = self.small_size();
            let rect = self.place(pw, ph, &out)?;
            let k = self.kind();
            let l = self.label();
            out.push(Widget::new(k, rect, c, l));
        }
        Ok(out)
    }

    fn n_widgets(&mut self, cfg: &GeneratorConfig) -> usize {
        self.rng.gen_range(cfg.widgets_min..=cfg.widgets_max)
    }

    fn dir(&mut self) -> Direction {
        Direction::ALL[self.rng.gen_range(0..4)]
    }

    fn word(&mut self) -> &'static str {
        TYPED_WORDS[self.rng.gen_range(0..TYPED_WORDS.len())]
    }
}

/// Episode under construction: one scene per step.
struct Builder<'a> {
    gen: &'a Gen,
    steps: Vec<EpisodeStep>,
    scenes: Vec<Scene>,
}

impl<'a> Builder<'a> {
    fn new(gen: &'a Gen) -> Self {
        Self {
            gen,
            steps: Vec::new(),
            scenes: Vec::new(),
        }
    }

    fn step(&mut self, scene: &Scene, action: Action, rect: Option<Rect>) {
        self.steps.push(EpisodeStep {
            screen: render(scene, self.gen.w, self.gen.h),
            action,
            rect,
        });
        self.scenes.push(scene.clone());
    }

    fn click(&mut self, scene: &Scene, i: usize) {
        let r = scene[i].rect;
        let (x, y) = r.center();
        self.step(scene, Action::Click { x, y }, Some(r));
    }
}

fn describe(w: &Widget) -> String {
    format!("{} {}", w.color_name(), w.kind.as_str())
}

/// An episode plus the widget table behind every step's screen.
#[derive(Clone, Debug)]
pub struct SceneEpisode {
    pub episode: Episode,
    pub scenes: Vec<Scene>,
}

fn gen_click(g: &mut Gen, cfg: &GeneratorConfig) -> Result<(String, Vec<EpisodeStep>, Vec<Scene>)> {
    let n = g.n_widgets(cfg);
    let mut scene = g.small_scene(n)?;
    let t = g.rng.gen_range(0..n);
    let goal = format!("click the {}", describe(&scene[t]));
    let mut b = Builder::new(g);
    b.click(&scene, t);
    scene[t].highlighted = true;
    b.step(&scene, Action::TaskComplete, None);
    Ok((goal, b.steps, b.scenes))
}

fn gen_type(g: &mut Gen, cfg: &GeneratorConfig) -> Result<(String, Vec<EpisodeStep>, Vec<Scene>)> {
    let extra = g.n_widgets(cfg) - 1;
    let label = g.label();
    let mut scene = g.big_scene(WidgetKind::TextField, label, (0.05, 0.08), extra)?;
    scene[0].highlighted = true;
    let word = g.word();
    let goal = format!("type {word} in the {label} field");
    let mut b = Builder::new(g);
    b.step(&scene, Action::Type { text: word.into() }, Some(scene[0].rect));
    scene[0].text = word.into();
    b.step(&scene, Action::TaskComplete, None);
    Ok((goal, b.steps, b.scenes))
}

fn gen_scroll(g: &mut Gen, cfg: &GeneratorConfig) -> Result<(String, Vec<EpisodeStep>, Vec<Scene>)> {
    let extra = (g.n_widgets(cfg) - 1).min(2);
    let label = g.label();
    let mut scene = g.big_scene(WidgetKind::List, label, (0.3, 0.6), extra)?;
    let dir = g.dir();
    let swipe = g.rng.gen_bool(0.5);
    let (verb, action) = if swipe {
        ("swipe", Action::Swipe(dir))
    } else {
        ("scroll", Action::Scroll(dir))
    };
    let goal = format!("{verb} {}", dir.as_str());
    let mut b = Builder::new(g);
    b.step(&scene, action, Some(scene[0].rect));
    scene[0].offset += match dir {
        Direction::Up | Direction::Left => -3,
        Direction::Down | Direction::Right => 3,
    };
    b.step(&scene, Action::TaskComplete, None);
    Ok((goal, b.steps, b.scenes))
}

fn gen_multi(g: &mut Gen, cfg: &GeneratorConfig) -> Result<(String, Vec<EpisodeStep>, Vec<Scene>)> {
    match g.rng.gen_range(0..4) {
        0 => {
            let n = g.n_widgets(cfg);
            let mut scene = g.small_scene(n)?;
            let i = g.rng.gen_range(0..n);
            let j = (i + g.rng.gen_range(1..n)) % n;
            let goal = format!(
                "click the {} then click the {}",
                describe(&scene[i]),
                describe(&scene[j])
            );
            let mut b = Builder::new(g);
            b.click(&scene, i);
            scene[i].highlighted = true;
            b.click(&scene, j);
            scene[j].highlighted = true;
            b.step(&scene, Action::TaskComplete, None);
            Ok((goal, b.steps, b.scenes))
        }
        1 => {
            let extra = g.n_widgets(cfg) - 1;
            let mut scene = g.big_scene(WidgetKind::TextField, "search", (0.05, 0.08), extra)?;
            let word = g.word();
            let goal = format!("search for {word}");
            let results = {
                let rect = g.rect_px(2, 2, g.w - 2, g.h - 2);
                vec![Widget::new(WidgetKind::List, rect, scene[0].color, word)]
            };
            let mut b = Builder::new(g);
            b.click(&scene, 0);
            scene[0].highlighted = true;
            b.step(&scene, Action::Type { text: word.into() }, Some(scene[0].rect));
            scene[0].text = word.into();
            b.step(&scene, Action::PressEnter, None);
            b.step(&results, Action::TaskComplete, None);
            Ok((goal, b.steps, b.scenes))
        }
        2 => {
            let n = g.n_widgets(cfg);
            let mut scene = g.small_scene(n)?;
            let t = g.rng.gen_range(0..n);
            let goal = format!("click the {} then go back", describe(&scene[t]));
            let detail = vec![
                Widget::new(
                    WidgetKind::Button,
                    g.rect_px(2, 2, g.w - 2, g.h / 4),
                    scene[t].color,
                    scene[t].kind.as_str(),
                ),
                Widget::new(
                    WidgetKind::List,
                    g.rect_px(2, g.h / 4 + 2, g.w - 2, g.h - 2),
                    scene[t].color,
                    "",
                ),
            ];
            let mut b = Builder::new(g);
            b.click(&scene, t);
            b.step(&detail, Action::PressBack, None);
            scene[t].highlighted = true;
            b.step(&scene, Action::TaskComplete, None);
            Ok((goal, b.steps, b.scenes))
        }
        _ => {
            let n = g.n_widgets(cfg);
            let scene = g.small_scene(n)?;
            let cols = 3;
            let (cw, ch) = (g.w / cols, g.h / 6);
            let home: Scene = (0..PALETTE.len())
                .map(|i| {
                    let (cx, cy) = (i % cols, i / cols);
                    let r = g.rect_px(cx * cw + 2, cy * ch + 2, (cx + 1) * cw - 2, (cy + 1) * ch - 2);
                    Widget::new(WidgetKind::Icon, r, i, "")
                })
                .collect();
            let mut b = Builder::new(g);
            b.step(&scene, Action::PressHome, None);
            b.step(&home, Action::TaskComplete, None);
            Ok(("go home".to_string(), b.steps, b.scenes))
        }
    }
}

/// Episodes with their widget tables, in subset order `click, type, scroll, multi`.
pub fn generate_scenes(cfg: &GeneratorConfig) -> Result<Vec<SceneEpisode>> {
    cfg.validate()?;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        w: cfg.width,
        h: cfg.height,
    };
    let mut out = Vec::with_capacity(cfg.total());
    for subset in SUBSETS {
        for i in 0..cfg.count(subset) {
            let (goal, steps, scenes) = match subset {
                "click" => gen_click(&mut g, cfg)?,
                "type" => gen_type(&mut g, cfg)?,
                "scroll" => gen_scroll(&mut g, cfg)?,
                _ => gen_multi(&mut g, cfg)?,
            };
            out.push(SceneEpisode {
                episode: Episode {
                    id: format!("{subset}-{i:05}"),
                    subset: subset.to_string(),
                    goal,
                    steps,
                },
                scenes,
            });
        }
    }
    Ok(out)
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<Episode>> {
    Ok(generate_scenes(cfg)?.into_iter().map(|s| s.episode).collect())
}

/// Episode counts per subset tag.
pub fn subset_counts(episodes: &[Episode]) -> Vec<(String, usize)> {
    let mut counts: Vec<(String, usize)> = SUBSETS.iter().map(|s| (s.to_string(), 0)).collect();
    for e in episodes {
        match counts.iter_mut().find(|(s, _)| *s == e.subset) {
            Some(c) => c.1 += 1,
            None => counts.push((e.subset.clone(), 1)),
        }
    }
    counts
}

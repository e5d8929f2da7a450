//! Episode files: a header line, then one JSON object per episode.
//!
//! ```text
//! {"format":"afr-episodes","v":1}
//! {"id":..,"subset":..,"goal":..,"steps":[{"screen":{"w":..,"h":..,"px_b64":..},"action":"click b50 b12","rect":[x0,y0,x1,y1]|null}]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Episode, EpisodeStep};
use crate::actions::{coord_bin, parse_str, Action};
use crate::vision::{Rect, Screen};
use crate::{Error, Result};

pub const FORMAT_NAME: &str = "afr-episodes";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    v: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonScreen {
    w: usize,
    h: usize,
    px_b64: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonStep {
    screen: JsonScreen,
    action: String,
    rect: Option<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonEpisode {
    id: String,
    subset: String,
    goal: String,
    steps: Vec<JsonStep>,
}

fn to_json(e: &Episode) -> JsonEpisode {
    JsonEpisode {
        id: e.id.clone(),
        subset: e.subset.clone(),
        goal: e.goal.clone(),
        steps: e
            .steps
            .iter()
            .map(|s| JsonStep {
                screen: JsonScreen {
                    w: s.screen.width(),
                    h: s.screen.height(),
                    px_b64: B64.encode(s.screen.pixels()),
                },
                action: s.action.canonical(),
                rect: s.rect.map(|r| [r.x0, r.y0, r.x1, r.y1]),
            })
            .collect(),
    }
}

/// Clicks are stored as bins; a click whose bins match its rect's center is
/// restored to that exact center.
fn from_json(j: JsonEpisode) -> std::result::Result<Episode, String> {
    let steps = j
        .steps
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let px = B64
                .decode(s.screen.px_b64.as_bytes())
                .map_err(|e| format!("step {i}: bad base64: {e}"))?;
            let screen = Screen::new(s.screen.w, s.screen.h, px).map_err(|e| format!("step {i}: {e}"))?;
            let rect = s
                .rect
                .map(|[a, b, c, d]| Rect::new(a, b, c, d))
                .transpose()
                .map_err(|e| format!("step {i}: {e}"))?;
            let mut action = parse_str(&s.action).map_err(|e| format!("step {i}: {e}"))?;
            if let (Action::Click { x, y }, Some(r)) = (&action, rect) {
                let (cx, cy) = r.center();
                if coord_bin(*x) == coord_bin(cx) && coord_bin(*y) == coord_bin(cy) {
                    action = Action::Click { x: cx, y: cy };
                }
            }
            Ok(EpisodeStep { screen, action, rect })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    Ok(Episode {
        id: j.id,
        subset: j.subset,
        goal: j.goal,
        steps,
    })
}

pub fn write_jsonl_to(episodes: &[Episode], mut w: impl Write) -> Result<()> {
    let header = Header {
        format: FORMAT_NAME.into(),
        v: FORMAT_VERSION,
    };
    let enc = |e: serde_json::Error| Error::Format(e.to_string());
    writeln!(w, "{}", serde_json::to_string(&header).map_err(enc)?)?;
    for e in episodes {
        writeln!(w, "{}", serde_json::to_string(&to_json(e)).map_err(enc)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(episodes: &[Episode], path: &Path) -> Result<()> {
    write_jsonl_to(episodes, BufWriter::new(File::create(path)?))
}

pub fn read_jsonl_from(r: impl BufRead) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    let mut saw_header = false;
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        let bad = |msg: String| Error::Line { line: n, msg };
        if !saw_header {
            let h: Header = serde_json::from_str(&line).map_err(|e| bad(format!("bad header: {e}")))?;
            if h.format != FORMAT_NAME || h.v != FORMAT_VERSION {
                return Err(bad(format!(
                    "unsupported format {:?} v{} (expected {FORMAT_NAME} v{FORMAT_VERSION})",
                    h.format, h.v
                )));
            }
            saw_header = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let j: JsonEpisode = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        out.push(from_json(j).map_err(bad)?);
    }
    if !saw_header {
        return Err(Error::Line {
            line: 1,
            msg: "missing header".into(),
        });
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Episode>> {
    read_jsonl_from(BufReader::new(File::open(path)?))
}

//! GUI action algebra, its decoder token grammar and history verbalization.
//!
//! Canonical token form:
//!
//! | action        | tokens                          |
//! |---------------|---------------------------------|
//! | click         | `click bXX bYY EOS`             |
//! | type          | `type c1 c2 ... EOS` (chars)    |
//! | scroll/swipe  | `scroll DIR EOS`                |
//! | press_*       | `press_back EOS` etc.           |
//! | task_complete | `task_complete EOS`             |
//!
//! Coordinates are quantized into 100 bins per axis: `bin = min(floor(100 v), 99)`,
//! and a bin decodes to its center `(bin + 0.5) / 100`.

use std::collections::VecDeque;
use std::fmt;

use crate::{Error, Result};

pub const COORD_BINS: usize = 100;
pub const DEFAULT_HISTORY_LEN: usize = 8;
/// Characters allowed inside typed text.
pub const TEXT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == w)
    }

    pub fn is_vertical(self) -> bool {
        matches!(self, Direction::Up | Direction::Down)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Click { x: f64, y: f64 },
    Type { text: String },
    Scroll(Direction),
    Swipe(Direction),
    PressBack,
    PressHome,
    PressEnter,
    TaskComplete,
}

/// Variant tag without payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionKind {
    Click,
    Type,
    Scroll,
    Swipe,
    PressBack,
    PressHome,
    PressEnter,
    TaskComplete,
}

impl ActionKind {
    pub const ALL: [ActionKind; 8] = [
        ActionKind::Click,
        ActionKind::Type,
        ActionKind::Scroll,
        ActionKind::Swipe,
        ActionKind::PressBack,
        ActionKind::PressHome,
        ActionKind::PressEnter,
        ActionKind::TaskComplete,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::Type => "type",
            ActionKind::Scroll => "scroll",
            ActionKind::Swipe => "swipe",
            ActionKind::PressBack => "press_back",
            ActionKind::PressHome => "press_home",
            ActionKind::PressEnter => "press_enter",
            ActionKind::TaskComplete => "task_complete",
        }
    }

    pub fn from_keyword(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.keyword() == w)
    }
}

impl Action {
    pub fn click(x: f64, y: f64) -> Result<Self> {
        let a = Action::Click { x, y };
        a.validate()?;
        Ok(a)
    }

    pub fn type_text(text: &str) -> Result<Self> {
        let a = Action::Type { text: text.to_string() };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Action::Click { x, y } => {
                if !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y) {
                    return Err(Error::Contract(format!("click ({x}, {y}) outside [0,1]^2")));
                }
            }
            Action::Type { text } => {
                if text.is_empty() {
                    return Err(Error::Contract("typed text must be non-empty".into()));
                }
                if let Some(c) = text.chars().find(|c| !TEXT_ALPHABET.contains(*c)) {
                    return Err(Error::Contract(format!("character {c:?} outside the typing alphabet")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click { .. } => ActionKind::Click,
            Action::Type { .. } => ActionKind::Type,
            Action::Scroll(_) => ActionKind::Scroll,
            Action::Swipe(_) => ActionKind::Swipe,
            Action::PressBack => ActionKind::PressBack,
            Action::PressHome => ActionKind::PressHome,
            Action::PressEnter => ActionKind::PressEnter,
            Action::TaskComplete => ActionKind::TaskComplete,
        }
    }

    /// Canonical text form, e.g. `click b50 b50` or `type new blush`.
    pub fn canonical(&self) -> String {
        match self {
            Action::Type { text } => format!("type {text}"),
            _ => {
                let toks = serialize(self);
                toks[..toks.len() - 1]
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionToken {
    Bos,
    Eos,
    Sep,
    Keyword(ActionKind),
    Dir(Direction),
    Bin(u8),
    Char(char),
}

impl fmt::Display for ActionToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionToken::Bos => f.write_str("<bos>"),
            ActionToken::Eos => f.write_str("<eos>"),
            ActionToken::Sep => f.write_str("<sep>"),
            ActionToken::Keyword(k) => f.write_str(k.keyword()),
            ActionToken::Dir(d) => f.write_str(d.as_str()),
            ActionToken::Bin(b) => write!(f, "b{b:02}"),
            ActionToken::Char(c) => write!(f, "{c}"),
        }
    }
}

/// Dense id assignment for every decoder token.
///
/// Layout: `BOS EOS SEP`, the 8 keywords, 4 directions, bins `b00..b99`,
/// then the typing alphabet. Ids are fixed by construction.
#[derive(Clone, Debug)]
pub struct ActionVocab {
    tokens: Vec<ActionToken>,
}

impl Default for ActionVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl ActionVocab {
    pub fn new() -> Self {
        let mut tokens = vec![ActionToken::Bos, ActionToken::Eos, ActionToken::Sep];
        tokens.extend(ActionKind::ALL.into_iter().map(ActionToken::Keyword));
        tokens.extend(Direction::ALL.into_iter().map(ActionToken::Dir));
        tokens.extend((0..COORD_BINS as u8).map(ActionToken::Bin));
        tokens.extend(TEXT_ALPHABET.chars().map(ActionToken::Char));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<ActionToken> {
        self.tokens.get(id).copied()
    }

    pub fn id(&self, tok: ActionToken) -> usize {
        const KW: usize = 3;
        const DIR: usize = KW + 8;
        const BIN: usize = DIR + 4;
        const CHR: usize = BIN + COORD_BINS;
        match tok {
            ActionToken::Bos => 0,
            ActionToken::Eos => 1,
            ActionToken::Sep => 2,
            ActionToken::Keyword(k) => KW + k as usize,
            ActionToken::Dir(d) => DIR + d as usize,
            ActionToken::Bin(b) => BIN + b as usize,
            ActionToken::Char(c) => {
                CHR + TEXT_ALPHABET
                    .chars()
                    .position(|a| a == c)
                    .expect("character outside typing alphabet")
            }
        }
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn encode(&self, toks: &[ActionToken]) -> Vec<usize> {
        toks.iter().map(|&t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<Option<ActionToken>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

pub fn coord_bin(v: f64) -> u8 {
    ((v * COORD_BINS as f64).floor().max(0.0) as usize).min(COORD_BINS - 1) as u8
}

pub fn bin_center(b: u8) -> f64 {
    (f64::from(b) + 0.5) / COORD_BINS as f64
}

/// Canonical token sequence, terminated by EOS.
pub fn serialize(a: &Action) -> Vec<ActionToken> {
    let mut out = vec![ActionToken::Keyword(a.kind())];
    match a {
        Action::Click { x, y } => {
            out.push(ActionToken::Bin(coord_bin(*x)));
            out.push(ActionToken::Bin(coord_bin(*y)));
        }
        Action::Type { text } => out.extend(text.chars().map(ActionToken::Char)),
        Action::Scroll(d) | Action::Swipe(d) => out.push(ActionToken::Dir(*d)),
        _ => {}
    }
    out.push(ActionToken::Eos);
    out
}

/// Malformed decoder output; `index` is the offending token position.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("action parse error at token {index}: {reason}")]
pub struct ParseError {
    pub index: usize,
    pub reason: String,
}

impl ParseError {
    fn at(index: usize, reason: impl Into<String>) -> Self {
        Self {
            index,
            reason: reason.into(),
        }
    }
}

/// Inverse of [`serialize`]. A trailing EOS is optional; nothing may follow it.
pub fn parse(tokens: &[ActionToken]) -> Result<Action, ParseError> {
    let end = tokens
        .iter()
        .position(|t| *t == ActionToken::Eos)
        .unwrap_or(tokens.len());
    if end + 1 < tokens.len() {
        return Err(ParseError::at(end + 1, "tokens after end of action"));
    }
    let body = &tokens[..end];
    let kind = match body.first() {
        Some(ActionToken::Keyword(k)) => *k,
        Some(t) => return Err(ParseError::at(0, format!("expected an action keyword, found {t}"))),
        None => return Err(ParseError::at(0, "empty action")),
    };
    let expect_len = |n: usize| -> Result<(), ParseError> {
        if body.len() < n {
            Err(ParseError::at(body.len(), "action truncated"))
        } else if body.len() > n {
            Err(ParseError::at(n, format!("unexpected token {}", body[n])))
        } else {
            Ok(())
        }
    };
    let dir_at = |i: usize| match body.get(i) {
        Some(ActionToken::Dir(d)) => Ok(*d),
        Some(t) => Err(ParseError::at(i, format!("expected a direction, found {t}"))),
        None => Err(ParseError::at(i, "action truncated")),
    };
    let bin_at = |i: usize| match body.get(i) {
        Some(ActionToken::Bin(b)) => Ok(*b),
        Some(t) => Err(ParseError::at(i, format!("expected a coordinate bin, found {t}"))),
        None => Err(ParseError::at(i, "action truncated")),
    };
    Ok(match kind {
        ActionKind::Click => {
            let x = bin_at(1)?;
            let y = bin_at(2)?;
            expect_len(3)?;
            Action::Click {
                x: bin_center(x),
                y: bin_center(y),
            }
        }
        ActionKind::Type => {
            if body.len() < 2 {
                return Err(ParseError::at(body.len(), "typed text is empty"));
            }
            let mut text = String::new();
            for (i, t) in body.iter().enumerate().skip(1) {
                match t {
                    ActionToken::Char(c) => text.push(*c),
                    other => return Err(ParseError::at(i, format!("expected a character, found {other}"))),
                }
            }
            Action::Type { text }
        }
        ActionKind::Scroll | ActionKind::Swipe => {
            let d = dir_at(1)?;
            expect_len(2)?;
            if kind == ActionKind::Scroll {
                Action::Scroll(d)
            } else {
                Action::Swipe(d)
            }
        }
        ActionKind::PressBack => {
            expect_len(1)?;
            Action::PressBack
        }
        ActionKind::PressHome => {
            expect_len(1)?;
            Action::PressHome
        }
        ActionKind::PressEnter => {
            expect_len(1)?;
            Action::PressEnter
        }
        ActionKind::TaskComplete => {
            expect_len(1)?;
            Action::TaskComplete
        }
    })
}

/// Decoder ids to an action; unknown ids fail at their position.
pub fn parse_ids(vocab: &ActionVocab, ids: &[usize]) -> Result<Action, ParseError> {
    let toks = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            vocab
                .token(id)
                .ok_or_else(|| ParseError::at(i, format!("unknown token id {id}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    parse(&toks)
}

/// Parses the canonical text form (`click b50 b50`, `type hello`, `scroll up`).
pub fn parse_str(s: &str) -> Result<Action, ParseError> {
    let s = s.trim();
    if let Some(text) = s.strip_prefix("type ") {
        let mut toks = vec![ActionToken::Keyword(ActionKind::Type)];
        for (i, c) in text.chars().enumerate() {
            if !TEXT_ALPHABET.contains(c) {
                return Err(ParseError::at(
                    i + 1,
                    format!("character {c:?} outside the typing alphabet"),
                ));
            }
            toks.push(ActionToken::Char(c));
        }
        return parse(&toks);
    }
    let toks = s
        .split_whitespace()
        .enumerate()
        .map(|(i, w)| word_token(w).ok_or_else(|| ParseError::at(i, format!("unknown word {w:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    parse(&toks)
}

fn word_token(w: &str) -> Option<ActionToken> {
    if let Some(k) = ActionKind::from_keyword(w) {
        return Some(ActionToken::Keyword(k));
    }
    if let Some(d) = Direction::from_word(w) {
        return Some(ActionToken::Dir(d));
    }
    let digits = w.strip_prefix('b')?;
    if digits.len() == 2 && digits.bytes().all(|b| b.is_ascii_digit()) {
        return digits.parse().ok().map(ActionToken::Bin);
    }
    None
}

/// The most recent actions of an episode, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionHistory {
    actions: VecDeque<Action>,
    capacity: usize,
}

impl Default for ActionHistory {
    fn default() -> Self {
        Self::new(DEFAULT_HISTORY_LEN)
    }
}

impl ActionHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            actions: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Keeps only the last `capacity` of `actions`.
    pub fn from_actions(actions: &[Action], capacity: usize) -> Self {
        let mut h = Self::new(capacity);
        for a in actions {
            h.push(a.clone());
        }
        h
    }

    pub fn push(&mut self, a: Action) {
        if self.capacity == 0 {
            return;
        }
        if self.actions.len() == self.capacity {
            self.actions.pop_front();
        }
        self.actions.push_back(a);
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Action> {
        self.actions.iter()
    }

    /// Drops the oldest entry; used when the verbalized text is too long.
    pub fn drop_oldest(&mut self) -> Option<Action> {
        self.actions.pop_front()
    }
}

/// `step 1: click b10 b20; step 2: press_back`, or `no previous actions`.
pub fn verbalize_history(h: &ActionHistory) -> String {
    if h.is_empty() {
        return "no previous actions".to_string();
    }
    h.iter()
        .enumerate()
        .map(|(i, a)| format!("step {}: {}", i + 1, a.canonical()))
        .collect::<Vec<_>>()
        .join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn click_binning() {
        assert_eq!(Action::click(0.5, 0.5).unwrap().canonical(), "click b50 b50");
        assert_eq!(Action::click(1.0, 1.0).unwrap().canonical(), "click b99 b99");
        assert_eq!(Action::click(0.0, 0.999).unwrap().canonical(), "click b00 b99");
        assert!(Action::click(1.01, 0.5).is_err());
    }

    #[test]
    fn simple_variants() {
        assert_eq!(Action::TaskComplete.canonical(), "task_complete");
        assert_eq!(Action::Scroll(Direction::Down).canonical(), "scroll down");
        assert_eq!(Action::Swipe(Direction::Left).canonical(), "swipe left");
        assert_eq!(Action::type_text("new blush").unwrap().canonical(), "type new blush");
        assert!(Action::type_text("").is_err());
        assert!(Action::type_text("Caps").is_err());
    }

    #[test]
    fn parse_errors_carry_index() {
        assert_eq!(parse_str("scroll purple").unwrap_err().index, 1);
        assert_eq!(parse_str("click b50").unwrap_err().index, 2);
        assert_eq!(parse_str("click b50 b50 b50").unwrap_err().index, 3);
        assert_eq!(parse_str("hello").unwrap_err().index, 0);
        assert_eq!(parse(&[]).unwrap_err().index, 0);
        let toks = [
            ActionToken::Keyword(ActionKind::PressHome),
            ActionToken::Eos,
            ActionToken::Bin(3),
        ];
        assert_eq!(parse(&toks).unwrap_err().index, 2);
    }

    #[test]
    fn vocab_is_dense_and_consistent() {
        let v = ActionVocab::new();
        assert_eq!(v.len(), 3 + 8 + 4 + 100 + 37);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        assert_eq!(v.token(v.bos()), Some(ActionToken::Bos));
        assert_eq!(v.token(v.eos()), Some(ActionToken::Eos));
    }

    #[test]
    fn history_verbalization() {
        assert_eq!(verbalize_history(&ActionHistory::default()), "no previous actions");
        let h = ActionHistory::from_actions(&[Action::PressHome], 8);
        assert_eq!(verbalize_history(&h), "step 1: press_home");
        let many: Vec<Action> = (0..10).map(|i| Action::click(i as f64 / 10.0, 0.5).unwrap()).collect();
        let h = ActionHistory::from_actions(&many, 8);
        assert_eq!(h.len(), 8);
        let text = verbalize_history(&h);
        assert!(text.starts_with("step 1: click b20 b50"), "{text}");
        assert!(text.ends_with("step 8: click b90 b50"), "{text}");
        assert!(!text.contains("b10 b50"));
    }
}

use crate::vision::{Rect, Screen};

pub const BACKGROUND: [u8; 3] = [235, 235, 235];
pub const HIGHLIGHT: [u8; 3] = [255, 255, 255];

/// Generator color names and their fill values.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [235, 210, 40]),
    ("purple", [140, 60, 180]),
    ("orange", [245, 140, 30]),
    ("cyan", [40, 200, 215]),
    ("pink", [245, 120, 185]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WidgetKind {
    Button,
    TextField,
    Icon,
    List,
}

impl WidgetKind {
    pub const ALL: [WidgetKind; 4] = [
        WidgetKind::Button,
        WidgetKind::TextField,
        WidgetKind::Icon,
        WidgetKind::List,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WidgetKind::Button => "button",
            WidgetKind::TextField => "textfield",
            WidgetKind::Icon => "icon",
            WidgetKind::List => "list",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Widget {
    pub kind: WidgetKind,
    pub rect: Rect,
    /// Index into [`PALETTE`].
    pub color: usize,
    pub label: String,
    /// Text typed into a field.
    pub text: String,
    pub highlighted: bool,
    /// Scroll offset of list rows, in pixels.
    pub offset: i64,
}

impl Widget {
    pub fn new(kind: WidgetKind, rect: Rect, color: usize, label: &str) -> Self {
        Self {
            kind,
            rect,
            color,
            label: label.to_string(),
            text: String::new(),
            highlighted: false,
            offset: 0,
        }
    }

    pub fn color_name(&self) -> &'static str {
        PALETTE[self.color].0
    }
}

const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;

/// 3x5 glyph rows, most significant of the low 3 bits is the left column.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        'a' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'b' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'c' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'g' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'h' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'j' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'k' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'o' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'r' => [0b110, 0b101, 0b110, 0b101, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'u' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'x' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        _ => return None,
    })
}

/// Pixel bounds `[x0, x1) x [y0, y1)` of a normalized rect.
pub fn pixel_bounds(r: &Rect, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let px = |v: f64, n: usize| ((v * n as f64).round() as usize).min(n);
    (px(r.x0, width), px(r.y0, height), px(r.x1, width), px(r.y1, height))
}

fn shade(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (f64::from(v) * f) as u8)
}

fn ink_for(c: [u8; 3]) -> [u8; 3] {
    let luma = 0.299 * f64::from(c[0]) + 0.587 * f64::from(c[1]) + 0.114 * f64::from(c[2]);
    if luma > 140.0 {
        [20, 20, 20]
    } else {
        [250, 250, 250]
    }
}

/// Draws `text` with its top-left at `(x, y)`, clipped to the box `[.., x1) x [.., y1)`.
fn draw_text(s: &mut Screen, text: &str, x: usize, y: usize, x1: usize, y1: usize, ink: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        if cx + GLYPH_W > x1 || y + GLYPH_H > y1 {
            break;
        }
        if let Some(rows) = glyph(c) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..GLYPH_W {
                    if row & (1 << (GLYPH_W - 1 - dx)) != 0 {
                        s.set_pixel(cx + dx, y + dy, ink);
                    }
                }
            }
        }
        cx += GLYPH_W + 1;
    }
}

/// Flat background, filled widgets with a 1-px border, optional label and
/// typed text, list separators. Pure function of its inputs.
pub fn render(widgets: &[Widget], width: usize, height: usize) -> Screen {
    let mut s = Screen::filled(width, height, BACKGROUND);
    for w in widgets {
        let fill = PALETTE[w.color].1;
        let border = if w.highlighted { HIGHLIGHT } else { shade(fill, 0.5) };
        let (x0, y0, x1, y1) = pixel_bounds(&w.rect, width, height);
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = x == x0 || y == y0 || x + 1 == x1 || y + 1 == y1;
                s.set_pixel(x, y, if edge { border } else { fill });
            }
        }
        let cy = (y0 + y1) / 2;
        let ink = ink_for(fill);
        if w.kind == WidgetKind::List {
            let period = 6i64;
            for y in y0 + 1..y1.saturating_sub(1) {
                if (y as i64 - y0 as i64 + w.offset).rem_euclid(period) == 0 && y != cy {
                    for x in x0 + 2..x1.saturating_sub(2) {
                        s.set_pixel(x, y, shade(fill, 0.7));
                    }
                }
            }
        }
        // label on the first text row, typed text on the last, never over the center pixel
        let rows_fit = y1 - y0 >= GLYPH_H + 4;
        if rows_fit && !w.label.is_empty() && !(y0 + 2..y0 + 2 + GLYPH_H).contains(&cy) {
            draw_text(&mut s, &w.label, x0 + 2, y0 + 2, x1 - 1, y1 - 1, ink);
        }
        let ty = y1.saturating_sub(2 + GLYPH_H);
        if rows_fit && !w.text.is_empty() && !(ty..ty + GLYPH_H).contains(&cy) {
            draw_text(&mut s, &w.text, x0 + 2, ty, x1 - 1, y1 - 1, ink);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_screen_is_uniform() {
        let s = render(&[], 16, 32);
        assert!(s.pixels().chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn full_screen_rect_has_only_fill_and_border() {
        let w = Widget::new(WidgetKind::Button, Rect::new(0.0, 0.0, 1.0, 1.0).unwrap(), 2, "");
        let s = render(&[w], 10, 12);
        for y in 0..12 {
            for x in 0..10 {
                let edge = x == 0 || y == 0 || x == 9 || y == 11;
                let want = if edge { shade(PALETTE[2].1, 0.5) } else { PALETTE[2].1 };
                assert_eq!(s.pixel(x, y), want);
            }
        }
    }

    #[test]
    fn widget_center_has_widget_color() {
        let ws = vec![
            Widget::new(
                WidgetKind::TextField,
                Rect::new(0.1, 0.1, 0.9, 0.2).unwrap(),
                0,
                "email",
            ),
            Widget::new(WidgetKind::List, Rect::new(0.1, 0.3, 0.9, 0.9).unwrap(), 4, "news"),
            Widget::new(WidgetKind::Icon, Rect::new(0.05, 0.92, 0.12, 0.98).unwrap(), 6, "x"),
        ];
        let s = render(&ws, 64, 256);
        for w in &ws {
            let (cx, cy) = w.rect.center();
            assert_eq!(s.pixel_at(cx, cy), PALETTE[w.color].1, "{}", w.label);
        }
    }

    #[test]
    fn labels_change_pixels_and_every_glyph_exists() {
        let r = Rect::new(0.0, 0.0, 1.0, 0.5).unwrap();
        let plain = render(&[Widget::new(WidgetKind::Button, r, 1, "")], 40, 40);
        let labelled = render(&[Widget::new(WidgetKind::Button, r, 1, "abc")], 40, 40);
        assert_ne!(plain, labelled);
        assert!("abcdefghijklmnopqrstuvwxyz0123456789"
            .chars()
            .all(|c| glyph(c).is_some()));
    }
}

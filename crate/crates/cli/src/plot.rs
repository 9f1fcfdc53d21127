//! Static PNG charts: stacked line panels and bar charts. Charts carry no
//! text; panel order and colours are listed beside each file in a legend.

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const MARGIN: u32 = 12;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

/// One panel of overlaid series sharing axes.
#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let mut b: Option<(f64, f64, f64, f64)> = None;
    for &(x, y) in pts {
        b = Some(match b {
            None => (x, x, y, y),
            Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
        });
    }
    b.map(|(x0, x1, y0, y1)| {
        let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
        let pad = 0.05 * (y1 - y0);
        (x0, x1, y0 - pad, y1 + pad)
    })
}

fn draw_panel(img: &mut RgbImage, panel: &Panel, top: u32, width: u32, height: u32) {
    let (l, t) = (MARGIN as f32, (top + MARGIN) as f32);
    let (w, h) = ((width - 2 * MARGIN) as f32, (height - 2 * MARGIN) as f32);
    for k in 1..4 {
        let y = t + h * k as f32 / 4.0;
        draw_line_segment_mut(img, (l, y), (l + w, y), GRID);
    }
    draw_hollow_rect_mut(img, Rect::at(l as i32, t as i32).of_size(w as u32, h as u32), AXIS);
    let Some((x0, x1, y0, y1)) = bounds(&panel.series) else {
        return;
    };
    if y0 < 0.0 && y1 > 0.0 {
        let y = t + h * (1.0 - ((0.0 - y0) / (y1 - y0)) as f32);
        draw_line_segment_mut(img, (l, y), (l + w, y), AXIS);
    }
    let map = |x: f64, y: f64| {
        (
            l + w * ((x - x0) / (x1 - x0)) as f32,
            t + h * (1.0 - ((y - y0) / (y1 - y0)) as f32),
        )
    };
    for s in &panel.series {
        let c = Rgb(s.color);
        let pts: Vec<_> = s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        if pts.len() == 1 {
            let (x, y) = map(pts[0].0, pts[0].1);
            draw_filled_rect_mut(img, Rect::at(x as i32 - 1, y as i32 - 1).of_size(3, 3), c);
        }
        for pair in pts.windows(2) {
            draw_line_segment_mut(img, map(pair[0].0, pair[0].1), map(pair[1].0, pair[1].1), c);
        }
    }
}

/// Panels stacked vertically, each `width × panel_height`.
pub fn stacked_lines(panels: &[Panel], width: u32, panel_height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, panel_height * panels.len().max(1) as u32, WHITE);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut img, p, i as u32 * panel_height, width, panel_height);
    }
    img
}

/// Vertical bars from a zero baseline; negative values hang below it.
pub fn bars(values: &[(String, f64)], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let (l, t) = (MARGIN as f32, MARGIN as f32);
    let (w, h) = ((width - 2 * MARGIN) as f32, (height - 2 * MARGIN) as f32);
    draw_hollow_rect_mut(&mut img, Rect::at(l as i32, t as i32).of_size(w as u32, h as u32), AXIS);
    let finite: Vec<f64> = values.iter().map(|(_, v)| *v).filter(|v| v.is_finite()).collect();
    let hi = finite.iter().cloned().fold(0.0f64, f64::max);
    let lo = finite.iter().cloned().fold(0.0f64, f64::min);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let zero = t + h * (hi / span) as f32;
    draw_line_segment_mut(&mut img, (l, zero), (l + w, zero), AXIS);
    let slot = w / values.len().max(1) as f32;
    for (i, (_, v)) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let bar_h = (h * (v.abs() / span) as f32).max(1.0);
        let x = l + slot * (i as f32 + 0.2);
        let y = if *v >= 0.0 { zero - bar_h } else { zero };
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        draw_filled_rect_mut(&mut img, Rect::at(x as i32, y as i32).of_size((slot * 0.6).max(1.0) as u32, bar_h as u32), c);
    }
    img
}

/// Text legend describing a chart: one line per panel or bar with its colour.
pub fn legend(title: &str, entries: &[(String, [u8; 3])]) -> String {
    let mut s = format!("{title}\n");
    for (label, c) in entries {
        s.push_str(&format!("#{:02x}{:02x}{:02x}  {label}\n", c[0], c[1], c[2]));
    }
    s
}

/// Trailing moving average with window `k`.
pub fn smooth(points: &[(f64, f64)], k: usize) -> Vec<(f64, f64)> {
    let k = k.max(1);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(points.len());
    for (i, &(x, y)) in points.iter().enumerate() {
        acc += y;
        if i >= k {
            acc -= points[i - k].1;
        }
        out.push((x, acc / (i + 1).min(k) as f64));
    }
    out
}

//! Static PNG figures: loss curves, grouped metric bars and an importance strip.

use std::path::Path;

use anyhow::{Context, Result};
use combo_lab::metrics::GroupMetrics;
use combo_lab::protocol::ScenarioReport;
use image::{Rgb, RgbImage};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];
const MARGIN: u32 = 20;

fn canvas(w: u32, h: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    for x in MARGIN..w - MARGIN {
        img.put_pixel(x, h - MARGIN, AXIS);
    }
    for y in MARGIN..=h - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

/// Total loss over cumulative iterations, one color per step.
pub fn loss_curve(report: &ScenarioReport) -> RgbImage {
    let (w, h) = (640u32, 320u32);
    let mut img = canvas(w, h);
    let mut offset = 0usize;
    let mut points: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
    for (i, s) in report.steps.iter().enumerate() {
        let pts = s
            .log
            .loss_curve
            .iter()
            .map(|p| ((offset + p.iteration) as f64, p.total))
            .collect();
        points.push((i, pts));
        offset += s.log.iterations;
    }
    let xmax = offset.max(1) as f64;
    let ymax = points
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .filter(|v| v.is_finite())
        .fold(1e-9, f64::max);
    let (pw, ph) = ((w - 2 * MARGIN) as f64, (h - 2 * MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN as i64 + (x / xmax * pw) as i64,
            (h - MARGIN) as i64 - (y.max(0.0) / ymax * ph) as i64,
        )
    };
    for (i, pts) in &points {
        let color = PALETTE[i % PALETTE.len()];
        for pair in pts.windows(2) {
            line(&mut img, to_px(pair[0]), to_px(pair[1]), color);
        }
    }
    img
}

/// Two panels (PQ left, mIoU right); per step, bars for base, incremental and all.
pub fn metric_bars(report: &ScenarioReport) -> RgbImage {
    let (w, h) = (640u32, 320u32);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let panel_w = w / 2;
    let values = |g: &GroupMetrics, pq: bool| if pq { g.pq } else { g.miou };
    for (panel, pq) in [(0u32, true), (1, false)] {
        let left = panel * panel_w;
        for x in left + MARGIN..left + panel_w - MARGIN {
            img.put_pixel(x, h - MARGIN, AXIS);
        }
        let steps = report.steps.len().max(1) as u32;
        let slot = (panel_w - 2 * MARGIN) / steps;
        let bar = (slot / 4).max(1);
        for (i, s) in report.steps.iter().enumerate() {
            let groups = [&s.summary.base, &s.summary.incremental, &s.summary.all];
            for (k, g) in groups.iter().enumerate() {
                let Some(v) = values(g, pq) else { continue };
                let height = (v.clamp(0.0, 1.0) * (h - 2 * MARGIN) as f64) as u32;
                let x0 = left + MARGIN + i as u32 * slot + k as u32 * bar + bar / 2;
                fill(&mut img, x0, h - MARGIN - height, x0 + bar - 1, h - MARGIN, PALETTE[k]);
            }
        }
    }
    img
}

/// One row per step, one column per query; darker red means more important.
pub fn importance_strip(report: &ScenarioReport) -> RgbImage {
    let cell = 16u32;
    let n = report.steps.iter().map(|s| s.log.importance.len()).max().unwrap_or(0).max(1) as u32;
    let rows = report.steps.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(n * cell, rows * cell, WHITE);
    for (r, s) in report.steps.iter().enumerate() {
        for (q, &v) in s.log.importance.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))) as u8;
            let (x, y) = (q as u32 * cell, r as u32 * cell);
            fill(&mut img, x, y, x + cell - 1, y + cell - 1, Rgb([255, shade, shade]));
        }
    }
    img
}

pub fn write_all(report: &ScenarioReport, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let figures = [
        ("loss_curve.png", loss_curve(report)),
        ("metrics.png", metric_bars(report)),
        ("importance.png", importance_strip(report)),
    ];
    let mut names = Vec::new();
    for (name, img) in figures {
        let path = dir.join(name);
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        names.push(name.to_string());
    }
    Ok(names)
}

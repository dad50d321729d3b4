//! Overlay PNGs and trend-chart SVGs. Both outputs are byte-deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::heads::Prediction;
use crate::labels::{Domain, LabelSpace};
use crate::synthdata::{damage_color, part_color};

const ALPHA: f64 = 0.5;
const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;

/// 3x5 glyph rows, top to bottom, most significant bit leftmost.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c.to_ascii_lowercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        '%' => [5, 1, 2, 4, 5],
        '_' => [0, 0, 0, 0, 7],
        '-' => [0, 0, 7, 0, 0],
        '.' => [0, 0, 0, 0, 2],
        _ => [0; GLYPH_H],
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Mask colour of a predicted label.
pub fn label_color(domain: Domain, class_id: usize) -> [u8; 3] {
    let c = match domain {
        Domain::Part => part_color(class_id),
        Domain::Damage => damage_color(class_id),
        // Fake overlays reuse the damage palette, inverted so they stand apart.
        Domain::Fake => damage_color(class_id).map(|v| 1.0 - v),
    };
    c.map(to_u8)
}

fn draw_text(img: &mut RgbImage, text: &str, x0: usize, y0: usize, color: Rgb<u8>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    for (k, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - dx)) != 0 {
                    let (x, y) = (x0 + k * (GLYPH_W + 1) + dx, y0 + dy);
                    if x < w && y < h {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
    }
}

/// Renders `image` (`H*W*3` in `[0, 1]`) with predicted masks blended in and labelled.
pub fn overlay_image(
    image: &[f64],
    h: usize,
    w: usize,
    predictions: &[Prediction],
    labels: &LabelSpace,
) -> Result<RgbImage> {
    if image.len() != h * w * 3 {
        return Err(Error::shape("overlay", &[image.len()], &[h, w, 3]));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = Rgb([to_u8(image[3 * i]), to_u8(image[3 * i + 1]), to_u8(image[3 * i + 2])]);
    }
    let mut captions = Vec::new();
    for pred in predictions {
        let (Some(domain), Some(class)) = (pred.domain(), pred.class_id()) else {
            continue;
        };
        let color = label_color(domain, class);
        let mask = pred.binary_mask();
        let mut anchor: Option<(usize, usize)> = None;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (y, x) = (i / w, i % w);
            anchor = Some(anchor.map_or((y, x), |(ay, ax)| (ay.min(y), ax.min(x))));
            let px = img.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                px.0[c] = ((1.0 - ALPHA) * f64::from(px.0[c]) + ALPHA * f64::from(color[c])).round() as u8;
            }
        }
        if let Some(at) = anchor {
            let text = format!(
                "{} {}%",
                labels.name(domain, class)?,
                (pred.confidence() * 100.0).round() as u32
            );
            captions.push((text, at));
        }
    }
    for (text, (y, x)) in captions {
        let y = y.min(h.saturating_sub(GLYPH_H));
        draw_text(&mut img, &text, x, y, Rgb([255, 255, 255]));
    }
    Ok(img)
}

pub fn render_overlay(
    image: &[f64],
    h: usize,
    w: usize,
    predictions: &[Prediction],
    labels: &LabelSpace,
    path: &Path,
) -> Result<()> {
    let img = overlay_image(image, h, w, predictions, labels)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Metric values of one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendPoint {
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
}

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Polyline coordinates per metric name, x by checkpoint position, y inverted for SVG.
pub fn trend_coordinates(points: &[TrendPoint]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let values = points.iter().flat_map(|p| p.metrics.values().copied());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mid = if hi > lo { None } else { Some(CHART_H / 2.0) };
    let n = points.len();
    let x_of = |i: usize| {
        if n <= 1 {
            CHART_W / 2.0
        } else {
            MARGIN + (CHART_W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64
        }
    };
    let y_of = |v: f64| mid.unwrap_or(CHART_H - MARGIN - (CHART_H - 2.0 * MARGIN) * (v - lo) / span);
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        for (name, &v) in &p.metrics {
            series.entry(name.clone()).or_default().push((x_of(i), y_of(v)));
        }
    }
    series
}

pub fn trend_svg(points: &[TrendPoint]) -> String {
    let series = trend_coordinates(points);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_W}" height="{CHART_H}" viewBox="0 0 {CHART_W} {CHART_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="black"/>"#,
        b = CHART_H - MARGIN,
        r = CHART_W - MARGIN
    );
    let coords = trend_coordinates(points);
    if let Some(first) = coords.values().next() {
        for (i, p) in points.iter().enumerate() {
            if let Some(&(x, _)) = first.get(i) {
                let _ = writeln!(
                    s,
                    r#"<text x="{x:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
                    CHART_H - MARGIN + 14.0,
                    escape(&p.label)
                );
            }
        }
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let list: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-metric="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(name),
            list.join(" ")
        );
        for (x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">{}</text>"#,
            CHART_W - MARGIN + 4.0,
            MARGIN + 14.0 * k as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render_trends(points: &[TrendPoint], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Config("trend chart needs at least one checkpoint".into()));
    }
    std::fs::write(path, trend_svg(points)).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::GaussianPrior;

    #[test]
    fn no_predictions_is_plain_copy() {
        let image: Vec<f64> = (0..4 * 5 * 3).map(|i| i as f64 / 60.0).collect();
        let img = overlay_image(&image, 4, 5, &[], &LabelSpace::default()).unwrap();
        assert_eq!((img.width(), img.height()), (5, 4));
        let bytes: Vec<u8> = image.iter().map(|&v| to_u8(v)).collect();
        assert_eq!(img.into_raw(), bytes);
    }

    #[test]
    fn overlay_writes_decodable_png() {
        let (h, w) = (16, 24);
        let image = vec![0.2; h * w * 3];
        let mut domain_logits = vec![0.0; 4];
        domain_logits[0] = 5.0;
        let pred = Prediction {
            query: 0,
            mask: (0..h * w).map(|i| f64::from(i % w < 8)).collect(),
            damage_logits: (0..26).map(|i| if i == 3 { 4.0 } else { 0.0 }).collect(),
            fake_logits: vec![0.0; 7],
            part_logits: vec![0.0; 61],
            domain_logits,
            prior: GaussianPrior {
                center: (0.0, 0.0),
                sigma: 1.0,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.png");
        render_overlay(&image, h, w, &[pred.clone()], &LabelSpace::default(), &path).unwrap();
        let decoded = image::open(&path).unwrap().to_rgb8();
        assert_eq!((decoded.width(), decoded.height()), (w as u32, h as u32));
        let first = std::fs::read(&path).unwrap();
        render_overlay(&image, h, w, &[pred], &LabelSpace::default(), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert_eq!(label_color(Domain::Part, 4), label_color(Domain::Part, 4));
    }

    fn point(label: &str, pairs: &[(&str, f64)]) -> TrendPoint {
        TrendPoint {
            label: label.into(),
            metrics: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn trend_series_and_monotonicity() {
        let one = [point("a", &[("miou", 0.5), ("f1", 0.7)])];
        let c = trend_coordinates(&one);
        assert_eq!(c.len(), 2);
        assert!(c.values().all(|s| s.len() == 1));
        assert_eq!(trend_svg(&one).matches("<polyline").count(), 2);

        let rising: Vec<TrendPoint> = (0..5)
            .map(|i| point(&format!("c{i}"), &[("miou", 0.1 * i as f64)]))
            .collect();
        let s = &trend_coordinates(&rising)["miou"];
        for pair in s.windows(2) {
            assert!(pair[1].0 > pair[0].0);
            assert!(pair[1].1 < pair[0].1, "higher values sit higher on the chart");
        }
        assert!(render_trends(&[], Path::new("/nonexistent.svg")).is_err());
    }
}

//! Minimal ROC raster plot: one panel per scenario, one colour per detector.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::analysis::RocCurve;
use crate::error::Result;

const PANEL: u32 = 220;
const MARGIN: u32 = 20;
const COLORS: [[u8; 3]; 4] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [40, 40, 40]];

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

/// `panels[i]` holds the curves of one scenario, in detector order.
pub fn render_roc(panels: &[Vec<&RocCurve>], path: &Path) -> Result<()> {
    let n = panels.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(n * (PANEL + MARGIN) + MARGIN, PANEL + 2 * MARGIN, Rgb([255, 255, 255]));
    for (i, curves) in panels.iter().enumerate() {
        let ox = (MARGIN + i as u32 * (PANEL + MARGIN)) as f64;
        let oy = MARGIN as f64;
        let p = PANEL as f64;
        let to_px = |fpr: f64, tpr: f64| (ox + fpr * p, oy + (1.0 - tpr) * p);
        let axis = Rgb([0, 0, 0]);
        for (a, b) in [((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 1.0)), ((1.0, 0.0), (1.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))] {
            line(&mut img, to_px(a.0, a.1), to_px(b.0, b.1), axis);
        }
        line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([200, 200, 200]));
        for (k, curve) in curves.iter().enumerate() {
            let c = Rgb(COLORS[k % COLORS.len()]);
            let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|q| (q.fpr, q.tpr)).collect();
            pts.push((0.0, 0.0));
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in pts.windows(2) {
                line(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), c);
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

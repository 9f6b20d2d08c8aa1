use nalgebra::Vector2;

use super::{build_pyramid, ImageBuffer};

const LEVELS: usize = 3;

/// Global translation `d` with `b(x + d) ~ a(x)`, found by exhaustive
/// normalized cross-correlation on a coarse level and refined level by level.
/// `None` when no shift up to `max_shift` pixels correlates well.
pub fn estimate_shift(a: &ImageBuffer, b: &ImageBuffer, max_shift: f64, min_score: f64) -> Option<Vector2<f64>> {
    if a.width() != b.width() || a.height() != b.height() {
        return None;
    }
    let pa = build_pyramid(a, LEVELS, 1).ok()?;
    let pb = build_pyramid(b, LEVELS, 1).ok()?;
    let top = LEVELS - 1;
    let r = (max_shift / (1 << top) as f64).ceil() as isize;
    let (mut best, mut score) = search(pa.level(top), pb.level(top), (0, 0), r)?;
    for level in (0..top).rev() {
        (best, score) = search(pa.level(level), pb.level(level), (2 * best.0, 2 * best.1), 2)?;
    }
    (score >= min_score).then(|| Vector2::new(best.0 as f64, best.1 as f64))
}

fn search(a: &ImageBuffer, b: &ImageBuffer, center: (isize, isize), r: isize) -> Option<((isize, isize), f64)> {
    let mut best: Option<((isize, isize), f64)> = None;
    for dy in center.1 - r..=center.1 + r {
        for dx in center.0 - r..=center.0 + r {
            let Some(s) = ncc(a, b, dx, dy) else { continue };
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some(((dx, dy), s));
            }
        }
    }
    best
}

fn ncc(a: &ImageBuffer, b: &ImageBuffer, dx: isize, dy: isize) -> Option<f64> {
    let (w, h) = (a.width() as isize, a.height() as isize);
    let (x0, x1) = (0.max(-dx), w.min(w - dx));
    let (y0, y1) = (0.max(-dy), h.min(h - dy));
    // At least half of the image must overlap.
    if 2 * (x1 - x0) * (y1 - y0) < w * h {
        return None;
    }
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = a.get(x as usize, y as usize) as f64;
            let v = b.get((x + dx) as usize, (y + dy) as usize) as f64;
            sa += u;
            sb += v;
            saa += u * u;
            sbb += v * v;
            sab += u * v;
        }
    }
    let n = ((x1 - x0) * (y1 - y0)) as f64;
    let cov = sab - sa * sb / n;
    let den = ((saa - sa * sa / n) * (sbb - sb * sb / n)).sqrt();
    (den > 0.0).then(|| cov / den)
}

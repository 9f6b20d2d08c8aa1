//! FAST-9 segment-test corners with response-ranked grid bucketing.

use serde::{Deserialize, Serialize};

use super::ImageBuffer;

/// Bresenham circle of radius 3, clockwise from twelve o'clock.
const CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const ARC: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FastConfig {
    /// Intensity difference for the segment test.
    pub threshold: f32,
    pub grid_cols: usize,
    pub grid_rows: usize,
    /// Maximum corners kept per grid cell.
    pub cell_capacity: usize,
    /// Corners closer than this to the image border are discarded (>= 3).
    pub border: usize,
    pub nonmax_suppression: bool,
}

impl Default for FastConfig {
    fn default() -> Self {
        Self {
            threshold: 10.0,
            grid_cols: 8,
            grid_rows: 6,
            cell_capacity: 4,
            border: 3,
            nonmax_suppression: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub response: f32,
}

/// Segment-test response at `(x, y)`: the largest sum of absolute differences
/// over a contiguous arc of at least nine brighter (or darker) circle pixels,
/// or `None` when no such arc exists.
fn score(img: &ImageBuffer, x: usize, y: usize, threshold: f32) -> Option<f32> {
    let c = img.get(x, y);
    let mut diffs = [0f32; 16];
    for (d, (dx, dy)) in diffs.iter_mut().zip(CIRCLE.iter()) {
        *d = img.get((x as isize + dx) as usize, (y as isize + dy) as usize) - c;
    }
    // Quick rejection with the four compass points: a 9-arc covers at least
    // two of them.
    let compass = [diffs[0], diffs[4], diffs[8], diffs[12]];
    let bright = compass.iter().filter(|&&d| d > threshold).count();
    let dark = compass.iter().filter(|&&d| d < -threshold).count();
    if bright < 2 && dark < 2 {
        return None;
    }
    let mut best: Option<f32> = None;
    for sign in [1.0f32, -1.0] {
        let pass = |i: usize| sign * diffs[i % 16] > threshold;
        if (0..16).all(pass) {
            let s: f32 = diffs.iter().map(|d| d.abs()).sum();
            best = Some(best.map_or(s, |b: f32| b.max(s)));
            continue;
        }
        // Start scanning just after a failing pixel so runs do not wrap.
        let start = (0..16).find(|&i| !pass(i)).unwrap();
        let mut run = 0;
        let mut acc = 0.0;
        for k in 1..=16 {
            let i = (start + k) % 16;
            if pass(i) {
                run += 1;
                acc += diffs[i].abs();
            } else {
                if run >= ARC {
                    best = Some(best.map_or(acc, |b: f32| b.max(acc)));
                }
                run = 0;
                acc = 0.0;
            }
        }
    }
    best
}

/// Detects FAST-9 corners, suppresses non-maxima in a 3x3 neighborhood and
/// keeps the strongest `cell_capacity` corners in each grid cell.
pub fn detect_fast(img: &ImageBuffer, cfg: &FastConfig) -> Vec<Corner> {
    let (w, h) = (img.width(), img.height());
    let border = cfg.border.max(3);
    if w < 2 * border + 1 || h < 2 * border + 1 {
        return Vec::new();
    }
    let mut response = vec![0f32; w * h];
    let mut raw = Vec::new();
    for y in border..h - border {
        for x in border..w - border {
            if let Some(s) = score(img, x, y, cfg.threshold) {
                response[y * w + x] = s;
                raw.push(Corner { x, y, response: s });
            }
        }
    }
    if cfg.nonmax_suppression {
        raw.retain(|c| {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = ((c.x as isize + dx) as usize, (c.y as isize + dy) as usize);
                    let r = response[ny * w + nx];
                    // Ties go to the earlier pixel in raster order.
                    if r > c.response || (r == c.response && (dy < 0 || (dy == 0 && dx < 0))) {
                        return false;
                    }
                }
            }
            true
        });
    }
    bucket(raw, w, h, cfg)
}

fn bucket(corners: Vec<Corner>, w: usize, h: usize, cfg: &FastConfig) -> Vec<Corner> {
    let cols = cfg.grid_cols.max(1);
    let rows = cfg.grid_rows.max(1);
    let cw = w.div_ceil(cols);
    let ch = h.div_ceil(rows);
    let mut cells: Vec<Vec<Corner>> = vec![Vec::new(); cols * rows];
    for c in corners {
        let idx = (c.y / ch).min(rows - 1) * cols + (c.x / cw).min(cols - 1);
        cells[idx].push(c);
    }
    let mut out = Vec::new();
    for mut cell in cells {
        cell.sort_by(|a, b| {
            b.response
                .total_cmp(&a.response)
                .then(a.y.cmp(&b.y))
                .then(a.x.cmp(&b.x))
        });
        cell.truncate(cfg.cell_capacity);
        out.extend(cell);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_has_no_corners() {
        let img = ImageBuffer::from_fn(40, 40, |_, _| 100.0);
        assert!(detect_fast(&img, &FastConfig::default()).is_empty());
    }

    #[test]
    fn square_corners_are_found() {
        let img = ImageBuffer::from_fn(32, 32, |x, y| {
            if (12..20).contains(&x) && (12..20).contains(&y) {
                255.0
            } else {
                0.0
            }
        });
        let cfg = FastConfig {
            grid_cols: 1,
            grid_rows: 1,
            cell_capacity: 100,
            ..Default::default()
        };
        let corners = detect_fast(&img, &cfg);
        let truth = [(12.0, 12.0), (19.0, 12.0), (12.0, 19.0), (19.0, 19.0)];
        assert!(!corners.is_empty());
        for c in &corners {
            let d = truth
                .iter()
                .map(|(tx, ty)| ((c.x as f64 - tx).powi(2) + (c.y as f64 - ty).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(d <= 1.5, "corner {c:?} far from the square corners");
        }
        for (tx, ty) in truth {
            assert!(corners
                .iter()
                .any(|c| (c.x as f64 - tx).abs() <= 1.5 && (c.y as f64 - ty).abs() <= 1.5));
        }
    }

    #[test]
    fn bucketing_caps_each_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = ImageBuffer::from_fn(128, 96, |_, _| rng.random_range(0.0..255.0));
        let cfg = FastConfig {
            grid_cols: 4,
            grid_rows: 4,
            cell_capacity: 5,
            ..Default::default()
        };
        let corners = detect_fast(&img, &cfg);
        assert!(!corners.is_empty());
        let mut counts = [0usize; 16];
        for c in &corners {
            counts[(c.y / 24).min(3) * 4 + (c.x / 32).min(3)] += 1;
            assert!(c.x >= 3 && c.y >= 3 && c.x < 125 && c.y < 93);
        }
        assert!(counts.iter().all(|&n| n <= 5));
        assert_eq!(corners, detect_fast(&img, &cfg));
    }
}

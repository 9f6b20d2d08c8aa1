use super::{ImageBuffer, VisionError};

const KERNEL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Gaussian image pyramid; level 0 is the full-resolution input.
#[derive(Clone, Debug)]
pub struct Pyramid {
    levels: Vec<ImageBuffer>,
}

impl Pyramid {
    pub fn levels(&self) -> &[ImageBuffer] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &ImageBuffer {
        &self.levels[i]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn base(&self) -> &ImageBuffer {
        &self.levels[0]
    }
}

/// Builds `levels` levels, each a 5-tap binomial low-pass of the previous one
/// subsampled by two. The input must be at least `2^(levels-1) * window`
/// pixels on each side.
pub fn build_pyramid(img: &ImageBuffer, levels: usize, window: usize) -> Result<Pyramid, VisionError> {
    if levels == 0 {
        return Err(VisionError::InvalidParameter("pyramid needs at least one level".into()));
    }
    let min = (1usize << (levels - 1)) * window;
    if img.width() < min || img.height() < min {
        return Err(VisionError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            required: min,
        });
    }
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for _ in 1..levels {
        let next = downsample(out.last().unwrap());
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}

fn downsample(src: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (src.width(), src.height());
    // Horizontal pass evaluated only at even columns.
    let nw = w / 2;
    let nh = h / 2;
    let mut tmp = ImageBuffer::zeros(nw, h);
    for y in 0..h {
        for x in 0..nw {
            let cx = (2 * x) as isize;
            let mut acc = 0.0;
            for (k, &kw) in KERNEL.iter().enumerate() {
                acc += kw * src.get_clamped(cx + k as isize - 2, y as isize);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = ImageBuffer::zeros(nw, nh);
    for y in 0..nh {
        let cy = (2 * y) as isize;
        for x in 0..nw {
            let mut acc = 0.0;
            for (k, &kw) in KERNEL.iter().enumerate() {
                acc += kw * tmp.get_clamped(x as isize, cy + k as isize - 2);
            }
            out.set(x, y, acc);
        }
    }
    out
}

use super::VideoClip;

/// Components smaller than this many pixels count as absent.
pub const MIN_COMPONENT_AREA: usize = 8;

/// Detector output in the same layout as [`VideoClip`] boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub frames: usize,
    pub categories: usize,
    pub boxes: Vec<[f32; 4]>,
    pub present: Vec<bool>,
}

impl Detection {
    pub fn bbox(&self, t: usize, c: usize) -> [f32; 4] {
        self.boxes[t * self.categories + c]
    }

    pub fn is_present(&self, t: usize, c: usize) -> bool {
        self.present[t * self.categories + c]
    }
}

/// Tight box `(x0, y0, x1+1, y1+1)` of the largest 4-connected component of
/// `mask`, with its area, or `None` for an empty mask.
pub fn largest_component_box(mask: &[bool], height: usize, width: usize) -> Option<([f32; 4], usize)> {
    let mut visited = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut best: Option<([usize; 4], usize)> = None;
    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut area = 0;
        let mut b = [usize::MAX, usize::MAX, 0, 0];
        while let Some(p) = stack.pop() {
            area += 1;
            let (y, x) = (p / width, p % width);
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
            let mut push = |q: usize| {
                if mask[q] && !visited[q] {
                    visited[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < width {
                push(p + 1);
            }
            if y > 0 {
                push(p - width);
            }
            if y + 1 < height {
                push(p + width);
            }
        }
        // Strict comparison keeps the first component in raster order on ties.
        if best.map_or(true, |(_, a)| area > a) {
            best = Some((b, area));
        }
    }
    best.map(|(b, area)| ([b[0] as f32, b[1] as f32, (b[2] + 1) as f32, (b[3] + 1) as f32], area))
}

/// Band-threshold detector: per frame and category, the tight box of the
/// largest 4-connected component of pixels inside that category's band.
pub fn detect_boxes(pixels: &[f32], frames: usize, height: usize, width: usize, bands: &[(f64, f64)]) -> Detection {
    let n = height * width;
    assert_eq!(pixels.len(), frames * n, "pixel buffer does not match frames x height x width");
    let categories = bands.len();
    let mut det = Detection {
        frames,
        categories,
        boxes: Vec::with_capacity(frames * categories),
        present: Vec::with_capacity(frames * categories),
    };
    let mut mask = vec![false; n];
    for t in 0..frames {
        let frame = &pixels[t * n..(t + 1) * n];
        for &(lo, hi) in bands {
            for (m, &v) in mask.iter_mut().zip(frame) {
                let v = v as f64;
                *m = v >= lo && v <= hi;
            }
            match largest_component_box(&mask, height, width) {
                Some((b, area)) if area >= MIN_COMPONENT_AREA => {
                    det.boxes.push(b);
                    det.present.push(true);
                }
                _ => {
                    det.boxes.push([0.0; 4]);
                    det.present.push(false);
                }
            }
        }
    }
    det
}

pub fn detect_clip(clip: &VideoClip, bands: &[(f64, f64)]) -> Detection {
    detect_boxes(&clip.pixels, clip.frames, clip.height, clip.width, bands)
}

//! Synthetic segmentation data and batch plumbing: a generator that composes
//! colored geometric shapes over a textured background with pixel-exact
//! labels, deterministic labelled/unlabelled splitting, reshuffled-cycling
//! batch sampling, and circular-shift jitter.

use crate::objectives::LabelMap;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One labelled sample: image [C×H×W] plus its label map [H×W].
pub type Sample = (Tensor, LabelMap);

/// Partition into the labelled set (kept with annotations) and the
/// unlabelled set (images only, annotations discarded by construction).
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labelled: Vec<Sample>,
    pub unlabelled: Vec<Tensor>,
    pub fraction: f64,
    pub seed: u64,
    /// Indices of the labelled samples in the original list.
    pub labelled_indices: Vec<usize>,
}

// ── Synthetic dataset ───────────────────────────────────────────────────────

const PALETTE: [[f32; 3]; 7] = [
    [0.80, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.30, 0.85],
    [0.80, 0.80, 0.20],
    [0.20, 0.80, 0.80],
    [0.80, 0.20, 0.80],
    [0.85, 0.85, 0.85],
];

#[derive(Clone, Copy)]
enum ShapeKind {
    Rect,
    Disc,
    Stripes,
    Ring,
    Diamond,
    Cross,
}

const KINDS: [ShapeKind; 6] = [
    ShapeKind::Rect,
    ShapeKind::Disc,
    ShapeKind::Stripes,
    ShapeKind::Ring,
    ShapeKind::Diamond,
    ShapeKind::Cross,
];

fn paint(
    img: &mut [f32],
    labels: &mut [u8],
    hw: usize,
    class: u8,
    color: [f32; 3],
    mask: impl Fn(i64, i64) -> bool,
) {
    for y in 0..hw as i64 {
        for x in 0..hw as i64 {
            if mask(x, y) {
                let p = (y * hw as i64 + x) as usize;
                for (ch, c) in color.iter().enumerate() {
                    img[ch * hw * hw + p] = *c;
                }
                labels[p] = class;
            }
        }
    }
}

fn draw_shape(
    img: &mut [f32],
    labels: &mut [u8],
    hw: usize,
    class: u8,
    kind: ShapeKind,
    color: [f32; 3],
    rng: &mut Rng,
) {
    let s = hw as i64;
    let cx = rng.range_usize(0, hw - 1) as i64;
    let cy = rng.range_usize(0, hw - 1) as i64;
    match kind {
        ShapeKind::Rect => {
            let rx = rng.range_usize(hw / 10, hw / 4).max(2) as i64;
            let ry = rng.range_usize(hw / 10, hw / 4).max(2) as i64;
            paint(img, labels, hw, class, color, |x, y| {
                (x - cx).abs() <= rx && (y - cy).abs() <= ry
            });
        }
        ShapeKind::Disc => {
            let r = rng.range_usize(hw / 8, hw / 4).max(2) as i64;
            paint(img, labels, hw, class, color, |x, y| {
                (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r
            });
        }
        ShapeKind::Stripes => {
            let rx = rng.range_usize(hw / 6, hw / 3).max(3) as i64;
            let ry = rng.range_usize(hw / 6, hw / 3).max(3) as i64;
            let horizontal = rng.below(2) == 0;
            let period = rng.range_usize(3, 4) as i64;
            paint(img, labels, hw, class, color, |x, y| {
                let inside = (x - cx).abs() <= rx && (y - cy).abs() <= ry;
                let on = if horizontal {
                    (y - cy).rem_euclid(period) < 2
                } else {
                    (x - cx).rem_euclid(period) < 2
                };
                inside && on
            });
        }
        ShapeKind::Ring => {
            let r = rng.range_usize(hw / 7, hw / 4).max(3) as i64;
            let inner = (r - (r / 2).max(1)).max(1);
            paint(img, labels, hw, class, color, |x, y| {
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                d2 <= r * r && d2 > inner * inner
            });
        }
        ShapeKind::Diamond => {
            let r = rng.range_usize(hw / 8, hw / 4).max(2) as i64;
            paint(img, labels, hw, class, color, |x, y| (x - cx).abs() + (y - cy).abs() <= r);
        }
        ShapeKind::Cross => {
            let r = rng.range_usize(hw / 6, hw / 3).max(3) as i64;
            let t = (r / 3).max(1);
            paint(img, labels, hw, class, color, |x, y| {
                let dx = (x - cx).abs();
                let dy = (y - cy).abs();
                (dx <= t && dy <= r) || (dy <= t && dx <= r)
            });
        }
    }
    let _ = s;
}

/// Compose one image: gradient background, one or two shapes per non-background
/// class in shuffled draw order, then additive uniform noise.
fn generate_sample(hw: usize, num_classes: usize, rng: &mut Rng) -> Sample {
    let mut img = vec![0.0f32; 3 * hw * hw];
    let mut labels = vec![0u8; hw * hw];

    let base: Vec<f32> = (0..3).map(|_| rng.range_f32(0.10, 0.40)).collect();
    let gx: Vec<f32> = (0..3).map(|_| rng.range_f32(-0.20, 0.20)).collect();
    let gy: Vec<f32> = (0..3).map(|_| rng.range_f32(-0.20, 0.20)).collect();
    for ch in 0..3 {
        for y in 0..hw {
            for x in 0..hw {
                img[ch * hw * hw + y * hw + x] =
                    base[ch] + gx[ch] * x as f32 / hw as f32 + gy[ch] * y as f32 / hw as f32;
            }
        }
    }

    let mut order: Vec<usize> = (1..num_classes).collect();
    rng.shuffle(&mut order);
    for &class in &order {
        let kind = KINDS[(class - 1) % KINDS.len()];
        let base_color = PALETTE[(class - 1) % PALETTE.len()];
        let count = rng.range_usize(1, 2);
        for _ in 0..count {
            let mut color = base_color;
            for c in color.iter_mut() {
                *c = (*c + rng.range_f32(-0.15, 0.15)).clamp(0.02, 0.98);
            }
            draw_shape(&mut img, &mut labels, hw, class as u8, kind, color, rng);
        }
    }

    for v in img.iter_mut() {
        *v += rng.range_f32(-0.08, 0.08);
    }

    (Tensor::new(&[3, hw, hw], img), LabelMap::new(&[hw, hw], labels))
}

/// Deterministic synthetic dataset: same seed, bit-identical samples.
pub fn generate_synthetic_dataset(n: usize, hw: usize, num_classes: usize, seed: u64) -> Vec<Sample> {
    assert!(num_classes >= 2, "need at least background plus one shape class");
    assert!(num_classes <= 8, "palette supports at most 8 classes");
    assert!(hw >= 8, "images smaller than 8×8 are not useful here");
    let mut rng = Rng::new(seed ^ 0xda7a_5e7);
    (0..n).map(|_| generate_sample(hw, num_classes, &mut rng)).collect()
}

// ── Splitting ───────────────────────────────────────────────────────────────

const VALID_FRACTIONS: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

/// Shuffle once, keep the first round(fraction·n) samples as labelled. For a
/// fixed seed the labelled sets nest across fractions: 1/8 ⊂ 1/4 ⊂ 1/2.
pub fn split_dataset(data: &[Sample], fraction: f64, seed: u64) -> DatasetSplit {
    assert!(
        VALID_FRACTIONS.iter().any(|&f| (f - fraction).abs() < 1e-9),
        "fraction must be one of 1, 1/2, 1/4, 1/8, got {fraction}"
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = Rng::new(seed ^ 0x5b17_aa5e);
    rng.shuffle(&mut order);
    let n_lab = (fraction * data.len() as f64).round() as usize;
    assert!(n_lab > 0, "fraction {fraction} of {} samples yields no labelled data", data.len());
    let labelled_indices: Vec<usize> = order[..n_lab].to_vec();
    let labelled: Vec<Sample> = labelled_indices.iter().map(|&i| data[i].clone()).collect();
    let unlabelled: Vec<Tensor> =
        order[n_lab..].iter().map(|&i| data[i].0.clone()).collect();
    DatasetSplit { labelled, unlabelled, fraction, seed, labelled_indices }
}

// ── Batch sampling ──────────────────────────────────────────────────────────

/// Reshuffled cycling over a set: every element is visited once per epoch,
/// with a fresh permutation each epoch. Sampling more than the set size per
/// call wraps around (effectively sampling with replacement).
#[derive(Debug, Clone)]
pub struct BatchCycler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
    warned: bool,
}

impl BatchCycler {
    pub fn new(len: usize, mut rng: Rng) -> Self {
        assert!(len > 0, "cannot sample from an empty set");
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        BatchCycler { order, cursor: 0, rng, warned: false }
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        if batch > self.order.len() && !self.warned {
            log::warn!(
                "batch size {batch} exceeds set size {}; sampling with replacement",
                self.order.len()
            );
            self.warned = true;
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Stack [C×H×W] images into an [N×C×H×W] batch tensor.
pub fn stack_images(images: &[&Tensor]) -> Tensor {
    assert!(!images.is_empty());
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        assert_eq!(img.shape(), shape.as_slice(), "batch images must share a shape");
        data.extend_from_slice(img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::new(&out_shape, data)
}

// ── Jitter ──────────────────────────────────────────────────────────────────

/// Toroidal shift by (dx, dy): pixel (x, y) moves to ((x+dx) mod W, (y+dy) mod H).
pub fn circular_shift(
    image: &Tensor,
    label: Option<&LabelMap>,
    dx: usize,
    dy: usize,
) -> (Tensor, Option<LabelMap>) {
    let shape = image.shape().to_vec();
    assert_eq!(shape.len(), 3, "expected a [C×H×W] image");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let ty = (y + dy) % h;
            for x in 0..w {
                let tx = (x + dx) % w;
                out[ch * h * w + ty * w + tx] = src[ch * h * w + y * w + x];
            }
        }
    }
    let shifted_label = label.map(|lm| {
        assert_eq!(lm.shape(), &[h, w], "label does not match image extents");
        let mut ids = vec![0u8; h * w];
        for y in 0..h {
            let ty = (y + dy) % h;
            for x in 0..w {
                ids[ty * w + (x + dx) % w] = lm.ids()[y * w + x];
            }
        }
        LabelMap::new(&[h, w], ids)
    });
    (Tensor::new(&shape, out), shifted_label)
}

/// Shift image and label identically by amounts drawn uniformly from
/// [0, jitter_max] in both directions.
pub fn jitter(
    image: &Tensor,
    label: Option<&LabelMap>,
    rng: &mut Rng,
    jitter_max: usize,
) -> (Tensor, Option<LabelMap>) {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    assert!(jitter_max < h.min(w), "jitter_max {jitter_max} too large for {h}×{w}");
    let dx = rng.range_usize(0, jitter_max);
    let dy = rng.range_usize(0, jitter_max);
    circular_shift(image, label, dx, dy)
}

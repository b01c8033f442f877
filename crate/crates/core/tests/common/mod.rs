//! Reference implementations shared by the integration tests. They are
//! written for clarity rather than speed and share no code paths with the
//! library beyond its public data types.

#![allow(dead_code)]

use faceprop::network::{LayerParams, NetworkWeights, ScoreGrid};
use faceprop::proposals::{BBox, Peak};
use faceprop::tensor::Tensor3;
use rand::Rng;

/// Dense `h x w x c` array of f64.
#[derive(Clone)]
pub struct Arr {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Arr {
    fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            v: vec![0.0; h * w * c],
        }
    }
    fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.v[(y * self.w + x) * self.c + ch]
    }
    fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.v[(y * self.w + x) * self.c + ch]
    }
}

/// Conv layer in f64 with taps stored `[out][ky][kx][in]`.
struct RefConv {
    kh: usize,
    kw: usize,
    n_in: usize,
    n_out: usize,
    taps: Vec<f64>,
    bias: Vec<f64>,
}

impl RefConv {
    fn from_layer(layer: &LayerParams) -> Self {
        let LayerParams::Conv { kernels, bias } = layer else {
            panic!("expected conv")
        };
        let (kh, kw, n_in, n_out) = (
            kernels.kh(),
            kernels.kw(),
            kernels.in_channels(),
            kernels.out_channels(),
        );
        let mut taps = Vec::with_capacity(n_out * kh * kw * n_in);
        for o in 0..n_out {
            for ky in 0..kh {
                for kx in 0..kw {
                    for i in 0..n_in {
                        taps.push(kernels.get(o, i, ky, kx) as f64);
                    }
                }
            }
        }
        Self {
            kh,
            kw,
            n_in,
            n_out,
            taps,
            bias: bias.iter().map(|&b| b as f64).collect(),
        }
    }

    fn apply(&self, x: &Arr) -> Arr {
        assert_eq!(x.c, self.n_in);
        let mut y = Arr::zeros(x.h - self.kh + 1, x.w - self.kw + 1, self.n_out);
        let row = self.kw * self.n_in;
        for oy in 0..y.h {
            for ox in 0..y.w {
                for o in 0..self.n_out {
                    let mut acc = self.bias[o];
                    for ky in 0..self.kh {
                        let src = &x.v[((oy + ky) * x.w + ox) * x.c..][..row];
                        let k = &self.taps[(o * self.kh + ky) * row..][..row];
                        acc += src.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                    }
                    *y.at_mut(oy, ox, o) = acc;
                }
            }
        }
        y
    }
}

fn prelu(x: &mut Arr, slopes: &[f64]) {
    for (i, v) in x.v.iter_mut().enumerate() {
        if *v < 0.0 {
            *v *= slopes[i % x.c];
        }
    }
}

/// 3x3 stride-2 max pooling for inputs whose windows all fit.
fn pool_full_windows(x: &Arr) -> Arr {
    assert_eq!((x.h - 3) % 2, 0, "reference pool expects exact windows");
    let mut y = Arr::zeros((x.h - 3) / 2 + 1, (x.w - 3) / 2 + 1, x.c);
    for oy in 0..y.h {
        for ox in 0..y.w {
            for ch in 0..x.c {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..3 {
                    for dx in 0..3 {
                        m = m.max(x.at(2 * oy + dy, 2 * ox + dx, ch));
                    }
                }
                *y.at_mut(oy, ox, ch) = m;
            }
        }
    }
    y
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// The network rebuilt in f64 for the crop-by-crop reference pass.
pub struct RefNet {
    convs: Vec<RefConv>,
    slopes: Vec<Vec<f64>>,
}

impl RefNet {
    pub fn new(weights: &NetworkWeights) -> Self {
        let mut convs = Vec::new();
        let mut slopes = Vec::new();
        for layer in weights.layers() {
            match &layer.params {
                p @ LayerParams::Conv { .. } => convs.push(RefConv::from_layer(p)),
                LayerParams::Prelu { slopes: s } => slopes.push(s.iter().map(|&v| v as f64).collect()),
                LayerParams::None => {}
            }
        }
        assert_eq!((convs.len(), slopes.len()), (5, 4));
        Self { convs, slopes }
    }

    /// Forward pass over an unpadded 15x15 crop: conv1 without padding
    /// gives 13x13, pooling 6x6, then 4x4, 2x2, 1x1.
    pub fn forward_crop(&self, crop: &Arr) -> Vec<f64> {
        let mut x = self.convs[0].apply(crop);
        prelu(&mut x, &self.slopes[0]);
        let mut x = pool_full_windows(&x);
        for i in 1..4 {
            x = self.convs[i].apply(&x);
            prelu(&mut x, &self.slopes[i]);
        }
        let x = self.convs[4].apply(&x);
        assert_eq!((x.h, x.w), (1, 1));
        softmax(&x.v)
    }
}

/// Context crop for heatmap cell `(r, c)`: rows `2r..2r+15` and columns
/// `2c..2c+15` of the image zero-padded by one pixel.
pub fn context_crop(image: &Tensor3, r: usize, c: usize) -> Arr {
    const SIDE: usize = 15;
    let mut a = Arr::zeros(SIDE, SIDE, image.channels());
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (iy, ix) = ((2 * r + y) as isize - 1, (2 * c + x) as isize - 1);
            if iy < 0 || ix < 0 || iy as usize >= image.height() || ix as usize >= image.width() {
                continue;
            }
            for ch in 0..image.channels() {
                *a.at_mut(y, x, ch) = image.get(iy as usize, ix as usize, ch) as f64;
            }
        }
    }
    a
}

/// Cells whose context crop lies inside the padded image.
pub fn interior_cells(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0.. {
        if 2 * r + 12 > height - 1 {
            break;
        }
        for c in 0.. {
            if 2 * c + 12 > width - 1 {
                break;
            }
            out.push((r, c));
        }
    }
    out
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_fn(h, w, 3, |_, _, _| rng.random_range(-1.0f32..=1.0))
}

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub struct RefCluster {
    pub members: Vec<BBox>,
    pub coords: [f64; 4],
    pub score: f64,
}

/// Start from the highest-scoring remaining box, gather every remaining box
/// overlapping it by more than `tau`, average, combine scores, remove, and
/// repeat until nothing is left.
pub fn reference_merge(boxes: &[BBox], tau: f64) -> Vec<RefCluster> {
    let mut remaining: Vec<BBox> = boxes.to_vec();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for j in 1..remaining.len() {
            let (a, b) = (&remaining[j], &remaining[best]);
            let ka = (-a.score, a.x1, a.y1, a.x2, a.y2);
            let kb = (-b.score, b.x1, b.y1, b.x2, b.y2);
            if ka < kb {
                best = j;
            }
        }
        let seed = remaining[best];
        let mut members = Vec::new();
        let mut rest = Vec::new();
        for (j, b) in remaining.iter().enumerate() {
            if j == best || ref_iou(&seed, b) > tau {
                members.push(*b);
            } else {
                rest.push(*b);
            }
        }
        let n = members.len() as f64;
        let mut coords = [0.0; 4];
        for m in &members {
            coords[0] += m.x1;
            coords[1] += m.y1;
            coords[2] += m.x2;
            coords[3] += m.y2;
        }
        for v in &mut coords {
            *v /= n;
        }
        let mut miss = 1.0;
        for m in &members {
            miss *= 1.0 - m.score;
        }
        out.push(RefCluster {
            members,
            coords,
            score: 1.0 - miss,
        });
        remaining = rest;
    }
    out
}

/// Repeatedly picks the best eligible cell (score, then row, then column)
/// by scanning the whole grid, then blocks its neighbourhood.
pub fn reference_peaks(map: &ScoreGrid, tau: f64, radius: usize) -> Vec<Peak> {
    let (rows, cols) = (map.rows(), map.cols());
    let mut blocked = vec![false; rows * cols];
    let mut peaks = Vec::new();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for r in 0..rows {
            for c in 0..cols {
                let v = map.get(r, c);
                if blocked[r * cols + c] || (v as f64) < tau {
                    continue;
                }
                if best.is_none_or(|(br, bc)| v > map.get(br, bc)) {
                    best = Some((r, c));
                }
            }
        }
        let Some((r, c)) = best else { break };
        peaks.push(Peak {
            row: r,
            col: c,
            score: map.get(r, c),
        });
        for rr in 0..rows {
            for cc in 0..cols {
                if rr.abs_diff(r) <= radius && cc.abs_diff(c) <= radius {
                    blocked[rr * cols + cc] = true;
                }
            }
        }
    }
    peaks
}

/// Random grid with frequent exact ties.
pub fn random_grid(rng: &mut impl Rng, rows: usize, cols: usize) -> ScoreGrid {
    let coarse = rng.random_bool(0.5);
    let values = (0..rows * cols)
        .map(|_| {
            if coarse {
                rng.random_range(0..=20) as f32 / 20.0
            } else {
                rng.random::<f32>()
            }
        })
        .collect();
    ScoreGrid::new(rows, cols, values)
}

/// Random boxes clustered around a few centres, with occasional exact
/// duplicates and tied scores.
pub fn random_boxes(rng: &mut impl Rng, n: usize) -> Vec<BBox> {
    let centres: Vec<(f64, f64)> = (0..rng.random_range(1..=4))
        .map(|_| (rng.random_range(20.0..200.0), rng.random_range(20.0..200.0)))
        .collect();
    let mut out: Vec<BBox> = Vec::with_capacity(n);
    while out.len() < n {
        if !out.is_empty() && rng.random_bool(0.1) {
            let dup = out[rng.random_range(0..out.len())];
            out.push(dup);
            continue;
        }
        let (cx, cy) = centres[rng.random_range(0..centres.len())];
        let side = rng.random_range(10.0..60.0);
        let (x, y) = (cx + rng.random_range(-15.0..15.0), cy + rng.random_range(-15.0..15.0));
        let aspect = rng.random_range(0.8..1.25);
        let score = if rng.random_bool(0.3) {
            rng.random_range(1..10) as f64 / 10.0
        } else {
            rng.random_range(0.0..1.0)
        };
        out.push(BBox::new(
            x - side / 2.0,
            y - side * aspect / 2.0,
            x + side / 2.0,
            y + side * aspect / 2.0,
            score,
        ));
    }
    out
}

/// Members as sortable tuples for multiset comparison.
pub fn member_keys(members: &[BBox]) -> Vec<[u64; 5]> {
    let mut k: Vec<[u64; 5]> = members
        .iter()
        .map(|b| {
            [
                b.x1.to_bits(),
                b.y1.to_bits(),
                b.x2.to_bits(),
                b.y2.to_bits(),
                b.score.to_bits(),
            ]
        })
        .collect();
    k.sort_unstable();
    k
}

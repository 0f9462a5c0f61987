//! Axis-aligned box helpers in `(x1, y1, x2, y2)` pixel coordinates.

use rand::seq::SliceRandom;
use rand::Rng;

pub type BoxXyxy = [f32; 4];

pub fn area(b: &BoxXyxy) -> f32 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn clip(b: &BoxXyxy, width: f32, height: f32) -> BoxXyxy {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

/// Greedy non-maximum suppression. Returns kept indices in descending score order;
/// equal scores keep input order.
pub fn nms(boxes: &[BoxXyxy], scores: &[f32], thresh: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// NMS applied independently within each group (level or class); output sorted by score.
pub fn batched_nms(boxes: &[BoxXyxy], scores: &[f32], groups: &[usize], thresh: f32) -> Vec<usize> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut keep = Vec::new();
    for g in ids {
        let members: Vec<usize> = (0..boxes.len()).filter(|&i| groups[i] == g).collect();
        let b: Vec<BoxXyxy> = members.iter().map(|&i| boxes[i]).collect();
        let s: Vec<f32> = members.iter().map(|&i| scores[i]).collect();
        keep.extend(nms(&b, &s, thresh).into_iter().map(|k| members[k]));
    }
    keep.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    keep
}

/// Encodes boxes relative to reference boxes as weighted `(dx, dy, dw, dh)`.
#[derive(Debug, Clone, Copy)]
pub struct BoxCoder {
    pub weights: [f32; 4],
    pub scale_clamp: f32,
}

impl BoxCoder {
    pub fn new(weights: [f32; 4]) -> Self {
        Self {
            weights,
            scale_clamp: (1000.0f32 / 16.0).ln(),
        }
    }

    pub fn encode(&self, reference: &BoxXyxy, target: &BoxXyxy) -> [f32; 4] {
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let (tw, th) = (target[2] - target[0], target[3] - target[1]);
        let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    pub fn decode(&self, reference: &BoxXyxy, deltas: &[f32]) -> BoxXyxy {
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let [wx, wy, ww, wh] = self.weights;
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(self.scale_clamp);
        let dh = (deltas[3] / wh).min(self.scale_clamp);
        let (cx, cy) = (dx * rw + rx, dy * rh + ry);
        let (w, h) = (dw.exp() * rw, dh.exp() * rh);
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Match {
    Foreground(usize),
    Background,
    Ignore,
}

/// IoU-threshold matcher. With `allow_low_quality`, each ground truth also claims the
/// candidates that reach its best IoU, even below the foreground threshold.
#[derive(Debug, Clone, Copy)]
pub struct Matcher {
    pub fg_thresh: f32,
    pub bg_thresh: f32,
    pub allow_low_quality: bool,
}

impl Matcher {
    pub fn assign(&self, gts: &[BoxXyxy], candidates: &[BoxXyxy]) -> Vec<Match> {
        if gts.is_empty() {
            return vec![Match::Background; candidates.len()];
        }
        let ious: Vec<Vec<f32>> = gts
            .iter()
            .map(|g| candidates.iter().map(|c| iou(g, c)).collect())
            .collect();
        let mut out: Vec<Match> = (0..candidates.len())
            .map(|j| {
                let (best_g, best) = ious
                    .iter()
                    .enumerate()
                    .map(|(g, row)| (g, row[j]))
                    .fold((0, f32::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                if best >= self.fg_thresh {
                    Match::Foreground(best_g)
                } else if best < self.bg_thresh {
                    Match::Background
                } else {
                    Match::Ignore
                }
            })
            .collect();
        if self.allow_low_quality {
            for (g, row) in ious.iter().enumerate() {
                let best = row.iter().copied().fold(0.0f32, f32::max);
                if best <= 0.0 {
                    continue;
                }
                for (j, &v) in row.iter().enumerate() {
                    if v == best {
                        // Keep the candidate's own best ground truth when it has one.
                        let own = ious
                            .iter()
                            .enumerate()
                            .map(|(gg, r)| (gg, r[j]))
                            .fold((g, f32::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                        out[j] = Match::Foreground(own.0);
                    }
                }
            }
        }
        out
    }
}

/// Samples at most `batch_size` candidates, aiming for `positive_fraction` foreground.
/// Returns `(positive, negative)` candidate indices.
pub fn sample_balanced<R: Rng>(
    matches: &[Match],
    batch_size: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = matches
        .iter()
        .enumerate()
        .filter(|(_, m)| matches!(m, Match::Foreground(_)))
        .map(|(i, _)| i)
        .collect();
    let mut neg: Vec<usize> = matches
        .iter()
        .enumerate()
        .filter(|(_, m)| matches!(m, Match::Background))
        .map(|(i, _)| i)
        .collect();
    let num_pos = ((batch_size as f64 * positive_fraction) as usize).min(pos.len());
    let num_neg = (batch_size - num_pos).min(neg.len());
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(num_pos);
    neg.truncate(num_neg);
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn iou_basics() {
        let a = [0.0, 0.0, 2.0, 2.0];
        let b = [1.0, 0.0, 3.0, 2.0];
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]), 0.0);
    }

    #[test]
    fn coder_round_trip() {
        let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
        let r = [10.0, 20.0, 50.0, 60.0];
        let t = [12.0, 18.0, 70.0, 55.0];
        let d = coder.encode(&r, &t);
        let back = coder.decode(&r, &d);
        for k in 0..4 {
            assert!((back[k] - t[k]).abs() < 1e-3, "{back:?}");
        }
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let boxes = [
            [0.0, 0.0, 10.0, 10.0],
            [1.0, 1.0, 10.0, 10.0],
            [20.0, 20.0, 30.0, 30.0],
        ];
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5), vec![0, 2]);
        assert_eq!(nms(&boxes, &[0.5, 0.8, 0.7], 0.5), vec![1, 2]);
    }

    #[test]
    fn matcher_low_quality() {
        let m = Matcher {
            fg_thresh: 0.7,
            bg_thresh: 0.3,
            allow_low_quality: true,
        };
        let gt = [[0.0, 0.0, 10.0, 10.0]];
        let cands = [[0.0, 0.0, 10.0, 20.0], [50.0, 50.0, 60.0, 60.0]];
        assert_eq!(m.assign(&gt, &cands), vec![Match::Foreground(0), Match::Background]);
    }

    #[test]
    fn sampler_respects_budget() {
        let matches: Vec<Match> = (0..100)
            .map(|i| if i < 10 { Match::Foreground(0) } else { Match::Background })
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (p, n) = sample_balanced(&matches, 16, 0.5, &mut rng);
        assert_eq!((p.len(), n.len()), (8, 8));
        assert!(p.iter().all(|&i| i < 10));
    }
}

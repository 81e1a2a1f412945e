//! Axis-aligned box geometry shared by the detector and the evaluator.
//! Boxes are `[x0, y0, x1, y1]` in pixels with x1 > x0 and y1 > y0.

/// Intersection over union. Degenerate (zero-area) boxes yield 0.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    inter / (area_a + area_b - inter)
}

pub fn clip(mut b: [f64; 4], w: f64, h: f64) -> [f64; 4] {
    b[0] = b[0].clamp(0.0, w);
    b[1] = b[1].clamp(0.0, h);
    b[2] = b[2].clamp(0.0, w);
    b[3] = b[3].clamp(0.0, h);
    b
}

/// Box deltas relative to an anchor or proposal, in the usual
/// (dx, dy, dw, dh) center/log-size parameterization.
pub fn encode_deltas(base: &[f64; 4], target: &[f64; 4]) -> [f64; 4] {
    let bw = base[2] - base[0];
    let bh = base[3] - base[1];
    let bx = base[0] + bw / 2.0;
    let by = base[1] + bh / 2.0;
    let tw = target[2] - target[0];
    let th = target[3] - target[1];
    let tx = target[0] + tw / 2.0;
    let ty = target[1] + th / 2.0;
    [
        (tx - bx) / bw,
        (ty - by) / bh,
        (tw / bw).ln(),
        (th / bh).ln(),
    ]
}

pub fn decode_deltas(base: &[f64; 4], d: &[f64; 4]) -> [f64; 4] {
    let bw = base[2] - base[0];
    let bh = base[3] - base[1];
    let bx = base[0] + bw / 2.0;
    let by = base[1] + bh / 2.0;
    // clamp log-size so a wild early prediction cannot overflow
    let dw = d[2].clamp(-4.0, 4.0);
    let dh = d[3].clamp(-4.0, 4.0);
    let cx = bx + d[0].clamp(-4.0, 4.0) * bw;
    let cy = by + d[1].clamp(-4.0, 4.0) * bh;
    let w = bw * dw.exp();
    let h = bh * dh.exp();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Greedy non-maximum suppression. Returns kept indices; candidates are
/// ranked by descending score with ties broken by input order.
pub fn nms(boxes: &[[f64; 4]], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if j != i && !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let b = [1.0, 2.0, 5.0, 6.0];
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]), 0.0);
    }

    #[test]
    fn iou_hand_example() {
        // intersection 1, union 7
        let v = iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]);
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn delta_round_trip() {
        let base = [10.0, 12.0, 30.0, 40.0];
        let target = [12.0, 15.0, 33.0, 38.0];
        let d = encode_deltas(&base, &target);
        let back = decode_deltas(&base, &d);
        for k in 0..4 {
            assert!((back[k] - target[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_collapses_duplicates() {
        let boxes = [[0.0, 0.0, 4.0, 4.0], [0.0, 0.0, 4.0, 4.0], [10.0, 10.0, 12.0, 12.0]];
        let scores = [0.9, 0.9, 0.5];
        let keep = nms(&boxes, &scores, 0.5);
        assert_eq!(keep, vec![0, 2]);
    }
}

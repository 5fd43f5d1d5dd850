//! Brute-force reference implementations used as independent oracles by the
//! simdet test suites.
//!
//! Everything in here is deliberately naive: nested loops, exhaustive
//! enumeration, two-pass statistics. None of it shares code with the library
//! under test, so agreement between the two is meaningful evidence.

/// Valid (no padding) cross-correlation with one batch axis:
/// `input` is `[n, c_in, spatial...]`, `kernel` is `[c_out, c_in, spatial...]`.
///
/// Each output element is accumulated over `(c_in, kernel offsets...)` in
/// lexicographic order, so a production implementation that sums in the same
/// order must match bit for bit.
pub fn conv_oracle(
    input: &[f64],
    in_shape: &[usize],
    kernel: &[f64],
    k_shape: &[usize],
    stride: &[usize],
) -> (Vec<f64>, Vec<usize>) {
    let rank = in_shape.len();
    assert!(rank == 3 || rank == 4, "expect [n,c,s...] input");
    assert_eq!(k_shape.len(), rank);
    assert_eq!(in_shape[1], k_shape[1], "channel mismatch");
    assert_eq!(stride.len(), rank - 2);

    let (n, c_in, c_out) = (in_shape[0], in_shape[1], k_shape[0]);
    let in_sp = &in_shape[2..];
    let k_sp = &k_shape[2..];
    let out_sp: Vec<usize> = in_sp
        .iter()
        .zip(k_sp)
        .zip(stride)
        .map(|((i, k), s)| (i - k) / s + 1)
        .collect();

    let mut out_shape = vec![n, c_out];
    out_shape.extend_from_slice(&out_sp);
    let mut out = vec![0.0; out_shape.iter().product()];

    match rank {
        3 => {
            let (iw, kw, ow) = (in_sp[0], k_sp[0], out_sp[0]);
            for b in 0..n {
                for co in 0..c_out {
                    for o in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for dk in 0..kw {
                                acc += kernel[(co * c_in + ci) * kw + dk]
                                    * input[(b * c_in + ci) * iw + o * stride[0] + dk];
                            }
                        }
                        out[(b * c_out + co) * ow + o] = acc;
                    }
                }
            }
        }
        4 => {
            let (ih, iw) = (in_sp[0], in_sp[1]);
            let (kh, kw) = (k_sp[0], k_sp[1]);
            let (oh, ow) = (out_sp[0], out_sp[1]);
            for b in 0..n {
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..c_in {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let iy = oy * stride[0] + dy;
                                        let ix = ox * stride[1] + dx;
                                        acc += kernel[((co * c_in + ci) * kh + dy) * kw + dx]
                                            * input[((b * c_in + ci) * ih + iy) * iw + ix];
                                    }
                                }
                            }
                            out[((b * c_out + co) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    (out, out_shape)
}

/// Max pooling with window 2 and stride 2 over the trailing spatial axes of a
/// `[n, c, spatial...]` tensor. Trailing odd elements are dropped.
pub fn maxpool_oracle(input: &[f64], in_shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = in_shape.len();
    assert!(rank == 3 || rank == 4);
    let (n, c) = (in_shape[0], in_shape[1]);
    match rank {
        3 => {
            let iw = in_shape[2];
            let ow = iw / 2;
            let mut out = vec![0.0; n * c * ow];
            for b in 0..n {
                for ch in 0..c {
                    for o in 0..ow {
                        let base = (b * c + ch) * iw + 2 * o;
                        out[(b * c + ch) * ow + o] = input[base].max(input[base + 1]);
                    }
                }
            }
            (out, vec![n, c, ow])
        }
        4 => {
            let (ih, iw) = (in_shape[2], in_shape[3]);
            let (oh, ow) = (ih / 2, iw / 2);
            let mut out = vec![0.0; n * c * oh * ow];
            for b in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let v = input
                                        [((b * c + ch) * ih + 2 * oy + dy) * iw + 2 * ox + dx];
                                    if v > m {
                                        m = v;
                                    }
                                }
                            }
                            out[((b * c + ch) * oh + oy) * ow + ox] = m;
                        }
                    }
                }
            }
            (out, vec![n, c, oh, ow])
        }
        _ => unreachable!(),
    }
}

/// Two-pass per-channel batch normalisation of a `[n, c, spatial...]` tensor
/// (training mode, biased variance), returning the normalised output.
pub fn batchnorm_reference(
    input: &[f64],
    shape: &[usize],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let (n, c) = (shape[0], shape[1]);
    let sp: usize = shape[2..].iter().product();
    let m = (n * sp) as f64;
    let mut out = vec![0.0; input.len()];
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            for s in 0..sp {
                mean += input[(b * c + ch) * sp + s];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..n {
            for s in 0..sp {
                let d = input[(b * c + ch) * sp + s] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        for b in 0..n {
            for s in 0..sp {
                let i = (b * c + ch) * sp + s;
                out[i] = gamma[ch] * (input[i] - mean) * inv + beta[ch];
            }
        }
    }
    out
}

/// Per-location cosine similarity between a `[c, spatial...]` exemplar and
/// every co-located patch of a `[c, spatial...]` target, computed by explicit
/// patch extraction and normalised dot products.
pub fn cosine_map_oracle(
    exemplar: &[f64],
    ex_shape: &[usize],
    target: &[f64],
    tg_shape: &[usize],
    eps: f64,
) -> (Vec<f64>, Vec<usize>) {
    assert_eq!(ex_shape.len(), tg_shape.len());
    assert_eq!(ex_shape[0], tg_shape[0], "channel mismatch");
    let c = ex_shape[0];
    let ex_sp = &ex_shape[1..];
    let tg_sp = &tg_shape[1..];
    let pos: Vec<usize> = tg_sp.iter().zip(ex_sp).map(|(t, e)| t - e + 1).collect();

    let ex_norm: f64 = exemplar.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ex_den = ex_norm.max(eps);

    let mut gather = |offsets: &[usize]| -> Vec<f64> {
        let mut patch = Vec::with_capacity(exemplar.len());
        match ex_sp.len() {
            1 => {
                for ch in 0..c {
                    for d in 0..ex_sp[0] {
                        patch.push(target[ch * tg_sp[0] + offsets[0] + d]);
                    }
                }
            }
            2 => {
                for ch in 0..c {
                    for dy in 0..ex_sp[0] {
                        for dx in 0..ex_sp[1] {
                            patch.push(
                                target[(ch * tg_sp[0] + offsets[0] + dy) * tg_sp[1]
                                    + offsets[1]
                                    + dx],
                            );
                        }
                    }
                }
            }
            _ => panic!("spatial rank must be 1 or 2"),
        }
        patch
    };

    let mut scores = Vec::new();
    match pos.len() {
        1 => {
            for p in 0..pos[0] {
                let patch = gather(&[p]);
                let dot: f64 = exemplar.iter().zip(&patch).map(|(a, b)| a * b).sum();
                let pn: f64 = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
                scores.push(dot / (ex_den * pn.max(eps)));
            }
        }
        2 => {
            for py in 0..pos[0] {
                for px in 0..pos[1] {
                    let patch = gather(&[py, px]);
                    let dot: f64 = exemplar.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    let pn: f64 = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
                    scores.push(dot / (ex_den * pn.max(eps)));
                }
            }
        }
        _ => unreachable!(),
    }
    (scores, pos)
}

/// Minimal dynamic-time-warping cost by exhaustive enumeration of every
/// monotone alignment path with steps (1,0), (0,1), (1,1). Frame distances are
/// added in path order so the result is bit-comparable with a DP that does the
/// same. Only usable for short sequences.
pub fn dtw_enumerate_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn dist(x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    }
    fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + dist(&a[i], &b[j]);
        if i == a.len() - 1 && j == b.len() - 1 {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    assert!(!a.is_empty() && !b.is_empty());
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

/// One detection as seen by the AP oracle.
#[derive(Clone, Copy, Debug)]
pub struct OracleDetection {
    pub episode_id: u64,
    pub confidence: f64,
    /// IoU against the episode's ground-truth box, or `None` for detections on
    /// negative episodes.
    pub iou_with_truth: Option<f64>,
}

/// Average precision by brute-force enumeration of every confidence cut.
///
/// Detections are ranked by descending confidence with ties broken by episode
/// id; a detection is a true positive when its episode is positive, its IoU
/// meets the threshold and that episode's truth box is unmatched. For every
/// prefix of the ranking we record (recall, precision); the envelope precision
/// at each recall step is found by scanning all prefixes, and the area is the
/// sum of `(r_i - r_{i-1}) * p_env(r_i)` in ascending recall order.
pub fn ap_oracle(
    detections: &[OracleDetection],
    num_positive_episodes: usize,
    iou_threshold: f64,
) -> f64 {
    if num_positive_episodes == 0 {
        return 0.0;
    }
    let mut ranked: Vec<OracleDetection> = detections.to_vec();
    ranked.sort_by(|x, y| {
        y.confidence
            .partial_cmp(&x.confidence)
            .unwrap()
            .then(x.episode_id.cmp(&y.episode_id))
    });

    let mut matched: Vec<u64> = Vec::new();
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision) per prefix
    let (mut tp, mut fp) = (0usize, 0usize);
    for d in &ranked {
        let is_tp = match d.iou_with_truth {
            Some(iou) => iou >= iou_threshold && !matched.contains(&d.episode_id),
            None => false,
        };
        if is_tp {
            matched.push(d.episode_id);
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / num_positive_episodes as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }

    // Distinct recall steps in ascending order.
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).filter(|r| *r > 0.0).collect();
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let mut env = 0.0;
        for &(pr, pp) in &points {
            if pr >= r && pp > env {
                env = pp;
            }
        }
        ap += (r - prev) * env;
        prev = r;
    }
    ap
}

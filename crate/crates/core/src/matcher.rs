//! Canopy image matching by two-point congruent sets.
//!
//! Contour pixels are found from 4-connectivity, corners on the contour are
//! scored with a covariance (Harris-style) response, and pairs of corners in
//! the two images with near-equal lengths seed planar rigid hypotheses. Each
//! hypothesis is scored by the fraction of canopy cells of the matched image
//! that land on canopy in the reference; the best one wins.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::config::PlotConfig;
use crate::error::{Error, Result};
use crate::raster::BinaryImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelClass {
    Background,
    /// Canopy pixel without canopy 4-neighbours.
    Outlier,
    /// Canopy pixel whose four neighbours are all canopy.
    Interior,
    Contour,
}

#[derive(Clone, Debug)]
pub struct Contours {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<PixelClass>,
}

impl Contours {
    pub fn class(&self, u: usize, v: usize) -> PixelClass {
        self.classes[v * self.width + u]
    }

    pub fn is_contour(&self, u: usize, v: usize) -> bool {
        self.class(u, v) == PixelClass::Contour
    }

    /// Contour pixels in row-major order.
    pub fn contour_pixels(&self) -> Vec<(usize, usize)> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == PixelClass::Contour)
            .map(|(k, _)| (k % self.width, k / self.width))
            .collect()
    }

    pub fn count(&self, class: PixelClass) -> usize {
        self.classes.iter().filter(|c| **c == class).count()
    }
}

/// Classifies every canopy pixel by its connectivity `C = (1/4) sum I(p0) I(pi)`.
pub fn detect_contours(img: &BinaryImage) -> Contours {
    let mut classes = vec![PixelClass::Background; img.width * img.height];
    for v in 0..img.height {
        for u in 0..img.width {
            if !img.get(u, v) {
                continue;
            }
            let (ui, vi) = (u as i64, v as i64);
            let neighbours = [(ui, vi - 1), (ui, vi + 1), (ui - 1, vi), (ui + 1, vi)]
                .iter()
                .filter(|(x, y)| img.get_or_zero(*x, *y))
                .count();
            classes[v * img.width + u] = match neighbours {
                0 => PixelClass::Outlier,
                4 => PixelClass::Interior,
                _ => PixelClass::Contour,
            };
        }
    }
    Contours {
        width: img.width,
        height: img.height,
        classes,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub u: usize,
    pub v: usize,
    pub response: f64,
}

impl Keypoint {
    pub fn pos(&self) -> (f64, f64) {
        (self.u as f64, self.v as f64)
    }

    pub fn dist(&self, other: &Keypoint) -> f64 {
        let (du, dv) = (self.u as f64 - other.u as f64, self.v as f64 - other.v as f64);
        (du * du + dv * dv).sqrt()
    }
}

/// Sample covariance `[sxx, sxy, syy]` with `1/(n-1)` normalization, or
/// `None` when fewer than two samples are given.
pub fn sample_covariance(samples: &[(f64, f64)]) -> Option<[f64; 3]> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let (mx, my) = samples
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (mx / nf, my / nf);
    let mut s = [0.0; 3];
    for (x, y) in samples {
        let (dx, dy) = (x - mx, y - my);
        s[0] += dx * dx;
        s[1] += dx * dy;
        s[2] += dy * dy;
    }
    let k = 1.0 / (nf - 1.0);
    Some([s[0] * k, s[1] * k, s[2] * k])
}

/// `K = det(S) - alpha * trace(S)^2` for a 2x2 covariance `[sxx, sxy, syy]`.
pub fn corner_response(cov: [f64; 3], alpha: f64) -> f64 {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    let trace = cov[0] + cov[2];
    det - alpha * trace * trace
}

/// Covariance response of every contour pixel (`None` where the sample set
/// has fewer than two pixels).
pub fn contour_responses(contours: &Contours, radius: f64, alpha: f64) -> Vec<(usize, usize, Option<f64>)> {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let (w, h) = (contours.width as i64, contours.height as i64);
    let mut samples = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    contours
        .contour_pixels()
        .into_iter()
        .map(|(u, v)| {
            samples.clear();
            for dv in -r..=r {
                for du in -r..=r {
                    if (du * du + dv * dv) as f64 > r2 {
                        continue;
                    }
                    let (x, y) = (u as i64 + du, v as i64 + dv);
                    if x >= 0 && y >= 0 && x < w && y < h && contours.is_contour(x as usize, y as usize) {
                        samples.push((du as f64, dv as f64));
                    }
                }
            }
            let k = sample_covariance(&samples).map(|c| corner_response(c, alpha));
            (u, v, k)
        })
        .collect()
}

/// Corner keypoints on the contour.
///
/// A contour pixel is kept when its response is positive and exceeds
/// `keypoint_relative_threshold` times the image maximum. Survivors go
/// through greedy non-maximum suppression, then the strongest
/// `max_keypoints` are returned in descending response order.
pub fn keypoints(contours: &Contours, cfg: &PlotConfig) -> Result<Vec<Keypoint>> {
    let responses = contour_responses(contours, cfg.keypoint_radius, cfg.harris_alpha);
    let max_k = responses
        .iter()
        .filter_map(|r| r.2)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max_k > 0.0) {
        return Err(Error::NoKeypoints);
    }
    let threshold = cfg.keypoint_relative_threshold * max_k;
    let mut candidates: Vec<Keypoint> = responses
        .into_iter()
        .filter_map(|(u, v, k)| {
            k.filter(|&k| k > 0.0 && k > threshold)
                .map(|response| Keypoint { u, v, response })
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.v.cmp(&b.v))
            .then(a.u.cmp(&b.u))
    });
    let nms2 = cfg.keypoint_nms_radius * cfg.keypoint_nms_radius;
    let mut kept: Vec<Keypoint> = Vec::new();
    for c in candidates {
        let suppressed = kept.iter().any(|k| {
            let (du, dv) = (k.u as f64 - c.u as f64, k.v as f64 - c.v as f64);
            du * du + dv * dv <= nms2
        });
        if !suppressed {
            kept.push(c);
            if kept.len() == cfg.max_keypoints {
                break;
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::NoKeypoints);
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoPointPair {
    pub a: Keypoint,
    pub b: Keypoint,
    pub dist: f64,
}

impl TwoPointPair {
    pub fn midpoint(&self) -> (f64, f64) {
        (
            (self.a.u as f64 + self.b.u as f64) / 2.0,
            (self.a.v as f64 + self.b.v as f64) / 2.0,
        )
    }
}

/// Keypoint pairs with `min_sep < dist <= max_sep`, strongest first, at most `cap`.
///
/// Ordering: descending `min(response)`, then descending length, then index.
pub fn build_pairs_within(
    keypoints: &[Keypoint],
    min_sep: f64,
    max_sep: f64,
    cap: usize,
) -> Result<Vec<TwoPointPair>> {
    let mut pairs: Vec<(usize, usize, TwoPointPair)> = Vec::new();
    for i in 0..keypoints.len() {
        for j in i + 1..keypoints.len() {
            let (a, b) = (keypoints[i], keypoints[j]);
            let dist = a.dist(&b);
            if dist > min_sep && dist <= max_sep {
                pairs.push((i, j, TwoPointPair { a, b, dist }));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    pairs.sort_by(|(i1, j1, p), (i2, j2, q)| {
        let sp = p.a.response.min(p.b.response);
        let sq = q.a.response.min(q.b.response);
        sq.total_cmp(&sp)
            .then(q.dist.total_cmp(&p.dist))
            .then((i1, j1).cmp(&(i2, j2)))
    });
    pairs.truncate(cap);
    Ok(pairs.into_iter().map(|(_, _, p)| p).collect())
}

/// All keypoint pairs longer than `min_sep`, strongest first, at most `cap`.
pub fn build_pairs(keypoints: &[Keypoint], min_sep: f64, cap: usize) -> Result<Vec<TwoPointPair>> {
    build_pairs_within(keypoints, min_sep, f64::INFINITY, cap)
}

/// Index pair `(reference pair, matched pair)` of congruent candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Candidate {
    pub reference: usize,
    pub matched: usize,
}

/// All cross pairs whose lengths differ by less than `mu`, ordered by
/// reference index then matched index.
pub fn find_correspondences(
    pairs_ref: &[TwoPointPair],
    pairs_matched: &[TwoPointPair],
    mu: f64,
) -> Result<Vec<Candidate>> {
    let mut by_len: Vec<(f64, usize)> = pairs_matched
        .iter()
        .enumerate()
        .map(|(i, p)| (p.dist, i))
        .collect();
    by_len.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // Slightly widened search window; the exact predicate filters afterwards.
    let slack = mu * 1e-9 + 1e-9;
    let mut out = Vec::new();
    let mut window = Vec::new();
    for (r, pr) in pairs_ref.iter().enumerate() {
        let lo = by_len.partition_point(|(d, _)| *d < pr.dist - mu - slack);
        let hi = by_len.partition_point(|(d, _)| *d <= pr.dist + mu + slack);
        window.clear();
        window.extend(
            by_len[lo..hi]
                .iter()
                .filter(|(d, _)| (pr.dist - d).abs() < mu)
                .map(|(_, m)| *m),
        );
        window.sort_unstable();
        out.extend(window.iter().map(|&m| Candidate {
            reference: r,
            matched: m,
        }));
    }
    if out.is_empty() {
        return Err(Error::NoCandidates);
    }
    Ok(out)
}

/// Which end of the matched pair corresponds to which end of the reference pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Assignment {
    /// `a -> a'`, `b -> b'`
    Direct,
    /// `a -> b'`, `b -> a'`
    Swapped,
}

fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Planar rigid transform `q = R(theta) p + t` taking the matched pair onto
/// the reference pair. The rotation aligns the pair directions; the
/// translation aligns the pair midpoints, which splits any length mismatch
/// evenly between the two ends.
pub fn hypothesis_transform(
    reference: &TwoPointPair,
    matched: &TwoPointPair,
    assignment: Assignment,
) -> (f64, [f64; 2]) {
    let (qa, qb) = match assignment {
        Assignment::Direct => (reference.a.pos(), reference.b.pos()),
        Assignment::Swapped => (reference.b.pos(), reference.a.pos()),
    };
    let (pa, pb) = (matched.a.pos(), matched.b.pos());
    let theta = wrap_angle((qb.1 - qa.1).atan2(qb.0 - qa.0) - (pb.1 - pa.1).atan2(pb.0 - pa.0));
    let (s, c) = theta.sin_cos();
    let (mq, mp) = (reference.midpoint(), matched.midpoint());
    let t = [mq.0 - (c * mp.0 - s * mp.1), mq.1 - (s * mp.0 + c * mp.1)];
    (theta, t)
}

/// Centers of the `cell x cell` blocks of the image that fall on canopy.
pub fn grid_cell_centers(img: &BinaryImage, cell: usize) -> Vec<(usize, usize)> {
    let half = cell / 2;
    let mut out = Vec::new();
    for by in (0..img.height).step_by(cell) {
        for bx in (0..img.width).step_by(cell) {
            let (u, v) = (bx + half, by + half);
            if u < img.width && v < img.height && img.get(u, v) {
                out.push((u, v));
            }
        }
    }
    out
}

#[inline]
fn nearest_pixel(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

#[inline]
fn lands_on_canopy(reference: &BinaryImage, (s, c): (f64, f64), t: [f64; 2], (u, v): (f64, f64)) -> bool {
    let qx = c * u - s * v + t[0];
    let qy = s * u + c * v + t[1];
    reference.get_or_zero(nearest_pixel(qx), nearest_pixel(qy))
}

/// Fraction of matched-image canopy cell centers that land on reference
/// canopy under `q = R(theta) p + t`, with nearest-pixel sampling.
pub fn overlap(
    theta: f64,
    t: [f64; 2],
    centers: &[(usize, usize)],
    reference: &BinaryImage,
) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::NoCanopyCells);
    }
    let sc = theta.sin_cos();
    let misses = centers
        .iter()
        .filter(|&&(u, v)| !lands_on_canopy(reference, sc, t, (u as f64, v as f64)))
        .count();
    Ok(overlap_from_misses(misses, centers.len()))
}

#[inline]
fn overlap_from_misses(misses: usize, n: usize) -> f64 {
    1.0 - misses as f64 / n as f64
}

/// Miss count, or `None` as soon as it exceeds `max_misses`.
fn bounded_misses(
    sc: (f64, f64),
    t: [f64; 2],
    centers: &[(f64, f64)],
    reference: &BinaryImage,
    max_misses: usize,
) -> Option<usize> {
    let mut misses = 0;
    for &p in centers {
        if !lands_on_canopy(reference, sc, t, p) {
            misses += 1;
            if misses > max_misses {
                return None;
            }
        }
    }
    Some(misses)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchHypothesis {
    /// Counterclockwise rotation, radians.
    pub theta: f64,
    /// Translation in reference pixels.
    pub t: [f64; 2],
    pub assignment: Assignment,
    pub overlap: f64,
}

/// One row of the candidate table.
#[derive(Clone, Copy, Debug)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub d_ref: f64,
    pub d_matched: f64,
    pub hypothesis: MatchHypothesis,
}

#[derive(Clone, Debug)]
pub struct ImageMatch {
    pub best: MatchHypothesis,
    /// Midpoint of the winning pair in matched-image pixels.
    pub corr_matched: (f64, f64),
    /// Midpoint of the winning pair in reference-image pixels.
    pub corr_reference: (f64, f64),
    pub ref_pair: TwoPointPair,
    pub matched_pair: TwoPointPair,
    pub ref_keypoints: Vec<Keypoint>,
    pub matched_keypoints: Vec<Keypoint>,
    pub candidates: usize,
    pub evaluated: usize,
}

/// Everything computed before scoring, shared by the matcher and its debug
/// tooling.
pub struct MatchSetup {
    pub ref_keypoints: Vec<Keypoint>,
    pub matched_keypoints: Vec<Keypoint>,
    pub ref_pairs: Vec<TwoPointPair>,
    pub matched_pairs: Vec<TwoPointPair>,
    /// Candidates in evaluation order (descending reference pair length).
    pub candidates: Vec<Candidate>,
    pub centers: Vec<(usize, usize)>,
    /// Every canopy pixel of the matched image.
    pub pixels: Vec<(usize, usize)>,
}

pub fn prepare_match(reference: &BinaryImage, matched: &BinaryImage, cfg: &PlotConfig) -> Result<MatchSetup> {
    let ref_keypoints = keypoints(&detect_contours(reference), cfg)?;
    let matched_keypoints = keypoints(&detect_contours(matched), cfg)?;
    let max_sep = 0.5 * matched.width as f64;
    let ref_pairs =
        build_pairs_within(&ref_keypoints, cfg.pair_min_separation, max_sep, cfg.pair_cap)?;
    let matched_pairs =
        build_pairs_within(&matched_keypoints, cfg.pair_min_separation, max_sep, cfg.pair_cap)?;
    let mut candidates = find_correspondences(&ref_pairs, &matched_pairs, cfg.congruence_tolerance)?;
    // Stable: equal lengths keep the (reference, matched) index order.
    candidates.sort_by(|a, b| ref_pairs[b.reference].dist.total_cmp(&ref_pairs[a.reference].dist));
    let centers = grid_cell_centers(matched, cfg.overlap_cell);
    if centers.is_empty() {
        return Err(Error::NoCanopyCells);
    }
    let pixels = (0..matched.height)
        .flat_map(|v| (0..matched.width).map(move |u| (u, v)))
        .filter(|&(u, v)| matched.get(u, v))
        .collect();
    Ok(MatchSetup {
        pixels,
        ref_keypoints,
        matched_keypoints,
        ref_pairs,
        matched_pairs,
        candidates,
        centers,
    })
}

const ASSIGNMENTS: [Assignment; 2] = [Assignment::Direct, Assignment::Swapped];

/// Scores every hypothesis exactly (no pruning, no early exit).
pub fn score_all(setup: &MatchSetup, reference: &BinaryImage) -> Vec<ScoredCandidate> {
    setup
        .candidates
        .par_iter()
        .flat_map_iter(|&cand| {
            let (rp, mp) = (&setup.ref_pairs[cand.reference], &setup.matched_pairs[cand.matched]);
            ASSIGNMENTS.into_iter().map(move |assignment| {
                let (theta, t) = hypothesis_transform(rp, mp, assignment);
                let o = overlap(theta, t, &setup.centers, reference).expect("centers non-empty");
                ScoredCandidate {
                    candidate: cand,
                    d_ref: rp.dist,
                    d_matched: mp.dist,
                    hypothesis: MatchHypothesis {
                        theta,
                        t,
                        assignment,
                        overlap: o,
                    },
                }
            })
        })
        .collect()
}

/// Hypotheses are scored in fixed-size chunks; results do not depend on the
/// number of worker threads.
const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug)]
struct Scored {
    /// Position in evaluation order (candidate index * 2 + assignment).
    order: usize,
    misses: usize,
    theta: f64,
    t: [f64; 2],
}

/// At most this many near-best hypotheses are re-ranked.
const RERANK_CAP: usize = 256;

/// Largest miss count whose overlap still reaches `early_exit`.
fn exit_miss_bound(n: usize, early_exit: f64) -> Option<usize> {
    (0..=n).take_while(|&m| overlap_from_misses(m, n) >= early_exit).last()
}

/// Scores hypotheses in evaluation order with branch-and-bound pruning and
/// returns those within `slack` misses of the best, sorted by
/// `(misses, order)`, plus the number of hypotheses evaluated.
fn near_best(setup: &MatchSetup, reference: &BinaryImage, cfg: &PlotConfig, slack: usize) -> (Vec<Scored>, usize) {
    use std::sync::atomic::{AtomicUsize, Ordering};

    let n = setup.centers.len();
    // Miss counts do not depend on visiting order; a scattered order makes
    // poor hypotheses hit the bound after fewer cells.
    let mut centers: Vec<(u64, (f64, f64))> = setup
        .centers
        .iter()
        .enumerate()
        .map(|(i, &(u, v))| ((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15), (u as f64, v as f64)))
        .collect();
    centers.sort_unstable_by_key(|c| c.0);
    let centers: Vec<(f64, f64)> = centers.into_iter().map(|c| c.1).collect();
    let exit_misses = exit_miss_bound(n, cfg.early_exit_overlap);
    let total = setup.candidates.len() * 2;
    let first_exit = AtomicUsize::new(usize::MAX);
    let global_best = AtomicUsize::new(usize::MAX);

    let chunk_results: Vec<(Vec<Scored>, usize)> = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * CHUNK;
            let end = (start + CHUNK).min(total);
            let mut kept: Vec<Scored> = Vec::new();
            let mut local_best = usize::MAX;
            let mut evaluated = 0;
            for order in start..end {
                if order > first_exit.load(Ordering::Relaxed) {
                    break;
                }
                let cand = setup.candidates[order / 2];
                let (rp, mp) = (&setup.ref_pairs[cand.reference], &setup.matched_pairs[cand.matched]);
                let (theta, t) = hypothesis_transform(rp, mp, ASSIGNMENTS[order % 2]);
                evaluated += 1;
                let best = local_best.min(global_best.load(Ordering::Relaxed));
                let bound = best.saturating_add(slack).min(n);
                let Some(misses) = bounded_misses(theta.sin_cos(), t, &centers, reference, bound) else {
                    continue;
                };
                if misses < local_best {
                    local_best = misses;
                    global_best.fetch_min(misses, Ordering::Relaxed);
                    kept.retain(|k| k.misses <= misses + slack);
                }
                kept.push(Scored { order, misses, theta, t });
                if exit_misses.is_some_and(|e| misses <= e) {
                    first_exit.fetch_min(order, Ordering::Relaxed);
                    break;
                }
            }
            (kept, evaluated)
        })
        .collect();

    let evaluated = chunk_results.iter().map(|r| r.1).sum();
    let mut all: Vec<Scored> = chunk_results.into_iter().flat_map(|r| r.0).collect();
    // Results past the first early exit depend on thread timing; drop them.
    if let Some(e) = exit_misses {
        if let Some(exit_order) = all.iter().filter(|s| s.misses <= e).map(|s| s.order).min() {
            all.retain(|s| s.order <= exit_order);
        }
    }
    let best = all.iter().map(|s| s.misses).min().expect("at least one hypothesis");
    all.retain(|s| s.misses <= best + slack);
    all.sort_by_key(|s| (s.misses, s.order));
    (all, evaluated)
}

/// Finds the hypothesis of maximum overlap.
///
/// Evaluation order is descending reference pair length, Direct before
/// Swapped. The first hypothesis (in that order) reaching
/// `early_exit_overlap` ends the search; otherwise the earliest maximum
/// wins. With `rerank_slack_cells > 0`, hypotheses within that many cells
/// of the winner are compared once more by the fraction of all matched
/// canopy pixels landing on reference canopy, and the highest is returned.
///
/// Returns the hypothesis, its candidate index and the number of
/// hypotheses evaluated.
pub fn best_hypothesis(setup: &MatchSetup, reference: &BinaryImage, cfg: &PlotConfig) -> (MatchHypothesis, usize, usize) {
    let n = setup.centers.len();
    let (mut near, evaluated) = near_best(setup, reference, cfg, cfg.rerank_slack_cells);
    near.truncate(RERANK_CAP);
    let chosen = if near.len() > 1 {
        let scores: Vec<usize> = near
            .par_iter()
            .map(|s| {
                let sc = s.theta.sin_cos();
                setup
                    .pixels
                    .iter()
                    .filter(|&&(u, v)| lands_on_canopy(reference, sc, s.t, (u as f64, v as f64)))
                    .count()
            })
            .collect();
        // Highest pixel score; ties keep the (misses, order) ranking.
        let mut pick = 0;
        for (i, &sc) in scores.iter().enumerate() {
            if sc > scores[pick] {
                pick = i;
            }
        }
        near[pick]
    } else {
        near[0]
    };
    (
        MatchHypothesis {
            theta: chosen.theta,
            t: chosen.t,
            assignment: ASSIGNMENTS[chosen.order % 2],
            overlap: overlap_from_misses(chosen.misses, n),
        },
        chosen.order / 2,
        evaluated,
    )
}

/// Matches `matched` onto `reference`; see the module docs.
pub fn match_images(reference: &BinaryImage, matched: &BinaryImage, cfg: &PlotConfig) -> Result<ImageMatch> {
    let setup = prepare_match(reference, matched, cfg)?;
    let (best, cand_idx, evaluated) = best_hypothesis(&setup, reference, cfg);
    if best.overlap < cfg.match_accept_overlap {
        return Err(Error::MatchRejected {
            best_overlap: best.overlap,
            threshold: cfg.match_accept_overlap,
        });
    }
    let cand = setup.candidates[cand_idx];
    let ref_pair = setup.ref_pairs[cand.reference];
    let matched_pair = setup.matched_pairs[cand.matched];
    Ok(ImageMatch {
        best,
        corr_matched: matched_pair.midpoint(),
        corr_reference: ref_pair.midpoint(),
        ref_pair,
        matched_pair,
        candidates: setup.candidates.len(),
        evaluated,
        ref_keypoints: setup.ref_keypoints,
        matched_keypoints: setup.matched_keypoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img_from(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> bool) -> BinaryImage {
        let mut img = BinaryImage::new(w, h, 0.0, 0.0, 0.1);
        for v in 0..h {
            for u in 0..w {
                img.set(u, v, f(u, v));
            }
        }
        img
    }

    fn kp(u: usize, v: usize, response: f64) -> Keypoint {
        Keypoint { u, v, response }
    }

    #[test]
    fn contour_classes() {
        let mut single = BinaryImage::new(5, 5, 0.0, 0.0, 0.1);
        single.set(2, 2, true);
        assert_eq!(detect_contours(&single).class(2, 2), PixelClass::Outlier);

        let block = img_from(9, 9, |u, v| (2..7).contains(&u) && (2..7).contains(&v));
        let c = detect_contours(&block);
        assert_eq!(c.count(PixelClass::Interior), 9);
        assert_eq!(c.count(PixelClass::Contour), 16);
        for v in 3..6 {
            for u in 3..6 {
                assert_eq!(c.class(u, v), PixelClass::Interior);
            }
        }

        let empty = BinaryImage::new(4, 4, 0.0, 0.0, 0.1);
        assert!(detect_contours(&empty).contour_pixels().is_empty());
    }

    #[test]
    fn border_pixels_are_contour() {
        let full = img_from(6, 6, |_, _| true);
        let c = detect_contours(&full);
        assert_eq!(c.count(PixelClass::Contour), 20);
        assert_eq!(c.count(PixelClass::Interior), 16);
    }

    #[test]
    fn covariance_guards_and_values() {
        assert_eq!(sample_covariance(&[(1.0, 2.0)]), None);
        let cov = sample_covariance(&[(0.0, 0.0), (2.0, 0.0), (0.0, 2.0), (2.0, 2.0)]).unwrap();
        assert_eq!(cov, [4.0 / 3.0, 0.0, 4.0 / 3.0]);
        assert!((corner_response(cov, 0.05) - (16.0 / 9.0 - 0.05 * 64.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn straight_edge_is_not_a_corner() {
        // long horizontal band; top edge is a straight contour
        let band = img_from(60, 20, |_, v| (5..15).contains(&v));
        let c = detect_contours(&band);
        let resp = contour_responses(&c, 5.0, 0.05);
        let mid = resp.iter().find(|(u, v, _)| *u == 30 && *v == 14).unwrap();
        assert!(mid.2.unwrap() <= 0.0);
    }

    #[test]
    fn l_corner_beats_mid_edge() {
        // L-shaped region: union of two rectangles
        let l = img_from(60, 60, |u, v| {
            ((10..50).contains(&u) && (10..20).contains(&v)) || ((10..20).contains(&u) && (10..50).contains(&v))
        });
        let c = detect_contours(&l);
        let resp = contour_responses(&c, 5.0, 0.05);
        let at = |u: usize, v: usize| resp.iter().find(|r| r.0 == u && r.1 == v).unwrap().2.unwrap();

        // brute-force covariance oracle at the outer corner (10, 10)
        let mut samples = Vec::new();
        for y in 5..=15i64 {
            for x in 5..=15i64 {
                let inside = (x - 10).pow(2) + (y - 10).pow(2) <= 25;
                if inside && x >= 0 && y >= 0 && c.is_contour(x as usize, y as usize) {
                    samples.push((x as f64, y as f64));
                }
            }
        }
        let oracle = corner_response(sample_covariance(&samples).unwrap(), 0.05);
        assert!((at(10, 10) - oracle).abs() < 1e-12);
        let corner = at(10, 10);
        let mid_edge = at(35, 10);
        assert!(corner > 0.0);
        assert!(corner > 5.0 * mid_edge, "{corner} vs {mid_edge}");
    }

    #[test]
    fn keypoints_on_square_are_its_corners() {
        let sq = img_from(60, 60, |u, v| (15..45).contains(&u) && (15..45).contains(&v));
        let kps = keypoints(&detect_contours(&sq), &PlotConfig::default()).unwrap();
        let mut corners: Vec<(usize, usize)> = kps.iter().take(4).map(|k| (k.u, k.v)).collect();
        corners.sort();
        assert_eq!(corners, vec![(15, 15), (15, 44), (44, 15), (44, 44)]);
        // NMS leaves no two keypoints within 3 px
        for (i, a) in kps.iter().enumerate() {
            for b in &kps[i + 1..] {
                assert!(a.dist(b) > 3.0);
            }
        }
    }

    #[test]
    fn no_keypoints_on_a_line() {
        let line = img_from(40, 5, |_, v| v == 2);
        assert!(matches!(keypoints(&detect_contours(&line), &PlotConfig::default()), Err(Error::NoKeypoints)));
    }

    #[test]
    fn keypoints_translation_invariant() {
        let shape = |du: usize, dv: usize| {
            img_from(80, 80, move |u, v| {
                let (x, y) = (u as f64 - du as f64, v as f64 - dv as f64);
                ((10.0..30.0).contains(&x) && (10.0..25.0).contains(&y))
                    || ((x - 30.0).powi(2) + (y - 30.0).powi(2) < 64.0)
            })
        };
        let cfg = PlotConfig::default();
        let a = keypoints(&detect_contours(&shape(0, 0)), &cfg).unwrap();
        let b = keypoints(&detect_contours(&shape(7, 3)), &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert_eq!((p.u + 7, p.v + 3), (q.u, q.v));
            assert_eq!(p.response, q.response);
        }
    }

    #[test]
    fn pairs_threshold_and_count() {
        let two = [kp(0, 0, 1.0), kp(10, 0, 1.0)];
        assert_eq!(build_pairs(&two, 5.0, usize::MAX).unwrap().len(), 1);
        let close = [kp(0, 0, 1.0), kp(4, 0, 1.0)];
        assert!(matches!(build_pairs(&close, 5.0, usize::MAX), Err(Error::NoPairs)));
        let exactly = [kp(0, 0, 1.0), kp(5, 0, 1.0)];
        assert!(build_pairs(&exactly, 5.0, usize::MAX).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kps: Vec<_> = (0..40)
            .map(|_| kp(rng.random_range(0..100), rng.random_range(0..100), rng.random_range(0.1..5.0)))
            .collect();
        let mut expected = 0;
        for i in 0..kps.len() {
            for j in i + 1..kps.len() {
                if kps[i].dist(&kps[j]) > 5.0 {
                    expected += 1;
                }
            }
        }
        let pairs = build_pairs(&kps, 5.0, usize::MAX).unwrap();
        assert_eq!(pairs.len(), expected);
        let capped = build_pairs(&kps, 5.0, 10).unwrap();
        assert_eq!(capped[..], pairs[..10]);
        for w in pairs.windows(2) {
            let s0 = w[0].a.response.min(w[0].b.response);
            let s1 = w[1].a.response.min(w[1].b.response);
            assert!(s0 > s1 || (s0 == s1 && w[0].dist >= w[1].dist));
        }
    }

    fn pair_of_len(d: f64) -> TwoPointPair {
        TwoPointPair {
            a: kp(0, 0, 1.0),
            b: kp(d as usize, 0, 1.0),
            dist: d,
        }
    }

    #[test]
    fn correspondence_tolerance() {
        let r = [pair_of_len(30.0)];
        assert_eq!(find_correspondences(&r, &[pair_of_len(32.0)], 5.0).unwrap().len(), 1);
        assert!(matches!(
            find_correspondences(&r, &[pair_of_len(36.0)], 5.0),
            Err(Error::NoCandidates)
        ));
        assert!(find_correspondences(&r, &[pair_of_len(25.0)], 5.0).is_err());
    }

    #[test]
    fn correspondences_equal_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mk = |rng: &mut ChaCha8Rng| -> Vec<Keypoint> {
                (0..rng.random_range(2..30))
                    .map(|_| kp(rng.random_range(0..120), rng.random_range(0..120), 1.0))
                    .collect()
            };
            let (kr, km) = (mk(&mut rng), mk(&mut rng));
            let (Ok(pr), Ok(pm)) = (build_pairs(&kr, 5.0, usize::MAX), build_pairs(&km, 5.0, usize::MAX)) else {
                continue;
            };
            let mut brute = Vec::new();
            for (i, a) in pr.iter().enumerate() {
                for (j, b) in pm.iter().enumerate() {
                    if (a.dist - b.dist).abs() < 5.0 {
                        brute.push(Candidate { reference: i, matched: j });
                    }
                }
            }
            let fast = find_correspondences(&pr, &pm, 5.0).unwrap_or_default();
            assert_eq!(fast, brute);
        }
    }

    #[test]
    fn hypothesis_named_cases() {
        let p = TwoPointPair { a: kp(10, 5, 1.0), b: kp(30, 5, 1.0), dist: 20.0 };
        let (theta, t) = hypothesis_transform(&p, &p, Assignment::Direct);
        assert_eq!(theta, 0.0);
        assert!(t[0].abs() < 1e-12 && t[1].abs() < 1e-12);

        // reference = matched rotated 90 degrees CCW about the origin
        let q = TwoPointPair { a: kp(0, 10, 1.0), b: kp(0, 30, 1.0), dist: 20.0 };
        let m = TwoPointPair { a: kp(10, 0, 1.0), b: kp(30, 0, 1.0), dist: 20.0 };
        let (theta, t) = hypothesis_transform(&q, &m, Assignment::Direct);
        assert!((theta - PI / 2.0).abs() < 1e-12);
        assert!(t[0].abs() < 1e-9 && t[1].abs() < 1e-9);

        let (swapped, ts) = hypothesis_transform(&q, &m, Assignment::Swapped);
        assert!((wrap_angle(swapped - theta).abs() - PI).abs() < 1e-12);
        // swapped maps a onto b' and b onto a'
        let (s, c) = swapped.sin_cos();
        let map = |(x, y): (f64, f64)| (c * x - s * y + ts[0], s * x + c * y + ts[1]);
        let ma = map(m.a.pos());
        assert!((ma.0 - 0.0).abs() < 1e-9 && (ma.1 - 30.0).abs() < 1e-9);
    }

    #[test]
    fn cell_centers() {
        let ones = img_from(20, 20, |_, _| true);
        assert_eq!(grid_cell_centers(&ones, 10), vec![(5, 5), (15, 5), (5, 15), (15, 15)]);
        let zeros = BinaryImage::new(20, 20, 0.0, 0.0, 0.1);
        assert!(grid_cell_centers(&zeros, 10).is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let img = img_from(rng.random_range(1..70), rng.random_range(1..70), |_, _| rng.random_bool(0.5));
            let mut brute = Vec::new();
            for bv in 0..img.height.div_ceil(10) {
                for bu in 0..img.width.div_ceil(10) {
                    let (u, v) = (bu * 10 + 5, bv * 10 + 5);
                    if u < img.width && v < img.height && img.get(u, v) {
                        brute.push((u, v));
                    }
                }
            }
            assert_eq!(grid_cell_centers(&img, 10), brute);
        }
    }

    #[test]
    fn overlap_named_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = img_from(50, 40, |_, _| rng.random_bool(0.6));
        let centers = grid_cell_centers(&img, 10);
        assert_eq!(overlap(0.0, [0.0, 0.0], &centers, &img).unwrap(), 1.0);
        assert_eq!(overlap(0.0, [1000.0, 0.0], &centers, &img).unwrap(), 0.0);
        assert!(matches!(overlap(0.0, [0.0, 0.0], &[], &img), Err(Error::NoCanopyCells)));
    }

    fn blob_image(rng: &mut ChaCha8Rng, w: usize, h: usize, blobs: usize, r: (f64, f64)) -> BinaryImage {
        let discs: Vec<(f64, f64, f64)> = (0..blobs)
            .map(|_| {
                (
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.0..h as f64),
                    rng.random_range(r.0..r.1),
                )
            })
            .collect();
        img_from(w, h, |u, v| {
            discs
                .iter()
                .any(|(x, y, r)| (u as f64 - x).powi(2) + (v as f64 - y).powi(2) < r * r)
        })
    }

    #[test]
    fn self_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = blob_image(&mut rng, 200, 160, 25, (6.0, 18.0));
        let m = match_images(&img, &img, &PlotConfig::default()).unwrap();
        assert!(m.best.theta.abs() < 1e-6, "{}", m.best.theta);
        assert!(m.best.t[0].hypot(m.best.t[1]) < 0.5);
        assert!(m.best.overlap >= 0.99);
    }

    #[test]
    fn best_hypothesis_is_argmax_of_exhaustive_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = blob_image(&mut rng, 120, 100, 12, (5.0, 14.0));
        let b = blob_image(&mut rng, 120, 100, 12, (5.0, 14.0));
        let cfg = PlotConfig {
            early_exit_overlap: 1.0,
            rerank_slack_cells: 0,
            max_keypoints: 40,
            ..PlotConfig::default()
        };
        let setup = prepare_match(&a, &b, &cfg).unwrap();
        let all = score_all(&setup, &a);
        let (best, idx, _) = best_hypothesis(&setup, &a, &cfg);
        let max = all.iter().map(|s| s.hypothesis.overlap).fold(0.0, f64::max);
        assert_eq!(best.overlap, max);
        // earliest maximum in evaluation order
        let first = all.iter().position(|s| s.hypothesis.overlap == max).unwrap();
        assert_eq!(idx, first / 2);
        assert_eq!(best.assignment, all[first].hypothesis.assignment);
    }

    #[test]
    fn rerank_picks_best_pixel_overlap_among_near_best() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = blob_image(&mut rng, 120, 100, 12, (5.0, 14.0));
        let b = blob_image(&mut rng, 120, 100, 12, (5.0, 14.0));
        let cfg = PlotConfig {
            early_exit_overlap: 1.0,
            rerank_slack_cells: 2,
            max_keypoints: 30,
            ..PlotConfig::default()
        };
        let setup = prepare_match(&a, &b, &cfg).unwrap();
        let n = setup.centers.len() as f64;
        let all = score_all(&setup, &a);
        let max = all.iter().map(|s| s.hypothesis.overlap).fold(0.0, f64::max);
        let near: Vec<_> = all.iter().filter(|s| s.hypothesis.overlap >= max - 2.0 / n - 1e-12).collect();
        assert!(near.len() <= RERANK_CAP);
        let pixel_score = |h: &MatchHypothesis| overlap(h.theta, h.t, &setup.pixels, &a).unwrap();
        let oracle = near.iter().map(|s| pixel_score(&s.hypothesis)).fold(0.0, f64::max);
        let (best, _, _) = best_hypothesis(&setup, &a, &cfg);
        assert!(best.overlap >= max - 2.0 / n - 1e-12);
        assert_eq!(pixel_score(&best), oracle);
    }
}

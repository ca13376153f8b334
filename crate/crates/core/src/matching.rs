use crate::error::{CoreError, Result};
use crate::ops::{unfold_patches, unfold_patches_backward};
use crate::tensor::Tensor;

/// Norm guard: patches with L2 norm below this are treated as unmatched
/// (similarity forced to zero, no gradient).
pub const NORM_EPS: f64 = 1e-8;

/// Dense correspondence between two patch grids: for every query patch the
/// best source patch index and its cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub index_map: Vec<usize>,
    pub confidence: Vec<f64>,
    /// (rows, cols) of the query patch grid.
    pub query_grid: (usize, usize),
    /// (rows, cols) of the source patch grid.
    pub source_grid: (usize, usize),
}

impl MatchResult {
    /// Confidence map as a (1, 1, rows, cols) tensor over the query grid.
    pub fn confidence_tensor(&self) -> Tensor {
        Tensor::new(1, 1, self.query_grid.0, self.query_grid.1, self.confidence.clone())
            .expect("confidence length matches grid")
    }

    /// Decode a source patch index into (row, col) on the source grid.
    #[inline]
    pub fn source_pos(&self, index: usize) -> (usize, usize) {
        (index / self.source_grid.1, index % self.source_grid.1)
    }
}

fn row_norms(patches: &Tensor) -> Vec<f64> {
    let (_, _, n, _) = patches.shape();
    (0..n)
        .map(|i| patches.row(0, 0, i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity between every row of `a` and every row of `b`.
/// Inputs are patch tensors of shape (1, 1, N, D); output is (1, 1, Na, Nb).
pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, _, na, da) = a.shape();
    let (_, _, nb, db) = b.shape();
    if da != db {
        return Err(CoreError::shape("cosine_similarity_matrix", format!("D={da}"), format!("D={db}")));
    }
    let an = row_norms(a);
    let bn = row_norms(b);
    let mut s = Tensor::zeros(1, 1, na, nb);
    for i in 0..na {
        let ar = a.row(0, 0, i);
        let dst = s.row_mut(0, 0, i);
        for j in 0..nb {
            dst[j] = if an[i] < NORM_EPS || bn[j] < NORM_EPS {
                0.0
            } else {
                dot(ar, b.row(0, 0, j)) / (an[i] * bn[j])
            };
        }
    }
    Ok(s)
}

/// Row-wise argmax over a similarity matrix; ties resolve to the lowest
/// index. This is the reduction step shared by all matching variants.
pub fn match_from_similarity(s: &Tensor) -> MatchResult {
    let (_, _, na, nb) = s.shape();
    let mut index_map = Vec::with_capacity(na);
    let mut confidence = Vec::with_capacity(na);
    for i in 0..na {
        let row = s.row(0, 0, i);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        index_map.push(best);
        confidence.push(best_v);
    }
    MatchResult { index_map, confidence, query_grid: (na, 1), source_grid: (nb, 1) }
}

fn feature_grids(lr_feat: &Tensor, ref_feat: &Tensor) -> Result<((usize, usize), (usize, usize))> {
    let (lb, lc, lh, lw) = lr_feat.shape();
    let (rb, rc, rh, rw) = ref_feat.shape();
    if lb != 1 || rb != 1 {
        return Err(CoreError::InvalidArgument("match_features expects batch 1".into()));
    }
    if lc != rc {
        return Err(CoreError::shape("match_features channels", format!("{lc}"), format!("{rc}")));
    }
    Ok(((lh, lw), (rh, rw)))
}

/// Exhaustive dense matching: every 3x3 query patch of `lr_feat` against
/// every 3x3 patch of `ref_feat`, cosine similarity, argmax per query.
pub fn match_features(lr_feat: &Tensor, ref_feat: &Tensor) -> Result<MatchResult> {
    let (qg, sg) = feature_grids(lr_feat, ref_feat)?;
    let q = unfold_patches(lr_feat, 3)?;
    let r = unfold_patches(ref_feat, 3)?;
    let s = cosine_similarity_matrix(&q, &r)?;
    let mut m = match_from_similarity(&s);
    m.query_grid = qg;
    m.source_grid = sg;
    Ok(m)
}

/// Reference oracle for [`match_features`]: naive nested loops, patch values
/// re-read directly from the feature maps, no shared unfold or matrix code.
pub fn brute_force_match(lr_feat: &Tensor, ref_feat: &Tensor) -> Result<MatchResult> {
    let (qg, sg) = feature_grids(lr_feat, ref_feat)?;
    let c = lr_feat.c();
    let read_patch = |t: &Tensor, y: usize, x: usize| -> Vec<f64> {
        let (_, _, h, w) = t.shape();
        let mut out = Vec::with_capacity(c * 9);
        for ci in 0..c {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    out.push(t.at(0, ci, crate::ops::reflect(y as isize + dy, h), crate::ops::reflect(x as isize + dx, w)));
                }
            }
        }
        out
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut index_map = Vec::with_capacity(qg.0 * qg.1);
    let mut confidence = Vec::with_capacity(qg.0 * qg.1);
    for qy in 0..qg.0 {
        for qx in 0..qg.1 {
            let qp = read_patch(lr_feat, qy, qx);
            let qn = norm(&qp);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            let mut j = 0usize;
            for ry in 0..sg.0 {
                for rx in 0..sg.1 {
                    let rp = read_patch(ref_feat, ry, rx);
                    let rn = norm(&rp);
                    let sim = if qn < NORM_EPS || rn < NORM_EPS {
                        0.0
                    } else {
                        dot(&qp, &rp) / (qn * rn)
                    };
                    if sim > best_v {
                        best_v = sim;
                        best = j;
                    }
                    j += 1;
                }
            }
            index_map.push(best);
            confidence.push(best_v);
        }
    }
    Ok(MatchResult { index_map, confidence, query_grid: qg, source_grid: sg })
}

/// Peak-memory statistics for [`tiled_match_with_stats`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiledStats {
    /// Largest similarity buffer held live at any point, in bytes.
    pub peak_similarity_bytes: usize,
}

/// Block-partitioned matching: the query grid is processed in `tile` x
/// `tile` blocks and each block only searches the corresponding source
/// region expanded by `margin` grid positions. Returned indices are global.
/// A margin covering the whole source extent makes this identical to
/// [`match_features`].
pub fn tiled_match(lr_feat: &Tensor, ref_feat: &Tensor, tile: usize, margin: usize) -> Result<MatchResult> {
    tiled_match_with_stats(lr_feat, ref_feat, tile, margin).map(|(m, _)| m)
}

pub fn tiled_match_with_stats(
    lr_feat: &Tensor,
    ref_feat: &Tensor,
    tile: usize,
    margin: usize,
) -> Result<(MatchResult, TiledStats)> {
    if tile == 0 {
        return Err(CoreError::InvalidArgument("tile must be positive".into()));
    }
    let (qg, sg) = feature_grids(lr_feat, ref_feat)?;
    let q = unfold_patches(lr_feat, 3)?;
    let r = unfold_patches(ref_feat, 3)?;
    let qn = row_norms(&q);
    let rn = row_norms(&r);
    let d = q.shape().3;

    let mut index_map = vec![0usize; qg.0 * qg.1];
    let mut confidence = vec![0.0f64; qg.0 * qg.1];
    let mut peak = 0usize;

    let scale_y = sg.0 as f64 / qg.0 as f64;
    let scale_x = sg.1 as f64 / qg.1 as f64;
    let region = |start: usize, len: usize, scale: f64, n: usize| -> (usize, usize) {
        let lo = (start as f64 * scale).floor() as isize - margin as isize;
        let hi = ((start + len) as f64 * scale).ceil() as isize + margin as isize;
        (lo.max(0) as usize, (hi.min(n as isize)) as usize)
    };

    let mut by = 0;
    while by < qg.0 {
        let bh = tile.min(qg.0 - by);
        let (ry0, ry1) = region(by, bh, scale_y, sg.0);
        let mut bx = 0;
        while bx < qg.1 {
            let bw = tile.min(qg.1 - bx);
            let (rx0, rx1) = region(bx, bw, scale_x, sg.1);
            let region_n = (ry1 - ry0) * (rx1 - rx0);
            let block_n = bh * bw;
            let mut sims = vec![f64::NEG_INFINITY; block_n * region_n];
            peak = peak.max(sims.len() * std::mem::size_of::<f64>());
            for iy in 0..bh {
                for ix in 0..bw {
                    let qi = (by + iy) * qg.1 + (bx + ix);
                    let qrow = &q.data()[qi * d..(qi + 1) * d];
                    let srow = &mut sims[(iy * bw + ix) * region_n..(iy * bw + ix + 1) * region_n];
                    let mut k = 0;
                    for ry in ry0..ry1 {
                        for rx in rx0..rx1 {
                            let rj = ry * sg.1 + rx;
                            srow[k] = if qn[qi] < NORM_EPS || rn[rj] < NORM_EPS {
                                0.0
                            } else {
                                dot(qrow, &r.data()[rj * d..(rj + 1) * d]) / (qn[qi] * rn[rj])
                            };
                            k += 1;
                        }
                    }
                    let mut best_local = 0usize;
                    let mut best_v = f64::NEG_INFINITY;
                    for (k, &v) in srow.iter().enumerate() {
                        if v > best_v {
                            best_v = v;
                            best_local = k;
                        }
                    }
                    let (ly, lx) = (best_local / (rx1 - rx0), best_local % (rx1 - rx0));
                    index_map[qi] = (ry0 + ly) * sg.1 + (rx0 + lx);
                    confidence[qi] = best_v;
                }
            }
            bx += tile;
        }
        by += tile;
    }

    Ok((
        MatchResult { index_map, confidence, query_grid: qg, source_grid: sg },
        TiledStats { peak_similarity_bytes: peak },
    ))
}

/// Backward pass for the confidence values of [`match_features`]: the
/// gradient of each selected pair's cosine similarity flows to both feature
/// maps; the argmax indices are treated as constant.
pub fn match_features_backward(
    lr_feat: &Tensor,
    ref_feat: &Tensor,
    m: &MatchResult,
    d_conf: &[f64],
) -> Result<(Tensor, Tensor)> {
    let (qg, _) = feature_grids(lr_feat, ref_feat)?;
    if d_conf.len() != qg.0 * qg.1 {
        return Err(CoreError::shape(
            "match_features_backward d_conf",
            format!("{}", qg.0 * qg.1),
            format!("{}", d_conf.len()),
        ));
    }
    let q = unfold_patches(lr_feat, 3)?;
    let r = unfold_patches(ref_feat, 3)?;
    let d = q.shape().3;
    let qn = row_norms(&q);
    let rn = row_norms(&r);
    let mut dq = Tensor::zeros(1, 1, q.shape().2, d);
    let mut dr = Tensor::zeros(1, 1, r.shape().2, d);
    for (i, (&j, &g)) in m.index_map.iter().zip(d_conf).enumerate() {
        if g == 0.0 || qn[i] < NORM_EPS || rn[j] < NORM_EPS {
            continue;
        }
        let qrow = q.row(0, 0, i);
        let rrow = r.row(0, 0, j);
        let inv = 1.0 / (qn[i] * rn[j]);
        let cos = dot(qrow, rrow) * inv;
        {
            let dst = dq.row_mut(0, 0, i);
            for k in 0..d {
                dst[k] += g * (rrow[k] * inv - cos * qrow[k] / (qn[i] * qn[i]));
            }
        }
        {
            let dst = dr.row_mut(0, 0, j);
            for k in 0..d {
                dst[k] += g * (qrow[k] * inv - cos * rrow[k] / (rn[j] * rn[j]));
            }
        }
    }
    let (_, c, lh, lw) = lr_feat.shape();
    let (_, _, rh, rw) = ref_feat.shape();
    let d_lr = unfold_patches_backward(&dq, c, lh, lw, 3)?;
    let d_ref = unfold_patches_backward(&dr, c, rh, rw, 3)?;
    Ok((d_lr, d_ref))
}

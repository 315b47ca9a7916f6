//! SE(3)-invariant atom encoder via frame averaging.
//!
//! Frames come from the eigenvectors of the centered coordinate covariance of
//! all atoms jointly (protein + ligand), eigenvalues descending. Only the 4
//! rotation frames are used (sign flips of axes 1 and 2, axis 3 by the
//! right-hand rule), so the representation is SE(3)- but not reflection-
//! invariant. Eigenvectors are extracted by power iteration with deflation,
//! built entirely from recorded ops: coordinate gradients flow through the
//! frame construction, and second-order passes stay valid.

use crate::autodiff::{concat, AutodiffError, Result, Tensor};

/// Fixed iteration count keeps the graph shape (and determinism) independent
/// of convergence monitoring.
const POWER_ITERS: usize = 60;

/// Squarings applied to the (trace-normalized) covariance before iterating;
/// amplifies eigenvalue gaps so near-degenerate spectra still converge.
const POWER_SQUARINGS: usize = 3;

/// Relative eigenvalue threshold below which the covariance is treated as
/// rank deficient and the fallback frame applies.
const DEGENERACY_EPS: f64 = 1e-9;

pub const RBF_COUNT: usize = 8;
const RBF_MAX_CENTER: f64 = 10.0;

/// Plain-data view of the frames, for inspection and tests.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub centroid: [f64; 3],
    /// Row-major 3x3 rotation matrices, det +1, orthonormal columns.
    pub rotations: [[f64; 9]; 4],
    /// True when the covariance was rank deficient and the deterministic
    /// fallback frame was substituted.
    pub degenerate: bool,
}

impl FrameSet {
    pub fn determinant(&self, k: usize) -> f64 {
        let m = &self.rotations[k];
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn orthonormality_error(&self, k: usize) -> f64 {
        let m = &self.rotations[k];
        let mut max = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                // (R^T R)_{ij}
                let mut s = 0.0;
                for r in 0..3 {
                    s += m[r * 3 + i] * m[r * 3 + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                max = max.max((s - target).abs());
            }
        }
        max
    }
}

/// Tracked frame tensors used inside a forward pass.
pub struct Frames {
    pub centroid: Tensor,   // [1,3]
    pub centered: Tensor,   // [n,3]
    pub rotations: Vec<Tensor>, // 4 x [3,3]
    pub degenerate: bool,
}

fn power_iterate(cov: &Tensor, seed: &Tensor) -> Result<Tensor> {
    let mut v = seed.clone();
    for _ in 0..POWER_ITERS {
        let w = cov.matmul(&v)?;
        let norm = w.square()?.sum()?.sqrt()?;
        v = w.div(&norm)?;
    }
    Ok(v)
}

/// Seed vectors must transform covariantly with the coordinates, otherwise
/// the truncated iteration breaks exact rotation invariance. The skew moment
/// sum_i ||xc_i||^2 xc_i is covariant and permutation invariant; it only
/// vanishes for centro-symmetric clouds, where a fixed seed takes over.
fn covariant_seed(centered: &Tensor, fallback: [f64; 3]) -> Result<Tensor> {
    let ones3 = Tensor::ones(&[3, 1]);
    let norms2 = centered.square()?.matmul(&ones3)?; // [n,1]
    let raw = centered.transpose()?.matmul(&norms2)?; // [3,1]
    let scale: f64 = centered.data().iter().map(|v| v * v).sum::<f64>();
    let norm = raw.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-9 * scale.max(1e-12) {
        return Ok(Tensor::constant(&[3, 1], fallback.to_vec()));
    }
    let n = raw.square()?.sum()?.sqrt()?;
    Ok(raw.div(&n)?)
}

/// Flips `v` so its largest-magnitude component is positive. The sign is a
/// locally constant function of the input, so treating it as a constant
/// leaves gradients exact.
fn sign_fix(v: Tensor) -> Result<Tensor> {
    let mut best = 0usize;
    for (i, val) in v.data().iter().enumerate() {
        if val.abs() > v.data()[best].abs() {
            best = i;
        }
    }
    if v.data()[best] < 0.0 {
        Ok(v.neg()?)
    } else {
        Ok(v)
    }
}

fn cross(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let c = |t: &Tensor, i: usize| t.gather(&[i], &[1, 1]);
    let (u0, u1, u2) = (c(u, 0)?, c(u, 1)?, c(u, 2)?);
    let (v0, v1, v2) = (c(v, 0)?, c(v, 1)?, c(v, 2)?);
    let x = u1.mul(&v2)?.sub(&u2.mul(&v1)?)?;
    let y = u2.mul(&v0)?.sub(&u0.mul(&v2)?)?;
    let z = u0.mul(&v1)?.sub(&u1.mul(&v0)?)?;
    Ok(concat(&[&x, &y, &z], 0)?)
}

/// Plain Jacobi eigensolver for a symmetric 3x3 matrix; eigenvalues
/// descending, eigenvectors as matrix columns. Used only for degeneracy
/// detection and the rank-deficient fallback.
fn jacobi_eig3(m: &[f64]) -> ([f64; 3], [f64; 9]) {
    let mut a = [
        [m[0], m[1], m[2]],
        [m[3], m[4], m[5]],
        [m[6], m[7], m[8]],
    ];
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..50 {
        // largest off-diagonal element
        let (mut p, mut q, mut max) = (0, 1, 0.0f64);
        for i in 0..3 {
            for j in (i + 1)..3 {
                if a[i][j].abs() > max {
                    max = a[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if max < 1e-15 {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        let (app, aqq, apq) = (a[p][p], a[q][q], a[p][q]);
        a[p][p] = app - t * apq;
        a[q][q] = aqq + t * apq;
        a[p][q] = 0.0;
        a[q][p] = 0.0;
        for i in 0..3 {
            if i != p && i != q {
                let (aip, aiq) = (a[i][p], a[i][q]);
                a[i][p] = c * aip - s * aiq;
                a[p][i] = a[i][p];
                a[i][q] = s * aip + c * aiq;
                a[q][i] = a[i][q];
            }
        }
        for i in 0..3 {
            let (vip, viq) = (v[i][p], v[i][q]);
            v[i][p] = c * vip - s * viq;
            v[i][q] = s * vip + c * viq;
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let vals = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let mut vecs = [0.0; 9];
    for (col, &oi) in order.iter().enumerate() {
        for row in 0..3 {
            vecs[row * 3 + col] = v[row][oi];
        }
    }
    (vals, vecs)
}

fn normalize3(v: &mut [f64; 3]) -> f64 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Deterministic orthonormal completion for rank-deficient covariances:
/// keep the well-defined eigenvectors, complete with canonical axes via
/// Gram-Schmidt, sign-fix each axis.
fn fallback_axes(vals: [f64; 3], vecs: [f64; 9]) -> [[f64; 3]; 3] {
    let scale = vals[0].max(1e-12);
    let mut axes: Vec<[f64; 3]> = Vec::new();
    for col in 0..3 {
        if vals[col] > DEGENERACY_EPS * scale {
            axes.push([vecs[col], vecs[3 + col], vecs[6 + col]]);
        }
    }
    let canonical = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut ci = 0;
    while axes.len() < 3 && ci < 3 {
        let mut cand = canonical[ci];
        for ax in &axes {
            let dot = cand[0] * ax[0] + cand[1] * ax[1] + cand[2] * ax[2];
            for k in 0..3 {
                cand[k] -= dot * ax[k];
            }
        }
        if normalize3(&mut cand) > 1e-6 {
            axes.push(cand);
        }
        ci += 1;
    }
    let mut out = [[0.0; 3]; 3];
    for (i, mut ax) in axes.into_iter().enumerate().take(3) {
        let mut best = 0;
        for k in 1..3 {
            if ax[k].abs() > ax[best].abs() {
                best = k;
            }
        }
        if ax[best] < 0.0 {
            for x in ax.iter_mut() {
                *x = -*x;
            }
        }
        out[i] = ax;
    }
    out
}

/// Builds the centroid, centered coordinates, and the 4 rotation frames from
/// tracked coordinates. All frames have det +1.
pub fn build_frames_t(x: &Tensor) -> Result<Frames> {
    let n = x.shape()[0];
    let ones_row = Tensor::constant(&[1, n], vec![1.0 / n as f64; n]);
    let ones_col = Tensor::constant(&[n, 1], vec![1.0; n]);
    let centroid = ones_row.matmul(x)?; // [1,3]
    let centered = x.sub(&ones_col.matmul(&centroid)?)?; // [n,3]
    let cov = centered.transpose()?.matmul(&centered)?; // [3,3]

    let (vals, vecs) = jacobi_eig3(cov.data());
    let scale = vals[0].max(1e-12);
    let degenerate = vals[2] <= DEGENERACY_EPS * scale || vals[0] <= 1e-12;

    let (v1, v2) = if degenerate {
        let axes = fallback_axes(vals, vecs);
        (
            Tensor::constant(&[3, 1], axes[0].to_vec()),
            Tensor::constant(&[3, 1], axes[1].to_vec()),
        )
    } else {
        // trace-normalize and square the covariance to sharpen eigengaps;
        // eigenvectors are unchanged
        let trace = cov.gather(&[0, 4, 8], &[3, 1])?.sum()?;
        let mut m = cov.div(&trace)?;
        for _ in 0..POWER_SQUARINGS {
            m = m.matmul(&m)?;
        }
        let seed1 = covariant_seed(&centered, [1.0, 0.75, 0.5])?;
        let v1 = sign_fix(power_iterate(&m, &seed1)?)?;
        // deflate and find the second eigenvector
        let lam1 = v1.transpose()?.matmul(&m)?.matmul(&v1)?; // [1,1]
        let m2 = m.sub(&v1.matmul(&v1.transpose()?)?.mul(&lam1)?)?;
        let seed2 = cross(&v1, &seed1)?;
        let seed2 = {
            let norm = seed2.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-9 {
                Tensor::constant(&[3, 1], vec![0.4, -1.0, 0.8])
            } else {
                let n = seed2.square()?.sum()?.sqrt()?;
                seed2.div(&n)?
            }
        };
        let raw2 = power_iterate(&m2, &seed2)?;
        // re-orthogonalize against v1 and renormalize
        let proj = v1.transpose()?.matmul(&raw2)?;
        let ortho = raw2.sub(&v1.mul(&proj)?)?;
        let norm = ortho.square()?.sum()?.sqrt()?;
        let v2 = sign_fix(ortho.div(&norm)?)?;
        (v1, v2)
    };

    let mut rotations = Vec::with_capacity(4);
    for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let a1 = if s1 > 0.0 { v1.clone() } else { v1.neg()? };
        let a2 = if s2 > 0.0 { v2.clone() } else { v2.neg()? };
        let a3 = cross(&a1, &a2)?;
        rotations.push(concat(&[&a1, &a2, &a3], 1)?);
    }

    Ok(Frames {
        centroid,
        centered,
        rotations,
        degenerate,
    })
}

/// Plain-data frame construction (eager; no tape required).
pub fn build_frames(coords: &[f64], n: usize) -> Result<FrameSet> {
    let x = Tensor::constant(&[n, 3], coords.to_vec());
    let frames = build_frames_t(&x)?;
    let mut rotations = [[0.0; 9]; 4];
    for (k, r) in frames.rotations.iter().enumerate() {
        rotations[k].copy_from_slice(r.data());
    }
    Ok(FrameSet {
        centroid: [
            frames.centroid.data()[0],
            frames.centroid.data()[1],
            frames.centroid.data()[2],
        ],
        rotations,
        degenerate: frames.degenerate,
    })
}

// ---------------------------------------------------------------------------
// geometry helpers shared with the energy head
// ---------------------------------------------------------------------------

/// Directed atom pairs (src, dst), src != dst, within `cutoff`.
pub fn edges_within(coords: &[f64], n: usize, cutoff: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if pair_distance(coords, i, j) < cutoff {
                edges.push((i, j));
            }
        }
    }
    edges
}

pub fn pair_distance(coords: &[f64], i: usize, j: usize) -> f64 {
    let mut d2 = 0.0;
    for k in 0..3 {
        let d = coords[i * 3 + k] - coords[j * 3 + k];
        d2 += d * d;
    }
    d2.sqrt()
}

/// Tracked pairwise distances for a list of (i, j) pairs: [m,1].
pub fn pair_distances_t(x: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let (src, dst): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let xi = x.gather_rows(&src)?;
    let xj = x.gather_rows(&dst)?;
    let diff = xi.sub(&xj)?;
    let ones3 = Tensor::ones(&[3, 1]);
    let d2 = diff.square()?.matmul(&ones3)?; // row sums -> [m,1]
    Ok(d2.sqrt()?)
}

/// Radial basis expansion of distances: 8 Gaussians, centers spread over
/// [0, 10], width 1. Input [m,1] -> output [m,8].
pub fn rbf_t(d: &Tensor) -> Result<Tensor> {
    let mut cols = Vec::with_capacity(RBF_COUNT);
    let neg_half = Tensor::scalar(-0.5);
    for k in 0..RBF_COUNT {
        let center = RBF_MAX_CENTER * k as f64 / (RBF_COUNT - 1) as f64;
        let col = d
            .sub(&Tensor::scalar(center))?
            .square()?
            .mul(&neg_half)?
            .exp()?;
        cols.push(col);
    }
    let refs: Vec<&Tensor> = cols.iter().collect();
    Ok(concat(&refs, 1)?)
}

/// Fraction of the cutoff where the taper band starts.
pub const TAPER_START: f64 = 0.9;

/// Smooth cutoff envelope s(d): 1 below 0.9*cutoff, a C1 smoothstep ramp
/// down to 0 at the cutoff. Input is the tracked distance column [m,1];
/// all rows are assumed < cutoff. Keeps gradients continuous as atoms
/// cross the cutoff.
pub fn taper_t(d: &Tensor, cutoff: f64) -> Result<Tensor> {
    let start = TAPER_START * cutoff;
    let width = cutoff - start;
    let m = d.shape()[0];
    let mut inner_mask = vec![0.0; m];
    let mut band_rows = Vec::new();
    for (i, &v) in d.data().iter().enumerate() {
        if v <= start {
            inner_mask[i] = 1.0;
        } else {
            band_rows.push(i);
        }
    }
    let mut s = Tensor::constant(&[m, 1], inner_mask);
    if !band_rows.is_empty() {
        let db = d.gather_rows(&band_rows)?;
        let t = db
            .sub(&Tensor::scalar(start))?
            .mul(&Tensor::scalar(1.0 / width))?;
        // 1 - (3t^2 - 2t^3): value 1, slope 0 at t=0; value 0, slope 0 at t=1
        let t2 = t.square()?;
        let poly = t2
            .mul(&Tensor::scalar(3.0))?
            .sub(&t2.mul(&t)?.mul(&Tensor::scalar(2.0))?)?;
        let sb = Tensor::ones(poly.shape()).sub(&poly)?;
        s = s.add(&sb.scatter_add_rows(&band_rows, m)?)?;
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// encoder network
// ---------------------------------------------------------------------------

/// Per-forward-pass tensors for the encoder parameters.
pub struct BoundEncoder {
    pub hidden: usize,
    pub cutoff: f64,
    pub embed_w: Tensor,           // [FEATURE_DIM+3, h]
    pub embed_b: Tensor,           // [1, h]
    pub layers: Vec<BoundLayer>,
}

pub struct BoundLayer {
    pub msg_w: Tensor, // [2h+RBF_COUNT, h]
    pub msg_b: Tensor, // [1, h]
    pub upd_w: Tensor, // [2h, h]
    pub upd_b: Tensor, // [1, h]
}

/// Frame-averaged message-passing encoder: per-atom embeddings [n, h].
///
/// Per frame, node inputs are the atom features concatenated with the
/// frame-projected centered coordinates; messages run over atom pairs within
/// the cutoff with RBF distance features; the four frame outputs are
/// averaged.
pub fn encode(a: &Tensor, x: &Tensor, p: &BoundEncoder) -> Result<Tensor> {
    let n = x.shape()[0];
    let h = p.hidden;
    let edges = edges_within(x.data(), n, p.cutoff);
    let (rbf, taper, src, dst) = if edges.is_empty() {
        (None, None, vec![], vec![])
    } else {
        let d = pair_distances_t(x, &edges)?;
        let (src, dst): (Vec<usize>, Vec<usize>) = edges.iter().copied().unzip();
        let s = taper_t(&d, p.cutoff)?.matmul(&Tensor::ones(&[1, h]))?; // [m,h]
        (Some(rbf_t(&d)?), Some(s), src, dst)
    };

    let frames = build_frames_t(x)?;
    let ones_col = Tensor::ones(&[n, 1]);
    let mut acc: Option<Tensor> = None;
    for rot in &frames.rotations {
        let y = frames.centered.matmul(rot)?; // [n,3]
        let input = concat(&[a, &y], 1)?;
        let mut hid = input
            .matmul(&p.embed_w)?
            .add(&ones_col.matmul(&p.embed_b)?)?
            .tanh()?;
        for layer in &p.layers {
            let agg = match &rbf {
                Some(rbf) => {
                    let hs = hid.gather_rows(&src)?;
                    let hd = hid.gather_rows(&dst)?;
                    let m = edges.len();
                    let ones_m = Tensor::ones(&[m, 1]);
                    let feats = concat(&[&hs, &hd, rbf], 1)?;
                    let msg = feats
                        .matmul(&layer.msg_w)?
                        .add(&ones_m.matmul(&layer.msg_b)?)?
                        .tanh()?
                        .mul(taper.as_ref().expect("taper with edges"))?;
                    msg.scatter_add_rows(&dst, n)?
                }
                None => Tensor::zeros(&[n, h]),
            };
            hid = concat(&[&hid, &agg], 1)?
                .matmul(&layer.upd_w)?
                .add(&ones_col.matmul(&layer.upd_b)?)?
                .tanh()?;
        }
        acc = Some(match acc {
            Some(prev) => prev.add(&hid)?,
            None => hid,
        });
    }
    let out = acc
        .expect("four frames")
        .mul(&Tensor::scalar(0.25))?;
    if !out.data().iter().all(|v| v.is_finite()) {
        return Err(AutodiffError::NonFinite("encode"));
    }
    Ok(out)
}

//! Synthetic protein-ligand benchmark. An analytic Morse-like oracle plays
//! the role of the true binding energy; generated complexes sit at its local
//! minima (crystal-like poses) and labels are drawn under a controllable
//! distribution (Boltzmann-like vs a two-component Gaussian mixture).

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Complex, Element, Manifest, ManifestEntry, Split};
use crate::encoder::TAPER_START;
use crate::{Error, Result};

/// Analytic pairwise interaction: eps_t * [(1 - exp(-a (d - r0)))^2 - 1]
/// summed over ligand x protein pairs within the cutoff, times a smooth
/// taper. The per-pair minimum is -eps_t at d = r0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OraclePotential {
    pub a: f64,
    pub r0: f64,
    pub cutoff: f64,
    /// Well depth per ligand type (keyed by ligand_key), all > 0.
    pub well_depths: BTreeMap<String, f64>,
}

impl Default for OraclePotential {
    fn default() -> Self {
        OraclePotential {
            a: 1.5,
            r0: 3.0,
            cutoff: 10.0,
            well_depths: BTreeMap::new(),
        }
    }
}

/// Smoothstep taper and its first two derivatives: 1 on [0, 0.9c], ramps to
/// 0 at c.
fn taper2(d: f64, cutoff: f64) -> (f64, f64, f64) {
    let start = TAPER_START * cutoff;
    if d <= start {
        (1.0, 0.0, 0.0)
    } else if d >= cutoff {
        (0.0, 0.0, 0.0)
    } else {
        let w = cutoff - start;
        let t = (d - start) / w;
        (
            1.0 - (3.0 * t * t - 2.0 * t * t * t),
            -(6.0 * t - 6.0 * t * t) / w,
            -(6.0 - 12.0 * t) / (w * w),
        )
    }
}

impl OraclePotential {
    pub fn depth(&self, ligand_key: &str) -> Result<f64> {
        self.well_depths
            .get(ligand_key)
            .copied()
            .ok_or_else(|| Error::Data(format!("no oracle well depth for ligand type {ligand_key}")))
    }

    /// Morse-like pair term and its first two derivatives in d, before the
    /// well depth.
    fn pair_term2(&self, d: f64) -> (f64, f64, f64) {
        let u = (-self.a * (d - self.r0)).exp();
        let f = (1.0 - u) * (1.0 - u) - 1.0;
        let df = 2.0 * (1.0 - u) * self.a * u;
        let ddf = 2.0 * self.a * self.a * u * (2.0 * u - 1.0);
        let (s, ds, dds) = taper2(d, self.cutoff);
        (f * s, df * s + f * ds, ddf * s + 2.0 * df * ds + f * dds)
    }

    fn pair_term(&self, d: f64) -> (f64, f64) {
        let (h, dh, _) = self.pair_term2(d);
        (h, dh)
    }

    pub fn energy(&self, c: &Complex) -> Result<f64> {
        let eps = self.depth(&c.ligand_key)?;
        let mut e = 0.0;
        for &i in &c.ligand_indices() {
            for j in 0..c.n_atoms() {
                if c.is_ligand[j] {
                    continue;
                }
                let d = dist(&c.coords[i], &c.coords[j]);
                if d < self.cutoff {
                    e += eps * self.pair_term(d).0;
                }
            }
        }
        Ok(e)
    }

    /// Closed-form gradient with respect to the ligand coordinates,
    /// row-major n_lig x 3, independent of the autodiff module.
    pub fn grad_ligand(&self, c: &Complex) -> Result<Vec<f64>> {
        let eps = self.depth(&c.ligand_key)?;
        let lig = c.ligand_indices();
        let mut g = vec![0.0; lig.len() * 3];
        for (row, &i) in lig.iter().enumerate() {
            for j in 0..c.n_atoms() {
                if c.is_ligand[j] {
                    continue;
                }
                let d = dist(&c.coords[i], &c.coords[j]);
                if d < self.cutoff && d > 0.0 {
                    let (_, dterm) = self.pair_term(d);
                    for k in 0..3 {
                        g[row * 3 + k] += eps * dterm * (c.coords[i][k] - c.coords[j][k]) / d;
                    }
                }
            }
        }
        Ok(g)
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDistribution {
    /// Exponentially distributed well depths: labels look Boltzmann-drawn.
    Boltzmann,
    /// Two-component mixture of well depths: labels depart from the
    /// exponential shape the Boltzmann assumption would imply.
    GaussianMixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_complexes: usize,
    /// Inclusive range of protein atoms per pocket.
    pub protein_atoms: [usize; 2],
    /// Inclusive range of ligand atoms.
    pub ligand_atoms: [usize; 2],
    /// Number of distinct ligand types (ligand_key values).
    pub n_ligand_types: usize,
    pub label_distribution: LabelDistribution,
    pub label_noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_complexes: 200,
            protein_atoms: [8, 20],
            ligand_atoms: [4, 10],
            n_ligand_types: 40,
            label_distribution: LabelDistribution::GaussianMixture,
            label_noise_std: 0.1,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_complexes == 0 || self.n_ligand_types == 0 {
            return Err(Error::Config("n_complexes and n_ligand_types must be positive".into()));
        }
        for (name, [lo, hi]) in [("protein_atoms", self.protein_atoms), ("ligand_atoms", self.ligand_atoms)] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if !(self.label_noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "label_noise_std must be >= 0, got {}",
                self.label_noise_std
            )));
        }
        Ok(())
    }
}

/// Contribution of each element to a ligand type's well depth. The depth is
/// the sum over the ligand's atoms, so it is readable from the structure;
/// a trained model can generalize to unseen ligand types.
pub fn element_depth_weight(e: Element) -> f64 {
    match e {
        Element::C => 0.3,
        Element::N => 0.75,
        Element::O => 1.2,
        Element::S => 1.65,
        Element::Other => 2.1,
    }
}

/// A ligand type fixes its atom count, element composition, and (derived)
/// well depth.
#[derive(Debug, Clone)]
pub struct LigandType {
    pub key: String,
    pub elements: Vec<Element>,
    pub depth: f64,
}

const ALL_ELEMENTS: [Element; 5] = [Element::C, Element::N, Element::O, Element::S, Element::Other];

/// Greedy composition whose weight sum approximates `target`: each slot
/// picks the element closest to the remaining per-slot budget.
fn compose_elements(n: usize, target: f64) -> Vec<Element> {
    let mut left = target;
    let mut out = Vec::with_capacity(n);
    for slot in 0..n {
        let ideal = left / (n - slot) as f64;
        let e = ALL_ELEMENTS
            .into_iter()
            .min_by(|a, b| {
                let da = (element_depth_weight(*a) - ideal).abs();
                let db = (element_depth_weight(*b) - ideal).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        out.push(e);
        left -= element_depth_weight(e);
    }
    out
}

/// Draws the ligand types: per-type atom count, a depth target under the
/// configured distribution, and a composition realizing it.
fn draw_ligand_types(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<LigandType> {
    let w_min = element_depth_weight(Element::C);
    let w_max = element_depth_weight(Element::Other);
    (0..cfg.n_ligand_types)
        .map(|t| {
            let n = rng.gen_range(cfg.ligand_atoms[0]..=cfg.ligand_atoms[1]);
            let (lo, hi) = (n as f64 * w_min, n as f64 * w_max);
            let target = match cfg.label_distribution {
                LabelDistribution::Boltzmann => lo + Exp::new(1.0 / (0.25 * (hi - lo))).unwrap().sample(rng),
                LabelDistribution::GaussianMixture => {
                    let span = hi - lo;
                    let (mean, std) = if rng.gen_bool(0.5) {
                        (lo + 0.18 * span, 0.035 * span)
                    } else {
                        (lo + 0.62 * span, 0.05 * span)
                    };
                    Normal::new(mean, std).unwrap().sample(rng)
                }
            }
            .clamp(lo, hi);
            let elements = compose_elements(n, target);
            // element weights sit on a 0.15 grid; dither by half a cell so
            // the depth distribution is continuous (the residual is a small
            // irreducible label component, like real assay noise)
            let quantized: f64 = elements.iter().map(|&e| element_depth_weight(e)).sum();
            let depth = (quantized + rng.gen_range(-0.075..0.075)).max(0.05);
            LigandType {
                key: format!("lig{t:03}"),
                elements,
                depth,
            }
        })
        .collect()
}

const RELAX_MAX_STEPS: usize = 2000;
const RELAX_TOL: f64 = 1e-4;
const GEN_RETRIES: usize = 8;
/// Newton step cap during relaxation (keeps atoms in their starting basin).
const TRUST_RADIUS: f64 = 0.5;
/// Minimum distance between protein atoms. At 8.0 apart the Morse wells stay
/// effectively isolated (bridge sites between two shells are shallower than
/// the shells themselves), so each ligand atom contributes close to -eps and
/// the label tracks the well depth with little geometric jitter.
const PROTEIN_MIN_SEP: f64 = 8.0;

fn grad_inf_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Per-ligand-atom energy, gradient (3-vector) and Hessian (3x3 row-major)
/// over the protein atoms. Ligand atoms do not interact with each other, so
/// each relaxes independently.
fn atom_derivatives(c: &Complex, pot: &OraclePotential, eps: f64, i: usize) -> (f64, [f64; 3], [f64; 9]) {
    let mut e = 0.0;
    let mut g = [0.0; 3];
    let mut hess = [0.0; 9];
    for j in 0..c.n_atoms() {
        if c.is_ligand[j] {
            continue;
        }
        let d = dist(&c.coords[i], &c.coords[j]);
        if d >= pot.cutoff || d == 0.0 {
            continue;
        }
        let (h, dh, ddh) = pot.pair_term2(d);
        let u: Vec<f64> = (0..3).map(|k| (c.coords[i][k] - c.coords[j][k]) / d).collect();
        e += eps * h;
        for k in 0..3 {
            g[k] += eps * dh * u[k];
            for l in 0..3 {
                let uu = u[k] * u[l];
                let id = if k == l { 1.0 } else { 0.0 };
                hess[k * 3 + l] += eps * (ddh * uu + dh / d * (id - uu));
            }
        }
    }
    (e, g, hess)
}

/// Solves (H + tau I) p = -g for a 3x3 system via Cramer's rule; returns
/// None when the shifted matrix is near singular.
fn solve_shifted(hess: &[f64; 9], tau: f64, g: &[f64; 3]) -> Option<[f64; 3]> {
    let mut m = *hess;
    for k in 0..3 {
        m[k * 3 + k] += tau;
    }
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    if det.abs() < 1e-12 {
        return None;
    }
    let b = [-g[0], -g[1], -g[2]];
    let inv_det = 1.0 / det;
    let mut p = [0.0; 3];
    // adjugate columns
    p[0] = inv_det
        * (b[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (b[1] * m[8] - m[5] * b[2])
            + m[2] * (b[1] * m[7] - m[4] * b[2]));
    p[1] = inv_det
        * (m[0] * (b[1] * m[8] - m[5] * b[2]) - b[0] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * b[2] - b[1] * m[6]));
    p[2] = inv_det
        * (m[0] * (m[4] * b[2] - b[1] * m[7]) - m[1] * (m[3] * b[2] - b[1] * m[6])
            + b[0] * (m[3] * m[7] - m[4] * m[6]));
    Some(p)
}

/// Safeguarded Newton descent per ligand atom until the sup-norm of the
/// oracle gradient drops below RELAX_TOL.
fn relax_ligand(c: &mut Complex, pot: &OraclePotential) -> Result<bool> {
    let eps = pot.depth(&c.ligand_key)?;
    for i in c.ligand_indices() {
        let mut done = false;
        for _ in 0..RELAX_MAX_STEPS {
            let (e, g, hess) = atom_derivatives(c, pot, eps, i);
            if grad_inf_norm(&g) < RELAX_TOL {
                done = true;
                break;
            }
            // Levenberg shift until the solve yields a descent direction
            let mut dir = None;
            for tau in [0.0, 1e-2, 1e-1, 1.0, 10.0] {
                if let Some(p) = solve_shifted(&hess, tau, &g) {
                    if p[0] * g[0] + p[1] * g[1] + p[2] * g[2] < 0.0 {
                        dir = Some(p);
                        break;
                    }
                }
            }
            let mut dir = dir.unwrap_or([-g[0], -g[1], -g[2]]);
            // trust region: stay inside the local basin around the anchor
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            if norm > TRUST_RADIUS {
                for d in &mut dir {
                    *d *= TRUST_RADIUS / norm;
                }
            }
            // backtracking line search on the per-atom energy
            let saved = c.coords[i];
            let mut s = 1.0;
            loop {
                for k in 0..3 {
                    c.coords[i][k] = saved[k] + s * dir[k];
                }
                let (e_new, _, _) = atom_derivatives(c, pot, eps, i);
                if e_new < e || s < 1e-14 {
                    break;
                }
                s *= 0.5;
            }
        }
        if !done {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Protein pocket: atoms placed uniformly in a ball with a minimum pairwise
/// separation, grown when placement gets tight.
fn place_pocket(n_prot: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut radius = (213.0 * n_prot as f64).cbrt().max(9.0);
    loop {
        let mut coords: Vec<[f64; 3]> = Vec::with_capacity(n_prot);
        let mut attempts = 0;
        while coords.len() < n_prot && attempts < 500 {
            attempts += 1;
            let dir = random_unit(rng);
            let r = radius * rng.gen_range(0.0..1.0f64).cbrt();
            let p = [dir[0] * r, dir[1] * r, dir[2] * r];
            if coords.iter().all(|q| dist(&p, q) >= PROTEIN_MIN_SEP) {
                coords.push(p);
            }
        }
        if coords.len() == n_prot {
            return coords;
        }
        radius *= 1.1;
    }
}

/// One labeled crystal-like complex: a sparse protein pocket plus the
/// ligand type's atoms relaxed to local minima of the oracle, labeled
/// y = -E + noise.
pub fn generate_complex(
    cfg: &GenConfig,
    pot: &OraclePotential,
    id: &str,
    ligand: &LigandType,
    rng: &mut ChaCha8Rng,
) -> Result<Complex> {
    for _ in 0..GEN_RETRIES {
        let n_prot = rng.gen_range(cfg.protein_atoms[0]..=cfg.protein_atoms[1]);
        let n_lig = ligand.elements.len();

        let mut coords = place_pocket(n_prot, rng);
        let mut elements: Vec<Element> = (0..n_prot)
            .map(|_| Element::from_code(rng.gen_range(0..5)).unwrap())
            .collect();
        let mut is_ligand = vec![false; n_prot];

        // each ligand atom starts near the Morse shell of its own anchor
        let mut anchors: Vec<usize> = (0..n_prot).collect();
        anchors.shuffle(rng);
        for a in 0..n_lig {
            let anchor = coords[anchors[a % n_prot]];
            let dir = random_unit(rng);
            let r = pot.r0 + rng.gen_range(-0.4..0.4);
            coords.push([
                anchor[0] + dir[0] * r,
                anchor[1] + dir[1] * r,
                anchor[2] + dir[2] * r,
            ]);
            elements.push(ligand.elements[a]);
            is_ligand.push(true);
        }

        let mut c = Complex {
            id: id.to_string(),
            ligand_key: ligand.key.clone(),
            elements,
            is_ligand,
            coords,
            affinity: None,
        };
        if !relax_ligand(&mut c, pot)? {
            continue;
        }
        let noise: f64 = if cfg.label_noise_std > 0.0 {
            Normal::new(0.0, cfg.label_noise_std).unwrap().sample(rng)
        } else {
            0.0
        };
        c.affinity = Some(-pot.energy(&c)? + noise);
        if c.validate().is_ok() {
            return Ok(c);
        }
    }
    Err(Error::Numerical(format!(
        "{id}: ligand relaxation failed after {GEN_RETRIES} attempts"
    )))
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Full benchmark: complexes plus a manifest splitting ~70/15/15 by
/// ligand_key group so no key crosses splits. Deterministic per seed.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Vec<Complex>, Manifest, OraclePotential)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let types = draw_ligand_types(cfg, &mut rng);
    let pot = OraclePotential {
        well_depths: types.iter().map(|t| (t.key.clone(), t.depth)).collect(),
        ..OraclePotential::default()
    };

    let mut complexes = Vec::with_capacity(cfg.n_complexes);
    for i in 0..cfg.n_complexes {
        let ty = &types[i % types.len()];
        let id = format!("cx{i:04}");
        complexes.push(generate_complex(cfg, &pot, &id, ty, &mut rng)?);
    }
    let keys: Vec<String> = types.iter().map(|t| t.key.clone()).collect();

    // assign whole ligand-key groups to splits until each quota fills
    let mut shuffled = keys.clone();
    shuffled.shuffle(&mut rng);
    let mut count_by_key: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &complexes {
        *count_by_key.entry(c.ligand_key.as_str()).or_default() += 1;
    }
    let n = cfg.n_complexes as f64;
    let quotas = [(Split::Train, 0.70 * n), (Split::Val, 0.15 * n), (Split::Test, 0.15 * n)];
    let mut split_by_key: BTreeMap<&str, Split> = BTreeMap::new();
    let mut filled = [0usize; 3];
    for key in &shuffled {
        let count = count_by_key.get(key.as_str()).copied().unwrap_or(0);
        // most underfilled split relative to its quota takes the group
        let si = (0..3)
            .min_by(|&a, &b| {
                let fa = filled[a] as f64 / quotas[a].1;
                let fb = filled[b] as f64 / quotas[b].1;
                fa.partial_cmp(&fb).unwrap()
            })
            .unwrap();
        split_by_key.insert(key.as_str(), quotas[si].0);
        filled[si] += count;
    }

    let entries = complexes
        .iter()
        .map(|c| ManifestEntry {
            id: c.id.clone(),
            split: split_by_key[c.ligand_key.as_str()],
            labeled: true,
        })
        .collect();
    Ok((complexes, Manifest { entries }, pot))
}

// ---------------------------------------------------------------------------
// Kolmogorov-Smirnov test against a fitted exponential
// ---------------------------------------------------------------------------

/// Asymptotic p-value for a KS test of `samples` against an exponential
/// fitted by location (minimum) and rate (1 / (mean - min)).
pub fn ks_exponential(samples: &[f64]) -> Result<f64> {
    if samples.len() < 8 {
        return Err(Error::Data(format!("KS test needs >= 8 samples, got {}", samples.len())));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let loc = xs[0];
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if mean - loc <= 0.0 {
        return Err(Error::Numerical("degenerate sample for exponential fit".into()));
    }
    let rate = 1.0 / (mean - loc);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = 1.0 - (-(x - loc) * rate).exp();
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    let lambda = d * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    Ok(p.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_manifest;

    fn one_pair_complex(d: f64, key: &str) -> Complex {
        Complex {
            id: "p".into(),
            ligand_key: key.into(),
            elements: vec![Element::C, Element::O],
            is_ligand: vec![true, false],
            coords: vec![[d, 0.0, 0.0], [0.0, 0.0, 0.0]],
            affinity: None,
        }
    }

    fn pot_with(key: &str, depth: f64) -> OraclePotential {
        let mut pot = OraclePotential::default();
        pot.well_depths.insert(key.into(), depth);
        pot
    }

    #[test]
    fn morse_minimum_and_separation() {
        let pot = pot_with("k", 2.5);
        let e = pot.energy(&one_pair_complex(3.0, "k")).unwrap();
        assert!((e + 2.5).abs() < 1e-12, "at r0 the pair energy is -eps: {e}");
        assert_eq!(pot.energy(&one_pair_complex(15.0, "k")).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pot = pot_with("k", 1.7);
        for _ in 0..20 {
            let mut c = Complex {
                id: "g".into(),
                ligand_key: "k".into(),
                elements: vec![Element::C; 6],
                is_ligand: vec![true, true, false, false, false, false],
                coords: (0..6)
                    .map(|_| {
                        [
                            rng.gen_range(-3.0..3.0),
                            rng.gen_range(-3.0..3.0),
                            rng.gen_range(-3.0..3.0),
                        ]
                    })
                    .collect(),
                affinity: None,
            };
            let g = pot.grad_ligand(&c).unwrap();
            let lig = c.ligand_indices();
            let h = 1e-6;
            for (row, &i) in lig.iter().enumerate() {
                for k in 0..3 {
                    let orig = c.coords[i][k];
                    c.coords[i][k] = orig + h;
                    let ep = pot.energy(&c).unwrap();
                    c.coords[i][k] = orig - h;
                    let em = pot.energy(&c).unwrap();
                    c.coords[i][k] = orig;
                    let numeric = (ep - em) / (2.0 * h);
                    let err = (g[row * 3 + k] - numeric).abs() / g[row * 3 + k].abs().max(1.0);
                    assert!(err < 1e-7, "fd err {err}");
                }
            }
        }
    }

    #[test]
    fn oracle_is_rigid_motion_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pot = pot_with("k", 1.1);
        let c = Complex {
            id: "r".into(),
            ligand_key: "k".into(),
            elements: vec![Element::C; 5],
            is_ligand: vec![true, true, false, false, false],
            coords: (0..5)
                .map(|_| {
                    [
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                    ]
                })
                .collect(),
            affinity: None,
        };
        let e0 = pot.energy(&c).unwrap();
        for _ in 0..10 {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (ca, sa) = (ang.cos(), ang.sin());
            let mut m = c.clone();
            for p in &mut m.coords {
                let (x, y, z) = (p[0], p[1], p[2]);
                *p = [ca * x - sa * z + 1.0, y - 2.0, sa * x + ca * z + 0.5];
            }
            assert!((pot.energy(&m).unwrap() - e0).abs() < 1e-10);
        }
    }

    #[test]
    fn generated_complexes_sit_at_local_minima() {
        let cfg = GenConfig {
            n_complexes: 6,
            n_ligand_types: 3,
            ..GenConfig::default()
        };
        let (complexes, _, pot) = generate_dataset(&cfg).unwrap();
        for c in &complexes {
            let g = pot.grad_ligand(c).unwrap();
            assert!(grad_inf_norm(&g) < RELAX_TOL, "{}: |grad| = {}", c.id, grad_inf_norm(&g));
        }
        // identical ligand type => identical key (counts > number of types)
        assert_eq!(complexes[0].ligand_key, complexes[3].ligand_key);
    }

    #[test]
    fn labels_track_oracle_exactly_without_noise() {
        let cfg = GenConfig {
            n_complexes: 8,
            n_ligand_types: 4,
            label_noise_std: 0.0,
            ..GenConfig::default()
        };
        let (complexes, _, pot) = generate_dataset(&cfg).unwrap();
        for c in &complexes {
            let y = c.affinity.unwrap();
            assert!((y + pot.energy(c).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_manifest_valid() {
        let cfg = GenConfig {
            n_complexes: 30,
            n_ligand_types: 10,
            ..GenConfig::default()
        };
        let (c1, m1, _) = generate_dataset(&cfg).unwrap();
        let (c2, m2, _) = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        crate::data::save_dataset(&pa, &c1).unwrap();
        crate::data::save_dataset(&pb, &c2).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
        assert!(validate_manifest(&m1, &c1).unwrap().is_empty());
    }

    #[test]
    fn ks_separates_boltzmann_from_mixture_labels() {
        for seed in [11, 12, 13] {
            // fixed ligand size so the mixture modes do not smear together,
            // and one type per complex so labels are independent draws
            let base = GenConfig {
                n_complexes: 120,
                n_ligand_types: 120,
                protein_atoms: [8, 12],
                ligand_atoms: [6, 6],
                seed,
                ..GenConfig::default()
            };
            let boltz = GenConfig {
                label_distribution: LabelDistribution::Boltzmann,
                ..base.clone()
            };
            let (cb, _, _) = generate_dataset(&boltz).unwrap();
            let yb: Vec<f64> = cb.iter().map(|c| c.affinity.unwrap()).collect();
            let p_b = ks_exponential(&yb).unwrap();
            assert!(p_b > 0.05, "seed {seed}: boltzmann labels rejected, p = {p_b}");

            let mix = GenConfig {
                label_distribution: LabelDistribution::GaussianMixture,
                ..base
            };
            let (cm, _, _) = generate_dataset(&mix).unwrap();
            let ym: Vec<f64> = cm.iter().map(|c| c.affinity.unwrap()).collect();
            let p_m = ks_exponential(&ym).unwrap();
            assert!(p_m < 0.01, "seed {seed}: mixture labels fit exponential, p = {p_m}");
        }
    }

    #[test]
    fn ks_sanity_on_known_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let exp: Vec<f64> = (0..300).map(|_| Exp::new(0.7).unwrap().sample(&mut rng) + 2.0).collect();
        assert!(ks_exponential(&exp).unwrap() > 0.05);
        let normal: Vec<f64> = (0..300)
            .map(|_| Normal::new(5.0, 0.5).unwrap().sample(&mut rng))
            .collect();
        assert!(ks_exponential(&normal).unwrap() < 0.01);
    }
}

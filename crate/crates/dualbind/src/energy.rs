//! Scalar binding energy from atom embeddings: learned pairwise
//! ligand-protein interaction terms within a distance cutoff, multiplied by
//! a smooth taper so the energy stays C1 across the cutoff boundary.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, gradient, Tape, Tensor};
use crate::data::{featurize, Complex, FEATURE_DIM};
use crate::encoder::{pair_distance, pair_distances_t, rbf_t, taper_t, BoundEncoder, BoundLayer, RBF_COUNT};
use crate::{encoder, Error, Result};

pub const CHECKPOINT_MAGIC: &str = "DUALBIND-CKPT-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub pair_hidden: usize,
    pub cutoff: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            layers: 2,
            pair_hidden: 32,
            cutoff: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// E_theta: encoder parameters plus the pairwise interaction head.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let h = cfg.hidden;
    let mut specs = vec![
        ("embed_w".to_string(), [FEATURE_DIM + 3, h]),
        ("embed_b".to_string(), [1, h]),
    ];
    for l in 0..cfg.layers {
        specs.push((format!("layer{l}_msg_w"), [2 * h + RBF_COUNT, h]));
        specs.push((format!("layer{l}_msg_b"), [1, h]));
        specs.push((format!("layer{l}_upd_w"), [2 * h, h]));
        specs.push((format!("layer{l}_upd_b"), [1, h]));
    }
    specs.push(("pair_w1".to_string(), [2 * h + RBF_COUNT, cfg.pair_hidden]));
    specs.push(("pair_b1".to_string(), [1, cfg.pair_hidden]));
    specs.push(("pair_w2".to_string(), [cfg.pair_hidden, 1]));
    specs.push(("pair_b2".to_string(), [1, 1]));
    specs
}

impl EnergyModel {
    /// Xavier-uniform weights, zero biases.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> EnergyModel {
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n = shape[0] * shape[1];
                let data = if name.ends_with("_b") || name.ends_with("b1") || name.ends_with("b2") {
                    vec![0.0; n]
                } else {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Param { name, shape, data }
            })
            .collect();
        EnergyModel { config, params }
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for p in &self.params {
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut off = 0;
        for p in &mut self.params {
            let len = p.data.len();
            p.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    /// Binds parameters as leaves on `tape` (training) or as constants
    /// (inference).
    pub fn bind(&self, tape: Option<&Tape>) -> BoundModel {
        let mk = |p: &Param| match tape {
            Some(t) => t.leaf(&p.shape, p.data.clone()),
            None => Tensor::constant(&p.shape, p.data.clone()),
        };
        let layers = (0..self.config.layers)
            .map(|l| BoundLayer {
                msg_w: mk(self.param(&format!("layer{l}_msg_w"))),
                msg_b: mk(self.param(&format!("layer{l}_msg_b"))),
                upd_w: mk(self.param(&format!("layer{l}_upd_w"))),
                upd_b: mk(self.param(&format!("layer{l}_upd_b"))),
            })
            .collect();
        BoundModel {
            encoder: BoundEncoder {
                hidden: self.config.hidden,
                cutoff: self.config.cutoff,
                embed_w: mk(self.param("embed_w")),
                embed_b: mk(self.param("embed_b")),
                layers,
            },
            pair_w1: mk(self.param("pair_w1")),
            pair_b1: mk(self.param("pair_b1")),
            pair_w2: mk(self.param("pair_w2")),
            pair_b2: mk(self.param("pair_b2")),
            cutoff: self.config.cutoff,
        }
    }

    /// Tensors of all bound parameters, in declaration order (for gradient
    /// queries).
    pub fn bound_tensors(bound: &BoundModel) -> Vec<&Tensor> {
        let mut v = vec![&bound.encoder.embed_w, &bound.encoder.embed_b];
        for l in &bound.encoder.layers {
            v.push(&l.msg_w);
            v.push(&l.msg_b);
            v.push(&l.upd_w);
            v.push(&l.upd_b);
        }
        v.push(&bound.pair_w1);
        v.push(&bound.pair_b1);
        v.push(&bound.pair_w2);
        v.push(&bound.pair_b2);
        v
    }

    /// Eager scalar energy of a complex. Second element flags an empty
    /// ligand-protein pair set (energy defined as 0 there).
    pub fn predict(&self, c: &Complex) -> Result<(f64, bool)> {
        let (a, x, lig) = featurize(c);
        let bound = self.bind(None);
        let out = energy_t(&bound, &a, &x, &lig)?;
        Ok((out.value.item(), out.no_pairs))
    }

    /// Gradient of the energy with respect to the ligand coordinates only,
    /// as an n_lig x 3 row-major vector.
    pub fn grad_ligand(&self, c: &Complex) -> Result<Vec<f64>> {
        let (a, _, lig) = featurize(c);
        let tape = Tape::new();
        let (x, leaf) = ligand_leaf_coords(&tape, &c.coords, &lig);
        let bound = self.bind(None);
        let out = energy_t(&bound, &a, &x, &lig)?;
        let g = gradient(&out.value, &[&leaf], false)?.remove(0);
        Ok(g.data().to_vec())
    }
}

pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub pair_w1: Tensor,
    pub pair_b1: Tensor,
    pub pair_w2: Tensor,
    pub pair_b2: Tensor,
    pub cutoff: f64,
}

pub struct EnergyOutput {
    pub value: Tensor,
    /// True when no ligand-protein pair fell within the cutoff; the energy
    /// is 0 by definition then (warning, not an error).
    pub no_pairs: bool,
}

/// Builds full coordinates from constant protein rows plus a tracked leaf
/// holding the ligand rows. Differentiating through the leaf yields exactly
/// the ligand-coordinate gradient.
pub fn ligand_leaf_coords(tape: &Tape, coords: &[[f64; 3]], lig_idx: &[usize]) -> (Tensor, Tensor) {
    let n = coords.len();
    let mut base = Vec::with_capacity(n * 3);
    for (i, p) in coords.iter().enumerate() {
        if lig_idx.contains(&i) {
            base.extend_from_slice(&[0.0, 0.0, 0.0]);
        } else {
            base.extend_from_slice(p);
        }
    }
    let mut lig_data = Vec::with_capacity(lig_idx.len() * 3);
    let mut flat = Vec::with_capacity(lig_idx.len() * 3);
    for &i in lig_idx {
        lig_data.extend_from_slice(&coords[i]);
        flat.extend_from_slice(&[i * 3, i * 3 + 1, i * 3 + 2]);
    }
    let leaf = tape.leaf(&[lig_idx.len(), 3], lig_data);
    let scattered = leaf
        .scatter_add(&flat, &[n, 3])
        .expect("scatter ligand rows");
    let x = Tensor::constant(&[n, 3], base)
        .add(&scattered)
        .expect("assemble coordinates");
    (x, leaf)
}

/// E = sum over (ligand, protein) pairs within the cutoff of
/// pairMLP(H_i ++ H_j ++ rbf(d_ij)) * s(d_ij).
pub fn energy_t(bound: &BoundModel, a: &Tensor, x: &Tensor, lig_idx: &[usize]) -> Result<EnergyOutput> {
    let n = x.shape()[0];
    let is_lig: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in lig_idx {
            v[i] = true;
        }
        v
    };
    let mut pairs = Vec::new();
    for &i in lig_idx {
        for j in 0..n {
            if !is_lig[j] && pair_distance(x.data(), i, j) < bound.cutoff {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Ok(EnergyOutput {
            value: Tensor::scalar(0.0),
            no_pairs: true,
        });
    }

    let h = encoder::encode(a, x, &bound.encoder)?;
    let d = pair_distances_t(x, &pairs)?;
    let rbf = rbf_t(&d)?;
    let (li, pj): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let hi = h.gather_rows(&li)?;
    let hj = h.gather_rows(&pj)?;
    let z = concat(&[&hi, &hj, &rbf], 1)?;
    let ones_m = Tensor::ones(&[pairs.len(), 1]);
    let hidden = z
        .matmul(&bound.pair_w1)?
        .add(&ones_m.matmul(&bound.pair_b1)?)?
        .tanh()?;
    let terms = hidden
        .matmul(&bound.pair_w2)?
        .add(&ones_m.matmul(&bound.pair_b2)?)?;
    let s = taper_t(&d, bound.cutoff)?;
    let value = terms.mul(&s)?.sum()?;
    if !value.item().is_finite() {
        return Err(Error::Numerical("non-finite energy".into()));
    }
    Ok(EnergyOutput {
        value,
        no_pairs: false,
    })
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    /// Training mode that produced the checkpoint (dsm_only checkpoints get
    /// RMSE reported as N/A downstream).
    pub mode: String,
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &EnergyModel, mode: &str) -> Result<()> {
    let path = path.as_ref();
    let ckpt = Checkpoint {
        magic: CHECKPOINT_MAGIC.to_string(),
        mode: mode.to_string(),
        config: model.config.clone(),
        params: model.params.clone(),
    };
    let text = serde_json::to_string(&ckpt).expect("checkpoint serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EnergyModel, String)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: not a checkpoint: {e}", path.display())))?;
    if ckpt.magic != CHECKPOINT_MAGIC {
        return Err(Error::Config(format!(
            "{}: checkpoint magic {:?} does not match {CHECKPOINT_MAGIC:?}",
            path.display(),
            ckpt.magic
        )));
    }
    let expect = param_specs(&ckpt.config);
    if ckpt.params.len() != expect.len()
        || ckpt
            .params
            .iter()
            .zip(&expect)
            .any(|(p, (name, shape))| &p.name != name || &p.shape != shape || p.data.len() != shape[0] * shape[1])
    {
        return Err(Error::Config(format!(
            "{}: checkpoint parameters do not match its config",
            path.display()
        )));
    }
    Ok((
        EnergyModel {
            config: ckpt.config,
            params: ckpt.params,
        },
        ckpt.mode,
    ))
}

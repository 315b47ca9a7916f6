//! Loss stack: supervised MSE on affinities, Gaussian perturbation of the
//! ligand pose, the closed-form denoising score matching loss, and the
//! weighted total that trains both at once.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{gradient, Tape, Tensor};
use crate::data::{featurize, Complex};
use crate::energy::{energy_t, ligand_leaf_coords, BoundModel};
use crate::{Error, Result};

/// One draw of the ligand perturbation x_tilde = x + sigma * eps.
#[derive(Debug, Clone)]
pub struct PerturbationRecord {
    pub sigma: f64,
    /// Standard normal draws, one row per ligand atom (row-major n_lig x 3).
    pub epsilon: Vec<f64>,
    /// Perturbed coordinates for all atoms; protein rows are bit-identical
    /// to the input.
    pub x_tilde: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    /// Absent when the batch had no labeled samples.
    pub l_mse: Option<f64>,
    pub l_dsm: f64,
    pub total: f64,
    pub lambda: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

/// (pred - y)^2, graph-linked through `pred`.
pub fn mse_loss(pred: &Tensor, y: f64) -> crate::autodiff::Result<Tensor> {
    pred.sub(&Tensor::scalar(y))?.square()
}

/// Adds sigma * N(0, I) noise to the ligand rows only.
pub fn perturb(
    coords: &[[f64; 3]],
    lig_idx: &[usize],
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PerturbationRecord> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("perturbation sigma must be > 0, got {sigma}")));
    }
    let mut x_tilde = coords.to_vec();
    let mut epsilon = Vec::with_capacity(lig_idx.len() * 3);
    for &i in lig_idx {
        for k in 0..3 {
            let e: f64 = StandardNormal.sample(rng);
            epsilon.push(e);
            x_tilde[i][k] += sigma * e;
        }
    }
    Ok(PerturbationRecord { sigma, epsilon, x_tilde })
}

/// Closed-form DSM loss ||G - T||^2 over the ligand rows, where G is the
/// energy gradient w.r.t. the perturbed ligand coordinates and
/// T = (x_tilde - x)/sigma^2 = epsilon/sigma. Graph-linked through G so the
/// result can be differentiated w.r.t. the model parameters.
pub fn dsm_loss(bound: &BoundModel, c: &Complex, rec: &PerturbationRecord, tape: &Tape) -> Result<Tensor> {
    let (a, _, lig) = featurize(c);
    dsm_loss_with(|x| energy_t(bound, &a, x, &lig).map(|out| out.value), &lig, rec, tape)
}

/// DSM loss against an arbitrary tracked energy function of the full
/// coordinates. Split out so closed-form stand-in energies can exercise the
/// same wiring the model uses.
pub fn dsm_loss_with<F>(
    energy: F,
    lig_idx: &[usize],
    rec: &PerturbationRecord,
    tape: &Tape,
) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (x_tilde, leaf) = ligand_leaf_coords(tape, &rec.x_tilde, lig_idx);
    let e = energy(&x_tilde)?;
    let g = gradient(&e, &[&leaf], true)?.remove(0);
    // T = (x_tilde - x)/sigma^2 = epsilon/sigma on the ligand rows
    let t_data: Vec<f64> = rec.epsilon.iter().map(|e| e / rec.sigma).collect();
    let t = Tensor::constant(&[lig_idx.len(), 3], t_data);
    let loss = g.sub(&t)?.square()?.sum()?;
    if !loss.item().is_finite() {
        return Err(Error::Numerical("non-finite DSM loss".into()));
    }
    Ok(loss)
}

/// L = L_MSE + lambda * L_DSM; the MSE term is absent for unlabeled samples.
pub fn total_loss(
    l_mse: Option<&Tensor>,
    l_dsm: &Tensor,
    lambda: f64,
) -> crate::autodiff::Result<Tensor> {
    let weighted = l_dsm.mul(&Tensor::scalar(lambda))?;
    match l_mse {
        Some(m) => m.add(&weighted),
        None => Ok(weighted),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Element;
    use crate::energy::{EnergyModel, ModelConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        let p = Tensor::scalar(3.2);
        assert!((mse_loss(&p, 1.2).unwrap().item() - 4.0).abs() < 1e-12);
        assert_eq!(mse_loss(&Tensor::scalar(1.5), 1.5).unwrap().item(), 0.0);
        assert!((mse_loss(&Tensor::scalar(0.0), -2.0).unwrap().item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn perturb_touches_only_ligand_rows() {
        let coords = vec![[0.1, 0.2, 0.3], [1.0, -2.0, 0.5], [3.0, 0.0, -1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rec = perturb(&coords, &[1], 0.5, &mut rng).unwrap();
        assert_eq!(rec.x_tilde[0], coords[0]);
        assert_eq!(rec.x_tilde[2], coords[2]);
        for k in 0..3 {
            let expect = coords[1][k] + 0.5 * rec.epsilon[k];
            assert_eq!(rec.x_tilde[1][k], expect);
        }
        assert!(perturb(&coords, &[1], 0.0, &mut rng).is_err());
        assert!(perturb(&coords, &[1], -1.0, &mut rng).is_err());
    }

    #[test]
    fn sigma_scaling_of_target() {
        // T = eps/sigma, so halving sigma doubles T for a fixed draw
        let eps = [0.3, -1.2, 0.7];
        let t_half: Vec<f64> = eps.iter().map(|e| e / 0.5).collect();
        let t_one: Vec<f64> = eps.iter().map(|e| e / 1.0).collect();
        for (a, b) in t_half.iter().zip(&t_one) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    /// Quadratic stand-in energy E = 0.5 ||x_tilde||^2 over the single
    /// ligand row gives G = x_tilde, so the loss has a closed form.
    fn quadratic_dsm(sigma: f64) -> f64 {
        let tape = Tape::new();
        let rec = PerturbationRecord {
            sigma,
            // x = 0, x_tilde = (1,0,0) implies sigma*eps = (1,0,0)
            epsilon: vec![1.0 / sigma, 0.0, 0.0],
            x_tilde: vec![[1.0, 0.0, 0.0], [5.0, 5.0, 5.0]],
        };
        let energy = |x: &Tensor| -> Result<Tensor> {
            let lig_row = x.gather_rows(&[0])?;
            Ok(lig_row.square()?.sum()?.mul(&Tensor::scalar(0.5))?)
        };
        dsm_loss_with(energy, &[0], &rec, &tape).unwrap().item()
    }

    #[test]
    fn dsm_closed_form_oracle() {
        // G = (1,0,0); sigma=0.5 gives T = (4,0,0), loss = 9
        assert!((quadratic_dsm(0.5) - 9.0).abs() < 1e-12);
        // sigma=1 gives T = (1,0,0), loss = 0
        assert!(quadratic_dsm(1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let m = Tensor::scalar(1.0);
        let d = Tensor::scalar(0.5);
        assert!((total_loss(Some(&m), &d, 2.0).unwrap().item() - 2.0).abs() < 1e-12);
        assert!((total_loss(None, &d, 2.0).unwrap().item() - 1.0).abs() < 1e-12);
        assert!((total_loss(Some(&m), &d, 0.0).unwrap().item() - 1.0).abs() < 1e-12);
    }

    fn test_complex(rng: &mut ChaCha8Rng) -> Complex {
        let n_lig = 3;
        let n = 9;
        Complex {
            id: "l".into(),
            ligand_key: "k".into(),
            elements: (0..n).map(|_| Element::from_code(rng.gen_range(0..5)).unwrap()).collect(),
            is_ligand: (0..n).map(|i| i < n_lig).collect(),
            coords: (0..n)
                .map(|_| [rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)])
                .collect(),
            affinity: Some(1.0),
        }
    }

    #[test]
    fn dsm_equals_assembled_score_matching_identity() {
        // the closed form ||G - T||^2 must equal the score-matching assembly
        // ||(-G) - (-(x_tilde - x)/sigma^2)||^2 built from parts
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = test_complex(&mut rng);
        let model = EnergyModel::init(
            ModelConfig { hidden: 8, layers: 2, pair_hidden: 8, cutoff: 10.0 },
            &mut rng,
        );
        let (a, _, lig) = featurize(&c);
        let rec = perturb(&c.coords, &lig, 0.7, &mut rng).unwrap();

        let tape = Tape::new();
        let bound = model.bind(None);
        let closed = dsm_loss(&bound, &c, &rec, &tape).unwrap().item();

        let tape2 = Tape::new();
        let (x_tilde, leaf) = ligand_leaf_coords(&tape2, &rec.x_tilde, &lig);
        let e = energy_t(&bound, &a, &x_tilde, &lig).unwrap().value;
        let g = gradient(&e, &[&leaf], false).unwrap().remove(0);
        let mut assembled = 0.0;
        for (i, &li) in lig.iter().enumerate() {
            for k in 0..3 {
                let model_score = -g.data()[i * 3 + k];
                let cond_score = -(rec.x_tilde[li][k] - c.coords[li][k]) / (rec.sigma * rec.sigma);
                assembled += (model_score - cond_score).powi(2);
            }
        }
        assert!((closed - assembled).abs() < 1e-12, "{closed} vs {assembled}");
    }

    #[test]
    fn dsm_parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let c = test_complex(&mut rng);
        let mut model = EnergyModel::init(
            ModelConfig { hidden: 6, layers: 1, pair_hidden: 6, cutoff: 10.0 },
            &mut rng,
        );
        let (_, _, lig) = featurize(&c);
        let rec = perturb(&c.coords, &lig, 0.6, &mut rng).unwrap();

        let eval = |m: &EnergyModel| -> f64 {
            let tape = Tape::new();
            let bound = m.bind(None);
            dsm_loss(&bound, &c, &rec, &tape).unwrap().item()
        };

        // analytic gradient w.r.t. all parameters
        let tape = Tape::new();
        let bound = model.bind(Some(&tape));
        let loss = dsm_loss(&bound, &c, &rec, &tape).unwrap();
        let wrt = EnergyModel::bound_tensors(&bound);
        let grads = gradient(&loss, &wrt, false).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();

        // spot-check a random 10-parameter slice with central differences
        let n = model.n_params();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let h = 1e-5;
        for &i in idx.iter().take(10) {
            let mut flat = model.flat_params();
            let orig = flat[i];
            flat[i] = orig + h;
            model.set_flat_params(&flat);
            let lp = eval(&model);
            flat[i] = orig - h;
            model.set_flat_params(&flat);
            let lm = eval(&model);
            flat[i] = orig;
            model.set_flat_params(&flat);
            let numeric = (lp - lm) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            assert!(err < 1e-4, "param {i}: analytic {} vs numeric {numeric}", analytic[i]);
        }
    }
}

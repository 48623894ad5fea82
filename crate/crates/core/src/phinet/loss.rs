use crate::degradations::GInverse;
use crate::error::{Error, Result};
use crate::imagestack::{Image, PhiMap};

fn check_shapes(phi: &PhiMap, fidelity: &Image, prior: &Image, target: &Image) -> Result<()> {
    for img in [fidelity, prior, target] {
        if img.shape() != phi.shape() {
            return Err(Error::shape(phi.shape(), img.shape()));
        }
    }
    Ok(())
}

/// `‖(1-φ)⊙g⁻¹(y) + φ⊙prior - x‖² + ρ‖φ‖₁` for one sample.
pub fn fusion_loss(phi: &PhiMap, y: &Image, prior: &Image, target: &Image, g_inv: GInverse, rho: f64) -> Result<f64> {
    fusion_loss_lifted(phi, &g_inv.apply(y)?, prior, target, rho)
}

/// [`fusion_loss`] with the observation already lifted by `g⁻¹`.
pub fn fusion_loss_lifted(phi: &PhiMap, fidelity: &Image, prior: &Image, target: &Image, rho: f64) -> Result<f64> {
    check_shapes(phi, fidelity, prior, target)?;
    Ok(loss_slices(phi.data(), fidelity.data(), prior.data(), target.data(), rho))
}

pub(crate) fn loss_slices(phi: &[f64], fid: &[f64], prior: &[f64], target: &[f64], rho: f64) -> f64 {
    let mut sq = 0.0;
    let mut l1 = 0.0;
    for (((&p, &g), &q), &x) in phi.iter().zip(fid).zip(prior).zip(target) {
        let d = (1.0 - p) * g + p * q - x;
        sq += d * d;
        l1 += p;
    }
    sq + rho * l1
}

/// `∂L/∂φ = 2(x̂ - x)(prior - g⁻¹(y)) + ρ` per entry.
pub fn phi_gradient(phi: &[f64], fid: &[f64], prior: &[f64], target: &[f64], rho: f64) -> Vec<f64> {
    phi.iter()
        .zip(fid)
        .zip(prior)
        .zip(target)
        .map(|(((&p, &g), &q), &x)| 2.0 * ((1.0 - p) * g + p * q - x) * (q - g) + rho)
        .collect()
}

/// Mean of the per-sample losses over a mini-batch.
pub fn batch_loss(phis: &[PhiMap], fidelity: &[Image], priors: &[Image], targets: &[Image], rho: f64) -> Result<f64> {
    if phis.is_empty() || phis.len() != fidelity.len() || phis.len() != priors.len() || phis.len() != targets.len() {
        return Err(Error::InvalidArgument("batch components must be non-empty and of equal length".into()));
    }
    let mut total = 0.0;
    for (((p, g), q), x) in phis.iter().zip(fidelity).zip(priors).zip(targets) {
        total += fusion_loss_lifted(p, g, q, x, rho)?;
    }
    Ok(total / phis.len() as f64)
}

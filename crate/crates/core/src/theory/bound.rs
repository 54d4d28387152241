//! Approximation-error bound for rank-limited adaptation.

use serde::{Deserialize, Serialize};

use super::instance::{sample_inputs, singular_value, TheoryInstance};
use crate::error::Result;
use crate::numerics::{spectral_norm, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParts {
    /// `E^i = σ_{RM+1}(W̄^i - ∏_{l∈P_i} W^l)`.
    pub e: Vec<f64>,
    pub xi_prime: f64,
    pub expected_input_norm: f64,
    pub prop_norm: f64,
    pub bound: f64,
}

/// Monte-Carlo `E‖X‖_2` for standard Gaussian `D x N` inputs.
pub fn expected_input_norm(d: usize, n: usize, samples: usize, rng: &mut Rng) -> Result<f64> {
    let mut s = 0.0;
    for x in sample_inputs(d, n, samples, rng) {
        s += spectral_norm(&x)?;
    }
    Ok(s / samples.max(1) as f64)
}

/// Evaluates the bound
///
/// ```text
/// ξ' Σ_i max_k(‖W̄^k‖ + E^k)^{L̄-i} E^i ‖P‖^{L̄-i+1}
/// ξ' = max( max_i ( E‖X‖ Π_{j<=i} ‖W̄^j‖ ‖P‖^i
///                   + Σ_{j<=i} Π_{k=j+1}^{i-1} ‖W̄^k‖ ‖B̄^j‖ ‖P‖^{i-j-1} ), E‖X‖ )
/// ```
///
/// with 2-norms throughout and `‖B̄^j‖ = ‖b̄^j‖ sqrt(N)`.
pub fn theorem2_bound(inst: &TheoryInstance, expected_input_norm: f64) -> Result<BoundParts> {
    inst.validate()?;
    let lb = inst.target_layers();
    let rm = inst.rank * inst.block_size();
    let prods = inst.block_products()?;
    let mut e = Vec::with_capacity(lb);
    for (wb, prod) in inst.target_w.iter().zip(&prods) {
        e.push(singular_value(&wb.sub(prod), rm + 1)?);
    }
    let wn: Vec<f64> = inst
        .target_w
        .iter()
        .map(spectral_norm)
        .collect::<Result<_>>()?;
    let sqrt_n = (inst.nodes() as f64).sqrt();
    let bn: Vec<f64> = inst
        .target_b
        .iter()
        .map(|b| b.frobenius_norm() * sqrt_n)
        .collect();
    let pn = spectral_norm(&inst.prop)?;

    // 1-based i, j, k as in the formula; vectors are 0-based.
    let mut xi = expected_input_norm;
    for i in 1..=lb {
        let mut term = expected_input_norm * (1..=i).map(|j| wn[j - 1]).product::<f64>() * pn.powi(i as i32);
        for j in 1..=i {
            let prod: f64 = ((j + 1)..i).map(|k| wn[k - 1]).product();
            term += prod * bn[j - 1] * pn.powi(i as i32 - j as i32 - 1);
        }
        xi = xi.max(term);
    }

    let growth = (0..lb).map(|k| wn[k] + e[k]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for i in 1..=lb {
        sum += growth.powi((lb - i) as i32) * e[i - 1] * pn.powi((lb - i + 1) as i32);
    }
    Ok(BoundParts {
        e,
        xi_prime: xi,
        expected_input_norm,
        prop_norm: pn,
        bound: xi * sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn scalar_instance_by_hand() {
        // D = 1, N = 1, L = L_bar = 1, R = 0 so E = |w̄ - w|.
        let inst = TheoryInstance {
            target_w: vec![Matrix::scalar(2.0)],
            target_b: vec![Matrix::scalar(0.5)],
            frozen_w: vec![Matrix::scalar(0.5)],
            frozen_b: vec![Matrix::scalar(0.0)],
            rank: 0,
            prop: Matrix::scalar(1.0),
        };
        let b = theorem2_bound(&inst, 3.0).unwrap();
        assert_eq!(b.e, vec![1.5]);
        // ξ' = max(3 * 2 * 1 + 0.5 * 1^{-1}, 3) = 6.5
        assert!((b.xi_prime - 6.5).abs() < 1e-12);
        // bound = 6.5 * (2 + 1.5)^0 * 1.5 * 1
        assert!((b.bound - 9.75).abs() < 1e-12);
    }

    #[test]
    fn matching_products_give_zero_bound() {
        let mut rng = Rng::new(4);
        let w1 = rng.gaussian_matrix(3, 3, 1.0);
        let w2 = rng.gaussian_matrix(3, 3, 1.0);
        let inst = TheoryInstance {
            target_w: vec![w2.matmul(&w1)],
            target_b: vec![rng.gaussian_matrix(3, 1, 1.0)],
            frozen_w: vec![w1, w2],
            frozen_b: vec![Matrix::zeros(3, 1), Matrix::zeros(3, 1)],
            rank: 1,
            prop: Matrix::identity(5),
        };
        let b = theorem2_bound(&inst, 1.0).unwrap();
        assert!(b.e[0] < 1e-12);
        assert!(b.bound < 1e-10);
    }

    #[test]
    fn input_norm_estimate_is_positive_and_deterministic() {
        let a = expected_input_norm(4, 8, 500, &mut Rng::new(1)).unwrap();
        let b = expected_input_norm(4, 8, 500, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        // E‖X‖_2 for a 4 x 8 Gaussian lies between sqrt(8) and sqrt(8) + sqrt(4)
        assert!(a > 8f64.sqrt() && a < 8f64.sqrt() + 2.0);
    }
}

use std::collections::BTreeMap;

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::SimConfig;
use crate::glm::{expit, logit};

/// Per-visit coadherence model `expit(c(t) + g v)` with g = loading · γ.
///
/// The intercepts c(t) are chosen so that, among clones still at risk and
/// adherent just before visit t, the share staying adherent is exactly q.
/// Selection therefore changes who stays coadherent but not how many, and the
/// regimen mix of the cloned population is the same at every bias level.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionModel {
    /// (native, target) to the intercepts for visits 1..horizon (index t - 1)
    /// and the coefficient on v.
    pub intercepts: BTreeMap<(u32, u32), (Vec<f64>, f64)>,
}

const GRID: usize = 4001;
const SPAN: f64 = 9.0;

impl SelectionModel {
    pub fn none() -> SelectionModel {
        SelectionModel { intercepts: BTreeMap::new() }
    }

    /// Intercepts for every selection pair with 0 < q < 1.
    pub fn new(cfg: &SimConfig, rates: &[f64], gamma: f64) -> SelectionModel {
        let mut intercepts = BTreeMap::new();
        let grid = VGrid::new();
        for sel in &cfg.selection {
            let g = gamma * sel.loading;
            let q = cfg.coadherence[sel.native as usize - 1][sel.target as usize - 1];
            if g == 0.0 || q <= 0.0 || q >= 1.0 {
                continue;
            }
            let cs = grid.intercepts(q, g, rates[sel.native as usize - 1], cfg.v_rho, cfg.horizon);
            intercepts.insert((sel.native, sel.target), (cs, g));
        }
        SelectionModel { intercepts }
    }

    /// Probability that a clone of `target` stays adherent at visit `t >= 1`.
    pub fn probability(&self, cfg: &SimConfig, native: u32, target: u32, t: u32, v: f64) -> f64 {
        let q = cfg.coadherence[native as usize - 1][target as usize - 1];
        match self.intercepts.get(&(native, target)) {
            Some((cs, g)) => expit(cs[(t as usize - 1).min(cs.len() - 1)] + g * v),
            None => q,
        }
    }
}

struct VGrid {
    v: Vec<f64>,
    phi: Vec<f64>,
}

impl VGrid {
    fn new() -> VGrid {
        let h = 2.0 * SPAN / (GRID - 1) as f64;
        let v: Vec<f64> = (0..GRID).map(|i| -SPAN + i as f64 * h).collect();
        let phi = v.iter().map(|&x| Normal::standard().pdf(x)).collect();
        VGrid { v, phi }
    }

    /// Newton's method for each visit in turn. Surviving past visit t means
    /// z < Φ⁻¹(exp(-λ t)) and z | v ~ N(ρ v, 1 - ρ²), so the at-risk density
    /// of v is φ(v) Φ((z_t - ρ v)/σ) times the earlier adherence probabilities.
    fn intercepts(&self, q: f64, g: f64, lambda: f64, rho: f64, horizon: u32) -> Vec<f64> {
        let std = Normal::standard();
        let sigma = (1.0 - rho * rho).sqrt();
        let n = self.v.len();
        let mut kept = vec![1.0; n];
        let mut cs = Vec::with_capacity(horizon as usize);
        for t in 1..horizon {
            let zt = std.inverse_cdf((-lambda * t as f64).exp());
            let dens: Vec<f64> =
                (0..n).map(|i| self.phi[i] * std.cdf((zt - rho * self.v[i]) / sigma) * kept[i]).collect();
            let total: f64 = dens.iter().sum();
            let mut c = logit(q);
            for _ in 0..100 {
                let (mut f, mut df) = (0.0, 0.0);
                for i in 0..n {
                    let p = expit(c + g * self.v[i]);
                    f += dens[i] * p;
                    df += dens[i] * p * (1.0 - p);
                }
                let step = (f / total - q) / (df / total);
                c -= step.clamp(-2.0, 2.0);
                if step.abs() < 1e-13 {
                    break;
                }
            }
            for i in 0..n {
                kept[i] *= expit(c + g * self.v[i]);
            }
            cs.push(c);
        }
        cs
    }
}

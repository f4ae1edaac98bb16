//! The distilled distribution: a uniform mixture of diagonal Gaussians per
//! class in latent space, parameterized by mean and log-variance.

use autograd::{Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::util::{all_finite, rng};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Std-dev of the Gaussian the means are drawn from.
    pub mu_scale: f64,
    /// Initial variance (log_var starts at ln(var0)).
    pub var0: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { mu_scale: 1.0, var0: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// z = mu + exp(log_var / 2) * eps, differentiable in (mu, log_var).
    Reparameterized,
    /// z = mu of the drawn prior.
    MeanOnly,
}

/// Per-class Gaussian prior parameters; the learnable half of the artifact.
#[derive(Clone, Debug)]
pub struct LatentPriorSet {
    pub class_ids: Vec<usize>,
    pub priors_per_class: usize,
    pub latent_dim: usize,
    /// [C, LPC, d]
    pub mu: ArrayD<f64>,
    /// [C, LPC, d]; variance = exp(log_var)
    pub log_var: ArrayD<f64>,
}

impl LatentPriorSet {
    pub fn class_count(&self) -> usize {
        self.class_ids.len()
    }

    /// Number of learned scalars: 2 * C * LPC * d. Drives storage accounting.
    pub fn param_count(&self) -> usize {
        2 * self.class_count() * self.priors_per_class * self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_count();
        let want = [c, self.priors_per_class, self.latent_dim];
        if self.mu.shape() != want || self.log_var.shape() != want {
            return Err(Error::Shape(format!(
                "prior tensors must be {:?}, got mu {:?} / log_var {:?}",
                want,
                self.mu.shape(),
                self.log_var.shape()
            )));
        }
        if !all_finite(&self.mu) || !all_finite(&self.log_var) {
            return Err(Error::Numeric("prior parameters must be finite".into()));
        }
        if self.class_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("class_ids must be sorted and unique".into()));
        }
        Ok(())
    }

    /// Position of `class_id` in the (sorted) class list.
    pub fn class_pos(&self, class_id: usize) -> Result<usize> {
        self.class_ids
            .binary_search(&class_id)
            .map_err(|_| Error::Lookup(format!("class {class_id} not in prior set")))
    }

    /// Row index into the [C*LPC, d] flattened view.
    pub fn row(&self, class_pos: usize, prior_index: usize) -> usize {
        class_pos * self.priors_per_class + prior_index
    }

    /// Flattened [C*LPC, d] copies for graph use.
    pub fn flat_mu(&self) -> ArrayD<f64> {
        let rows = self.class_count() * self.priors_per_class;
        self.mu
            .clone()
            .into_shape_with_order(IxDyn(&[rows, self.latent_dim]))
            .expect("mu flatten")
    }

    pub fn flat_log_var(&self) -> ArrayD<f64> {
        let rows = self.class_count() * self.priors_per_class;
        self.log_var
            .clone()
            .into_shape_with_order(IxDyn(&[rows, self.latent_dim]))
            .expect("log_var flatten")
    }
}

/// A batch of latent draws with their provenance.
#[derive(Clone, Debug)]
pub struct LatentSample {
    /// [B, d]
    pub z: ArrayD<f64>,
    pub class_id: Vec<usize>,
    pub prior_index: Vec<usize>,
}

/// Initialize priors: mu ~ N(0, mu_scale^2) i.i.d., log_var = ln(var0).
pub fn init_priors(
    class_ids: &[usize],
    priors_per_class: usize,
    latent_dim: usize,
    init: InitConfig,
    seed: u64,
) -> Result<LatentPriorSet> {
    if priors_per_class == 0 || latent_dim == 0 {
        return Err(Error::Config("need priors_per_class >= 1 and latent_dim >= 1".into()));
    }
    if init.var0 <= 0.0 {
        return Err(Error::Config(format!("var0 must be > 0, got {}", init.var0)));
    }
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != class_ids.len() {
        return Err(Error::Config("duplicate class ids".into()));
    }
    let c = ids.len();
    let mut r = rng(seed);
    let mu = ArrayD::from_shape_simple_fn(IxDyn(&[c, priors_per_class, latent_dim]), || {
        let z: f64 = StandardNormal.sample(&mut r);
        z * init.mu_scale
    });
    let log_var = ArrayD::from_elem(IxDyn(&[c, priors_per_class, latent_dim]), init.var0.ln());
    let set = LatentPriorSet {
        class_ids: ids,
        priors_per_class,
        latent_dim,
        mu,
        log_var,
    };
    set.validate()?;
    Ok(set)
}

/// Draw `n` latents for one class; the prior index is uniform per row.
pub fn sample_latents(
    priors: &LatentPriorSet,
    class_id: usize,
    n: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<LatentSample> {
    if n == 0 {
        return Err(Error::Config("need n >= 1 latent draws".into()));
    }
    let pos = priors.class_pos(class_id)?;
    let mut r = rng(seed);
    let d = priors.latent_dim;
    let mut z = ArrayD::<f64>::zeros(IxDyn(&[n, d]));
    let mut prior_index = Vec::with_capacity(n);
    for row in 0..n {
        let p = r.gen_range(0..priors.priors_per_class);
        prior_index.push(p);
        for j in 0..d {
            let mu = priors.mu[[pos, p, j]];
            let val = match mode {
                SampleMode::MeanOnly => mu,
                SampleMode::Reparameterized => {
                    let eps: f64 = StandardNormal.sample(&mut r);
                    mu + (0.5 * priors.log_var[[pos, p, j]]).exp() * eps
                }
            };
            z[[row, j]] = val;
        }
    }
    Ok(LatentSample { z, class_id: vec![class_id; n], prior_index })
}

/// Graph-side reparameterized draw for the rows in `rows` (indices into the
/// flattened [C*LPC, d] parameter matrices). `eps` of shape [rows.len(), d]
/// makes the draw explicit so gradients flow into mu and log_var; pass `None`
/// for mean-only sampling.
pub fn sample_rows_on_graph(
    g: &mut Graph,
    mu_flat: Var,
    log_var_flat: Var,
    rows: Rc<Vec<usize>>,
    eps: Option<ArrayD<f64>>,
) -> Var {
    let m = g.gather_rows(mu_flat, rows.clone());
    match eps {
        None => m,
        Some(e) => {
            let lv = g.gather_rows(log_var_flat, rows);
            let half = g.mul_scalar(lv, 0.5);
            let sd = g.exp(half);
            let ec = g.constant(e);
            let noise = g.mul(sd, ec);
            g.add(m, noise)
        }
    }
}

/// Fixed-representation export: keep only the means as latent codes.
#[derive(Clone, Debug)]
pub struct FixedCodes {
    pub class_ids: Vec<usize>,
    /// [C, LPC, d]
    pub codes: ArrayD<f64>,
}

pub fn freeze_to_codes(priors: &LatentPriorSet) -> FixedCodes {
    FixedCodes {
        class_ids: priors.class_ids.clone(),
        codes: priors.mu.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_priors(seed: u64) -> LatentPriorSet {
        init_priors(&[0, 1, 2], 4, 5, InitConfig::default(), seed).unwrap()
    }

    #[test]
    fn init_contracts() {
        let zero = init_priors(&[0], 2, 3, InitConfig { mu_scale: 0.0, var0: 1.0 }, 1).unwrap();
        assert!(zero.mu.iter().all(|&v| v == 0.0));
        assert!(zero.log_var.iter().all(|&v| v == 0.0)); // ln(1) = 0
        assert!(init_priors(&[0], 1, 1, InitConfig { mu_scale: 1.0, var0: 0.0 }, 1).is_err());
        let a = toy_priors(9);
        let b = toy_priors(9);
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.param_count(), 2 * 3 * 4 * 5);
    }

    #[test]
    fn param_count_formula_exact() {
        for (c, lpc, d) in [(1usize, 1usize, 1usize), (10, 10, 64), (3, 7, 13)] {
            let ids: Vec<usize> = (0..c).collect();
            let p = init_priors(&ids, lpc, d, InitConfig::default(), 0).unwrap();
            assert_eq!(p.param_count(), 2 * c * lpc * d);
        }
    }

    #[test]
    fn zero_variance_collapses_to_mean() {
        let mut p = toy_priors(2);
        p.log_var.fill(-1e10); // exp(0.5 * -1e10) underflows to 0
        let s = sample_latents(&p, 1, 6, SampleMode::Reparameterized, 3).unwrap();
        for row in 0..6 {
            let pr = s.prior_index[row];
            for j in 0..p.latent_dim {
                assert_eq!(s.z[[row, j]], p.mu[[1, pr, j]]);
            }
        }
    }

    #[test]
    fn mean_only_single_prior_repeats_mu() {
        let p = init_priors(&[0, 5], 1, 3, InitConfig::default(), 4).unwrap();
        let s = sample_latents(&p, 5, 3, SampleMode::MeanOnly, 0).unwrap();
        for row in 0..3 {
            assert_eq!(s.prior_index[row], 0);
            for j in 0..3 {
                assert_eq!(s.z[[row, j]], p.mu[[1, 0, j]]);
            }
        }
    }

    #[test]
    fn unknown_class_is_lookup_error() {
        let p = toy_priors(0);
        assert!(matches!(
            sample_latents(&p, 7, 1, SampleMode::MeanOnly, 0),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn standard_normal_moments() {
        let p = init_priors(&[0], 1, 4, InitConfig { mu_scale: 0.0, var0: 1.0 }, 0).unwrap();
        let n = 10_000;
        let s = sample_latents(&p, 0, n, SampleMode::Reparameterized, 17).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..n).map(|r| s.z[[r, j]]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
            assert!((0.9..=1.1).contains(&var), "var {var}");
        }
    }

    #[test]
    fn prior_selection_is_uniform() {
        let p = toy_priors(5);
        let n = 10_000;
        let s = sample_latents(&p, 0, n, SampleMode::MeanOnly, 23).unwrap();
        let mut counts = vec![0usize; p.priors_per_class];
        for &i in &s.prior_index {
            counts[i] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn reparameterization_gradients_match_finite_differences() {
        // z depends on (mu, log_var) through z = mu + exp(log_var/2) * eps
        // with eps held fixed; compare d(sum(c*z))/d(params) against fd.
        let mut r = rng(31);
        let d = 6;
        let mu0 = ArrayD::from_shape_simple_fn(IxDyn(&[2, d]), || r.gen_range(-1.0..1.0));
        let lv0 = ArrayD::from_shape_simple_fn(IxDyn(&[2, d]), || r.gen_range(-1.0..0.5));
        let eps = ArrayD::from_shape_simple_fn(IxDyn(&[3, d]), || {
            let z: f64 = StandardNormal.sample(&mut r);
            z
        });
        let coeff = ArrayD::from_shape_simple_fn(IxDyn(&[3, d]), || r.gen_range(-1.0..1.0));
        let rows = Rc::new(vec![0usize, 1, 0]);

        let f = |xs: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::new();
            let mu = g.param(xs[0].clone());
            let lv = g.param(xs[1].clone());
            let z = sample_rows_on_graph(&mut g, mu, lv, rows.clone(), Some(eps.clone()));
            let c = g.constant(coeff.clone());
            let prod = g.mul(z, c);
            let s = g.sum_all(prod);
            g.scalar(s)
        };
        let want = autograd::numeric_grad(f, &[mu0.clone(), lv0.clone()], 1e-6);

        let mut g = Graph::new();
        let mu = g.param(mu0.clone());
        let lv = g.param(lv0.clone());
        let z = sample_rows_on_graph(&mut g, mu, lv, rows.clone(), Some(eps.clone()));
        let c = g.constant(coeff.clone());
        let prod = g.mul(z, c);
        let s = g.sum_all(prod);
        let grads = g.grad(s, &[mu, lv]);
        let got: Vec<_> = grads.iter().map(|&v| g.val(v).clone()).collect();
        assert!(autograd::max_rel_err(&got, &want, 1e-8) < 1e-5);

        // closed forms: d/dmu = scatter(c), d/dlog_var = 0.5*exp(lv/2)*eps*c
        let gm = &got[0];
        let glv = &got[1];
        for row in 0..3 {
            let target = rows[row];
            for j in 0..d {
                let expect_lv =
                    0.5 * (0.5 * lv0[[target, j]]).exp() * eps[[row, j]] * coeff[[row, j]];
                let contrib_mu = coeff[[row, j]];
                // accumulate expected scatter contributions
                let _ = (expect_lv, contrib_mu);
            }
        }
        // row 0 of the parameter matrices receives contributions from sample
        // rows 0 and 2; row 1 from sample row 1 only.
        for j in 0..d {
            let want_mu0 = coeff[[0, j]] + coeff[[2, j]];
            assert!((gm[[0, j]] - want_mu0).abs() < 1e-10);
            let want_mu1 = coeff[[1, j]];
            assert!((gm[[1, j]] - want_mu1).abs() < 1e-10);
            let want_lv1 = 0.5 * (0.5 * lv0[[1, j]]).exp() * eps[[1, j]] * coeff[[1, j]];
            assert!((glv[[1, j]] - want_lv1).abs() < 1e-10);
        }
    }

    #[test]
    fn freeze_is_a_copy_of_means() {
        let p = toy_priors(12);
        let codes = freeze_to_codes(&p);
        assert_eq!(codes.codes, p.mu);
        assert_eq!(codes.codes.shape()[0] * codes.codes.shape()[1], 12);
        let zero = init_priors(&[0], 2, 2, InitConfig { mu_scale: 0.0, var0: 1.0 }, 0).unwrap();
        assert!(freeze_to_codes(&zero).codes.iter().all(|&v| v == 0.0));
    }
}

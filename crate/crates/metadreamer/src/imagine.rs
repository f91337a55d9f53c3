//! Meta-imagination: generating new tasks by interpolating between real
//! tasks in the latent space.
//!
//! A disentangled encoder puts each generative factor on its own latent
//! dimension. [`FactorMap`] discovers that assignment from factor sweeps,
//! records the per-factor anchor values real tasks land on, and then
//! composes imaginary tasks by mixing interpolated values across factors.
//! An imaginary task is just a latent vector the policy and world model
//! can condition on; no simulator instance exists for it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Two interpolated values closer than this count as the same anchor.
pub const ANCHOR_TOL: f64 = 1e-6;

/// Values per anchor gap when interpolating a factor.
pub const DEFAULT_DENSITY: usize = 4;

/// Noise scale keeping the jittered mixing weight monotone across steps.
pub fn default_eps_scale(density: usize) -> f64 {
    0.5 / density as f64
}

/// How an imaginary task relates to the real tasks it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InterpolationType {
    /// Every factor sits on a real anchor, but the combination is new.
    NovelCombination,
    /// Some factors on anchors, some between them.
    Hybrid,
    /// Every factor strictly between anchors.
    FullyInterpolated,
}

impl InterpolationType {
    pub fn tag(self) -> u8 {
        match self {
            InterpolationType::NovelCombination => 1,
            InterpolationType::Hybrid => 2,
            InterpolationType::FullyInterpolated => 3,
        }
    }
}

/// Posterior means observed while sweeping a single factor with every
/// other factor held fixed.
#[derive(Debug, Clone)]
pub struct FactorSweep {
    pub factor: String,
    pub posterior_means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FactorAnchors {
    pub factor: String,
    /// Latent dimension this factor controls.
    pub latent_dim: usize,
    /// Sorted values real tasks take on that dimension.
    pub anchors: Vec<f64>,
}

/// Injective map from generative factors to latent dimensions, with the
/// anchor values needed for interpolation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FactorMap {
    pub factors: Vec<FactorAnchors>,
    pub latent_dim: usize,
}

/// A composed imaginary task: a full latent vector plus its type tag.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImaginaryTask {
    pub z: Vec<f64>,
    pub itype: InterpolationType,
}

impl FactorMap {
    /// Assigns each factor the latent dimension whose posterior mean
    /// varies most across that factor's sweep, and records the swept
    /// means on that dimension as anchors.
    pub fn fit(sweeps: &[FactorSweep]) -> Result<FactorMap> {
        if sweeps.is_empty() {
            return Err(Error::InsufficientData("no factor sweeps".into()));
        }
        let latent_dim = sweeps[0]
            .posterior_means
            .first()
            .map(Vec::len)
            .unwrap_or(0);
        let mut factors: Vec<FactorAnchors> = Vec::with_capacity(sweeps.len());
        for sweep in sweeps {
            if sweep.posterior_means.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "factor `{}` swept with fewer than 2 tasks",
                    sweep.factor
                )));
            }
            if sweep.posterior_means.iter().any(|m| m.len() != latent_dim) {
                return Err(Error::Shape("inconsistent posterior mean lengths".into()));
            }
            let n = sweep.posterior_means.len() as f64;
            let mut best = (0usize, f64::NEG_INFINITY);
            for dim in 0..latent_dim {
                let mean: f64 =
                    sweep.posterior_means.iter().map(|m| m[dim]).sum::<f64>() / n;
                let var: f64 = sweep
                    .posterior_means
                    .iter()
                    .map(|m| (m[dim] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                if var > best.1 {
                    best = (dim, var);
                }
            }
            let dim = best.0;
            if let Some(prev) = factors.iter().find(|f| f.latent_dim == dim) {
                return Err(Error::EntangledFactors {
                    first: prev.factor.clone(),
                    second: sweep.factor.clone(),
                    dim,
                });
            }
            let mut anchors: Vec<f64> =
                sweep.posterior_means.iter().map(|m| m[dim]).collect();
            anchors.sort_by(f64::total_cmp);
            anchors.dedup();
            factors.push(FactorAnchors {
                factor: sweep.factor.clone(),
                latent_dim: dim,
                anchors,
            });
        }
        Ok(FactorMap {
            factors,
            latent_dim,
        })
    }

    pub fn active_dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.latent_dim).collect()
    }

    pub fn factor_names(&self) -> Vec<&str> {
        self.factors.iter().map(|f| f.factor.as_str()).collect()
    }

    /// Whether `value` coincides with one of this factor's anchors.
    fn on_anchor(anchors: &[f64], value: f64) -> bool {
        anchors.iter().any(|a| (a - value).abs() <= ANCHOR_TOL)
    }

    /// Types an arbitrary latent vector by how its active dimensions
    /// relate to the recorded anchors.
    pub fn classify(&self, z: &[f64]) -> InterpolationType {
        let on: Vec<bool> = self
            .factors
            .iter()
            .map(|f| Self::on_anchor(&f.anchors, z[f.latent_dim]))
            .collect();
        if on.iter().all(|&b| b) {
            InterpolationType::NovelCombination
        } else if on.iter().any(|&b| b) {
            InterpolationType::Hybrid
        } else {
            InterpolationType::FullyInterpolated
        }
    }

    /// Draws up to `count` distinct imaginary tasks. Active dimensions
    /// take values from per-factor interpolation sets, inactive
    /// dimensions stay at the prior mean of zero, and any draw whose
    /// active values reproduce a real task embedding is discarded.
    pub fn compose_imaginary(
        &self,
        real_embeddings: &[Vec<f64>],
        density: usize,
        eps_scale: f64,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ImaginaryTask>> {
        let sets: Vec<Vec<f64>> = self
            .factors
            .iter()
            .map(|f| interpolate_factor(&f.anchors, density, eps_scale, rng))
            .collect::<Result<_>>()?;
        let mut out: Vec<ImaginaryTask> = Vec::with_capacity(count);
        let mut tries = 0;
        let budget = count.saturating_mul(20).max(64);
        while out.len() < count && tries < budget {
            tries += 1;
            let mut z = vec![0.0; self.latent_dim];
            for (f, set) in self.factors.iter().zip(&sets) {
                z[f.latent_dim] = set[rng.random_range(0..set.len())];
            }
            let matches_real = real_embeddings.iter().any(|e| {
                self.factors
                    .iter()
                    .all(|f| (e[f.latent_dim] - z[f.latent_dim]).abs() <= ANCHOR_TOL)
            });
            if matches_real || out.iter().any(|t| t.z == z) {
                continue;
            }
            let itype = self.classify(&z);
            out.push(ImaginaryTask { z, itype });
        }
        Ok(out)
    }
}

/// Interpolated values for one factor: every adjacent anchor pair is
/// divided into `density` steps, each mixing weight jittered by a uniform
/// draw in `±eps_scale` and clipped to `[0, 1]`. The result is sorted
/// with exact duplicates removed; with zero noise it always contains the
/// anchors themselves.
pub fn interpolate_factor(
    anchors: &[f64],
    density: usize,
    eps_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if density < 1 {
        return Err(Error::Config("interpolation density must be >= 1".into()));
    }
    if anchors.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "interpolation needs >= 2 anchors, got {}",
            anchors.len()
        )));
    }
    let mut values = Vec::with_capacity((anchors.len() - 1) * (density + 1));
    for pair in anchors.windows(2) {
        let (left, right) = (pair[0], pair[1]);
        for j in 0..=density {
            let eps = if eps_scale == 0.0 {
                0.0
            } else {
                rng.random_range(-eps_scale..=eps_scale)
            };
            let lambda = (j as f64 / density as f64 + eps).clamp(0.0, 1.0);
            values.push(lambda * left + (1.0 - lambda) * right);
        }
    }
    values.sort_by(f64::total_cmp);
    values.dedup();
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn sweep(factor: &str, means: &[&[f64]]) -> FactorSweep {
        FactorSweep {
            factor: factor.into(),
            posterior_means: means.iter().map(|m| m.to_vec()).collect(),
        }
    }

    #[test]
    fn fit_recovers_a_spread_out_assignment() {
        let sweeps = vec![
            sweep("goal_x", &[&[0.1, 0.0, 0.01, 0.0], &[0.9, 0.0, -0.01, 0.0]]),
            sweep("goal_y", &[&[0.0, 0.0, 0.2, 0.0], &[0.0, 0.0, 0.8, 0.0]]),
        ];
        let map = FactorMap::fit(&sweeps).unwrap();
        assert_eq!(map.active_dims(), vec![0, 2]);
        assert_eq!(map.factors[0].anchors, vec![0.1, 0.9]);
        assert_eq!(map.factors[1].anchors, vec![0.2, 0.8]);
    }

    #[test]
    fn dead_dimension_is_never_selected() {
        let sweeps = vec![sweep(
            "g",
            &[&[0.0, -0.5, 0.0], &[0.0, 0.5, 0.0], &[0.0, 1.5, 0.0]],
        )];
        let map = FactorMap::fit(&sweeps).unwrap();
        assert_eq!(map.factors[0].latent_dim, 1);
    }

    #[test]
    fn shared_dimension_is_reported_as_entangled() {
        let sweeps = vec![
            sweep("a", &[&[0.1, 0.0], &[0.9, 0.0]]),
            sweep("b", &[&[0.2, 0.0], &[0.7, 0.0]]),
        ];
        let err = FactorMap::fit(&sweeps).unwrap_err();
        match err {
            Error::EntangledFactors { first, second, dim } => {
                assert_eq!(first, "a");
                assert_eq!(second, "b");
                assert_eq!(dim, 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn interpolation_matches_worked_examples() {
        let mut rng = rng_from_seed(1);
        let vals = interpolate_factor(&[0.0, 1.0], 2, 0.0, &mut rng).unwrap();
        assert_eq!(vals, vec![0.0, 0.5, 1.0]);

        let vals = interpolate_factor(&[0.0, 1.0, 3.0], 1, 0.0, &mut rng).unwrap();
        assert_eq!(vals, vec![0.0, 1.0, 3.0]);

        assert!(interpolate_factor(&[0.0, 1.0], 0, 0.0, &mut rng).is_err());
        assert!(interpolate_factor(&[0.5], 4, 0.0, &mut rng).is_err());
    }

    #[test]
    fn zero_mixing_weight_returns_the_right_anchor_bitwise() {
        let mut rng = rng_from_seed(2);
        let anchors = [0.1 + 0.2, core::f64::consts::PI];
        let vals = interpolate_factor(&anchors, 3, 0.0, &mut rng).unwrap();
        assert!(vals.contains(&anchors[0]));
        assert!(vals.contains(&anchors[1]));
    }

    #[test]
    fn coverage_spacing_is_bounded_by_gap_over_density() {
        let mut rng = rng_from_seed(3);
        let anchors = [-1.5, -0.2, 0.9, 4.0];
        for density in 1..6 {
            let vals = interpolate_factor(&anchors, density, 0.0, &mut rng).unwrap();
            let max_gap = anchors
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(0.0, f64::max);
            for w in vals.windows(2) {
                assert!(w[1] - w[0] <= max_gap / density as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn classification_follows_anchor_membership() {
        let map = FactorMap {
            factors: vec![
                FactorAnchors {
                    factor: "a".into(),
                    latent_dim: 0,
                    anchors: vec![0.0, 1.0],
                },
                FactorAnchors {
                    factor: "b".into(),
                    latent_dim: 2,
                    anchors: vec![-1.0, 1.0],
                },
            ],
            latent_dim: 4,
        };
        use InterpolationType::*;
        assert_eq!(map.classify(&[0.0, 9.0, 1.0, 9.0]), NovelCombination);
        assert_eq!(map.classify(&[0.5, 0.0, 1.0, 0.0]), Hybrid);
        assert_eq!(map.classify(&[0.5, 0.0, 0.3, 0.0]), FullyInterpolated);
    }

    #[test]
    fn composition_fills_inactive_dims_with_zero_and_skips_real_tasks() {
        let map = FactorMap {
            factors: vec![
                FactorAnchors {
                    factor: "a".into(),
                    latent_dim: 0,
                    anchors: vec![0.0, 1.0],
                },
                FactorAnchors {
                    factor: "b".into(),
                    latent_dim: 3,
                    anchors: vec![0.0, 2.0],
                },
            ],
            latent_dim: 4,
        };
        // The four real tasks cover every anchor combination, so pure
        // anchor combinations must never be emitted.
        let real = vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 2.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 2.0],
        ];
        let mut rng = rng_from_seed(4);
        let tasks = map
            .compose_imaginary(&real, 4, 0.0, 30, &mut rng)
            .unwrap();
        assert!(!tasks.is_empty());
        for t in &tasks {
            assert_eq!(t.z.len(), 4);
            assert_eq!(t.z[1], 0.0);
            assert_eq!(t.z[2], 0.0);
            assert_ne!(t.itype, InterpolationType::NovelCombination);
            assert!(t.z.iter().all(|v| v.is_finite()));
        }
        let unique: std::collections::BTreeSet<String> =
            tasks.iter().map(|t| format!("{:?}", t.z)).collect();
        assert_eq!(unique.len(), tasks.len());
    }
}

//! Central finite-difference checks of the analytic gradients of the
//! discriminator and classification objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{param_mut, Mlp, MlpGrads};
use crate::error::Result;
use crate::fplg::PseudoLabelSet;
use crate::model::{ModelBundle, ModelConfig, NUM_VIEWS};
use crate::objectives::{
    adversarial_feature_objective, classification_objective, discriminator_objective,
    DEFAULT_BALANCE,
};
use crate::synthdata::{Domain, RegionSample};

pub const STEP: f64 = 1e-6;

/// Worst relative errors of one seeded case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Discriminator loss w.r.t. discriminator parameters.
    pub disc_wrt_disc: f64,
    /// Discriminator loss w.r.t. extractor parameters.
    pub disc_wrt_features: f64,
    /// Classification loss w.r.t. classifier and extractor parameters.
    pub cls: f64,
}

impl GradCheck {
    pub fn max(&self) -> f64 {
        self.disc_wrt_disc.max(self.disc_wrt_features).max(self.cls)
    }
}

/// `|a - b| / max(|a| + |b|, 1e-8)` over whole parameter vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-8)
}

#[derive(Clone, Copy)]
enum Group {
    Extractors,
    Classifiers,
    Discriminators,
}

fn nets(bundle: &mut ModelBundle, g: Group) -> &mut Vec<Mlp> {
    match g {
        Group::Extractors => &mut bundle.extractors,
        Group::Classifiers => &mut bundle.classifiers,
        Group::Discriminators => &mut bundle.discriminators,
    }
}

fn numeric_grad(
    bundle: &ModelBundle,
    group: Group,
    loss: &dyn Fn(&ModelBundle) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut work = bundle.clone();
    let mut out = Vec::new();
    for n in 0..nets(&mut work, group).len() {
        for i in 0..nets(&mut work, group)[n].num_params() {
            let orig = *param_mut(&mut nets(&mut work, group)[n], i);
            *param_mut(&mut nets(&mut work, group)[n], i) = orig + STEP;
            let up = loss(&work)?;
            *param_mut(&mut nets(&mut work, group)[n], i) = orig - STEP;
            let down = loss(&work)?;
            *param_mut(&mut nets(&mut work, group)[n], i) = orig;
            out.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(out)
}

fn flat(grads: &[MlpGrads]) -> Vec<f64> {
    grads.iter().flat_map(MlpGrads::flat).collect()
}

fn random_sample<R: Rng>(cfg: &ModelConfig, domain: Domain, rng: &mut R) -> RegionSample {
    let patches = std::array::from_fn(|_| {
        (0..cfg.d_patch)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect()
    });
    RegionSample {
        patches,
        label: (domain == Domain::Source).then(|| rng.random_range(0..cfg.num_classes)),
        domain,
    }
}

/// Build a small random model and batch from `seed` and compare gradients.
pub fn check_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        d_patch: 3,
        d_f: 3,
        num_classes: 4,
        hidden: 4,
    };
    let mut bundle = ModelBundle::new(cfg, &mut rng)?;
    // zero biases put ReLU units exactly on their kink for all-zero inputs
    for net in bundle
        .extractors
        .iter_mut()
        .chain(&mut bundle.classifiers)
        .chain(&mut bundle.discriminators)
    {
        for layer in net.layers_mut() {
            layer
                .bias
                .values_mut()
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    let ns = rng.random_range(1..4);
    let nt = rng.random_range(1..4);
    let source: Vec<RegionSample> = (0..ns)
        .map(|_| random_sample(&cfg, Domain::Source, &mut rng))
        .collect();
    let target: Vec<RegionSample> = (0..nt)
        .map(|_| random_sample(&cfg, Domain::Target, &mut rng))
        .collect();
    let pseudo: Vec<PseudoLabelSet> = (0..nt)
        .map(|_| PseudoLabelSet {
            labels: std::array::from_fn(|_| {
                rng.random_bool(0.6)
                    .then(|| rng.random_range(0..cfg.num_classes))
            }),
        })
        .collect();
    let weights: [f64; NUM_VIEWS] = if rng.random_bool(0.5) {
        DEFAULT_BALANCE
    } else {
        std::array::from_fn(|_| rng.random_range(0.0..3.0))
    };
    let s: Vec<&RegionSample> = source.iter().collect();
    let t: Vec<&RegionSample> = target.iter().collect();

    let disc = |b: &ModelBundle| discriminator_objective(b, &s, &t, &weights).map(|(l, _)| l);
    let (_, g_disc) = discriminator_objective(&bundle, &s, &t, &weights)?;
    let (_, g_feat) = adversarial_feature_objective(&bundle, &s, &t, &weights)?;
    let disc_wrt_disc = relative_error(
        &flat(&g_disc.discriminators),
        &numeric_grad(&bundle, Group::Discriminators, &disc)?,
    );
    let disc_wrt_features = relative_error(
        &flat(&g_feat.extractors),
        &numeric_grad(&bundle, Group::Extractors, &disc)?,
    );

    let cls = |b: &ModelBundle| {
        classification_objective(b, &s, Some((&t, &pseudo)), &weights).map(|(terms, _)| terms.loss)
    };
    let (_, g_cls) = classification_objective(&bundle, &s, Some((&t, &pseudo)), &weights)?;
    let mut analytic = flat(&g_cls.classifiers);
    analytic.extend(flat(&g_cls.extractors));
    let mut numeric = numeric_grad(&bundle, Group::Classifiers, &cls)?;
    numeric.extend(numeric_grad(&bundle, Group::Extractors, &cls)?);
    Ok(GradCheck {
        disc_wrt_disc,
        disc_wrt_features,
        cls: relative_error(&analytic, &numeric),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn fifty_seeded_cases_agree_with_finite_differences() {
        for seed in 0..50 {
            let c = check_case(seed).unwrap();
            assert!(c.max() < 1e-4, "seed {seed}: {c:?}");
        }
    }
}

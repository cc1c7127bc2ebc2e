//! Training losses and the two-player update.
//!
//! * discriminator loss: per-view binary cross-entropy (source = 1,
//!   target = 0), batch-averaged and weighted by `beta`;
//! * classification loss: per-view cross-entropy on labeled source samples
//!   plus per-view pseudo labels on target samples, weighted by `eta`.
//!
//! One [`adversarial_round`] takes a discriminator step, labels the weakly
//! augmented target batch, then takes a feature/classifier step on the
//! classification loss minus the discriminator loss.

use rand::Rng;

use crate::autodiff::{
    binary_cross_entropy, cross_entropy, mlp_backward, sgd_step, sigmoid, Mlp, MlpGrads,
    OptimState, Tensor,
};
use crate::error::{Error, Result};
use crate::fplg::{PseudoLabelSet, PseudoState};
use crate::model::{FeatureBatch, FeatureSet, ModelBundle, NUM_VIEWS};
use crate::synthdata::{Augmenter, RegionSample};

pub const DEFAULT_BALANCE: [f64; NUM_VIEWS] = [7.0, 1.0, 1.0, 1.0, 1.0, 1.0, 7.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceWeights {
    pub beta: [f64; NUM_VIEWS],
    pub eta: [f64; NUM_VIEWS],
}

impl Default for BalanceWeights {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BALANCE,
            eta: DEFAULT_BALANCE,
        }
    }
}

impl BalanceWeights {
    pub fn validate(&self) -> Result<()> {
        if self
            .beta
            .iter()
            .chain(&self.eta)
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::arg("balance weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub disc_loss: f64,
    pub cls_loss_source: f64,
    pub cls_loss_target: f64,
    pub disc_per_view: [f64; NUM_VIEWS],
    pub cls_source_per_view: [f64; NUM_VIEWS],
    pub cls_target_per_view: [f64; NUM_VIEWS],
}

/// Discriminator loss with its gradients w.r.t. discriminator parameters and
/// w.r.t. the input features of both batches.
#[derive(Clone, Debug)]
pub struct DiscriminatorTerms {
    pub loss: f64,
    pub per_view: [f64; NUM_VIEWS],
    pub disc_grads: Vec<MlpGrads>,
    pub source_feature_grads: Vec<Tensor>,
    pub target_feature_grads: Vec<Tensor>,
}

/// Classification loss with gradients w.r.t. classifier parameters and
/// input features.
#[derive(Clone, Debug)]
pub struct ClassificationTerms {
    pub loss: f64,
    pub source_loss: f64,
    pub target_loss: f64,
    pub source_per_view: [f64; NUM_VIEWS],
    pub target_per_view: [f64; NUM_VIEWS],
    pub cls_grads: Vec<MlpGrads>,
    pub source_feature_grads: Vec<Tensor>,
    pub target_feature_grads: Option<Vec<Tensor>>,
}

fn rows_of(views: &[Tensor]) -> Result<usize> {
    if views.len() != NUM_VIEWS {
        return Err(Error::dim(format!("need {NUM_VIEWS} view tensors")));
    }
    let (n, _) = views[0].batch_dims()?;
    for v in views {
        if v.batch_dims()?.0 != n {
            return Err(Error::dim("views disagree on batch size"));
        }
    }
    Ok(n)
}

/// One domain's half of the discriminator loss on view `v`: returns
/// `(mean BCE, param grads, feature grads)` already scaled by `weight / n`.
fn bce_view(
    net: &Mlp,
    features: &Tensor,
    is_source: bool,
    weight: f64,
) -> Result<(f64, MlpGrads, Tensor)> {
    let acts = net.forward(features)?;
    let logits = acts.last().expect("nonempty").values();
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut out_grad = Vec::with_capacity(logits.len());
    for &z in logits {
        let p = sigmoid(z);
        let (l, dp) = binary_cross_entropy(p, is_source);
        loss += l;
        out_grad.push(weight * dp * p * (1.0 - p) / n);
    }
    let shape = acts.last().expect("nonempty").shape().to_vec();
    let (g, fg) = mlp_backward(net, &acts, &Tensor::new(shape, out_grad)?)?;
    Ok((loss / n, g, fg))
}

/// Weighted discriminator loss over view-major feature batches.
pub fn discriminator_terms(
    bundle: &ModelBundle,
    source: &[Tensor],
    target: &[Tensor],
    beta: &[f64; NUM_VIEWS],
) -> Result<DiscriminatorTerms> {
    if rows_of(source)? == 0 || rows_of(target)? == 0 {
        return Err(Error::arg("discriminator loss needs nonempty batches"));
    }
    let mut out = DiscriminatorTerms {
        loss: 0.0,
        per_view: [0.0; NUM_VIEWS],
        disc_grads: Vec::with_capacity(NUM_VIEWS),
        source_feature_grads: Vec::with_capacity(NUM_VIEWS),
        target_feature_grads: Vec::with_capacity(NUM_VIEWS),
    };
    for v in 0..NUM_VIEWS {
        let net = &bundle.discriminators[v];
        let (ls, mut g, fs) = bce_view(net, &source[v], true, beta[v])?;
        let (lt, gt, ft) = bce_view(net, &target[v], false, beta[v])?;
        g.add_assign(&gt);
        out.per_view[v] = ls + lt;
        out.loss += beta[v] * (ls + lt);
        out.disc_grads.push(g);
        out.source_feature_grads.push(fs);
        out.target_feature_grads.push(ft);
    }
    Ok(out)
}

fn views_from_sets(sets: &[&FeatureSet]) -> Result<Vec<Tensor>> {
    if sets.is_empty() {
        return Err(Error::arg("empty feature batch"));
    }
    (0..NUM_VIEWS)
        .map(|v| {
            let width = sets[0].view(v).len();
            let mut values = Vec::with_capacity(sets.len() * width);
            for s in sets {
                if s.view(v).len() != width {
                    return Err(Error::dim(format!(
                        "view {v} widths differ across the batch"
                    )));
                }
                values.extend_from_slice(s.view(v));
            }
            Tensor::matrix(sets.len(), width, values)
        })
        .collect()
}

/// Discriminator loss on per-sample feature sets.
pub fn discriminator_loss(
    bundle: &ModelBundle,
    source_features: &[FeatureSet],
    target_features: &[FeatureSet],
    beta: &[f64; NUM_VIEWS],
) -> Result<DiscriminatorTerms> {
    if source_features.is_empty() || target_features.is_empty() {
        return Err(Error::arg("discriminator loss needs nonempty batches"));
    }
    let s = views_from_sets(&source_features.iter().collect::<Vec<_>>())?;
    let t = views_from_sets(&target_features.iter().collect::<Vec<_>>())?;
    discriminator_terms(bundle, &s, &t, beta)
}

/// Mean cross-entropy of `net` over the rows whose label is `Some`, weighted;
/// unlabeled rows get zero gradient. Returns `None` when no row is labeled.
fn ce_view(
    net: &Mlp,
    features: &Tensor,
    labels: &[Option<usize>],
    weight: f64,
) -> Result<Option<(f64, MlpGrads, Tensor)>> {
    let m = labels.iter().filter(|l| l.is_some()).count();
    if m == 0 {
        return Ok(None);
    }
    let acts = net.forward(features)?;
    let out = acts.last().expect("nonempty");
    let (n, c) = out.batch_dims()?;
    if n != labels.len() {
        return Err(Error::dim("label count does not match batch"));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * c];
    for (i, label) in labels.iter().enumerate() {
        if let Some(y) = label {
            let (l, g) = cross_entropy(out.row(i), *y)?;
            loss += l;
            for (dst, gv) in grad[i * c..(i + 1) * c].iter_mut().zip(g) {
                *dst = weight * gv / m as f64;
            }
        }
    }
    let (pg, fg) = mlp_backward(net, &acts, &Tensor::new(out.shape().to_vec(), grad)?)?;
    Ok(Some((loss / m as f64, pg, fg)))
}

/// Weighted classification loss over view-major feature batches. Target
/// terms are skipped per view wherever that view's pseudo label failed.
pub fn classification_terms(
    bundle: &ModelBundle,
    source: &[Tensor],
    source_labels: &[usize],
    target: Option<(&[Tensor], &[PseudoLabelSet])>,
    eta: &[f64; NUM_VIEWS],
) -> Result<ClassificationTerms> {
    let ns = rows_of(source)?;
    if ns != source_labels.len() || ns == 0 {
        return Err(Error::arg(
            "source batch and labels must be nonempty and aligned",
        ));
    }
    let c = bundle.num_classes();
    if let Some(bad) = source_labels.iter().find(|&&y| y >= c) {
        return Err(Error::arg(format!("source label {bad} out of range")));
    }
    let src_labels: Vec<Option<usize>> = source_labels.iter().map(|&y| Some(y)).collect();
    let mut out = ClassificationTerms {
        loss: 0.0,
        source_loss: 0.0,
        target_loss: 0.0,
        source_per_view: [0.0; NUM_VIEWS],
        target_per_view: [0.0; NUM_VIEWS],
        cls_grads: Vec::with_capacity(NUM_VIEWS),
        source_feature_grads: Vec::with_capacity(NUM_VIEWS),
        target_feature_grads: None,
    };
    if let Some((views, sets)) = target {
        if rows_of(views)? != sets.len() {
            return Err(Error::dim("pseudo labels do not match target batch"));
        }
        if sets.iter().flat_map(|s| s.labels).flatten().any(|y| y >= c) {
            return Err(Error::arg("pseudo label out of range"));
        }
        out.target_feature_grads = Some(Vec::with_capacity(NUM_VIEWS));
    }
    for v in 0..NUM_VIEWS {
        let net = &bundle.classifiers[v];
        let (ls, mut g, fs) =
            ce_view(net, &source[v], &src_labels, eta[v])?.expect("source labeled");
        out.source_per_view[v] = ls;
        out.source_loss += eta[v] * ls;
        out.source_feature_grads.push(fs);
        if let Some((views, sets)) = target {
            let labels: Vec<Option<usize>> = sets.iter().map(|s| s.labels[v]).collect();
            let fg = match ce_view(net, &views[v], &labels, eta[v])? {
                Some((lt, gt, ft)) => {
                    out.target_per_view[v] = lt;
                    out.target_loss += eta[v] * lt;
                    g.add_assign(&gt);
                    ft
                }
                None => Tensor::zeros(views[v].shape().to_vec()),
            };
            out.target_feature_grads
                .as_mut()
                .expect("set above")
                .push(fg);
        }
        out.cls_grads.push(g);
    }
    out.loss = out.source_loss + out.target_loss;
    Ok(out)
}

/// Classification loss on per-sample feature sets.
pub fn classification_loss(
    bundle: &ModelBundle,
    labeled_source: &[(FeatureSet, usize)],
    pseudo_target: &[(FeatureSet, PseudoLabelSet)],
    eta: &[f64; NUM_VIEWS],
) -> Result<ClassificationTerms> {
    let s_sets: Vec<&FeatureSet> = labeled_source.iter().map(|(f, _)| f).collect();
    let s_labels: Vec<usize> = labeled_source.iter().map(|(_, y)| *y).collect();
    let s = views_from_sets(&s_sets)?;
    if pseudo_target.is_empty() {
        return classification_terms(bundle, &s, &s_labels, None, eta);
    }
    let t_sets: Vec<&FeatureSet> = pseudo_target.iter().map(|(f, _)| f).collect();
    let t_labels: Vec<PseudoLabelSet> = pseudo_target.iter().map(|(_, p)| *p).collect();
    let t = views_from_sets(&t_sets)?;
    classification_terms(bundle, &s, &s_labels, Some((&t, &t_labels)), eta)
}

/// Gradients for every network in a bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleGrads {
    pub extractors: Vec<MlpGrads>,
    pub classifiers: Vec<MlpGrads>,
    pub discriminators: Vec<MlpGrads>,
}

impl BundleGrads {
    pub fn zeros_like(bundle: &ModelBundle) -> Self {
        Self {
            extractors: bundle.extractors.iter().map(MlpGrads::zeros_like).collect(),
            classifiers: bundle
                .classifiers
                .iter()
                .map(MlpGrads::zeros_like)
                .collect(),
            discriminators: bundle
                .discriminators
                .iter()
                .map(MlpGrads::zeros_like)
                .collect(),
        }
    }
}

fn add_into(dst: &mut [MlpGrads], src: &[MlpGrads]) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.add_assign(s);
    }
}

fn labels_of(samples: &[&RegionSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::arg("source sample without a label"))
        })
        .collect()
}

/// Discriminator loss from raw samples, with discriminator gradients only.
pub fn discriminator_objective(
    bundle: &ModelBundle,
    source: &[&RegionSample],
    target: &[&RegionSample],
    beta: &[f64; NUM_VIEWS],
) -> Result<(f64, BundleGrads)> {
    let sb = bundle.extract_batch(source)?;
    let tb = bundle.extract_batch(target)?;
    let terms = discriminator_terms(bundle, &sb.views, &tb.views, beta)?;
    let mut grads = BundleGrads::zeros_like(bundle);
    grads.discriminators = terms.disc_grads;
    Ok((terms.loss, grads))
}

/// Discriminator loss from raw samples with its gradient w.r.t. the
/// extractors (discriminator parameters held fixed).
pub fn adversarial_feature_objective(
    bundle: &ModelBundle,
    source: &[&RegionSample],
    target: &[&RegionSample],
    beta: &[f64; NUM_VIEWS],
) -> Result<(f64, BundleGrads)> {
    let sb = bundle.extract_batch(source)?;
    let tb = bundle.extract_batch(target)?;
    let terms = discriminator_terms(bundle, &sb.views, &tb.views, beta)?;
    let mut grads = BundleGrads::zeros_like(bundle);
    let gs = bundle.extractor_backward(&sb, &terms.source_feature_grads)?;
    let gt = bundle.extractor_backward(&tb, &terms.target_feature_grads)?;
    add_into(&mut grads.extractors, &gs);
    add_into(&mut grads.extractors, &gt);
    Ok((terms.loss, grads))
}

/// Classification loss from raw samples, with extractor and classifier
/// gradients.
pub fn classification_objective(
    bundle: &ModelBundle,
    source: &[&RegionSample],
    target: Option<(&[&RegionSample], &[PseudoLabelSet])>,
    eta: &[f64; NUM_VIEWS],
) -> Result<(ClassificationTerms, BundleGrads)> {
    let labels = labels_of(source)?;
    let sb = bundle.extract_batch(source)?;
    let tb = match target {
        Some((samples, _)) => Some(bundle.extract_batch(samples)?),
        None => None,
    };
    let terms = classification_terms(
        bundle,
        &sb.views,
        &labels,
        tb.as_ref()
            .zip(target)
            .map(|(b, (_, p))| (b.views.as_slice(), p)),
        eta,
    )?;
    let mut grads = BundleGrads::zeros_like(bundle);
    grads.classifiers = terms.cls_grads.clone();
    add_into(
        &mut grads.extractors,
        &bundle.extractor_backward(&sb, &terms.source_feature_grads)?,
    );
    if let (Some(tb), Some(fg)) = (&tb, &terms.target_feature_grads) {
        add_into(&mut grads.extractors, &bundle.extractor_backward(tb, fg)?);
    }
    Ok((terms, grads))
}

/// Optimizer state for the three network groups.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub extractors: Vec<OptimState>,
    pub classifiers: Vec<OptimState>,
    pub discriminators: Vec<OptimState>,
}

impl Optimizers {
    pub fn new(
        bundle: &ModelBundle,
        lr_fg: f64,
        lr_d: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        let mk = |nets: &[Mlp], lr: f64| {
            nets.iter()
                .map(|n| OptimState::new(n, lr, momentum, weight_decay))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            extractors: mk(&bundle.extractors, lr_fg)?,
            classifiers: mk(&bundle.classifiers, lr_fg)?,
            discriminators: mk(&bundle.discriminators, lr_d)?,
        })
    }

    pub fn set_lr_fg(&mut self, lr: f64) {
        for s in self.extractors.iter_mut().chain(&mut self.classifiers) {
            s.learning_rate = lr;
        }
    }

    pub fn set_lr_d(&mut self, lr: f64) {
        for s in &mut self.discriminators {
            s.learning_rate = lr;
        }
    }
}

fn step_all(nets: &mut [Mlp], grads: &[MlpGrads], states: &mut [OptimState]) -> Result<()> {
    for ((net, g), s) in nets.iter_mut().zip(grads).zip(states) {
        sgd_step(net, g, s)?;
    }
    Ok(())
}

pub fn step_discriminators(
    bundle: &mut ModelBundle,
    grads: &[MlpGrads],
    opt: &mut Optimizers,
) -> Result<()> {
    step_all(&mut bundle.discriminators, grads, &mut opt.discriminators)
}

pub fn step_features_and_classifiers(
    bundle: &mut ModelBundle,
    extractor_grads: &[MlpGrads],
    classifier_grads: &[MlpGrads],
    opt: &mut Optimizers,
) -> Result<()> {
    step_all(&mut bundle.extractors, extractor_grads, &mut opt.extractors)?;
    step_all(
        &mut bundle.classifiers,
        classifier_grads,
        &mut opt.classifiers,
    )
}

/// One source-only step on the classification loss (first training stage).
pub fn source_round(
    bundle: &mut ModelBundle,
    source: &[&RegionSample],
    eta: &[f64; NUM_VIEWS],
    opt: &mut Optimizers,
) -> Result<BatchLosses> {
    let (terms, grads) = classification_objective(bundle, source, None, eta)?;
    step_features_and_classifiers(bundle, &grads.extractors, &grads.classifiers, opt)?;
    Ok(BatchLosses {
        cls_loss_source: terms.source_loss,
        cls_source_per_view: terms.source_per_view,
        ..BatchLosses::default()
    })
}

/// Logits of every classifier for every row of a feature batch:
/// `out[i][v]` is view `v`'s logit row for sample `i`.
pub fn batch_logits(bundle: &ModelBundle, batch: &FeatureBatch) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = batch.len();
    let mut out = vec![Vec::with_capacity(NUM_VIEWS); n];
    for (net, views) in bundle.classifiers.iter().zip(&batch.views) {
        let logits = net.predict(views)?;
        for (i, row) in out.iter_mut().enumerate() {
            row.push(logits.row(i).to_vec());
        }
    }
    Ok(out)
}

/// What one adversarial round produced.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub losses: BatchLosses,
    /// Pseudo labels for each target sample; all failures when labeling is off.
    pub pseudo: Vec<PseudoLabelSet>,
}

/// One alternation of the two-player game:
///
/// 1. a discriminator step on source vs weakly augmented target features;
/// 2. pseudo labeling of the weak target batch (only if `pseudo` is given),
///    which updates the counters;
/// 3. a feature/classifier step on the classification loss over source and
///    strongly augmented target, minus the discriminator loss on the same
///    features.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_round<R: Rng + ?Sized>(
    bundle: &mut ModelBundle,
    source: &[&RegionSample],
    target: &[&RegionSample],
    weights: &BalanceWeights,
    opt: &mut Optimizers,
    pseudo: Option<&mut PseudoState>,
    augmenter: &Augmenter,
    rng: &mut R,
) -> Result<RoundOutcome> {
    if let Some(state) = pseudo.as_deref() {
        if state.is_frozen() {
            return Err(Error::Contract(
                "adversarial round needs a live (unfrozen) pseudo-label state".into(),
            ));
        }
    }
    let labels = labels_of(source)?;
    let weak: Vec<RegionSample> = target.iter().map(|s| augmenter.weak(s, rng)).collect();
    let strong: Vec<RegionSample> = target.iter().map(|s| augmenter.strong(s, rng)).collect();
    let weak_refs: Vec<&RegionSample> = weak.iter().collect();
    let strong_refs: Vec<&RegionSample> = strong.iter().collect();

    // (a) discriminator step
    let sb = bundle.extract_batch(source)?;
    let wb = bundle.extract_batch(&weak_refs)?;
    let disc = discriminator_terms(bundle, &sb.views, &wb.views, &weights.beta)?;
    step_discriminators(bundle, &disc.disc_grads, opt)?;

    // (b) pseudo labels from the weak view
    let sets = match pseudo {
        Some(state) => batch_logits(bundle, &wb)?
            .iter()
            .map(|rows| state.gen_set(rows))
            .collect::<Result<Vec<_>>>()?,
        None => vec![PseudoLabelSet::NONE; target.len()],
    };

    // (c) features + classifiers: classification loss minus discriminator loss
    let tb = bundle.extract_batch(&strong_refs)?;
    let cls = classification_terms(
        bundle,
        &sb.views,
        &labels,
        Some((&tb.views, &sets)),
        &weights.eta,
    )?;
    let adv = discriminator_terms(bundle, &sb.views, &tb.views, &weights.beta)?;
    let combine = |cls_g: &[Tensor], adv_g: &[Tensor]| -> Result<Vec<Tensor>> {
        cls_g
            .iter()
            .zip(adv_g)
            .map(|(c, a)| {
                let v = c
                    .values()
                    .iter()
                    .zip(a.values())
                    .map(|(x, y)| x - y)
                    .collect();
                Tensor::new(c.shape().to_vec(), v)
            })
            .collect()
    };
    let src_fg = combine(&cls.source_feature_grads, &adv.source_feature_grads)?;
    let tgt_fg = combine(
        cls.target_feature_grads.as_ref().expect("target present"),
        &adv.target_feature_grads,
    )?;
    let mut ex_grads = bundle.extractor_backward(&sb, &src_fg)?;
    add_into(&mut ex_grads, &bundle.extractor_backward(&tb, &tgt_fg)?);
    step_features_and_classifiers(bundle, &ex_grads, &cls.cls_grads, opt)?;

    Ok(RoundOutcome {
        losses: BatchLosses {
            disc_loss: disc.loss,
            cls_loss_source: cls.source_loss,
            cls_loss_target: cls.target_loss,
            disc_per_view: disc.per_view,
            cls_source_per_view: cls.source_per_view,
            cls_target_per_view: cls.target_per_view,
        },
        pseudo: sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params_flat;
    use crate::fplg::ThresholdPolicy;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate, DatasetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_patch: 4,
            d_f: 3,
            num_classes: 7,
            hidden: 5,
        }
    }

    fn data(seed: u64) -> (Vec<RegionSample>, Vec<RegionSample>) {
        let spec = DatasetSpec {
            d_patch: 4,
            source_count: 8,
            target_count: 8,
            class_means: DatasetSpec::random_means(7, 4, 1.0, seed),
            shift: crate::synthdata::DomainShift {
                offset: vec![0.3; 4],
                angle: 0.5,
            },
            ..DatasetSpec::default_shift(seed)
        };
        let (s, t) = generate(&spec, seed).unwrap();
        (s.samples().to_vec(), t.samples().to_vec())
    }

    fn zero_last_layers(nets: &mut [Mlp]) {
        for n in nets {
            let last = n.layers_mut().last_mut().unwrap();
            last.weight.values_mut().iter_mut().for_each(|v| *v = 0.0);
            last.bias.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn half_probability_discriminators_give_two_ln2_per_unit_beta() {
        let mut b = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        zero_last_layers(&mut b.discriminators);
        let (s, t) = data(1);
        let fs: Vec<FeatureSet> = s.iter().map(|x| b.extract(x).unwrap()).collect();
        let ft: Vec<FeatureSet> = t.iter().map(|x| b.extract(x).unwrap()).collect();
        let d = discriminator_loss(&b, &fs, &ft, &DEFAULT_BALANCE).unwrap();
        let want = 19.0 * 2.0 * 2f64.ln();
        assert!((d.loss - want).abs() < 1e-12, "{}", d.loss);
        assert!((want - 26.340).abs() < 1e-3);
        assert!(discriminator_loss(&b, &[], &ft, &DEFAULT_BALANCE).is_err());
    }

    #[test]
    fn perfect_discrimination_has_vanishing_loss() {
        let mut b = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        zero_last_layers(&mut b.discriminators);
        let (s, _) = data(1);
        let fs: Vec<FeatureSet> = s.iter().map(|x| b.extract(x).unwrap()).collect();
        // source-only features scored by a constant +40 logit: loss on source ~0;
        // a separate -40 bundle scores the target side.
        let mut hi = b.clone();
        for d in &mut hi.discriminators {
            d.layers_mut()[1].bias.values_mut()[0] = 40.0;
        }
        let src_side = discriminator_loss(&hi, &fs, &fs, &DEFAULT_BALANCE).unwrap();
        let src_only: f64 = (0..NUM_VIEWS)
            .map(|v| {
                DEFAULT_BALANCE[v]
                    * fs.iter()
                        .map(|f| binary_cross_entropy(hi.discriminate_all(f).unwrap()[v], true).0)
                        .sum::<f64>()
                    / fs.len() as f64
            })
            .sum();
        assert!(src_only < 1e-9);
        assert!(src_side.loss > 100.0);
    }

    #[test]
    fn all_failed_pseudo_labels_reduce_to_source_loss() {
        let b = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (s, t) = data(3);
        let src: Vec<(FeatureSet, usize)> = s
            .iter()
            .map(|x| (b.extract(x).unwrap(), x.label.unwrap()))
            .collect();
        let tgt: Vec<(FeatureSet, PseudoLabelSet)> = t
            .iter()
            .map(|x| (b.extract(x).unwrap(), PseudoLabelSet::NONE))
            .collect();
        let with = classification_loss(&b, &src, &tgt, &DEFAULT_BALANCE).unwrap();
        let without = classification_loss(&b, &src, &[], &DEFAULT_BALANCE).unwrap();
        assert_eq!(with.loss, without.loss);
        assert_eq!(with.target_loss, 0.0);
        for (a, c) in with.cls_grads.iter().zip(&without.cls_grads) {
            assert_eq!(a, c);
        }
    }

    #[test]
    fn uniform_classifiers_single_sample_loss() {
        let mut b = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        zero_last_layers(&mut b.classifiers);
        let (s, _) = data(5);
        let src = vec![(b.extract(&s[0]).unwrap(), s[0].label.unwrap())];
        let l = classification_loss(&b, &src, &[], &DEFAULT_BALANCE).unwrap();
        assert!((l.loss - 19.0 * 7f64.ln()).abs() < 1e-12);
        assert!((l.loss - 36.97).abs() < 0.01);
    }

    #[test]
    fn mixed_batch_matches_hand_summed_table() {
        let b = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (s, t) = data(7);
        let src: Vec<(FeatureSet, usize)> = s[..2]
            .iter()
            .map(|x| (b.extract(x).unwrap(), x.label.unwrap()))
            .collect();
        let p0 = PseudoLabelSet {
            labels: [Some(1), None, Some(3), None, None, Some(0), Some(6)],
        };
        let p1 = PseudoLabelSet {
            labels: [Some(2), Some(2), None, None, None, None, Some(6)],
        };
        let tgt = vec![
            (b.extract(&t[0]).unwrap(), p0),
            (b.extract(&t[1]).unwrap(), p1),
        ];
        let got = classification_loss(&b, &src, &tgt, &DEFAULT_BALANCE).unwrap();

        // Hand table: per view, CE of each entry via the direct log-sum-exp.
        let ce = |logits: &[f64], y: usize| {
            let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            lse - logits[y]
        };
        let mut want = 0.0;
        for v in 0..NUM_VIEWS {
            let src_ce: f64 = src
                .iter()
                .map(|(f, y)| ce(&b.classify_all(f).unwrap()[v], *y))
                .sum::<f64>()
                / 2.0;
            let tgt_entries: Vec<f64> = tgt
                .iter()
                .filter_map(|(f, p)| p.labels[v].map(|y| ce(&b.classify_all(f).unwrap()[v], y)))
                .collect();
            let tgt_ce = if tgt_entries.is_empty() {
                0.0
            } else {
                tgt_entries.iter().sum::<f64>() / tgt_entries.len() as f64
            };
            want += DEFAULT_BALANCE[v] * (src_ce + tgt_ce);
        }
        assert!((got.loss - want).abs() < 1e-10, "{} vs {want}", got.loss);
    }

    fn optimizers(b: &ModelBundle) -> Optimizers {
        Optimizers::new(b, 0.05, 0.05, 0.9, 5e-4).unwrap()
    }

    #[test]
    fn discriminator_step_leaves_features_and_classifiers_alone() {
        let mut b = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let before = b.clone();
        let (s, t) = data(9);
        let sr: Vec<&RegionSample> = s.iter().collect();
        let tr: Vec<&RegionSample> = t.iter().collect();
        let (_, g) = discriminator_objective(&b, &sr, &tr, &DEFAULT_BALANCE).unwrap();
        let mut opt = optimizers(&b);
        step_discriminators(&mut b, &g.discriminators, &mut opt).unwrap();
        assert_eq!(b.extractors, before.extractors);
        assert_eq!(b.classifiers, before.classifiers);
        assert_ne!(b.discriminators, before.discriminators);
    }

    #[test]
    fn feature_step_leaves_discriminators_alone() {
        let mut b = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let (s, t) = data(11);
        let sr: Vec<&RegionSample> = s.iter().collect();
        let tr: Vec<&RegionSample> = t.iter().collect();
        let mut opt = optimizers(&b);
        let mut state = PseudoState::new(7, ThresholdPolicy::ImprovedDynamic, 0.95).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Replay of the round: after the D step, the remaining update must not touch D.
        let mut replay = b.clone();
        let mut replay_opt = opt.clone();
        adversarial_round(
            &mut b,
            &sr,
            &tr,
            &BalanceWeights::default(),
            &mut opt,
            Some(&mut state),
            &Augmenter::default(),
            &mut rng,
        )
        .unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let aug = Augmenter::default();
        let weak: Vec<RegionSample> = t.iter().map(|x| aug.weak(x, &mut rng2)).collect();
        let wr: Vec<&RegionSample> = weak.iter().collect();
        let (_, g) = discriminator_objective(&replay, &sr, &wr, &DEFAULT_BALANCE).unwrap();
        step_discriminators(&mut replay, &g.discriminators, &mut replay_opt).unwrap();
        assert_eq!(b.discriminators, replay.discriminators);
    }

    #[test]
    fn round_matches_scripted_replay_of_sub_ops() {
        let bundle = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let (s, t) = data(13);
        let sr: Vec<&RegionSample> = s.iter().collect();
        let tr: Vec<&RegionSample> = t.iter().collect();
        let w = BalanceWeights::default();
        let aug = Augmenter::default();

        let mut b1 = bundle.clone();
        let mut opt1 = optimizers(&b1);
        // low theta so some labels are produced
        let mut st1 = PseudoState::new(7, ThresholdPolicy::ImprovedDynamic, 0.2).unwrap();
        let out = adversarial_round(
            &mut b1,
            &sr,
            &tr,
            &w,
            &mut opt1,
            Some(&mut st1),
            &aug,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();

        let mut b2 = bundle.clone();
        let mut opt2 = optimizers(&b2);
        let mut st2 = PseudoState::new(7, ThresholdPolicy::ImprovedDynamic, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let weak: Vec<RegionSample> = t.iter().map(|x| aug.weak(x, &mut rng)).collect();
        let strong: Vec<RegionSample> = t.iter().map(|x| aug.strong(x, &mut rng)).collect();
        let wr: Vec<&RegionSample> = weak.iter().collect();
        let str_: Vec<&RegionSample> = strong.iter().collect();
        // (a)
        let (dl, dg) = discriminator_objective(&b2, &sr, &wr, &w.beta).unwrap();
        step_discriminators(&mut b2, &dg.discriminators, &mut opt2).unwrap();
        // (b)
        let sets: Vec<PseudoLabelSet> = weak
            .iter()
            .map(|x| {
                let fs = b2.extract(x).unwrap();
                st2.gen_set(&b2.classify_all(&fs).unwrap()).unwrap()
            })
            .collect();
        // (c)
        let (ct, cg) = classification_objective(&b2, &sr, Some((&str_, &sets)), &w.eta).unwrap();
        let (_, ag) = adversarial_feature_objective(&b2, &sr, &str_, &w.beta).unwrap();
        let mut ex = cg.extractors.clone();
        for (e, a) in ex.iter_mut().zip(&ag.extractors) {
            let mut neg = a.clone();
            neg.scale(-1.0);
            e.add_assign(&neg);
        }
        step_features_and_classifiers(&mut b2, &ex, &cg.classifiers, &mut opt2).unwrap();

        assert_eq!(out.pseudo, sets);
        assert!(sets.iter().any(|p| p.successes() > 0));
        assert_eq!(st1, st2);
        assert!((out.losses.disc_loss - dl).abs() < 1e-12);
        assert!((out.losses.cls_loss_source - ct.source_loss).abs() < 1e-12);
        assert!((out.losses.cls_loss_target - ct.target_loss).abs() < 1e-12);
        assert_eq!(b1.discriminators, b2.discriminators);
        assert_eq!(b1.classifiers, b2.classifiers);
        for (x, y) in b1.extractors.iter().zip(&b2.extractors) {
            for (p, q) in params_flat(x).iter().zip(params_flat(y)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_beta_removes_adversarial_gradient() {
        let bundle = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
        let (s, t) = data(15);
        let sr: Vec<&RegionSample> = s.iter().collect();
        let tr: Vec<&RegionSample> = t.iter().collect();
        let w = BalanceWeights {
            beta: [0.0; NUM_VIEWS],
            ..BalanceWeights::default()
        };
        let aug = Augmenter::default();
        let mut b1 = bundle.clone();
        let mut opt1 = optimizers(&b1);
        let out = adversarial_round(
            &mut b1,
            &sr,
            &tr,
            &w,
            &mut opt1,
            None,
            &aug,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(out.losses.disc_loss, 0.0);
        assert!(out.losses.disc_per_view.iter().all(|l| *l > 0.0));
        // equals a pure source classification step
        let mut b2 = bundle.clone();
        let mut opt2 = optimizers(&b2);
        source_round(&mut b2, &sr, &w.eta, &mut opt2).unwrap();
        assert_eq!(b1.extractors, b2.extractors);
        assert_eq!(b1.classifiers, b2.classifiers);
    }

    #[test]
    fn zero_eta_moves_features_only_through_adversarial_term() {
        let bundle = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
        let (s, t) = data(17);
        let sr: Vec<&RegionSample> = s.iter().collect();
        let tr: Vec<&RegionSample> = t.iter().collect();
        let w = BalanceWeights {
            eta: [0.0; NUM_VIEWS],
            ..BalanceWeights::default()
        };
        let mut b = bundle.clone();
        let mut opt = Optimizers::new(&b, 0.05, 0.05, 0.0, 0.0).unwrap();
        adversarial_round(
            &mut b,
            &sr,
            &tr,
            &w,
            &mut opt,
            None,
            &Augmenter::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(b.classifiers, bundle.classifiers);
        assert_ne!(b.extractors, bundle.extractors);
    }

    #[test]
    fn frozen_state_is_rejected() {
        let mut b = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (s, t) = data(1);
        let sr: Vec<&RegionSample> = s.iter().collect();
        let tr: Vec<&RegionSample> = t.iter().collect();
        let mut opt = optimizers(&b);
        let mut st = PseudoState::new(7, ThresholdPolicy::Static, 0.9).unwrap();
        st.freeze();
        let err = adversarial_round(
            &mut b,
            &sr,
            &tr,
            &BalanceWeights::default(),
            &mut opt,
            Some(&mut st),
            &Augmenter::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unlabeled_source_is_rejected() {
        let b = ModelBundle::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, t) = data(1);
        let tr: Vec<&RegionSample> = t.iter().collect();
        assert!(classification_objective(&b, &tr, None, &DEFAULT_BALANCE).is_err());
    }
}

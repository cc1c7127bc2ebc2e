//! Two-stage training, evaluation and the pseudo-label strategy sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{SimMode, TrainConfig};
use crate::error::{Error, Result};
use crate::fplg::{PseudoLabelSet, PseudoState, ThresholdPolicy};
use crate::glpc::{predict_strategy, score_batch, Strategy, ThresholdMatrix};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ModelBundle, ModelConfig, NUM_VIEWS};
use crate::objectives::{adversarial_round, batch_logits, source_round, BatchLosses, Optimizers};
use crate::synthdata::{self, Dataset, Domain, RegionSample};

const STREAM_INIT: u64 = 1;
const STREAM_STAGE1: u64 = 2;
const STREAM_STAGE2: u64 = 3;
const STREAM_REPLAY: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (source, target) = match (&cfg.source_data, &cfg.target_data) {
        (Some(s), Some(t)) => (synthdata::load(s)?, synthdata::load(t)?),
        _ => synthdata::generate(&cfg.dataset_spec(), cfg.seed)?,
    };
    if source.domain != Domain::Source || target.domain != Domain::Target {
        return Err(Error::Config(
            "source/target files have the wrong domain tags".into(),
        ));
    }
    if source.num_classes != target.num_classes || source.d_patch != target.d_patch {
        return Err(Error::Config(
            "source and target disagree on classes or patch size".into(),
        ));
    }
    Ok((source, target))
}

pub fn init_bundle(cfg: &TrainConfig, num_classes: usize, d_patch: usize) -> Result<ModelBundle> {
    let mc = ModelConfig {
        d_patch,
        d_f: cfg.d_f,
        num_classes,
        hidden: cfg.hidden,
    };
    ModelBundle::new(mc, &mut stream(cfg.seed, STREAM_INIT))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub stage: u8,
    pub epoch: usize,
    pub cls_source: f64,
    pub cls_target: f64,
    pub disc: f64,
}

/// Pseudo-label statistics for one pass over the target data.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoEpoch {
    pub epoch: usize,
    pub policy: ThresholdPolicy,
    pub theta: f64,
    pub decisions: u64,
    pub generated: u64,
    pub correct: u64,
    pub per_class: Vec<u64>,
}

impl PseudoEpoch {
    fn new(epoch: usize, policy: ThresholdPolicy, theta: f64, c: usize) -> Self {
        Self {
            epoch,
            policy,
            theta,
            decisions: 0,
            generated: 0,
            correct: 0,
            per_class: vec![0; c],
        }
    }

    fn record(&mut self, set: &PseudoLabelSet, truth: usize) {
        self.decisions += NUM_VIEWS as u64;
        for y in set.labels.iter().flatten() {
            self.generated += 1;
            self.per_class[*y] += 1;
            if *y == truth {
                self.correct += 1;
            }
        }
    }

    /// Share of view decisions that produced a label.
    pub fn gp(&self) -> f64 {
        ratio(self.generated, self.decisions)
    }

    /// Share of generated labels matching the hidden truth.
    pub fn rp(&self) -> f64 {
        ratio(self.correct, self.generated)
    }

    /// Per-class share of generated labels.
    pub fn cp(&self) -> Vec<f64> {
        self.per_class
            .iter()
            .map(|&n| ratio(n, self.generated))
            .collect()
    }

    pub fn classes_covered(&self) -> usize {
        self.per_class.iter().filter(|&&n| n > 0).count()
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn epoch_mean(stage: u8, epoch: usize, losses: &[BatchLosses]) -> EpochLoss {
    let n = losses.len().max(1) as f64;
    EpochLoss {
        stage,
        epoch,
        cls_source: losses.iter().map(|l| l.cls_loss_source).sum::<f64>() / n,
        cls_target: losses.iter().map(|l| l.cls_loss_target).sum::<f64>() / n,
        disc: losses.iter().map(|l| l.disc_loss).sum::<f64>() / n,
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Source-only training of extractors and classifiers.
pub fn run_stage1(
    cfg: &TrainConfig,
    bundle: &mut ModelBundle,
    source: &Dataset,
) -> Result<Vec<EpochLoss>> {
    let samples = source.samples();
    if samples.is_empty() {
        return Err(Error::arg("source dataset is empty"));
    }
    let mut rng = stream(cfg.seed, STREAM_STAGE1);
    let mut opt = Optimizers::new(
        bundle,
        cfg.lr_stage1,
        cfg.lr_stage1,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    let mut out = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 0..cfg.stage1_epochs {
        let order = shuffled(samples.len(), &mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&RegionSample> = chunk.iter().map(|&i| &samples[i]).collect();
            losses.push(source_round(bundle, &batch, &cfg.eta, &mut opt)?);
        }
        out.push(epoch_mean(1, epoch, &losses));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub state: PseudoState,
    pub losses: Vec<EpochLoss>,
    pub pseudo: Vec<PseudoEpoch>,
}

/// Adversarial adaptation with (optionally) per-view pseudo labels. The
/// returned state is frozen. `truth` is used only for the RP statistic.
pub fn run_stage2(
    cfg: &TrainConfig,
    bundle: &mut ModelBundle,
    source: &Dataset,
    target: &Dataset,
    truth: &[usize],
) -> Result<Stage2Outcome> {
    let (src, tgt) = (source.samples(), target.samples());
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::arg(
            "stage two needs nonempty source and target data",
        ));
    }
    if truth.len() != tgt.len() {
        return Err(Error::arg("truth labels do not match the target set"));
    }
    let c = bundle.num_classes();
    let mut state = PseudoState::new(c, cfg.policy, cfg.theta)?;
    let mut weights = cfg.balance();
    if !cfg.adversarial {
        weights.beta = [0.0; NUM_VIEWS];
    }
    let augmenter = cfg.augmenter();
    let mut rng = stream(cfg.seed, STREAM_STAGE2);
    let mut opt = Optimizers::new(
        bundle,
        cfg.lr_stage2_fg,
        cfg.lr_stage2_d,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    let mut losses_out = Vec::with_capacity(cfg.stage2_epochs);
    let mut pseudo_out = Vec::with_capacity(cfg.stage2_epochs);
    let mut src_order: Vec<usize> = Vec::new();
    for epoch in 0..cfg.stage2_epochs {
        if epoch == cfg.lr_decay_after {
            opt.set_lr_fg(cfg.lr_stage2_fg / 10.0);
            opt.set_lr_d(cfg.lr_stage2_d / 10.0);
        }
        let tgt_order = shuffled(tgt.len(), &mut rng);
        let mut stats = PseudoEpoch::new(epoch, cfg.policy, cfg.theta, c);
        let mut losses = Vec::new();
        for chunk in tgt_order.chunks(cfg.batch_size) {
            let mut src_idx = Vec::with_capacity(chunk.len());
            while src_idx.len() < chunk.len() {
                if src_order.is_empty() {
                    src_order = shuffled(src.len(), &mut rng);
                }
                src_idx.push(src_order.pop().expect("refilled"));
            }
            let sb: Vec<&RegionSample> = src_idx.iter().map(|&i| &src[i]).collect();
            let tb: Vec<&RegionSample> = chunk.iter().map(|&i| &tgt[i]).collect();
            let live = cfg.pseudo_labels.then_some(&mut state);
            let round = adversarial_round(
                bundle, &sb, &tb, &weights, &mut opt, live, &augmenter, &mut rng,
            )?;
            if cfg.pseudo_labels {
                for (set, &i) in round.pseudo.iter().zip(chunk) {
                    stats.record(set, truth[i]);
                }
            }
            losses.push(round.losses);
        }
        losses_out.push(epoch_mean(2, epoch, &losses));
        pseudo_out.push(stats);
    }
    state.freeze();
    Ok(Stage2Outcome {
        state,
        losses: losses_out,
        pseudo: pseudo_out,
    })
}

/// Predictions of every requested strategy over the whole target set.
pub fn predict_all(
    bundle: &ModelBundle,
    state: &PseudoState,
    target: &Dataset,
    strategies: &[Strategy],
) -> Result<Vec<Vec<usize>>> {
    let t = ThresholdMatrix::from_state(state)?;
    let refs: Vec<&RegionSample> = target.samples().iter().collect();
    let mut out = vec![Vec::with_capacity(refs.len()); strategies.len()];
    for chunk in refs.chunks(256) {
        for s in score_batch(bundle, chunk)? {
            for (preds, st) in out.iter_mut().zip(strategies) {
                preds.push(predict_strategy(*st, &s, &t)?);
            }
        }
    }
    Ok(out)
}

pub fn evaluate_run(
    bundle: &ModelBundle,
    state: &PseudoState,
    target: &Dataset,
    truth: &[usize],
    strategies: &[Strategy],
) -> Result<Vec<(Strategy, EvalReport)>> {
    predict_all(bundle, state, target, strategies)?
        .iter()
        .zip(strategies)
        .map(|(preds, st)| Ok((*st, evaluate(preds, truth, bundle.num_classes())?)))
        .collect()
}

/// Everything a training run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub losses: Vec<EpochLoss>,
    pub pseudo: Vec<PseudoEpoch>,
    pub reports: Vec<(Strategy, EvalReport)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub state: PseudoState,
    pub record: RunRecord,
}

fn hidden_truth(target: &Dataset) -> Result<Vec<usize>> {
    target
        .evaluation_labels()
        .ok_or_else(|| Error::arg("target set carries no evaluation labels"))
}

/// Both stages followed by evaluation of the configured strategies.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (source, target) = load_data(cfg)?;
    let truth = hidden_truth(&target)?;
    let mut bundle = init_bundle(cfg, source.num_classes, source.d_patch)?;
    let mut losses = run_stage1(cfg, &mut bundle, &source)?;
    let s2 = run_stage2(cfg, &mut bundle, &source, &target, &truth)?;
    losses.extend(s2.losses);
    let reports = evaluate_run(&bundle, &s2.state, &target, &truth, &cfg.strategies)?;
    Ok(TrainOutcome {
        bundle,
        state: s2.state,
        record: RunRecord {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            losses,
            pseudo: s2.pseudo,
            reports,
        },
    })
}

/// Target accuracies along the module ladder for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub seed: u64,
    pub stage1: f64,
    pub adversarial: f64,
    pub fplg: f64,
    pub full: f64,
}

impl AblationResult {
    pub const RUNGS: [&'static str; 4] = ["stage1", "+adversarial", "+FPLG", "+GLPC"];

    pub fn values(&self) -> [f64; 4] {
        [self.stage1, self.adversarial, self.fplg, self.full]
    }
}

fn accuracy_of(
    bundle: &ModelBundle,
    state: &PseudoState,
    target: &Dataset,
    truth: &[usize],
    st: Strategy,
) -> Result<f64> {
    Ok(evaluate_run(bundle, state, target, truth, &[st])?[0]
        .1
        .accuracy)
}

/// Stage one alone, then adversarial adaptation without pseudo labels, then
/// with pseudo labels, each read out through the global-local head; the last
/// rung swaps the read-out for the consistency cascade.
pub fn run_ablation(cfg: &TrainConfig) -> Result<AblationResult> {
    cfg.validate()?;
    let (source, target) = load_data(cfg)?;
    let truth = hidden_truth(&target)?;
    let mut base = init_bundle(cfg, source.num_classes, source.d_patch)?;
    run_stage1(cfg, &mut base, &source)?;
    let mut cold = PseudoState::new(base.num_classes(), cfg.policy, cfg.theta)?;
    cold.freeze();
    let stage1 = accuracy_of(&base, &cold, &target, &truth, Strategy::GLocal)?;

    let adv_cfg = TrainConfig {
        adversarial: true,
        pseudo_labels: false,
        ..cfg.clone()
    };
    let mut adv = base.clone();
    let s2 = run_stage2(&adv_cfg, &mut adv, &source, &target, &truth)?;
    let adversarial = accuracy_of(&adv, &s2.state, &target, &truth, Strategy::GLocal)?;

    let full_cfg = TrainConfig {
        adversarial: true,
        pseudo_labels: true,
        ..cfg.clone()
    };
    let mut full = base;
    let s2 = run_stage2(&full_cfg, &mut full, &source, &target, &truth)?;
    let fplg = accuracy_of(&full, &s2.state, &target, &truth, Strategy::GLocal)?;
    let glpc = accuracy_of(&full, &s2.state, &target, &truth, Strategy::Glpc)?;
    Ok(AblationResult {
        seed: cfg.seed,
        stage1,
        adversarial,
        fplg,
        full: glpc,
    })
}

/// Pseudo-label statistics of one policy/threshold cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SimCell {
    pub policy: ThresholdPolicy,
    pub theta: f64,
    pub epochs: Vec<PseudoEpoch>,
}

impl SimCell {
    pub fn last(&self) -> &PseudoEpoch {
        self.epochs.last().expect("at least one epoch")
    }

    /// Statistics pooled over every epoch of the cell.
    pub fn pooled(&self) -> PseudoEpoch {
        let c = self.epochs[0].per_class.len();
        let mut acc = PseudoEpoch::new(self.epochs.len(), self.policy, self.theta, c);
        for e in &self.epochs {
            acc.decisions += e.decisions;
            acc.generated += e.generated;
            acc.correct += e.correct;
            for (a, b) in acc.per_class.iter_mut().zip(&e.per_class) {
                *a += b;
            }
        }
        acc
    }
}

/// Sweep thresholds and policies. In replay mode one stage-1 model scores a
/// weakly augmented target stream once per epoch and every cell replays the
/// same logits; in train mode each cell runs its own second stage.
pub fn simulate_fplg(cfg: &TrainConfig) -> Result<Vec<SimCell>> {
    cfg.validate()?;
    if cfg.sim_thetas.is_empty() || cfg.sim_policies.is_empty() || cfg.sim_epochs == 0 {
        return Err(Error::Config(
            "simulation needs thetas, policies and epochs".into(),
        ));
    }
    let (source, target) = load_data(cfg)?;
    let truth = hidden_truth(&target)?;
    let mut base = init_bundle(cfg, source.num_classes, source.d_patch)?;
    let warm = TrainConfig {
        stage1_epochs: cfg.sim_stage1_epochs,
        ..cfg.clone()
    };
    run_stage1(&warm, &mut base, &source)?;
    let c = base.num_classes();
    let mut cells = Vec::new();
    match cfg.sim_mode {
        SimMode::Replay => {
            let augmenter = cfg.augmenter();
            let mut rng = stream(cfg.seed, STREAM_REPLAY);
            let mut epochs = Vec::with_capacity(cfg.sim_epochs);
            for _ in 0..cfg.sim_epochs {
                let order = shuffled(target.len(), &mut rng);
                let weak: Vec<RegionSample> = order
                    .iter()
                    .map(|&i| augmenter.weak(&target.samples()[i], &mut rng))
                    .collect();
                let mut logits = Vec::with_capacity(weak.len());
                for chunk in weak.chunks(256) {
                    let refs: Vec<&RegionSample> = chunk.iter().collect();
                    logits.extend(batch_logits(&base, &base.extract_batch(&refs)?)?);
                }
                epochs.push((order, logits));
            }
            for &policy in &cfg.sim_policies {
                for &theta in &cfg.sim_thetas {
                    let mut state = PseudoState::new(c, policy, theta)?;
                    let mut stats = Vec::with_capacity(epochs.len());
                    for (e, (order, logits)) in epochs.iter().enumerate() {
                        let mut s = PseudoEpoch::new(e, policy, theta, c);
                        for (&i, rows) in order.iter().zip(logits) {
                            s.record(&state.gen_set(rows)?, truth[i]);
                        }
                        stats.push(s);
                    }
                    cells.push(SimCell {
                        policy,
                        theta,
                        epochs: stats,
                    });
                }
            }
        }
        SimMode::Train => {
            for &policy in &cfg.sim_policies {
                for &theta in &cfg.sim_thetas {
                    let cell_cfg = TrainConfig {
                        policy,
                        theta,
                        pseudo_labels: true,
                        stage2_epochs: cfg.sim_epochs,
                        ..cfg.clone()
                    };
                    let mut bundle = base.clone();
                    let s2 = run_stage2(&cell_cfg, &mut bundle, &source, &target, &truth)?;
                    cells.push(SimCell {
                        policy,
                        theta,
                        epochs: s2.pseudo,
                    });
                }
            }
        }
    }
    Ok(cells)
}

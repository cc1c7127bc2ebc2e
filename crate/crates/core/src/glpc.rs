//! Inference-time fusion of the seven classifier heads.
//!
//! The default cascade trusts the global-local head first, then the global
//! head, and otherwise sums every score that clears its own threshold.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::softmax;
use crate::error::{Error, Result};
use crate::fplg::{argmax, PseudoState};
use crate::model::{ModelBundle, GLOBAL_LOCAL_VIEW, GLOBAL_VIEW, NUM_VIEWS};
use crate::objectives::batch_logits;
use crate::synthdata::RegionSample;

fn check_rows(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    if rows.len() != NUM_VIEWS {
        return Err(Error::dim(format!(
            "{what} needs {NUM_VIEWS} rows, got {}",
            rows.len()
        )));
    }
    let c = rows[0].len();
    if c == 0 || rows.iter().any(|r| r.len() != c) {
        return Err(Error::dim(format!(
            "{what} rows must share a nonzero width"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::arg(format!("{what} has non-finite entries")));
    }
    Ok(c)
}

/// Per-view class probabilities, one row per head.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        check_rows(&rows, "score matrix")?;
        Ok(Self { rows })
    }

    pub fn from_logits(logits: &[Vec<f64>]) -> Result<Self> {
        let rows = logits
            .iter()
            .map(|l| softmax(l))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.rows[0].len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdMatrix {
    rows: Vec<Vec<f64>>,
}

impl ThresholdMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        check_rows(&rows, "threshold matrix")?;
        Ok(Self { rows })
    }

    pub fn from_state(state: &PseudoState) -> Result<Self> {
        if !state.is_frozen() {
            return Err(Error::Contract(
                "inference thresholds need a frozen pseudo-label state".into(),
            ));
        }
        Self::new(state.threshold_matrix())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

pub fn build_matrices(
    bundle: &ModelBundle,
    state: &PseudoState,
    sample: &RegionSample,
) -> Result<(ScoreMatrix, ThresholdMatrix)> {
    let t = ThresholdMatrix::from_state(state)?;
    let fs = bundle.extract(sample)?;
    let s = ScoreMatrix::from_logits(&bundle.classify_all(&fs)?)?;
    Ok((s, t))
}

/// Score matrices for a whole batch in one pass.
pub fn score_batch(bundle: &ModelBundle, samples: &[&RegionSample]) -> Result<Vec<ScoreMatrix>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let batch = bundle.extract_batch(samples)?;
    batch_logits(bundle, &batch)?
        .iter()
        .map(|rows| ScoreMatrix::from_logits(rows))
        .collect()
}

fn same_shape(s: &ScoreMatrix, t: &ThresholdMatrix) -> Result<()> {
    if s.num_classes() != t.rows[0].len() {
        return Err(Error::dim(format!(
            "score width {} vs threshold width {}",
            s.num_classes(),
            t.rows[0].len()
        )));
    }
    Ok(())
}

pub fn mask(s: &ScoreMatrix, t: &ThresholdMatrix) -> Result<Vec<Vec<bool>>> {
    same_shape(s, t)?;
    Ok(s.rows
        .iter()
        .zip(&t.rows)
        .map(|(sr, tr)| sr.iter().zip(tr).map(|(a, b)| a > b).collect())
        .collect())
}

pub fn aggregate(s: &ScoreMatrix, m: &[Vec<bool>]) -> Result<Vec<f64>> {
    if m.len() != NUM_VIEWS || m.iter().any(|r| r.len() != s.num_classes()) {
        return Err(Error::dim("mask shape does not match scores"));
    }
    let mut out = vec![0.0; s.num_classes()];
    for (row, mrow) in s.rows.iter().zip(m) {
        for ((o, v), keep) in out.iter_mut().zip(row).zip(mrow) {
            if *keep {
                *o += v;
            }
        }
    }
    Ok(out)
}

fn gate(s: &ScoreMatrix, t: &ThresholdMatrix, view: usize) -> Option<usize> {
    let p = argmax(&s.rows[view]);
    (s.rows[view][p] > t.rows[view][p]).then_some(p)
}

fn masked_vote(s: &ScoreMatrix, t: &ThresholdMatrix) -> Result<usize> {
    let summed = aggregate(s, &mask(s, t)?)?;
    if summed.iter().all(|v| *v == 0.0) {
        return Ok(argmax(&s.rows[GLOBAL_LOCAL_VIEW]));
    }
    Ok(argmax(&summed))
}

pub fn predict_glpc(s: &ScoreMatrix, t: &ThresholdMatrix) -> Result<usize> {
    same_shape(s, t)?;
    if let Some(p) = gate(s, t, GLOBAL_LOCAL_VIEW) {
        return Ok(p);
    }
    if let Some(p) = gate(s, t, GLOBAL_VIEW) {
        return Ok(p);
    }
    masked_vote(s, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Global,
    GLocal,
    Average,
    Voting,
    Glpc,
    ConI,
    ConII,
    ConIII,
    ConIV,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Global,
        Strategy::GLocal,
        Strategy::Average,
        Strategy::Voting,
        Strategy::ConI,
        Strategy::ConII,
        Strategy::ConIII,
        Strategy::ConIV,
        Strategy::Glpc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Global => "Global",
            Strategy::GLocal => "G-Local",
            Strategy::Average => "Average",
            Strategy::Voting => "Voting",
            Strategy::Glpc => "GLPC",
            Strategy::ConI => "Con-i",
            Strategy::ConII => "Con-ii",
            Strategy::ConIII => "Con-iii",
            Strategy::ConIV => "Con-iv",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().to_ascii_lowercase().replace('-', "") == key)
            .ok_or_else(|| Error::arg(format!("unknown strategy: {s}")))
    }
}

pub fn predict_strategy(strategy: Strategy, s: &ScoreMatrix, t: &ThresholdMatrix) -> Result<usize> {
    same_shape(s, t)?;
    let c = s.num_classes();
    Ok(match strategy {
        Strategy::Global => argmax(&s.rows[GLOBAL_VIEW]),
        Strategy::GLocal => argmax(&s.rows[GLOBAL_LOCAL_VIEW]),
        Strategy::Average => {
            let mut cols = vec![0.0; c];
            for row in &s.rows {
                for (acc, v) in cols.iter_mut().zip(row) {
                    *acc += v / NUM_VIEWS as f64;
                }
            }
            argmax(&cols)
        }
        Strategy::Voting => {
            let mut votes = vec![0.0; c];
            for row in &s.rows {
                votes[argmax(row)] += 1.0;
            }
            argmax(&votes)
        }
        Strategy::Glpc => predict_glpc(s, t)?,
        Strategy::ConI => masked_vote(s, t)?,
        Strategy::ConII => match gate(s, t, GLOBAL_VIEW) {
            Some(p) => p,
            None => masked_vote(s, t)?,
        },
        Strategy::ConIII => match gate(s, t, GLOBAL_LOCAL_VIEW) {
            Some(p) => p,
            None => masked_vote(s, t)?,
        },
        Strategy::ConIV => {
            match gate(s, t, GLOBAL_VIEW).or_else(|| gate(s, t, GLOBAL_LOCAL_VIEW)) {
                Some(p) => p,
                None => masked_vote(s, t)?,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fplg::ThresholdPolicy;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled(v: f64, c: usize) -> Vec<Vec<f64>> {
        vec![vec![v; c]; NUM_VIEWS]
    }

    fn random_pair(rng: &mut ChaCha8Rng, c: usize) -> (ScoreMatrix, ThresholdMatrix) {
        let s = (0..NUM_VIEWS)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>().powi(3)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|x| x / z).collect()
            })
            .collect();
        let t = (0..NUM_VIEWS)
            .map(|_| (0..c).map(|_| rng.random_range(0.05..0.95)).collect())
            .collect();
        (
            ScoreMatrix::new(s).unwrap(),
            ThresholdMatrix::new(t).unwrap(),
        )
    }

    // Written straight from the prose description, without shared helpers.
    fn reference_glpc(s: &[Vec<f64>], t: &[Vec<f64>]) -> usize {
        let first_max = |row: &[f64]| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        };
        let p6 = first_max(&s[6]);
        if s[6][p6] > t[6][p6] {
            return p6;
        }
        let p0 = first_max(&s[0]);
        if s[0][p0] > t[0][p0] {
            return p0;
        }
        let c = s[0].len();
        let mut total = vec![0.0; c];
        for i in 0..7 {
            for j in 0..c {
                let m = if s[i][j] > t[i][j] { 1.0 } else { 0.0 };
                total[j] += s[i][j] * m;
            }
        }
        if total.iter().all(|x| *x == 0.0) {
            return p6;
        }
        first_max(&total)
    }

    #[test]
    fn mask_examples() {
        let s = ScoreMatrix::new(filled(1.0, 4)).unwrap();
        let t = ThresholdMatrix::new(filled(0.95, 4)).unwrap();
        assert!(mask(&s, &t).unwrap().iter().flatten().all(|m| *m));
        let eq = ThresholdMatrix::new(filled(1.0, 4)).unwrap();
        assert!(mask(&s, &eq).unwrap().iter().flatten().all(|m| !*m));
        let narrow = ThresholdMatrix::new(filled(0.5, 3)).unwrap();
        assert!(mask(&s, &narrow).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let s = ScoreMatrix::new(filled(1.0 / 7.0, 7)).unwrap();
        let none = vec![vec![false; 7]; NUM_VIEWS];
        assert!(aggregate(&s, &none).unwrap().iter().all(|v| *v == 0.0));
        let all = vec![vec![true; 7]; NUM_VIEWS];
        for v in aggregate(&s, &all).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_mask_and_aggregate_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (s, t) = random_pair(&mut rng, 5);
            let m = mask(&s, &t).unwrap();
            for i in 0..NUM_VIEWS {
                for j in 0..5 {
                    assert_eq!(m[i][j], s.rows()[i][j] > t.rows()[i][j]);
                }
            }
            let agg = aggregate(&s, &m).unwrap();
            for (j, a) in agg.iter().enumerate() {
                let col: f64 = (0..NUM_VIEWS)
                    .filter(|&i| m[i][j])
                    .map(|i| s.rows()[i][j])
                    .sum();
                assert!((a - col).abs() < 1e-12);
            }
            // additivity over a row partition
            let top: Vec<Vec<bool>> = (0..NUM_VIEWS)
                .map(|i| if i < 3 { m[i].clone() } else { vec![false; 5] })
                .collect();
            let bottom: Vec<Vec<bool>> = (0..NUM_VIEWS)
                .map(|i| if i >= 3 { m[i].clone() } else { vec![false; 5] })
                .collect();
            let a = aggregate(&s, &top).unwrap();
            let b = aggregate(&s, &bottom).unwrap();
            for j in 0..5 {
                assert!((a[j] + b[j] - agg[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cascade_step_one_and_three() {
        let c = 5;
        let mut s = filled(0.2, c);
        s[6] = vec![0.0, 0.0, 0.0, 1.0, 0.0];
        s[0] = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let t = ThresholdMatrix::new(filled(0.9, c)).unwrap();
        assert_eq!(predict_glpc(&ScoreMatrix::new(s).unwrap(), &t).unwrap(), 3);

        let mut s = filled(0.2, c);
        s[2][1] = 0.95;
        assert_eq!(predict_glpc(&ScoreMatrix::new(s).unwrap(), &t).unwrap(), 1);

        // nothing clears: fall back to the global-local head
        let mut s = filled(0.2, c);
        s[6][4] = 0.3;
        assert_eq!(predict_glpc(&ScoreMatrix::new(s).unwrap(), &t).unwrap(), 4);
    }

    #[test]
    fn cascade_matches_reference_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for n in 0..10_000 {
            let c = 2 + n % 7;
            let (s, t) = random_pair(&mut rng, c);
            assert_eq!(
                predict_glpc(&s, &t).unwrap(),
                reference_glpc(s.rows(), t.rows()),
                "case {n}"
            );
        }
    }

    #[test]
    fn threshold_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let high = ThresholdMatrix::new(filled(1.5, 6)).unwrap();
        let zero = ThresholdMatrix::new(filled(0.0, 6)).unwrap();
        for _ in 0..500 {
            let (s, _) = random_pair(&mut rng, 6);
            // above 1 nothing passes: step 3 with an all-zero sum
            assert_eq!(
                predict_glpc(&s, &high).unwrap(),
                argmax(&s.rows()[GLOBAL_LOCAL_VIEW])
            );
            assert_eq!(
                predict_glpc(&s, &zero).unwrap(),
                predict_strategy(Strategy::GLocal, &s, &zero).unwrap()
            );
        }
    }

    #[test]
    fn all_ones_mask_agrees_with_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zero = ThresholdMatrix::new(filled(-1.0, 4)).unwrap();
        for _ in 0..500 {
            let (s, _) = random_pair(&mut rng, 4);
            assert_eq!(
                predict_strategy(Strategy::ConI, &s, &zero).unwrap(),
                predict_strategy(Strategy::Average, &s, &zero).unwrap()
            );
        }
    }

    #[test]
    fn identical_rows_make_every_strategy_agree() {
        let row = vec![0.1, 0.5, 0.15, 0.25];
        let s = ScoreMatrix::new(vec![row; NUM_VIEWS]).unwrap();
        for t in [filled(0.3, 4), filled(0.9, 4)] {
            let t = ThresholdMatrix::new(t).unwrap();
            for st in Strategy::ALL {
                assert_eq!(predict_strategy(st, &s, &t).unwrap(), 1, "{st}");
            }
        }
    }

    #[test]
    fn voting_tie_goes_to_lowest_class() {
        let winners = [1, 1, 2, 2, 2, 0, 1];
        let rows = winners
            .iter()
            .map(|&w| {
                let mut r = vec![0.1; 3];
                r[w] = 0.8;
                r
            })
            .collect();
        let s = ScoreMatrix::new(rows).unwrap();
        let t = ThresholdMatrix::new(filled(0.9, 3)).unwrap();
        assert_eq!(predict_strategy(Strategy::Voting, &s, &t).unwrap(), 1);
    }

    #[test]
    fn strategies_match_references() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2_000 {
            let (s, t) = random_pair(&mut rng, 5);
            let (sr, tr) = (s.rows(), t.rows());
            let first_max =
                |row: &[f64]| (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let passes = |i: usize| {
                let p = first_max(&sr[i]);
                (sr[i][p] > tr[i][p]).then_some(p)
            };
            let con_i = || {
                let sums: Vec<f64> = (0..5)
                    .map(|j| {
                        (0..7)
                            .filter(|&i| sr[i][j] > tr[i][j])
                            .map(|i| sr[i][j])
                            .sum()
                    })
                    .collect();
                if sums.iter().all(|x| *x == 0.0) {
                    first_max(&sr[6])
                } else {
                    first_max(&sums)
                }
            };
            let mut votes = [0usize; 5];
            for row in sr {
                votes[first_max(row)] += 1;
            }
            let vote = (0..5).fold(0, |b, j| if votes[j] > votes[b] { j } else { b });
            let mean: Vec<f64> = (0..5)
                .map(|j| (0..7).map(|i| sr[i][j]).sum::<f64>())
                .collect();
            let expect = [
                (Strategy::Global, first_max(&sr[0])),
                (Strategy::GLocal, first_max(&sr[6])),
                (Strategy::Average, first_max(&mean)),
                (Strategy::Voting, vote),
                (Strategy::ConI, con_i()),
                (Strategy::ConII, passes(0).unwrap_or_else(con_i)),
                (Strategy::ConIII, passes(6).unwrap_or_else(con_i)),
                (
                    Strategy::ConIV,
                    passes(0).or_else(|| passes(6)).unwrap_or_else(con_i),
                ),
                (
                    Strategy::Glpc,
                    passes(6).or_else(|| passes(0)).unwrap_or_else(con_i),
                ),
            ];
            for (st, want) in expect {
                assert_eq!(predict_strategy(st, &s, &t).unwrap(), want, "{st}");
            }
        }
    }

    #[test]
    fn strategy_names_parse() {
        for st in Strategy::ALL {
            assert_eq!(st.as_str().parse::<Strategy>().unwrap(), st);
        }
        assert_eq!("glocal".parse::<Strategy>().unwrap(), Strategy::GLocal);
        assert_eq!("con_iv".parse::<Strategy>().unwrap(), Strategy::ConIV);
        assert!("median".parse::<Strategy>().is_err());
    }

    #[test]
    fn build_matrices_requires_frozen_state() {
        let cfg = ModelConfig {
            d_patch: 3,
            d_f: 2,
            num_classes: 4,
            hidden: 4,
        };
        let mut b = ModelBundle::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let sample = RegionSample {
            patches: std::array::from_fn(|r| vec![0.1 * r as f64, -0.2, 0.3]),
            label: None,
            domain: crate::synthdata::Domain::Target,
        };
        let mut st = PseudoState::new(4, ThresholdPolicy::ImprovedDynamic, 0.95).unwrap();
        assert!(matches!(
            build_matrices(&b, &st, &sample),
            Err(Error::Contract(_))
        ));
        st.freeze();
        let (s, t) = build_matrices(&b, &st, &sample).unwrap();
        assert!(t.rows().iter().flatten().all(|v| *v == 0.95));
        for row in s.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let fs = b.extract(&sample).unwrap();
        let logits = b.classify_all(&fs).unwrap();
        for (row, l) in s.rows().iter().zip(&logits) {
            assert_eq!(row, &softmax(l).unwrap());
        }
        let batch = score_batch(&b, &[&sample, &sample]).unwrap();
        for m in &batch {
            for (x, y) in m.rows().iter().flatten().zip(s.rows().iter().flatten()) {
                assert!((x - y).abs() < 1e-12);
            }
        }

        for net in &mut b.classifiers {
            for layer in net.layers_mut().iter_mut().skip(1) {
                layer.weight.values_mut().iter_mut().for_each(|v| *v = 0.0);
                layer.bias.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (s, _) = build_matrices(&b, &st, &sample).unwrap();
        assert!(s.rows().iter().flatten().all(|v| (v - 0.25).abs() < 1e-12));
    }
}

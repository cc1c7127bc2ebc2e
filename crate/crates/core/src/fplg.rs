//! Feature-level pseudo-label generation with per-classifier, per-class
//! dynamic thresholds.
//!
//! Each view's classifier keeps a cumulative count `sigma[view][class]` of the
//! pseudo labels it has produced. The counts are normalised by the row max to
//! a learning effect `lambda` in `[0, 1]`, mapped through a policy-specific
//! function and scaled by the base threshold `theta`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::softmax;
use crate::error::{Error, Result};
use crate::model::NUM_VIEWS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ThresholdPolicy {
    /// Static: every threshold is `theta`.
    Static,
    /// Dynamic with the linear mapping `M(l) = l`.
    Dynamic,
    /// Dynamic with the convex mapping `M(l) = (l + 1)^2 / 4`.
    ImprovedDynamic,
}

impl ThresholdPolicy {
    pub const ALL: [ThresholdPolicy; 3] = [
        ThresholdPolicy::Static,
        ThresholdPolicy::Dynamic,
        ThresholdPolicy::ImprovedDynamic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdPolicy::Static => "STS",
            ThresholdPolicy::Dynamic => "DTS",
            ThresholdPolicy::ImprovedDynamic => "IDTS",
        }
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "STS" => Ok(ThresholdPolicy::Static),
            "DTS" => Ok(ThresholdPolicy::Dynamic),
            "IDTS" => Ok(ThresholdPolicy::ImprovedDynamic),
            _ => Err(Error::arg(format!("unknown threshold policy `{s}`"))),
        }
    }
}

/// `lambda_j = sigma_j / max(sigma)`; all ones when nothing has been counted yet.
pub fn lambda_of(sigma_row: &[u64]) -> Vec<f64> {
    let max = sigma_row.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![1.0; sigma_row.len()];
    }
    sigma_row.iter().map(|&s| s as f64 / max as f64).collect()
}

pub fn map_m(lambda: f64, policy: ThresholdPolicy) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(match policy {
        ThresholdPolicy::Static => 1.0,
        ThresholdPolicy::Dynamic => lambda,
        ThresholdPolicy::ImprovedDynamic => (lambda + 1.0) * (lambda + 1.0) / 4.0,
    })
}

/// Per-view labels; `None` marks a failed (below-threshold) view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub labels: [Option<usize>; NUM_VIEWS],
}

impl PseudoLabelSet {
    pub const NONE: PseudoLabelSet = PseudoLabelSet {
        labels: [None; NUM_VIEWS],
    };

    /// Labels in the `-1`-for-failure integer encoding.
    pub fn as_signed(&self) -> [i64; NUM_VIEWS] {
        self.labels.map(|l| l.map_or(-1, |c| c as i64))
    }

    pub fn successes(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Cumulative pseudo-label counters plus the threshold policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoState {
    sigma: Vec<Vec<u64>>,
    frozen: bool,
    policy: ThresholdPolicy,
    theta: f64,
}

impl PseudoState {
    pub fn new(num_classes: usize, policy: ThresholdPolicy, theta: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::arg("need at least 2 classes"));
        }
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::arg(format!("theta {theta} outside (0, 1]")));
        }
        Ok(Self {
            sigma: vec![vec![0; num_classes]; NUM_VIEWS],
            frozen: false,
            policy,
            theta,
        })
    }

    /// Rebuilds a state from stored counters (e.g. a state dump).
    pub fn from_counts(
        sigma: Vec<Vec<u64>>,
        policy: ThresholdPolicy,
        theta: f64,
        frozen: bool,
    ) -> Result<Self> {
        if sigma.len() != NUM_VIEWS {
            return Err(Error::dim(format!("need {NUM_VIEWS} sigma rows")));
        }
        let c = sigma[0].len();
        if c < 2 || sigma.iter().any(|r| r.len() != c) {
            return Err(Error::dim("sigma rows must share a class count >= 2"));
        }
        let mut state = Self::new(c, policy, theta)?;
        state.sigma = sigma;
        state.frozen = frozen;
        Ok(state)
    }

    pub fn num_classes(&self) -> usize {
        self.sigma[0].len()
    }

    pub fn sigma(&self) -> &[Vec<u64>] {
        &self.sigma
    }

    pub fn policy(&self) -> ThresholdPolicy {
        self.policy
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops all counter updates. Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn thresholds_of(&self, view: usize) -> Result<Vec<f64>> {
        let row = self
            .sigma
            .get(view)
            .ok_or_else(|| Error::arg(format!("view {view} out of range")))?;
        lambda_of(row)
            .into_iter()
            .map(|l| Ok(map_m(l, self.policy)? * self.theta))
            .collect()
    }

    pub fn threshold_matrix(&self) -> Vec<Vec<f64>> {
        (0..NUM_VIEWS)
            .map(|v| self.thresholds_of(v).expect("view in range"))
            .collect()
    }

    /// Labels all seven views of one sample from raw logits, counting each
    /// success unless frozen.
    pub fn gen_set(&mut self, logit_rows: &[Vec<f64>]) -> Result<PseudoLabelSet> {
        if logit_rows.len() != NUM_VIEWS {
            return Err(Error::dim(format!("need {NUM_VIEWS} logit rows")));
        }
        let thresholds = self.threshold_matrix();
        let mut labels = [None; NUM_VIEWS];
        for (v, (logits, t)) in logit_rows.iter().zip(&thresholds).enumerate() {
            if logits.len() != self.num_classes() {
                return Err(Error::dim(format!(
                    "view {v} has {} logits for {} classes",
                    logits.len(),
                    self.num_classes()
                )));
            }
            labels[v] = gen_label(logits, t)?;
        }
        if !self.frozen {
            for (v, l) in labels.iter().enumerate() {
                if let Some(c) = l {
                    self.sigma[v][*c] += 1;
                }
            }
        }
        Ok(PseudoLabelSet { labels })
    }

    /// CSV dump: a `#` comment with policy and theta, then `view,class,sigma`.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# policy={} theta={:?}\nview,class,sigma\n",
            self.policy, self.theta
        );
        for (v, row) in self.sigma.iter().enumerate() {
            for (c, s) in row.iter().enumerate() {
                out.push_str(&format!("{v},{c},{s}\n"));
            }
        }
        out
    }

    /// Parses [`PseudoState::to_csv`] output. The result is frozen.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (n, comment) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing section: policy comment"))?;
        let body = comment
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(n, "expected `# policy=.. theta=..`"))?;
        let mut policy = None;
        let mut theta = None;
        for field in body.split_whitespace() {
            match field.split_once('=') {
                Some(("policy", v)) => policy = Some(v.parse::<ThresholdPolicy>()?),
                Some(("theta", v)) => {
                    theta = Some(
                        v.parse::<f64>()
                            .map_err(|_| Error::parse(n, format!("bad theta `{v}`")))?,
                    )
                }
                _ => return Err(Error::parse(n, format!("unexpected field `{field}`"))),
            }
        }
        let policy = policy.ok_or_else(|| Error::parse(n, "missing policy"))?;
        let theta = theta.ok_or_else(|| Error::parse(n, "missing theta"))?;
        match lines.next() {
            Some((_, "view,class,sigma")) => {}
            Some((n, _)) => return Err(Error::parse(n, "expected header `view,class,sigma`")),
            None => return Err(Error::parse(n + 1, "missing section: header")),
        }
        let mut entries = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::parse(n, format!("bad integer `{s}`")))
            };
            if f.len() != 3 {
                return Err(Error::parse(n, "expected `view,class,sigma`"));
            }
            entries.push((
                n,
                parse(f[0])? as usize,
                parse(f[1])? as usize,
                parse(f[2])?,
            ));
        }
        let classes = entries.iter().map(|e| e.2 + 1).max().unwrap_or(0);
        let mut sigma = vec![vec![0u64; classes]; NUM_VIEWS];
        let mut seen = vec![vec![false; classes]; NUM_VIEWS];
        for (n, v, c, s) in entries {
            if v >= NUM_VIEWS {
                return Err(Error::parse(n, format!("view {v} out of range")));
            }
            if seen[v][c] {
                return Err(Error::parse(
                    n,
                    format!("duplicate entry for view {v} class {c}"),
                ));
            }
            seen[v][c] = true;
            sigma[v][c] = s;
        }
        if seen.iter().flatten().any(|s| !s) {
            return Err(Error::Parse {
                line: 0,
                message: "missing section: incomplete sigma table".into(),
            });
        }
        Self::from_counts(sigma, policy, theta, true)
    }
}

/// Softmax, argmax (lowest index on ties), then accept iff the winning
/// probability strictly exceeds that class's threshold.
pub fn gen_label(logits: &[f64], thresholds: &[f64]) -> Result<Option<usize>> {
    if logits.len() != thresholds.len() {
        return Err(Error::dim("logits and thresholds differ in length"));
    }
    let s = softmax(logits)?;
    let p = argmax(&s);
    Ok((s[p] > thresholds[p]).then_some(p))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use ThresholdPolicy::*;

    fn logits_for(probs: &[f64]) -> Vec<f64> {
        probs.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn lambda_cases() {
        assert_eq!(lambda_of(&[10, 5, 0]), vec![1.0, 0.5, 0.0]);
        assert_eq!(lambda_of(&[0, 0, 0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(lambda_of(&[3, 3, 3]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn mapping_values() {
        assert_eq!(map_m(0.0, ImprovedDynamic).unwrap(), 0.25);
        assert_eq!(map_m(0.5, ImprovedDynamic).unwrap(), 0.5625);
        assert_eq!(map_m(1.0, ImprovedDynamic).unwrap(), 1.0);
        assert_eq!(map_m(0.5, Dynamic).unwrap(), 0.5);
        for l in [0.0, 0.3, 1.0] {
            assert_eq!(map_m(l, Static).unwrap(), 1.0);
        }
        assert!(map_m(-0.01, ImprovedDynamic).is_err());
        assert!(map_m(1.01, Dynamic).is_err());
    }

    #[test]
    fn improved_mapping_dominates_identity() {
        for i in 0..=10_000 {
            let l = i as f64 / 10_000.0;
            let m = map_m(l, ImprovedDynamic).unwrap();
            assert!(m >= l);
            assert_eq!(m == l, i == 10_000);
            assert!((m - l - (l - 1.0).powi(2) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_cases() {
        let mut sigma = vec![vec![0u64; 3]; NUM_VIEWS];
        sigma[2] = vec![10, 5, 0];
        let s = PseudoState::from_counts(sigma.clone(), ImprovedDynamic, 0.95, false).unwrap();
        let t = s.thresholds_of(2).unwrap();
        let want = [0.95, 0.534375, 0.2375];
        for (a, b) in t.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{t:?}");
        }
        // cold start: every threshold is theta
        assert_eq!(s.thresholds_of(0).unwrap(), vec![0.95; 3]);
        let s = PseudoState::from_counts(sigma, Static, 0.95, false).unwrap();
        assert_eq!(s.thresholds_of(2).unwrap(), vec![0.95; 3]);
        assert!(s.thresholds_of(7).is_err());
    }

    #[test]
    fn gen_label_cases() {
        let t = [0.95, 0.5, 0.25];
        assert_eq!(gen_label(&logits_for(&[0.6, 0.3, 0.1]), &t).unwrap(), None);
        assert_eq!(
            gen_label(&logits_for(&[0.2, 0.7, 0.1]), &t).unwrap(),
            Some(1)
        );
        assert_eq!(gen_label(&[0.0; 7], &[0.2375; 7]).unwrap(), None);
        // strict inequality: equality fails
        assert_eq!(gen_label(&[0.0, 0.0], &[0.5, 0.5]).unwrap(), None);
        // ties go to the lowest index
        assert_eq!(gen_label(&[1.0, 1.0, 0.0], &[0.0; 3]).unwrap(), Some(0));
    }

    fn confident_rows(class: usize, c: usize) -> Vec<Vec<f64>> {
        let mut row = vec![0.0; c];
        row[class] = 20.0;
        vec![row; NUM_VIEWS]
    }

    #[test]
    fn gen_set_counts_successes() {
        let mut s = PseudoState::new(7, ImprovedDynamic, 0.95).unwrap();
        let set = s.gen_set(&confident_rows(2, 7)).unwrap();
        assert_eq!(set.labels, [Some(2); NUM_VIEWS]);
        assert_eq!(set.as_signed(), [2; NUM_VIEWS]);
        for row in s.sigma() {
            assert_eq!(row, &vec![0, 0, 1, 0, 0, 0, 0]);
        }
        let set = s.gen_set(&vec![vec![0.0; 7]; NUM_VIEWS]).unwrap();
        assert_eq!(set, PseudoLabelSet::NONE);
        assert_eq!(set.as_signed(), [-1; NUM_VIEWS]);
        assert!(s.sigma().iter().all(|r| r.iter().sum::<u64>() == 1));
    }

    #[test]
    fn gen_set_matches_per_view_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut state = PseudoState::new(5, ImprovedDynamic, 0.8).unwrap();
        let mut replay = vec![vec![0u64; 5]; NUM_VIEWS];
        for _ in 0..300 {
            let rows: Vec<Vec<f64>> = (0..NUM_VIEWS)
                .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let got = state.gen_set(&rows).unwrap();
            for v in 0..NUM_VIEWS {
                // independent decision: thresholds from the replayed counts
                let max = *replay[v].iter().max().unwrap();
                let exps: Vec<f64> = rows[v].iter().map(|z| z.exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut best = 0;
                for j in 1..5 {
                    if exps[j] > exps[best] {
                        best = j;
                    }
                }
                let lam = if max == 0 {
                    1.0
                } else {
                    replay[v][best] as f64 / max as f64
                };
                let t = (lam + 1.0).powi(2) / 4.0 * 0.8;
                let want = (exps[best] / total > t).then_some(best);
                assert_eq!(got.labels[v], want);
                if let Some(c) = want {
                    replay[v][c] += 1;
                }
            }
        }
        assert_eq!(state.sigma(), replay.as_slice());
    }

    #[test]
    fn freeze_stops_counting() {
        let mut s = PseudoState::new(7, Dynamic, 0.95).unwrap();
        s.gen_set(&confident_rows(1, 7)).unwrap();
        let before_t = s.threshold_matrix();
        let before = s.sigma().to_vec();
        s.freeze();
        s.freeze();
        assert!(s.is_frozen());
        let set = s.gen_set(&confident_rows(1, 7)).unwrap();
        assert_eq!(set.labels, [Some(1); NUM_VIEWS]);
        assert_eq!(s.sigma(), before.as_slice());
        assert_eq!(s.threshold_matrix(), before_t);
    }

    #[test]
    fn state_validation() {
        assert!(PseudoState::new(7, Static, 0.0).is_err());
        assert!(PseudoState::new(7, Static, 1.5).is_err());
        assert!(PseudoState::new(1, Static, 0.9).is_err());
        let mut s = PseudoState::new(3, Static, 0.9).unwrap();
        assert!(s.gen_set(&vec![vec![0.0; 3]; 6]).is_err());
        assert!(s.gen_set(&vec![vec![0.0; 4]; 7]).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let mut sigma = vec![vec![0u64; 4]; NUM_VIEWS];
        sigma[3] = vec![9, 0, 2, 1];
        sigma[6] = vec![1, 1, 1, 100];
        let s = PseudoState::from_counts(sigma, ImprovedDynamic, 0.95, true).unwrap();
        let text = s.to_csv();
        assert!(text.starts_with("# policy=IDTS theta=0.95\nview,class,sigma\n0,0,0\n"));
        assert_eq!(PseudoState::from_csv(&text).unwrap(), s);
        assert!(PseudoState::from_csv("# policy=IDTS theta=0.95\n").is_err());
        assert!(PseudoState::from_csv("view,class,sigma\n").is_err());
    }

    #[test]
    fn policy_parsing() {
        for p in ThresholdPolicy::ALL {
            assert_eq!(p.as_str().parse::<ThresholdPolicy>().unwrap(), p);
        }
        assert!("fixed".parse::<ThresholdPolicy>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn sigma_row() -> impl Strategy<Value = Vec<u64>> {
            proptest::collection::vec(0u64..50, 2..9)
        }

        proptest! {
            #[test]
            fn idts_thresholds_lie_between_quarter_theta_and_theta(
                row in sigma_row(), theta in 0.05f64..=1.0,
            ) {
                let mut sigma = vec![vec![0u64; row.len()]; NUM_VIEWS];
                sigma[4] = row.clone();
                let s = PseudoState::from_counts(sigma.clone(), ImprovedDynamic, theta, false).unwrap();
                for t in s.thresholds_of(4).unwrap() {
                    prop_assert!(t >= theta / 4.0 && t <= theta);
                }
                let st = PseudoState::from_counts(sigma, Static, theta, false).unwrap();
                prop_assert!(st.thresholds_of(4).unwrap().iter().all(|t| *t == theta));
            }

            #[test]
            fn thresholds_are_monotone_in_own_count(
                row in sigma_row(), j in 0usize..8, policy in prop_oneof![Just(Dynamic), Just(ImprovedDynamic)],
            ) {
                let j = j % row.len();
                let mut bumped = row.clone();
                bumped[j] += 1;
                let mk = |r: Vec<u64>| {
                    let mut sigma = vec![vec![0u64; r.len()]; NUM_VIEWS];
                    sigma[0] = r;
                    PseudoState::from_counts(sigma, policy, 0.95, false).unwrap()
                };
                let a = mk(row).thresholds_of(0).unwrap();
                let b = mk(bumped).thresholds_of(0).unwrap();
                prop_assert!(b[j] >= a[j]);
            }

            #[test]
            fn counters_match_event_log(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut state = PseudoState::new(4, ImprovedDynamic, 0.7).unwrap();
                let mut log = Vec::new();
                let mut last = state.sigma().to_vec();
                for _ in 0..50 {
                    let rows: Vec<Vec<f64>> = (0..NUM_VIEWS)
                        .map(|_| (0..4).map(|_| rng.random_range(-4.0..4.0)).collect())
                        .collect();
                    let set = state.gen_set(&rows).unwrap();
                    for (v, l) in set.labels.iter().enumerate() {
                        if let Some(c) = l { log.push((v, *c)); }
                    }
                    for (a, b) in state.sigma().iter().flatten().zip(last.iter().flatten()) {
                        prop_assert!(a >= b);
                    }
                    last = state.sigma().to_vec();
                }
                for v in 0..NUM_VIEWS {
                    for c in 0..4 {
                        let n = log.iter().filter(|e| **e == (v, c)).count() as u64;
                        prop_assert_eq!(state.sigma()[v][c], n);
                    }
                }
            }
        }
    }
}

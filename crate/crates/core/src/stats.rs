//! Friedman average ranks and the Nemenyi critical difference.

use crate::error::{Error, Result};

/// Two-tailed Nemenyi critical values (studentized range at infinite degrees
/// of freedom divided by sqrt 2), indexed by `k - 2` for `k = 2..=20`.
const Q_05: [f64; 19] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354,
    3.391, 3.426, 3.458, 3.489, 3.517, 3.544,
];
const Q_10: [f64; 19] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978, 3.030, 3.077, 3.120,
    3.159, 3.196, 3.230, 3.261, 3.291, 3.319,
];

pub const MIN_METHODS: usize = 2;
pub const MAX_METHODS: usize = 20;

/// Accuracies of `k` methods over `n` settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub settings: Vec<String>,
    /// `accuracies[method][setting]`
    pub accuracies: Vec<Vec<f64>>,
}

impl RankTable {
    pub fn new(
        methods: Vec<String>,
        settings: Vec<String>,
        accuracies: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if methods.len() < 2 || settings.is_empty() {
            return Err(Error::arg("need at least 2 methods and 1 setting"));
        }
        if accuracies.len() != methods.len()
            || accuracies.iter().any(|row| row.len() != settings.len())
        {
            return Err(Error::dim("accuracy table shape does not match names"));
        }
        if accuracies.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::arg("accuracies must be finite"));
        }
        Ok(Self {
            methods,
            settings,
            accuracies,
        })
    }

    /// Build from long-format `(method, setting, accuracy)` rows. Methods and
    /// settings keep first-seen order; every pair must appear exactly once.
    pub fn from_long(rows: &[(String, String, f64)]) -> Result<Self> {
        let mut methods: Vec<String> = Vec::new();
        let mut settings: Vec<String> = Vec::new();
        for (m, s, _) in rows {
            if !methods.contains(m) {
                methods.push(m.clone());
            }
            if !settings.contains(s) {
                settings.push(s.clone());
            }
        }
        let mut cells = vec![vec![None; settings.len()]; methods.len()];
        for (m, s, a) in rows {
            let i = methods.iter().position(|x| x == m).expect("collected");
            let j = settings.iter().position(|x| x == s).expect("collected");
            if cells[i][j].replace(*a).is_some() {
                return Err(Error::arg(format!("duplicate entry for {m} / {s}")));
            }
        }
        let accuracies = cells
            .into_iter()
            .zip(&methods)
            .map(|(row, m)| {
                row.into_iter()
                    .zip(&settings)
                    .map(|(c, s)| {
                        c.ok_or_else(|| Error::arg(format!("missing entry for {m} / {s}")))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(methods, settings, accuracies)
    }

    pub fn num_methods(&self) -> usize {
        self.methods.len()
    }

    pub fn num_settings(&self) -> usize {
        self.settings.len()
    }
}

/// Ranks of one column, 1 = highest value, ties sharing their mean rank.
pub fn rank_descending(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let shared = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = shared;
        }
        start = end;
    }
    ranks
}

pub fn friedman_avg_ranks(table: &RankTable) -> Vec<f64> {
    let k = table.num_methods();
    let n = table.num_settings();
    let mut sums = vec![0.0; k];
    for j in 0..n {
        let column: Vec<f64> = table.accuracies.iter().map(|row| row[j]).collect();
        for (s, r) in sums.iter_mut().zip(rank_descending(&column)) {
            *s += r;
        }
    }
    sums.iter().map(|s| s / n as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alpha {
    P05,
    P10,
}

impl Alpha {
    pub fn from_value(alpha: f64) -> Result<Self> {
        if (alpha - 0.05).abs() < 1e-12 {
            Ok(Alpha::P05)
        } else if (alpha - 0.10).abs() < 1e-12 {
            Ok(Alpha::P10)
        } else {
            Err(Error::arg(format!(
                "unsupported alpha {alpha}; use 0.05 or 0.10"
            )))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Alpha::P05 => 0.05,
            Alpha::P10 => 0.10,
        }
    }
}

pub fn nemenyi_q(k: usize, alpha: Alpha) -> Result<f64> {
    if !(MIN_METHODS..=MAX_METHODS).contains(&k) {
        return Err(Error::arg(format!(
            "critical values cover {MIN_METHODS}..={MAX_METHODS} methods, got {k}"
        )));
    }
    Ok(match alpha {
        Alpha::P05 => Q_05[k - 2],
        Alpha::P10 => Q_10[k - 2],
    })
}

pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    let q = nemenyi_q(k, Alpha::from_value(alpha)?)?;
    if n == 0 {
        return Err(Error::arg("need at least one setting"));
    }
    let (k, n) = (k as f64, n as f64);
    Ok(q * (k * (k + 1.0) / (6.0 * n)).sqrt())
}

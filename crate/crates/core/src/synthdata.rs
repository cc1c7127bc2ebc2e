//! Seeded multi-region datasets standing in for face images.
//!
//! A sample is six patch vectors (global face plus five landmark regions).
//! Each class has a mean per region; samples are that mean plus isotropic
//! Gaussian noise. Target-domain samples are additionally pushed through an
//! invertible affine [`DomainShift`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};

pub const NUM_REGIONS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Global,
    LeftEye,
    RightEye,
    Nose,
    LeftMouth,
    RightMouth,
}

impl Region {
    pub const ALL: [Region; NUM_REGIONS] = [
        Region::Global,
        Region::LeftEye,
        Region::RightEye,
        Region::Nose,
        Region::LeftMouth,
        Region::RightMouth,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Global => "g",
            Region::LeftEye => "le",
            Region::RightEye => "re",
            Region::Nose => "ne",
            Region::LeftMouth => "lm",
            Region::RightMouth => "rm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSample {
    /// Ordered as [`Region::ALL`].
    pub patches: [Vec<f64>; NUM_REGIONS],
    /// Present only for labeled source samples.
    pub label: Option<usize>,
    pub domain: Domain,
}

impl RegionSample {
    pub fn patch(&self, region: Region) -> &[f64] {
        &self.patches[region.index()]
    }
}

/// Givens rotation of every coordinate pair `(0,1), (2,3), ...` by `angle`,
/// followed by a translation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub offset: Vec<f64>,
    pub angle: f64,
}

impl DomainShift {
    pub fn identity(d: usize) -> Self {
        Self {
            offset: vec![0.0; d],
            angle: 0.0,
        }
    }

    fn rotate(x: &mut [f64], angle: f64) {
        let (s, c) = angle.sin_cos();
        for pair in x.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        if self.angle != 0.0 {
            Self::rotate(x, self.angle);
        }
        for (v, o) in x.iter_mut().zip(&self.offset) {
            *v += o;
        }
    }

    pub fn invert(&self, x: &mut [f64]) {
        for (v, o) in x.iter_mut().zip(&self.offset) {
            *v -= o;
        }
        if self.angle != 0.0 {
            Self::rotate(x, -self.angle);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub d_patch: usize,
    pub source_priors: Vec<f64>,
    pub target_priors: Vec<f64>,
    /// `num_classes x NUM_REGIONS x d_patch`, flattened.
    pub class_means: Vec<f64>,
    pub shift: DomainShift,
    pub source_noise: f64,
    pub target_noise: f64,
    /// Probability that a target sample has one region replaced by
    /// class-free noise.
    pub target_occlusion: f64,
    pub source_count: usize,
    pub target_count: usize,
}

/// Mass profile with one dominant class and two rare ones (c = 7).
pub const IMBALANCED_PRIORS: [f64; 7] = [0.45, 0.16, 0.14, 0.12, 0.08, 0.025, 0.025];

/// Milder imbalance used by the default shift preset.
pub const MILD_PRIORS: [f64; 7] = [0.25, 0.18, 0.15, 0.13, 0.12, 0.09, 0.08];

impl DatasetSpec {
    /// Random class means with entries drawn from `N(0, scale^2)`.
    pub fn random_means(c: usize, d_patch: usize, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_616e_7321);
        let normal = Normal::new(0.0, scale).expect("finite scale");
        (0..c * NUM_REGIONS * d_patch)
            .map(|_| normal.sample(&mut rng))
            .collect()
    }

    /// Desk-scale preset with a rotation+offset shift between domains.
    pub fn default_shift(means_seed: u64) -> Self {
        let (c, d) = (7, 16);
        let offset = (0..d)
            .map(|i| if i % 2 == 0 { 1.2 } else { -0.8 })
            .collect();
        Self {
            num_classes: c,
            d_patch: d,
            source_priors: MILD_PRIORS.to_vec(),
            target_priors: MILD_PRIORS.to_vec(),
            class_means: Self::random_means(c, d, 1.0, means_seed),
            shift: DomainShift { offset, angle: 1.2 },
            source_noise: 1.6,
            target_noise: 1.6,
            target_occlusion: 0.3,
            source_count: 2000,
            target_count: 2000,
        }
    }

    /// The default shift preset with a 45%-dominant class and two rare ones.
    pub fn imbalanced(means_seed: u64) -> Self {
        Self {
            source_priors: IMBALANCED_PRIORS.to_vec(),
            target_priors: IMBALANCED_PRIORS.to_vec(),
            ..Self::default_shift(means_seed)
        }
    }

    pub fn class_mean(&self, class: usize, region: Region) -> &[f64] {
        let start = (class * NUM_REGIONS + region.index()) * self.d_patch;
        &self.class_means[start..start + self.d_patch]
    }

    pub fn validate(&self) -> Result<()> {
        let spec_err = |m: String| Err(Error::Spec(m));
        if self.num_classes < 2 {
            return spec_err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.d_patch == 0 {
            return spec_err("d_patch must be positive".into());
        }
        for (name, priors) in [
            ("source", &self.source_priors),
            ("target", &self.target_priors),
        ] {
            if priors.len() != self.num_classes {
                return spec_err(format!(
                    "{name} priors have {} entries for {} classes",
                    priors.len(),
                    self.num_classes
                ));
            }
            if priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return spec_err(format!("{name} priors must be nonnegative"));
            }
            let sum: f64 = priors.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return spec_err(format!("{name} priors sum to {sum}, not 1"));
            }
        }
        if self.class_means.len() != self.num_classes * NUM_REGIONS * self.d_patch {
            return spec_err(format!(
                "class_means has {} entries, expected {}",
                self.class_means.len(),
                self.num_classes * NUM_REGIONS * self.d_patch
            ));
        }
        if self.class_means.iter().any(|v| !v.is_finite()) {
            return spec_err("class_means must be finite".into());
        }
        if self.shift.offset.len() != self.d_patch || !self.shift.angle.is_finite() {
            return spec_err("shift offset must have d_patch finite entries".into());
        }
        if !(0.0..=1.0).contains(&self.target_occlusion) {
            return spec_err("target_occlusion must lie in [0, 1]".into());
        }
        for (name, sigma) in [("source", self.source_noise), ("target", self.target_noise)] {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return spec_err(format!("{name} noise sigma must be nonnegative"));
            }
        }
        if self.source_count == 0 || self.target_count == 0 {
            return spec_err("sample counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub d_patch: usize,
    pub domain: Domain,
    pub seed: u64,
    samples: Vec<RegionSample>,
    /// Ground truth of target samples, kept apart from the samples themselves.
    hidden_labels: Vec<Option<usize>>,
}

impl Dataset {
    pub fn samples(&self) -> &[RegionSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ground-truth classes for every sample, or `None` if any is unknown.
    /// For evaluation and reporting only; training code must go through
    /// [`Dataset::samples`], which never exposes target labels.
    pub fn evaluation_labels(&self) -> Option<Vec<usize>> {
        match self.domain {
            Domain::Source => self.samples.iter().map(|s| s.label).collect(),
            Domain::Target => self.hidden_labels.iter().copied().collect(),
        }
    }

    pub fn from_parts(
        num_classes: usize,
        d_patch: usize,
        domain: Domain,
        seed: u64,
        samples: Vec<RegionSample>,
        truth: Vec<Option<usize>>,
    ) -> Result<Self> {
        if truth.len() != samples.len() {
            return Err(Error::arg("truth length does not match sample count"));
        }
        for (s, t) in samples.iter().zip(&truth) {
            if s.domain != domain {
                return Err(Error::arg("sample domain does not match dataset domain"));
            }
            if s.patches.iter().any(|p| p.len() != d_patch) {
                return Err(Error::dim(format!("patch width must be {d_patch}")));
            }
            if s.patches.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::arg("non-finite patch value"));
            }
            if let Some(t) = t {
                if *t >= num_classes {
                    return Err(Error::arg(format!("label {t} out of range")));
                }
            }
        }
        let (samples, hidden_labels) = match domain {
            Domain::Source => {
                let samples = samples
                    .into_iter()
                    .zip(&truth)
                    .map(|(mut s, t)| {
                        s.label = *t;
                        s
                    })
                    .collect();
                (samples, vec![None; truth.len()])
            }
            Domain::Target => {
                let samples = samples
                    .into_iter()
                    .map(|mut s| {
                        s.label = None;
                        s
                    })
                    .collect();
                (samples, truth)
            }
        };
        Ok(Self {
            num_classes,
            d_patch,
            domain,
            seed,
            samples,
            hidden_labels,
        })
    }
}

fn draw_domain(
    spec: &DatasetSpec,
    domain: Domain,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let (priors, sigma, count) = match domain {
        Domain::Source => (&spec.source_priors, spec.source_noise, spec.source_count),
        Domain::Target => (&spec.target_priors, spec.target_noise, spec.target_count),
    };
    let classes = WeightedIndex::new(priors).map_err(|e| Error::Spec(e.to_string()))?;
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Spec(e.to_string()))?;
    let mut samples = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    for _ in 0..count {
        let class = classes.sample(rng);
        let occluded = (domain == Domain::Target && spec.target_occlusion > 0.0)
            .then(|| {
                (rng.random::<f64>() < spec.target_occlusion)
                    .then(|| rng.random_range(0..NUM_REGIONS))
            })
            .flatten();
        let patches = Region::ALL.map(|region| {
            let mut p: Vec<f64> = if occluded == Some(region.index()) {
                (0..spec.d_patch).map(|_| noise.sample(rng)).collect()
            } else {
                spec.class_mean(class, region)
                    .iter()
                    .map(|m| m + noise.sample(rng))
                    .collect()
            };
            if domain == Domain::Target {
                spec.shift.apply(&mut p);
            }
            p
        });
        samples.push(RegionSample {
            patches,
            label: None,
            domain,
        });
        truth.push(Some(class));
    }
    Dataset::from_parts(spec.num_classes, spec.d_patch, domain, seed, samples, truth)
}

/// Draws the source and target datasets. Pure function of `(spec, seed)`.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = draw_domain(spec, Domain::Source, seed, &mut rng)?;
    let target = draw_domain(spec, Domain::Target, seed, &mut rng)?;
    Ok((source, target))
}

const MAGIC: &str = "AGLRLS-DATASET v1";

pub fn to_text(dataset: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(
        out,
        "classes={} d_patch={} domain={} count={} seed={}",
        dataset.num_classes,
        dataset.d_patch,
        dataset.domain.as_str(),
        dataset.samples.len(),
        dataset.seed
    );
    let labels = match dataset.domain {
        Domain::Source => dataset.samples.iter().map(|s| s.label).collect::<Vec<_>>(),
        Domain::Target => dataset.hidden_labels.clone(),
    };
    for (s, label) in dataset.samples.iter().zip(labels) {
        match label {
            Some(l) => {
                let _ = write!(out, "{l}");
            }
            None => out.push_str("-1"),
        }
        for v in s.patches.iter().flatten() {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn from_text(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim_end() == MAGIC => {}
        Some((n, l)) => return Err(Error::parse(n, format!("expected `{MAGIC}`, found `{l}`"))),
        None => return Err(Error::parse(1, "missing section: magic line")),
    }
    let Some((hn, header)) = lines.next() else {
        return Err(Error::parse(2, "missing section: header line"));
    };
    let mut classes = None;
    let mut d_patch = None;
    let mut domain = None;
    let mut count = None;
    let mut seed = None;
    for field in header.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::parse(hn, format!("malformed header field `{field}`")))?;
        let bad = |_| Error::parse(hn, format!("bad value for `{k}`: `{v}`"));
        match k {
            "classes" => classes = Some(v.parse::<usize>().map_err(bad)?),
            "d_patch" => d_patch = Some(v.parse::<usize>().map_err(bad)?),
            "count" => count = Some(v.parse::<usize>().map_err(bad)?),
            "seed" => seed = Some(v.parse::<u64>().map_err(bad)?),
            "domain" => {
                domain = Some(match v {
                    "source" => Domain::Source,
                    "target" => Domain::Target,
                    _ => return Err(Error::parse(hn, format!("unknown domain `{v}`"))),
                })
            }
            _ => return Err(Error::parse(hn, format!("unknown header field `{k}`"))),
        }
    }
    let missing = |name: &str| Error::parse(hn, format!("header is missing `{name}`"));
    let classes = classes.ok_or_else(|| missing("classes"))?;
    let d_patch = d_patch.ok_or_else(|| missing("d_patch"))?;
    let domain = domain.ok_or_else(|| missing("domain"))?;
    let count = count.ok_or_else(|| missing("count"))?;
    let seed = seed.ok_or_else(|| missing("seed"))?;

    let width = 1 + NUM_REGIONS * d_patch;
    let mut samples = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    let mut last_line = hn;
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        last_line = n;
        if samples.len() == count {
            return Err(Error::parse(
                n,
                format!("more than the declared {count} samples"),
            ));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::parse(
                n,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        let label: i64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(n, format!("bad label `{}`", fields[0])))?;
        let label = match label {
            -1 => None,
            l if l >= 0 && (l as usize) < classes => Some(l as usize),
            l => return Err(Error::parse(n, format!("label {l} out of range"))),
        };
        let mut values = Vec::with_capacity(width - 1);
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(n, format!("bad number `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(n, format!("non-finite number `{f}`")));
            }
            values.push(v);
        }
        let mut chunks = values.chunks_exact(d_patch);
        let patches = [(); NUM_REGIONS].map(|_| chunks.next().expect("width checked").to_vec());
        samples.push(RegionSample {
            patches,
            label: None,
            domain,
        });
        truth.push(label);
    }
    if samples.len() < count {
        return Err(Error::parse(
            last_line + 1,
            format!(
                "missing section: sample lines (expected {count}, found {})",
                samples.len()
            ),
        ));
    }
    Dataset::from_parts(classes, d_patch, domain, seed, samples, truth)
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_text(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}

/// Weak/strong perturbations used on target samples during adaptation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmenter {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    /// Probability of zeroing one local patch under strong augmentation.
    pub dropout_prob: f64,
}

impl Default for Augmenter {
    fn default() -> Self {
        Self {
            weak_sigma: 0.01,
            strong_sigma: 0.05,
            dropout_prob: 0.2,
        }
    }
}

fn add_noise<R: Rng + ?Sized>(sample: &mut RegionSample, sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated as finite");
    for v in sample.patches.iter_mut().flatten() {
        *v += normal.sample(rng);
    }
}

impl Augmenter {
    pub fn weak<R: Rng + ?Sized>(&self, sample: &RegionSample, rng: &mut R) -> RegionSample {
        let mut out = sample.clone();
        add_noise(&mut out, self.weak_sigma, rng);
        out
    }

    pub fn strong<R: Rng + ?Sized>(&self, sample: &RegionSample, rng: &mut R) -> RegionSample {
        let mut out = sample.clone();
        add_noise(&mut out, self.strong_sigma, rng);
        if rng.random::<f64>() < self.dropout_prob {
            let region = rng.random_range(1..NUM_REGIONS);
            out.patches[region].iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn weak_seeded(&self, sample: &RegionSample, seed: u64) -> RegionSample {
        self.weak(sample, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn strong_seeded(&self, sample: &RegionSample, seed: u64) -> RegionSample {
        self.strong(sample, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

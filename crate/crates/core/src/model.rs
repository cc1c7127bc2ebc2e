//! The seven-view model bundle.
//!
//! View indices are fixed: 0 = global, 1..=5 = the five local regions in
//! [`Region::ALL`] order, 6 = the concatenation of all six region features.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{mlp_backward, sigmoid, Activation, Layer, Mlp, MlpGrads, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::{RegionSample, NUM_REGIONS};

pub const NUM_VIEWS: usize = 7;
pub const GLOBAL_VIEW: usize = 0;
pub const GLOBAL_LOCAL_VIEW: usize = 6;

pub const VIEW_NAMES: [&str; NUM_VIEWS] = ["g", "le", "re", "ne", "lm", "rm", "gl"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_patch: usize,
    pub d_f: usize,
    pub num_classes: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_patch: 16,
            d_f: 8,
            num_classes: 7,
            hidden: 16,
        }
    }
}

impl ModelConfig {
    /// The global extractor reads every patch (the whole sample); each local
    /// extractor reads its own patch.
    pub fn extractor_input_dim(&self, region: usize) -> usize {
        if region == GLOBAL_VIEW {
            NUM_REGIONS * self.d_patch
        } else {
            self.d_patch
        }
    }

    pub fn view_dim(&self, view: usize) -> usize {
        if view == GLOBAL_LOCAL_VIEW {
            NUM_REGIONS * self.d_f
        } else {
            self.d_f
        }
    }
}

/// Per-sample features for all seven views.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    views: [Vec<f64>; NUM_VIEWS],
}

impl FeatureSet {
    /// Builds the set from the six region features; view 6 is their
    /// concatenation.
    pub fn from_regions(regions: [Vec<f64>; NUM_REGIONS]) -> Self {
        let gl = regions.concat();
        let [g, le, re, ne, lm, rm] = regions;
        Self {
            views: [g, le, re, ne, lm, rm, gl],
        }
    }

    pub fn view(&self, i: usize) -> &[f64] {
        &self.views[i]
    }

    pub fn views(&self) -> &[Vec<f64>; NUM_VIEWS] {
        &self.views
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    pub extractors: Vec<Mlp>,
    pub classifiers: Vec<Mlp>,
    pub discriminators: Vec<Mlp>,
}

impl ModelBundle {
    /// Fresh bundle; every network is two layers (`hidden` ReLU units) with
    /// Xavier-uniform weights.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.d_patch == 0 || config.d_f == 0 || config.hidden == 0 || config.num_classes < 2 {
            return Err(Error::arg(format!("invalid model config {config:?}")));
        }
        let h = config.hidden;
        let extractors = (0..NUM_REGIONS)
            .map(|r| Mlp::xavier(&[config.extractor_input_dim(r), h, config.d_f], rng))
            .collect::<Result<Vec<_>>>()?;
        let classifiers = (0..NUM_VIEWS)
            .map(|v| Mlp::xavier(&[config.view_dim(v), h, config.num_classes], rng))
            .collect::<Result<Vec<_>>>()?;
        let discriminators = (0..NUM_VIEWS)
            .map(|v| Mlp::xavier(&[config.view_dim(v), h, 1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            extractors,
            classifiers,
            discriminators,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        extractors: Vec<Mlp>,
        classifiers: Vec<Mlp>,
        discriminators: Vec<Mlp>,
    ) -> Result<Self> {
        if extractors.len() != NUM_REGIONS
            || classifiers.len() != NUM_VIEWS
            || discriminators.len() != NUM_VIEWS
        {
            return Err(Error::dim(
                "bundle needs 6 extractors, 7 classifiers, 7 discriminators",
            ));
        }
        for (r, e) in extractors.iter().enumerate() {
            if e.input_dim() != config.extractor_input_dim(r) || e.output_dim() != config.d_f {
                return Err(Error::dim("extractor dims do not match config"));
            }
        }
        for v in 0..NUM_VIEWS {
            let (c, d) = (&classifiers[v], &discriminators[v]);
            if c.input_dim() != config.view_dim(v) || c.output_dim() != config.num_classes {
                return Err(Error::dim(format!(
                    "classifier {v} dims do not match config"
                )));
            }
            if d.input_dim() != config.view_dim(v) || d.output_dim() != 1 {
                return Err(Error::dim(format!(
                    "discriminator {v} dims do not match config"
                )));
            }
        }
        Ok(Self {
            config,
            extractors,
            classifiers,
            discriminators,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn push_input(&self, sample: &RegionSample, region: usize, out: &mut Vec<f64>) -> Result<()> {
        if sample
            .patches
            .iter()
            .any(|p| p.len() != self.config.d_patch)
        {
            return Err(Error::dim(format!(
                "patch widths must all be {}",
                self.config.d_patch
            )));
        }
        if region == GLOBAL_VIEW {
            sample.patches.iter().for_each(|p| out.extend_from_slice(p));
        } else {
            out.extend_from_slice(&sample.patches[region]);
        }
        Ok(())
    }

    pub fn extract(&self, sample: &RegionSample) -> Result<FeatureSet> {
        let mut regions: [Vec<f64>; NUM_REGIONS] = Default::default();
        for (r, ex) in self.extractors.iter().enumerate() {
            let mut input = Vec::with_capacity(self.config.extractor_input_dim(r));
            self.push_input(sample, r, &mut input)?;
            regions[r] = ex.predict(&Tensor::vector(input))?.into_values();
        }
        Ok(FeatureSet::from_regions(regions))
    }

    /// Raw logits of every classifier on its view, one row per view.
    pub fn classify_all(&self, fs: &FeatureSet) -> Result<Vec<Vec<f64>>> {
        self.classifiers
            .iter()
            .zip(fs.views())
            .map(|(net, f)| Ok(net.predict(&Tensor::vector(f.clone()))?.into_values()))
            .collect()
    }

    /// Source-probability from every discriminator on its view.
    pub fn discriminate_all(&self, fs: &FeatureSet) -> Result<[f64; NUM_VIEWS]> {
        let mut out = [0.0; NUM_VIEWS];
        for (v, (net, f)) in self.discriminators.iter().zip(fs.views()).enumerate() {
            let z = net.predict(&Tensor::vector(f.clone()))?.values()[0];
            out[v] = sigmoid(z);
        }
        Ok(out)
    }

    /// Batched feature extraction that keeps extractor activations for
    /// backpropagation.
    pub fn extract_batch(&self, samples: &[&RegionSample]) -> Result<FeatureBatch> {
        if samples.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let n = samples.len();
        let d_f = self.config.d_f;
        let mut extractor_acts = Vec::with_capacity(NUM_REGIONS);
        for (r, ex) in self.extractors.iter().enumerate() {
            let width = self.config.extractor_input_dim(r);
            let mut values = Vec::with_capacity(n * width);
            for s in samples {
                self.push_input(s, r, &mut values)?;
            }
            let input = Tensor::matrix(n, width, values)?;
            extractor_acts.push(ex.forward(&input)?);
        }
        let region_out: Vec<&Tensor> = extractor_acts
            .iter()
            .map(|a: &Vec<Tensor>| a.last().expect("nonempty"))
            .collect();
        let mut gl = Vec::with_capacity(n * NUM_REGIONS * d_f);
        for i in 0..n {
            for out in &region_out {
                gl.extend_from_slice(out.row(i));
            }
        }
        let mut views: Vec<Tensor> = region_out.iter().map(|t| (*t).clone()).collect();
        views.push(Tensor::matrix(n, NUM_REGIONS * d_f, gl)?);
        Ok(FeatureBatch {
            views,
            extractor_acts,
        })
    }

    /// Gradients of the extractors given dLoss/dFeature for every view; the
    /// global-local gradient is split back onto its six segments.
    pub fn extractor_backward(
        &self,
        batch: &FeatureBatch,
        view_grads: &[Tensor],
    ) -> Result<Vec<MlpGrads>> {
        if view_grads.len() != NUM_VIEWS {
            return Err(Error::dim("need one gradient per view"));
        }
        let n = batch.len();
        let d_f = self.config.d_f;
        let gl = view_grads[GLOBAL_LOCAL_VIEW].values();
        if gl.len() != n * NUM_REGIONS * d_f {
            return Err(Error::dim("global-local gradient has the wrong size"));
        }
        let mut grads = Vec::with_capacity(NUM_REGIONS);
        for r in 0..NUM_REGIONS {
            let mut g = view_grads[r].values().to_vec();
            if g.len() != n * d_f {
                return Err(Error::dim(format!("view {r} gradient has the wrong size")));
            }
            for i in 0..n {
                let seg =
                    &gl[i * NUM_REGIONS * d_f + r * d_f..i * NUM_REGIONS * d_f + (r + 1) * d_f];
                for (a, b) in g[i * d_f..(i + 1) * d_f].iter_mut().zip(seg) {
                    *a += b;
                }
            }
            let (pg, _) = mlp_backward(
                &self.extractors[r],
                &batch.extractor_acts[r],
                &Tensor::matrix(n, d_f, g)?,
            )?;
            grads.push(pg);
        }
        Ok(grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, checkpoint_to_text(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        checkpoint_from_text(&text)
    }
}

/// Features of a batch, view-major, plus the extractor activations.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    /// `views[v]` has shape `[n, view_dim(v)]`.
    pub views: Vec<Tensor>,
    extractor_acts: Vec<Vec<Tensor>>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.views[0].batch_dims().map(|(n, _)| n).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_set(&self, i: usize) -> FeatureSet {
        let regions = [0, 1, 2, 3, 4, 5].map(|r| self.views[r].row(i).to_vec());
        FeatureSet::from_regions(regions)
    }
}

const CHECKPOINT_MAGIC: &str = "AGLRLS-CHECKPOINT v1";

fn write_net(out: &mut String, kind: &str, view: &str, net: &Mlp) {
    let _ = writeln!(out, "net {kind} {view} layers={}", net.layers().len());
    for layer in net.layers() {
        let _ = writeln!(
            out,
            "layer out={} in={} act={}",
            layer.output_dim(),
            layer.input_dim(),
            layer.activation.as_str()
        );
        out.push('w');
        for v in layer.weight.values() {
            let _ = write!(out, " {v:?}");
        }
        out.push_str("\nb");
        for v in layer.bias.values() {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
}

/// Text checkpoint; floats use Rust's shortest round-trip formatting so a
/// save/load cycle is bit-exact.
pub fn checkpoint_to_text(bundle: &ModelBundle) -> String {
    let c = bundle.config;
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(
        out,
        "config d_patch={} d_f={} classes={} hidden={}",
        c.d_patch, c.d_f, c.num_classes, c.hidden
    );
    for (r, net) in bundle.extractors.iter().enumerate() {
        write_net(&mut out, "extractor", VIEW_NAMES[r], net);
    }
    for (v, net) in bundle.classifiers.iter().enumerate() {
        write_net(&mut out, "classifier", VIEW_NAMES[v], net);
    }
    for (v, net) in bundle.discriminators.iter().enumerate() {
        write_net(&mut out, "discriminator", VIEW_NAMES[v], net);
    }
    out
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(Error::parse(
                self.last + 1,
                format!("missing section: {what}"),
            )),
        }
    }
}

fn kv<'a>(line: usize, field: &'a str, key: &str) -> Result<&'a str> {
    field
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| Error::parse(line, format!("expected `{key}=...`, found `{field}`")))
}

fn parse_usize(line: usize, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("bad integer `{s}`")))
}

fn parse_values(line: usize, text: &str, tag: char, expected: usize) -> Result<Vec<f64>> {
    let mut parts = text.split_whitespace();
    if parts.next() != Some(&tag.to_string()[..]) {
        return Err(Error::parse(line, format!("expected `{tag}` row")));
    }
    let values = parts
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::parse(line, format!("bad number `{p}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(Error::parse(
            line,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

fn read_net(reader: &mut LineReader<'_>, kind: &str, view: &str) -> Result<Mlp> {
    let (n, header) = reader.next(&format!("{kind} {view}"))?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 4 || f[0] != "net" || f[1] != kind || f[2] != view {
        return Err(Error::parse(n, format!("expected `net {kind} {view} ...`")));
    }
    let num_layers = parse_usize(n, kv(n, f[3], "layers")?)?;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let (n, lh) = reader.next("layer header")?;
        let f: Vec<&str> = lh.split_whitespace().collect();
        if f.len() != 4 || f[0] != "layer" {
            return Err(Error::parse(n, "expected `layer out=.. in=.. act=..`"));
        }
        let out = parse_usize(n, kv(n, f[1], "out")?)?;
        let inp = parse_usize(n, kv(n, f[2], "in")?)?;
        let act_s = kv(n, f[3], "act")?;
        let act = Activation::parse(act_s)
            .ok_or_else(|| Error::parse(n, format!("unknown activation `{act_s}`")))?;
        let (wn, wl) = reader.next("weight row")?;
        let w = parse_values(wn, wl, 'w', out * inp)?;
        let (bn, bl) = reader.next("bias row")?;
        let b = parse_values(bn, bl, 'b', out)?;
        let layer = Layer::new(
            Tensor::matrix(out, inp, w).map_err(|e| Error::parse(wn, e.to_string()))?,
            Tensor::new(vec![out], b).map_err(|e| Error::parse(bn, e.to_string()))?,
            act,
        )?;
        layers.push(layer);
    }
    Mlp::new(layers).map_err(|e| Error::parse(n, e.to_string()))
}

pub fn checkpoint_from_text(text: &str) -> Result<ModelBundle> {
    let mut reader = LineReader {
        lines: text.lines().enumerate(),
        last: 0,
    };
    let (n, magic) = reader.next("magic line")?;
    if magic.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::parse(n, format!("expected `{CHECKPOINT_MAGIC}`")));
    }
    let (n, cfg) = reader.next("config line")?;
    let f: Vec<&str> = cfg.split_whitespace().collect();
    if f.len() != 5 || f[0] != "config" {
        return Err(Error::parse(n, "malformed config line"));
    }
    let config = ModelConfig {
        d_patch: parse_usize(n, kv(n, f[1], "d_patch")?)?,
        d_f: parse_usize(n, kv(n, f[2], "d_f")?)?,
        num_classes: parse_usize(n, kv(n, f[3], "classes")?)?,
        hidden: parse_usize(n, kv(n, f[4], "hidden")?)?,
    };
    let extractors = (0..NUM_REGIONS)
        .map(|r| read_net(&mut reader, "extractor", VIEW_NAMES[r]))
        .collect::<Result<Vec<_>>>()?;
    let classifiers = (0..NUM_VIEWS)
        .map(|v| read_net(&mut reader, "classifier", VIEW_NAMES[v]))
        .collect::<Result<Vec<_>>>()?;
    let discriminators = (0..NUM_VIEWS)
        .map(|v| read_net(&mut reader, "discriminator", VIEW_NAMES[v]))
        .collect::<Result<Vec<_>>>()?;
    ModelBundle::from_parts(config, extractors, classifiers, discriminators)
}

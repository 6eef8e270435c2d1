//! Tabular datasets: in-memory representation, strict CSV I/O, synthetic
//! generators with known ground truth, and seeded train/test splitting.
//!
//! The CSV schema is fixed: header `f0,...,f{d-1},y` with an optional
//! trailing `env` column holding integer sub-population labels. Floats are
//! written with shortest round-trip formatting, so save/load is lossless.
//!
//! Generators cover four structural regimes:
//!
//! - homogeneous: one linear mechanism, pure noise around it;
//! - selection bias: a spurious covariate whose coupling to the target flips
//!   sign between sub-populations (Laplace noise, scale tied to `|r|`);
//! - hidden variable: a covariate caused by the target with a per-group
//!   coefficient;
//! - spurious label: binary classification where a single feature agrees
//!   with the (noisy) label at a controllable rate.
//!
//! All draws go through a ChaCha8 generator seeded by the caller; the draw
//! order is fixed, so the same seed reproduces a dataset bit for bit.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification { classes: usize },
}

impl TaskKind {
    pub fn n_classes(&self) -> Option<usize> {
        match self {
            TaskKind::Regression => None,
            TaskKind::Classification { classes } => Some(*classes),
        }
    }
}

/// How to interpret the target column when loading a CSV. For classification
/// the number of classes is inferred as `max label + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskHint {
    Regression,
    Classification,
}

/// Provenance attached by generators: the config, the seed, and any
/// structural coefficients drawn from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config: GeneratorConfig,
    /// Coefficients of the shared structural equation, when the generator
    /// draws them (selection bias and hidden variable draw a 5-vector).
    pub theta_s: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    targets: Array1<f64>,
    task: TaskKind,
    true_envs: Option<Vec<usize>>,
    meta: Option<DatasetMeta>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        targets: Array1<f64>,
        task: TaskKind,
        true_envs: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 || features.ncols() == 0 {
            return Err(Error::InvalidConfig("dataset must have at least one row and one feature".into()));
        }
        if targets.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} targets",
                n,
                targets.len()
            )));
        }
        if let Some(envs) = &true_envs {
            if envs.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} feature rows but {} environment labels",
                    n,
                    envs.len()
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix contains NaN or infinity".into()));
        }
        for (i, &y) in targets.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("target {i} is not finite")));
            }
            if let TaskKind::Classification { classes } = task {
                if classes < 2 {
                    return Err(Error::InvalidConfig("classification needs at least 2 classes".into()));
                }
                if y.fract() != 0.0 || y < 0.0 || y >= classes as f64 {
                    return Err(Error::InvalidConfig(format!(
                        "target {i} = {y} is not an integer class in 0..{classes}"
                    )));
                }
            }
        }
        Ok(Dataset { features, targets, task, true_envs, meta: None })
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn targets(&self) -> &Array1<f64> {
        &self.targets
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn true_envs(&self) -> Option<&[usize]> {
        self.true_envs.as_deref()
    }

    pub fn meta(&self) -> Option<&DatasetMeta> {
        self.meta.as_ref()
    }

    /// Target of row `i` as a class index. Panics on regression tasks;
    /// construction already guaranteed integrality for classification.
    pub fn class_target(&self, i: usize) -> usize {
        debug_assert!(matches!(self.task, TaskKind::Classification { .. }));
        self.targets[i] as usize
    }

    /// Number of distinct ground-truth environments, if labels are present.
    pub fn true_env_count(&self) -> Option<usize> {
        self.true_envs.as_ref().map(|e| e.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Row indices belonging to ground-truth environment `e`.
    pub fn indices_of_env(&self, e: usize) -> Vec<usize> {
        match &self.true_envs {
            Some(envs) => envs.iter().enumerate().filter(|(_, &g)| g == e).map(|(i, _)| i).collect(),
            None => Vec::new(),
        }
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig("subset needs at least one row".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.n()) {
            return Err(Error::DimensionMismatch(format!("row index {bad} out of range for n={}", self.n())));
        }
        let d = self.d();
        let mut feats = Array2::zeros((rows.len(), d));
        let mut targs = Array1::zeros(rows.len());
        for (k, &i) in rows.iter().enumerate() {
            feats.row_mut(k).assign(&self.features.row(i));
            targs[k] = self.targets[i];
        }
        let envs = self.true_envs.as_ref().map(|e| rows.iter().map(|&i| e[i]).collect());
        let mut out = Dataset::new(feats, targs, self.task, envs)?;
        out.meta = self.meta.clone();
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// CSV I/O
// ---------------------------------------------------------------------------

impl Dataset {
    /// Parse the fixed schema `f0,...,f{d-1},y[,env]`. Parse failures name
    /// the offending row (1-based, counting the header) and column (1-based).
    pub fn load_csv(path: &Path, hint: TaskHint) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, hint)
    }

    fn parse_csv(text: &str, hint: TaskHint) -> Result<Dataset> {
        // Lines starting with '#' carry provenance (e.g. a config hash) and
        // are not part of the schema.
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::CsvParse { row: 1, col: 1, msg: "empty file".into() })?;
        let cols: Vec<&str> = header.split(',').collect();
        let has_env = cols.last() == Some(&"env");
        let n_feat = cols.len() - 1 - usize::from(has_env);
        if n_feat == 0 {
            return Err(Error::CsvParse { row: 1, col: 1, msg: "no feature columns before y".into() });
        }
        for (j, &c) in cols.iter().enumerate().take(n_feat) {
            if c != format!("f{j}") {
                return Err(Error::CsvParse {
                    row: 1,
                    col: j + 1,
                    msg: format!("expected header f{j}, found {c:?}"),
                });
            }
        }
        if cols[n_feat] != "y" {
            return Err(Error::CsvParse {
                row: 1,
                col: n_feat + 1,
                msg: format!("expected header y, found {:?}", cols[n_feat]),
            });
        }

        let mut feats: Vec<f64> = Vec::new();
        let mut targs: Vec<f64> = Vec::new();
        let mut envs: Vec<usize> = Vec::new();
        let mut n = 0usize;
        for (row, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols.len() {
                return Err(Error::CsvParse {
                    row,
                    col: 1,
                    msg: format!("expected {} cells, found {}", cols.len(), cells.len()),
                });
            }
            for (j, cell) in cells.iter().enumerate().take(n_feat) {
                let v: f64 = cell.parse().map_err(|_| Error::CsvParse {
                    row,
                    col: j + 1,
                    msg: format!("unreadable float {cell:?}"),
                })?;
                feats.push(v);
            }
            let y: f64 = cells[n_feat].parse().map_err(|_| Error::CsvParse {
                row,
                col: n_feat + 1,
                msg: format!("unreadable target {:?}", cells[n_feat]),
            })?;
            targs.push(y);
            if has_env {
                let e: usize = cells[n_feat + 1].parse().map_err(|_| Error::CsvParse {
                    row,
                    col: n_feat + 2,
                    msg: format!("unreadable environment label {:?}", cells[n_feat + 1]),
                })?;
                envs.push(e);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::CsvParse { row: 2, col: 1, msg: "no data rows".into() });
        }

        let task = match hint {
            TaskHint::Regression => TaskKind::Regression,
            TaskHint::Classification => {
                let mut classes = 0usize;
                for (i, &y) in targs.iter().enumerate() {
                    if y.fract() != 0.0 || y < 0.0 {
                        return Err(Error::CsvParse {
                            row: i + 2,
                            col: n_feat + 1,
                            msg: format!("classification target {y} is not a nonnegative integer"),
                        });
                    }
                    classes = classes.max(y as usize + 1);
                }
                if classes < 2 {
                    return Err(Error::InvalidConfig("classification data has fewer than 2 classes".into()));
                }
                TaskKind::Classification { classes }
            }
        };
        let features = Array2::from_shape_vec((n, n_feat), feats)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Dataset::new(features, Array1::from_vec(targs), task, has_env.then_some(envs))
    }

    /// The same schema `load_csv` reads, as a string. The `env` column is
    /// emitted only when ground-truth environments are present.
    pub fn csv_string(&self) -> String {
        let mut out = String::new();
        for j in 0..self.d() {
            let _ = write!(out, "f{j},");
        }
        out.push('y');
        if self.true_envs.is_some() {
            out.push_str(",env");
        }
        out.push('\n');
        for i in 0..self.n() {
            for j in 0..self.d() {
                let _ = write!(out, "{},", self.features[[i, j]]);
            }
            let _ = write!(out, "{}", self.targets[i]);
            if let Some(envs) = &self.true_envs {
                let _ = write!(out, ",{}", envs[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.csv_string()).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Generator configuration
// ---------------------------------------------------------------------------

/// One sub-population of the selection-bias process: a fraction of the
/// sample and the coupling strength `r` between the spurious covariate and
/// the target. `|r| > 1` is required because the Laplace scale is
/// `1 / (5 ln|r|)`; the sign of `r` sets the sign of the coupling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasGroup {
    pub fraction: f64,
    pub r: f64,
}

/// One sub-population of the hidden-variable process: an exact sample count
/// and the coefficient tying the extra covariate to the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HvGroup {
    pub count: usize,
    pub theta_v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    /// `y = beta * x + Normal(0, sigma^2)` with scalar `x ~ Normal(0, 1)`.
    Homogeneous { n: usize, beta: f64, sigma: f64 },
    /// 5 causal + 4 irrelevant covariates, target noise SD `sigma_y`, and a
    /// tenth covariate drawn `Laplace(sign(r) * y, 1 / (5 ln|r|))` per group.
    SelectionBias { n: usize, groups: Vec<BiasGroup>, sigma_y: f64 },
    /// Same causal block but the tenth covariate is `theta_v * y` plus
    /// Gaussian noise of SD `sigma_v`, with `theta_v` varying per group.
    HiddenVariable { n: usize, groups: Vec<HvGroup>, sigma_y: f64, sigma_v: f64 },
    /// Binary labels flipped with probability `flip_prob`; `d_core` Gaussian
    /// features with class-dependent mean `+/-1`; one extra feature equal to
    /// the noisy label (encoded +/-1) with probability `agree_rate`, negated
    /// otherwise.
    SpuriousLabel { n: usize, flip_prob: f64, agree_rate: f64, d_core: usize },
}

impl GeneratorConfig {
    /// Two groups, 80/20, couplings +/-1.9, label-noise variance 0.5.
    pub fn selection_bias_benchmark(n: usize) -> Self {
        GeneratorConfig::SelectionBias {
            n,
            groups: vec![BiasGroup { fraction: 0.8, r: 1.9 }, BiasGroup { fraction: 0.2, r: -1.9 }],
            sigma_y: 0.5f64.sqrt(),
        }
    }

    /// A single-group selection-bias test condition at coupling `r`.
    pub fn selection_bias_single(n: usize, r: f64) -> Self {
        GeneratorConfig::SelectionBias {
            n,
            groups: vec![BiasGroup { fraction: 1.0, r }],
            sigma_y: 0.5f64.sqrt(),
        }
    }

    /// Four groups 8000/1000/1000/1000 with coefficients 3, -1, -2, -3;
    /// label-noise variance 0.5 and covariate-noise variance 0.3.
    pub fn hidden_variable_benchmark() -> Self {
        GeneratorConfig::HiddenVariable {
            n: 11000,
            groups: vec![
                HvGroup { count: 8000, theta_v: 3.0 },
                HvGroup { count: 1000, theta_v: -1.0 },
                HvGroup { count: 1000, theta_v: -2.0 },
                HvGroup { count: 1000, theta_v: -3.0 },
            ],
            sigma_y: 0.5f64.sqrt(),
            sigma_v: 0.3f64.sqrt(),
        }
    }

    /// Label flips at 0.2, ten core features, agreement rate `agree_rate`.
    pub fn spurious_label_benchmark(n: usize, agree_rate: f64) -> Self {
        GeneratorConfig::SpuriousLabel { n, flip_prob: 0.2, agree_rate, d_core: 10 }
    }

    fn validate(&self) -> Result<()> {
        match self {
            GeneratorConfig::Homogeneous { n, beta, sigma } => {
                if *n == 0 {
                    return Err(Error::InvalidConfig("n must be positive".into()));
                }
                if !beta.is_finite() || !sigma.is_finite() || *sigma < 0.0 {
                    return Err(Error::InvalidConfig("beta must be finite and sigma nonnegative".into()));
                }
            }
            GeneratorConfig::SelectionBias { n, groups, sigma_y } => {
                if *n == 0 || groups.is_empty() {
                    return Err(Error::InvalidConfig("need n > 0 and at least one group".into()));
                }
                let total: f64 = groups.iter().map(|g| g.fraction).sum();
                if (total - 1.0).abs() > 1e-9 || groups.iter().any(|g| g.fraction <= 0.0) {
                    return Err(Error::InvalidConfig("group fractions must be positive and sum to 1".into()));
                }
                if groups.iter().any(|g| g.r.abs() <= 1.0 || !g.r.is_finite()) {
                    return Err(Error::InvalidConfig("each group needs |r| > 1".into()));
                }
                if !(*sigma_y >= 0.0) {
                    return Err(Error::InvalidConfig("sigma_y must be nonnegative".into()));
                }
            }
            GeneratorConfig::HiddenVariable { n, groups, sigma_y, sigma_v } => {
                if groups.is_empty() {
                    return Err(Error::InvalidConfig("need at least one group".into()));
                }
                let total: usize = groups.iter().map(|g| g.count).sum();
                if total != *n {
                    return Err(Error::InvalidConfig(format!(
                        "group counts sum to {total}, expected n = {n}"
                    )));
                }
                if groups.iter().any(|g| g.count == 0) {
                    return Err(Error::InvalidConfig("each group needs a positive count".into()));
                }
                if !(*sigma_y >= 0.0) || !(*sigma_v >= 0.0) {
                    return Err(Error::InvalidConfig("noise SDs must be nonnegative".into()));
                }
            }
            GeneratorConfig::SpuriousLabel { n, flip_prob, agree_rate, d_core } => {
                if *n == 0 || *d_core == 0 {
                    return Err(Error::InvalidConfig("need n > 0 and d_core > 0".into()));
                }
                if !(0.0..=1.0).contains(flip_prob) || !(0.0..=1.0).contains(agree_rate) {
                    return Err(Error::InvalidConfig("flip_prob and agree_rate must lie in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    mean + Normal::new(0.0, sd).expect("valid sd").sample(rng)
}

/// Inverse-CDF Laplace draw; `scale` is the diversity parameter `b`.
fn laplace(rng: &mut ChaCha8Rng, location: f64, scale: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    let t = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
    location - scale * u.signum() * t.ln()
}

/// Split `n` into per-group counts: every group but the last is rounded from
/// its fraction, the last absorbs the remainder.
fn counts_from_fractions(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    let mut counts = Vec::with_capacity(fractions.len());
    let mut used = 0usize;
    for (g, &f) in fractions.iter().enumerate() {
        let c = if g + 1 == fractions.len() {
            n.checked_sub(used).unwrap_or(0)
        } else {
            (f * n as f64).round() as usize
        };
        if c == 0 || used + c > n {
            return Err(Error::InvalidConfig(format!(
                "group {g} receives no samples at n = {n}; use larger n or fewer groups"
            )));
        }
        used += c;
        counts.push(c);
    }
    Ok(counts)
}

pub fn generate(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    match cfg {
        GeneratorConfig::Homogeneous { n, beta, sigma } => generate_homogeneous(*n, *beta, *sigma, seed),
        GeneratorConfig::SelectionBias { .. } => generate_selection_bias(cfg, seed),
        GeneratorConfig::HiddenVariable { .. } => generate_hidden_variable(cfg, seed),
        GeneratorConfig::SpuriousLabel { .. } => generate_spurious_label(cfg, seed),
    }
}

pub fn generate_homogeneous(n: usize, beta: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    let cfg = GeneratorConfig::Homogeneous { n, beta, sigma };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = Array2::zeros((n, 1));
    let mut targs = Array1::zeros(n);
    for i in 0..n {
        let x = normal(&mut rng, 0.0, 1.0);
        feats[[i, 0]] = x;
        targs[i] = beta * x + normal(&mut rng, 0.0, sigma);
    }
    Ok(Dataset::new(feats, targs, TaskKind::Regression, None)?
        .with_meta(DatasetMeta { seed, config: cfg, theta_s: None }))
}

/// Shared causal block of the two regression processes: five causal
/// covariates (variance 2 around `s_mean`), four irrelevant ones, and
/// `y = theta_s . s + s1*s2*s3 + eps`.
fn causal_block(rng: &mut ChaCha8Rng, s_mean: f64, sigma_y: f64, theta_s: &[f64]) -> ([f64; 9], f64) {
    let sd = 2.0f64.sqrt();
    let mut x = [0.0f64; 9];
    for v in x.iter_mut().take(5) {
        *v = normal(rng, s_mean, sd);
    }
    for v in x.iter_mut().skip(5) {
        *v = normal(rng, 0.0, sd);
    }
    let mut y = x[0] * x[1] * x[2] + normal(rng, 0.0, sigma_y);
    for (t, s) in theta_s.iter().zip(&x[..5]) {
        y += t * s;
    }
    (x, y)
}

pub fn generate_selection_bias(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let GeneratorConfig::SelectionBias { n, groups, sigma_y } = cfg else {
        return Err(Error::InvalidConfig("expected a selection_bias config".into()));
    };
    let counts = counts_from_fractions(*n, &groups.iter().map(|g| g.fraction).collect::<Vec<_>>())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_s: Vec<f64> = (0..5).map(|_| normal(&mut rng, 0.0, 1.0)).collect();

    let mut feats = Array2::zeros((*n, 10));
    let mut targs = Array1::zeros(*n);
    let mut envs = Vec::with_capacity(*n);
    let mut i = 0usize;
    for (g, (grp, &count)) in groups.iter().zip(&counts).enumerate() {
        let scale = 1.0 / (5.0 * grp.r.abs().ln());
        for _ in 0..count {
            let (x, y) = causal_block(&mut rng, 0.0, *sigma_y, &theta_s);
            let v = laplace(&mut rng, grp.r.signum() * y, scale);
            for (j, &xv) in x.iter().enumerate() {
                feats[[i, j]] = xv;
            }
            feats[[i, 9]] = v;
            targs[i] = y;
            envs.push(g);
            i += 1;
        }
    }
    Ok(Dataset::new(feats, targs, TaskKind::Regression, Some(envs))?
        .with_meta(DatasetMeta { seed, config: cfg.clone(), theta_s: Some(theta_s) }))
}

pub fn generate_hidden_variable(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let GeneratorConfig::HiddenVariable { n, groups, sigma_y, sigma_v } = cfg else {
        return Err(Error::InvalidConfig("expected a hidden_variable config".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_s: Vec<f64> = (0..5).map(|_| normal(&mut rng, 0.0, 1.0)).collect();

    let mut feats = Array2::zeros((*n, 10));
    let mut targs = Array1::zeros(*n);
    let mut envs = Vec::with_capacity(*n);
    let mut i = 0usize;
    for (g, grp) in groups.iter().enumerate() {
        for _ in 0..grp.count {
            let (x, y) = causal_block(&mut rng, 2.0, *sigma_y, &theta_s);
            let v = grp.theta_v * y + normal(&mut rng, 0.0, *sigma_v);
            for (j, &xv) in x.iter().enumerate() {
                feats[[i, j]] = xv;
            }
            feats[[i, 9]] = v;
            targs[i] = y;
            envs.push(g);
            i += 1;
        }
    }
    Ok(Dataset::new(feats, targs, TaskKind::Regression, Some(envs))?
        .with_meta(DatasetMeta { seed, config: cfg.clone(), theta_s: Some(theta_s) }))
}

/// Environment 0 collects rows where the spurious feature agrees with the
/// noisy label, environment 1 the rest.
pub fn generate_spurious_label(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let GeneratorConfig::SpuriousLabel { n, flip_prob, agree_rate, d_core } = cfg else {
        return Err(Error::InvalidConfig("expected a spurious_label config".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = Array2::zeros((*n, d_core + 1));
    let mut targs = Array1::zeros(*n);
    let mut envs = Vec::with_capacity(*n);
    for i in 0..*n {
        let y = usize::from(rng.random::<f64>() < 0.5);
        let mean = if y == 1 { 1.0 } else { -1.0 };
        for j in 0..*d_core {
            feats[[i, j]] = normal(&mut rng, mean, 1.0);
        }
        let flipped = rng.random::<f64>() < *flip_prob;
        let y_noisy = if flipped { 1 - y } else { y };
        let pm = if y_noisy == 1 { 1.0 } else { -1.0 };
        let agree = rng.random::<f64>() < *agree_rate;
        feats[[i, *d_core]] = if agree { pm } else { -pm };
        targs[i] = y_noisy as f64;
        envs.push(usize::from(!agree));
    }
    Ok(Dataset::new(feats, targs, TaskKind::Classification { classes: 2 }, Some(envs))?
        .with_meta(DatasetMeta { seed, config: cfg.clone(), theta_s: None }))
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Seeded shuffle, then the first `floor(n * fraction)` rows form the test
/// set and the rest the training set. Returns `(train, test)`.
pub fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("test fraction {fraction} must lie strictly in (0, 1)")));
    }
    let n = data.n();
    let n_test = (n as f64 * fraction).floor() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidConfig(format!(
            "fraction {fraction} leaves an empty side at n = {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, explicit so the draw order stays part of the contract.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let test = data.subset(&idx[..n_test])?;
    let train = data.subset(&idx[n_test..])?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------

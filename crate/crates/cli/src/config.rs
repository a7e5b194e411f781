//! Experiment configuration files.
//!
//! The format is a flat INI dialect:
//!
//! ```text
//! line    := blank | comment | section | entry
//! comment := ('#' | ';') <any text>
//! section := '[' name ']'
//! entry   := key '=' value
//! ```
//!
//! Names and keys use `[A-Za-z0-9_-]`. Values are trimmed; a list is
//! comma-separated and a matrix is a `;`-separated list of rows. Each section
//! and each key may appear once, entries must follow a section header, and
//! unknown sections or keys are errors.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "line {}: key `{k}`: {}", self.line, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, key: Option<&str>, message: impl Into<String>) -> ConfigError {
    ConfigError { line, key: key.map(str::to_string), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

/// Untyped view of a configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Ini {
    pub sections: Vec<Section>,
}

impl Ini {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn parse_ini(text: &str) -> Result<Ini, ConfigError> {
    let mut ini = Ini::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(line, None, "section header is missing `]`"))?
                .trim();
            if !valid_name(name) {
                return Err(err(line, None, format!("invalid section name `{name}`")));
            }
            if ini.section(name).is_some() {
                return Err(err(line, None, format!("section [{name}] appears twice")));
            }
            ini.sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
            continue;
        }
        let (key, value) = s.split_once('=').ok_or_else(|| err(line, None, "expected `key = value`"))?;
        let key = key.trim();
        if !valid_name(key) {
            return Err(err(line, None, format!("invalid key `{key}`")));
        }
        let section = ini
            .sections
            .last_mut()
            .ok_or_else(|| err(line, Some(key), "entry before any section header"))?;
        if section.entries.iter().any(|e| e.key == key) {
            return Err(err(line, Some(key), format!("duplicate key in [{}]", section.name)));
        }
        section.entries.push(Entry { key: key.to_string(), value: value.trim().to_string(), line });
    }
    Ok(ini)
}

/// Typed access to one section; keys never read are reported as unknown.
struct Table<'a> {
    name: &'static str,
    section: Option<&'a Section>,
    used: BTreeSet<&'a str>,
}

impl<'a> Table<'a> {
    fn new(ini: &'a Ini, name: &'static str) -> Self {
        Self { name, section: ini.section(name), used: BTreeSet::new() }
    }

    fn present(&self) -> bool {
        self.section.is_some()
    }

    fn line(&self) -> usize {
        self.section.map_or(0, |s| s.line)
    }

    fn raw(&mut self, key: &'a str) -> Option<&'a Entry> {
        let entry = self.section?.entries.iter().find(|e| e.key == key)?;
        self.used.insert(key);
        Some(entry)
    }

    fn missing(&self, key: &str) -> ConfigError {
        err(self.line(), Some(key), format!("required in [{}]", self.name))
    }

    fn opt<T>(&mut self, key: &'a str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => parse(&e.value).map(Some).map_err(|m| err(e.line, Some(key), m)),
        }
    }

    fn req<T>(&mut self, key: &'a str, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        match self.opt(key, parse)? {
            Some(v) => Ok(v),
            None => Err(self.missing(key)),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some(s) = self.section {
            if let Some(e) = s.entries.iter().find(|e| !self.used.contains(e.key.as_str())) {
                return Err(err(e.line, Some(&e.key), format!("unknown key in [{}]", self.name)));
            }
        }
        Ok(())
    }
}

fn number(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = number(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("`{s}` must be positive"))
    }
}

fn count(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))?;
    if v > 0 {
        Ok(v)
    } else {
        Err("must be at least 1".into())
    }
}

fn seed(s: &str) -> Result<u64, String> {
    s.parse().map_err(|_| format!("`{s}` is not an unsigned 64-bit integer"))
}

fn list(s: &str) -> Result<Vec<f64>, String> {
    if s.is_empty() {
        return Err("list is empty".into());
    }
    s.split(',').map(|p| number(p.trim())).collect()
}

fn positive_list(s: &str) -> Result<Vec<f64>, String> {
    let v = list(s)?;
    if v.iter().all(|x| *x > 0.0) {
        Ok(v)
    } else {
        Err("all entries must be positive".into())
    }
}

fn rows(s: &str) -> Result<Vec<Vec<f64>>, String> {
    let rows: Vec<Vec<f64>> = s.split(';').map(|r| list(r.trim())).collect::<Result<_, _>>()?;
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err("rows have different lengths".into());
    }
    Ok(rows)
}

fn square(s: &str) -> Result<DMatrix<f64>, String> {
    let r = rows(s)?;
    if r.len() != r[0].len() {
        return Err(format!("matrix must be square, got {}x{}", r.len(), r[0].len()));
    }
    let n = r.len();
    Ok(DMatrix::from_row_iterator(n, n, r.into_iter().flatten()))
}

fn choice<T: Copy>(options: &'static [(&'static str, T)]) -> impl Fn(&str) -> Result<T, String> {
    move |s| {
        options.iter().find(|(k, _)| *k == s).map(|(_, v)| *v).ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(k, _)| *k).collect();
            format!("`{s}` is not one of {}", names.join(", "))
        })
    }
}

fn string(s: &str) -> Result<String, String> {
    if s.is_empty() {
        Err("value is empty".into())
    } else {
        Ok(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispersionKind {
    Constant,
    SqrtOnePlusSquare,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Heat { dim: usize, scale: f64 },
    Ou { c: DMatrix<f64>, sigma: DMatrix<f64> },
    Affine { b0: DVector<f64>, b1: DMatrix<f64>, sigma: DMatrix<f64> },
    SinDrift { amplitude: f64, dispersion: DispersionKind, sigma: f64, clip: f64 },
    LinearDrift { rate: f64, dispersion: DispersionKind, sigma: f64, clip: f64 },
    Piecewise { breakpoints: Vec<f64>, rates: Vec<f64>, sigmas: Vec<f64> },
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::Heat { dim, .. } => *dim,
            Self::Ou { c, .. } => c.nrows(),
            Self::Affine { b1, .. } => b1.nrows(),
            _ => 1,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::Heat { .. } => "heat",
            Self::Ou { .. } => "ou",
            Self::Affine { .. } => "affine",
            Self::SinDrift { .. } => "sin-drift",
            Self::LinearDrift { .. } => "linear-drift",
            Self::Piecewise { .. } => "piecewise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LawSpec {
    Dirac { points: Vec<Vec<f64>>, weights: Vec<f64> },
    Gaussian { mean: Vec<f64>, covariance: DMatrix<f64> },
    /// Exact OU marginal of the initial law at the horizon.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverseMode {
    Analytic,
    SelfConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdeKind {
    Exact,
    Binned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseSpec {
    pub mode: ReverseMode,
    pub epsilon_stop: Option<f64>,
    /// Outer `None`: mode default. Inner `None`: no clipping.
    pub drift_clip: Option<Option<f64>>,
    pub bandwidth: Option<Vec<f64>>,
    pub kde: KdeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvertRoute {
    AffineMean,
    AffineMc,
    HeatFourier,
    Search,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Wasserstein1,
    MeanDistance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertSpec {
    pub route: InvertRoute,
    pub terminal_mean: Option<Vec<f64>>,
    pub data: Option<PathBuf>,
    pub source: Option<Vec<f64>>,
    pub candidates: Option<Vec<Vec<f64>>>,
    pub expected: Option<Vec<f64>>,
    pub metric: MetricKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectVerdict {
    Injective,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectivitySpec {
    pub candidates: Vec<Vec<f64>>,
    pub metric: MetricKind,
    pub expect: ExpectVerdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSpec {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub half_width: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub ks: f64,
    pub triangle: f64,
    pub forward_ks: Option<f64>,
    pub source_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub particles: usize,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub initial: Option<LawSpec>,
    pub terminal: Option<LawSpec>,
    pub reverse: ReverseSpec,
    pub invert: Option<InvertSpec>,
    pub injectivity: Option<InjectivitySpec>,
    pub moment: Option<MomentSpec>,
    pub thresholds: Thresholds,
}

const SECTIONS: &[&str] =
    &["experiment", "model", "grid", "initial", "terminal", "reverse", "invert", "injectivity", "moment", "thresholds"];

const DISPERSIONS: &[(&str, DispersionKind)] =
    &[("constant", DispersionKind::Constant), ("sqrt-one-plus-square", DispersionKind::SqrtOnePlusSquare)];

const METRICS: &[(&str, MetricKind)] =
    &[("wasserstein1", MetricKind::Wasserstein1), ("mean-distance", MetricKind::MeanDistance)];

fn parse_model<'a>(t: &mut Table<'a>) -> Result<ModelSpec, ConfigError> {
    #[derive(Clone, Copy)]
    enum F {
        Heat,
        Ou,
        Affine,
        Sin,
        Linear,
        Piecewise,
    }
    let family = t.req(
        "family",
        choice(&[
            ("heat", F::Heat),
            ("ou", F::Ou),
            ("affine", F::Affine),
            ("sin-drift", F::Sin),
            ("linear-drift", F::Linear),
            ("piecewise", F::Piecewise),
        ]),
    )?;
    let line = t.line();
    let spec = match family {
        F::Heat => ModelSpec::Heat { dim: t.opt("dim", count)?.unwrap_or(1), scale: t.opt("scale", positive)?.unwrap_or(1.0) },
        F::Ou => {
            let c = t.req("c", square)?;
            let sigma = t.req("sigma", square)?;
            if c.shape() != sigma.shape() {
                return Err(err(line, Some("sigma"), "must have the shape of `c`"));
            }
            ModelSpec::Ou { c, sigma }
        }
        F::Affine => {
            let b1 = t.req("b1", square)?;
            let b0 = DVector::from_vec(t.opt("b0", list)?.unwrap_or_else(|| vec![0.0; b1.nrows()]));
            let sigma = t.req("sigma", square)?;
            if b0.len() != b1.nrows() || sigma.shape() != b1.shape() {
                return Err(err(line, Some("b0"), "b0, b1 and sigma dimensions disagree"));
            }
            ModelSpec::Affine { b0, b1, sigma }
        }
        F::Sin | F::Linear => {
            let coefficient = if matches!(family, F::Sin) {
                t.opt("amplitude", number)?.unwrap_or(1.0)
            } else {
                t.req("rate", number)?
            };
            let dispersion = t.opt("dispersion", choice(DISPERSIONS))?.unwrap_or(DispersionKind::Constant);
            let sigma = t.opt("sigma", positive)?.unwrap_or(1.0);
            let clip = t.opt("clip", positive)?.unwrap_or(10.0);
            if matches!(family, F::Sin) {
                ModelSpec::SinDrift { amplitude: coefficient, dispersion, sigma, clip }
            } else {
                ModelSpec::LinearDrift { rate: coefficient, dispersion, sigma, clip }
            }
        }
        F::Piecewise => {
            let breakpoints = t.req("breakpoints", positive_list)?;
            let rates = t.req("rates", list)?;
            let sigmas = t.req("sigmas", positive_list)?;
            if rates.len() != breakpoints.len() + 1 || sigmas.len() != rates.len() {
                return Err(err(line, Some("rates"), "need one rate and one sigma per piece (breakpoints + 1)"));
            }
            if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
                return Err(err(line, Some("breakpoints"), "must be strictly increasing"));
            }
            ModelSpec::Piecewise { breakpoints, rates, sigmas }
        }
    };
    Ok(spec)
}

fn parse_law<'a>(t: &mut Table<'a>, allow_forward: bool) -> Result<LawSpec, ConfigError> {
    #[derive(Clone, Copy, PartialEq)]
    enum K {
        Dirac,
        Gaussian,
        Forward,
    }
    let kinds: &'static [(&'static str, K)] = &[("dirac", K::Dirac), ("gaussian", K::Gaussian), ("forward", K::Forward)];
    let kind = t.req("kind", choice(kinds))?;
    let line = t.line();
    match kind {
        K::Forward if !allow_forward => Err(err(line, Some("kind"), "`forward` is only valid in [terminal]")),
        K::Forward => Ok(LawSpec::Forward),
        K::Dirac => {
            let points = t.req("points", rows)?;
            let weights = t.opt("weights", list)?.unwrap_or_else(|| vec![1.0 / points.len() as f64; points.len()]);
            if weights.len() != points.len() || weights.iter().any(|w| *w < 0.0) {
                return Err(err(line, Some("weights"), "need one non-negative weight per point"));
            }
            let total: f64 = weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(err(line, Some("weights"), format!("weights sum to {total}, not 1")));
            }
            Ok(LawSpec::Dirac { points, weights })
        }
        K::Gaussian => {
            let mean = t.req("mean", list)?;
            let covariance = t.req("covariance", square)?;
            if covariance.nrows() != mean.len() {
                return Err(err(line, Some("covariance"), "dimension differs from `mean`"));
            }
            Ok(LawSpec::Gaussian { mean, covariance })
        }
    }
}

fn law_dim(law: &LawSpec) -> Option<usize> {
    match law {
        LawSpec::Dirac { points, .. } => Some(points[0].len()),
        LawSpec::Gaussian { mean, .. } => Some(mean.len()),
        LawSpec::Forward => None,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = parse_ini(text)?;
        if let Some(s) = ini.sections.iter().find(|s| !SECTIONS.contains(&s.name.as_str())) {
            return Err(err(s.line, None, format!("unknown section [{}]", s.name)));
        }

        let mut t = Table::new(&ini, "experiment");
        if !t.present() {
            return Err(err(0, Some("seed"), "missing [experiment] section with a seed"));
        }
        let seed_value = t.req("seed", seed)?;
        let output = PathBuf::from(t.opt("output", string)?.unwrap_or_else(|| "out".into()));
        let particles = t.opt("particles", count)?.unwrap_or(10_000);
        t.finish()?;

        let mut t = Table::new(&ini, "model");
        if !t.present() {
            return Err(err(0, Some("family"), "missing [model] section"));
        }
        let model = parse_model(&mut t)?;
        t.finish()?;
        let dim = model.dim();

        let mut t = Table::new(&ini, "grid");
        if !t.present() {
            return Err(err(0, Some("horizon"), "missing [grid] section"));
        }
        let horizon = t.req("horizon", positive)?;
        let steps = t.opt("steps", count)?;
        let dt = t.opt("dt", positive)?;
        let n_steps = match (steps, dt) {
            (Some(_), Some(_)) => return Err(err(t.line(), Some("dt"), "give either `steps` or `dt`, not both")),
            (Some(n), None) => n,
            (None, dt) => (horizon / dt.unwrap_or(1e-3) - 1e-9).ceil().max(1.0) as usize,
        };
        t.finish()?;
        let grid = GridSpec { horizon, n_steps };

        let mut laws = [None, None];
        for (slot, name) in laws.iter_mut().zip(["initial", "terminal"]) {
            let mut t = Table::new(&ini, name);
            if t.present() {
                let law = parse_law(&mut t, name == "terminal")?;
                if law_dim(&law).is_some_and(|d| d != dim) {
                    return Err(err(t.line(), Some("kind"), format!("law dimension differs from the model ({dim})")));
                }
                *slot = Some(law);
            }
            t.finish()?;
        }
        let [initial, terminal] = laws;

        let mut t = Table::new(&ini, "reverse");
        let mode = t
            .opt("mode", choice(&[("analytic", ReverseMode::Analytic), ("self-consistent", ReverseMode::SelfConsistent)]))?
            .unwrap_or(ReverseMode::Analytic);
        let epsilon_stop = t.opt("epsilon_stop", positive)?;
        if epsilon_stop.is_some_and(|e| e >= horizon) {
            return Err(err(t.line(), Some("epsilon_stop"), "must be below the horizon"));
        }
        let drift_clip = t.opt("drift_clip", |s| if s == "none" { Ok(None) } else { positive(s).map(Some) })?;
        let bandwidth = t.opt("bandwidth", positive_list)?;
        if bandwidth.as_ref().is_some_and(|b| b.len() != dim) {
            return Err(err(t.line(), Some("bandwidth"), "need one bandwidth per dimension"));
        }
        let kde = t.opt("kde", choice(&[("exact", KdeKind::Exact), ("binned", KdeKind::Binned)]))?.unwrap_or(KdeKind::Binned);
        t.finish()?;
        let reverse = ReverseSpec { mode, epsilon_stop, drift_clip, bandwidth, kde };

        let check_dim = |t: &Table, key: &str, v: &[f64]| {
            if v.len() == dim {
                Ok(())
            } else {
                Err(err(t.line(), Some(key), format!("expected {dim} coordinates")))
            }
        };

        let mut t = Table::new(&ini, "invert");
        let invert = if t.present() {
            let route = t.req(
                "route",
                choice(&[
                    ("affine-mean", InvertRoute::AffineMean),
                    ("affine-mc", InvertRoute::AffineMc),
                    ("heat-fourier", InvertRoute::HeatFourier),
                    ("search", InvertRoute::Search),
                ]),
            )?;
            let terminal_mean = t.opt("terminal_mean", list)?;
            let data = t.opt("data", string)?.map(PathBuf::from);
            let source = t.opt("source", list)?;
            let candidates = t.opt("candidates", rows)?;
            let expected = t.opt("expected", list)?;
            let metric = t.opt("metric", choice(METRICS))?.unwrap_or(MetricKind::Wasserstein1);
            for (key, v) in [("terminal_mean", &terminal_mean), ("source", &source), ("expected", &expected)] {
                if let Some(v) = v {
                    check_dim(&t, key, v)?;
                }
            }
            if let Some(c) = &candidates {
                check_dim(&t, "candidates", &c[0])?;
            }
            match route {
                InvertRoute::AffineMean if terminal_mean.is_none() => return Err(t.missing("terminal_mean")),
                InvertRoute::Search if candidates.is_none() => return Err(t.missing("candidates")),
                InvertRoute::AffineMc | InvertRoute::HeatFourier | InvertRoute::Search
                    if data.is_none() && source.is_none() =>
                {
                    return Err(err(t.line(), Some("data"), "need `data` or `source` to obtain a terminal cloud"));
                }
                _ => {}
            }
            Some(InvertSpec { route, terminal_mean, data, source, candidates, expected, metric })
        } else {
            None
        };
        t.finish()?;

        let mut t = Table::new(&ini, "injectivity");
        let injectivity = if t.present() {
            let candidates = t.req("candidates", rows)?;
            check_dim(&t, "candidates", &candidates[0])?;
            if candidates.len() < 2 {
                return Err(err(t.line(), Some("candidates"), "need at least two candidates"));
            }
            let metric = t.opt("metric", choice(METRICS))?.unwrap_or(MetricKind::Wasserstein1);
            let expect = t
                .opt("expect", choice(&[("injective", ExpectVerdict::Injective), ("ambiguous", ExpectVerdict::Ambiguous)]))?
                .unwrap_or(ExpectVerdict::Injective);
            Some(InjectivitySpec { candidates, metric, expect })
        } else {
            None
        };
        t.finish()?;

        let mut t = Table::new(&ini, "moment");
        let moment = if t.present() {
            let x = t.req("x", list)?;
            let y = t.req("y", list)?;
            check_dim(&t, "x", &x)?;
            check_dim(&t, "y", &y)?;
            let half_width = t.opt("box", positive)?.unwrap_or(5.0);
            let probes = t.opt("probes", count)?.unwrap_or(200);
            Some(MomentSpec { x, y, half_width, probes })
        } else {
            None
        };
        t.finish()?;

        let mut t = Table::new(&ini, "thresholds");
        let thresholds = Thresholds {
            ks: t.opt("ks", positive)?.unwrap_or(0.02),
            triangle: t.opt("triangle", positive)?.unwrap_or(1e-6),
            forward_ks: t.opt("forward_ks", positive)?,
            source_error: t.opt("source_error", positive)?,
        };
        t.finish()?;

        Ok(Self {
            seed: seed_value,
            output,
            particles,
            model,
            grid,
            initial,
            terminal,
            reverse,
            invert,
            injectivity,
            moment,
            thresholds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[experiment]\nseed = 7\n[model]\nfamily = heat\n[grid]\nhorizon = 1\n";

    #[test]
    fn minimal_config_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.grid.n_steps, 1000);
        assert_eq!(c.model, ModelSpec::Heat { dim: 1, scale: 1.0 });
        assert_eq!(c.particles, 10_000);
        assert_eq!(c.output, PathBuf::from("out"));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = parse_ini("[a]\nx = 1\nbroken\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert_eq!(parse_ini("x = 1\n").unwrap_err().key.as_deref(), Some("x"));
        assert_eq!(parse_ini("[a]\nx=1\nx=2\n").unwrap_err().line, 3);
        assert_eq!(parse_ini("[a]\n[a]\n").unwrap_err().line, 2);
        assert!(parse_ini("[a\n").is_err());
        assert!(parse_ini("# c\n; c\n\n[a]\n k = v = w \n").unwrap().sections[0].entries[0].value == "v = w");
    }

    #[test]
    fn missing_seed_is_rejected() {
        let e = ExperimentConfig::parse("[experiment]\n[model]\nfamily = heat\n[grid]\nhorizon = 1\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("seed"));
        let e = ExperimentConfig::parse("[model]\nfamily = heat\n[grid]\nhorizon = 1\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("seed"));
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let e = ExperimentConfig::parse(&format!("{MINIMAL}[thresholds]\nks = 0.1\nkss = 2\n")).unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (9, Some("kss")));
        let e = ExperimentConfig::parse(&format!("{MINIMAL}[extra]\n")).unwrap_err();
        assert_eq!(e.line, 7);
        // Keys of other families are unknown too.
        let e = ExperimentConfig::parse("[experiment]\nseed=1\n[model]\nfamily=heat\nrate=2\n[grid]\nhorizon=1\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("rate"));
    }

    #[test]
    fn numeric_validation() {
        for bad in ["horizon = -1", "horizon = nan", "horizon = inf", "horizon = abc"] {
            let text = format!("[experiment]\nseed = 1\n[model]\nfamily = heat\n[grid]\n{bad}\n");
            let e = ExperimentConfig::parse(&text).unwrap_err();
            assert_eq!((e.line, e.key.as_deref()), (6, Some("horizon")), "{bad}");
        }
        let e = ExperimentConfig::parse("[experiment]\nseed = -3\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("seed"));
    }

    #[test]
    fn full_config_round_trip() {
        let text = "\
[experiment]
seed = 11
output = results
particles = 500
[model]
family = ou
c = 0, 1; -1, 0
sigma = 1, 0; 0, 1
[grid]
horizon = 0.5
steps = 50
[initial]
kind = dirac
points = 1, 0
[terminal]
kind = forward
[reverse]
mode = self-consistent
drift_clip = none
kde = exact
[injectivity]
candidates = 0, 0; 1, 0; 0, 1
metric = mean-distance
[thresholds]
ks = 0.05
";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.model.dim(), 2);
        assert_eq!(c.grid.n_steps, 50);
        assert_eq!(c.initial, Some(LawSpec::Dirac { points: vec![vec![1.0, 0.0]], weights: vec![1.0] }));
        assert_eq!(c.terminal, Some(LawSpec::Forward));
        assert_eq!(c.reverse.drift_clip, Some(None));
        assert_eq!(c.reverse.mode, ReverseMode::SelfConsistent);
        assert_eq!(c.injectivity.unwrap().candidates.len(), 3);
        assert_eq!(c.thresholds.ks, 0.05);
    }

    #[test]
    fn dimension_mismatches_are_caught() {
        let text = "[experiment]\nseed=1\n[model]\nfamily=heat\ndim=2\n[grid]\nhorizon=1\n[initial]\nkind=dirac\npoints=0\n";
        assert!(ExperimentConfig::parse(text).is_err());
        let text = "[experiment]\nseed=1\n[model]\nfamily=ou\nc=1,0;0,1\nsigma=1\n[grid]\nhorizon=1\n";
        assert_eq!(ExperimentConfig::parse(text).unwrap_err().key.as_deref(), Some("sigma"));
        let text = "[experiment]\nseed=1\n[model]\nfamily=heat\n[grid]\nhorizon=1\n[initial]\nkind=forward\n";
        assert!(ExperimentConfig::parse(text).is_err());
    }
}

//! Experiment configuration files.
//!
//! Plain text, one item per line:
//!
//! ```text
//! # comment              (also `;`)
//! [section]              or [section label]
//! key = value
//! ```
//!
//! Keys and section names are case-insensitive; values are trimmed. Unknown
//! sections or keys and repeated keys are errors. Relative paths resolve
//! against the directory holding the config file. The full list of sections
//! and keys lives in `docs/config.md`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::ScaleMode;
use crate::backtest::{FilterScope, Weighting};
use crate::data::{SyntheticSpec, YearMonth};
use crate::error::{Error, Result};
use crate::model::{matrix_row, CrossMask, ModelFamily, MODEL_MATRIX};
use crate::report::DEFAULT_HISTOGRAM_BINS;
use crate::training::{AdamConfig, TestPeriod, TrainOptions, REFERENCE_IN_SAMPLE_LEN};

#[derive(Debug, Clone, PartialEq)]
struct Section {
    name: String,
    label: Option<String>,
    line: usize,
    entries: BTreeMap<String, (String, usize)>,
}

fn fail<T>(line: usize, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Config(format!("line {line}: {msg}")))
}

fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(inner) = s.strip_prefix('[') {
            let Some(inner) = inner.strip_suffix(']') else {
                return fail(line, "section header is missing `]`");
            };
            let mut parts = inner.trim().splitn(2, char::is_whitespace);
            let name = parts.next().unwrap_or_default().to_ascii_lowercase();
            if name.is_empty() {
                return fail(line, "empty section name");
            }
            let label = parts.next().map(|l| l.trim().to_string()).filter(|l| !l.is_empty());
            sections.push(Section {
                name,
                label,
                line,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let Some((key, value)) = s.split_once('=') else {
            return fail(line, format!("expected `key = value`, found `{s}`"));
        };
        let key = key.trim().to_ascii_lowercase();
        if key.is_empty() {
            return fail(line, "empty key");
        }
        let Some(section) = sections.last_mut() else {
            return fail(line, "entry before the first [section]");
        };
        if section.entries.insert(key.clone(), (value.trim().to_string(), line)).is_some() {
            return fail(line, format!("key `{key}` repeated in [{}]", section.name));
        }
    }
    Ok(sections)
}

/// Typed access to one section, tracking which keys were read.
struct Reader<'a> {
    section: &'a Section,
    used: Vec<&'a str>,
}

impl<'a> Reader<'a> {
    fn new(section: &'a Section) -> Self {
        Reader { section, used: Vec::new() }
    }

    fn raw(&mut self, key: &'a str) -> Option<(&'a str, usize)> {
        self.used.push(key);
        self.section.entries.get(key).map(|(v, l)| (v.as_str(), *l))
    }

    fn get<T: FromStr>(&mut self, key: &'a str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .or_else(|_| fail(line, format!("invalid value `{v}` for `{key}`"))),
        }
    }

    fn flag(&mut self, key: &'a str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "y" | "1" => Ok(Some(true)),
                "false" | "no" | "off" | "n" | "0" => Ok(Some(false)),
                _ => fail(line, format!("invalid flag `{v}` for `{key}`")),
            },
        }
    }

    fn finish(self) -> Result<()> {
        for (key, (_, line)) in &self.section.entries {
            if !self.used.contains(&key.as_str()) {
                return fail(*line, format!("unknown key `{key}` in [{}]", self.section.name));
            }
        }
        Ok(())
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// Where the panels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files {
        factors: PathBuf,
        returns: PathBuf,
        caps: Option<PathBuf>,
    },
}

/// One model of the experiment before the data widths are known.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub family: ModelFamily,
    pub heads: usize,
    pub lnf: bool,
    /// Overrides the shared base width; rounded up so `heads` divides it.
    pub d_model: Option<usize>,
}

/// Widths and switches shared by every model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDefaults {
    /// Base width; defaults to the stock count.
    pub d_model: Option<usize>,
    pub latent_fraction: f64,
    pub n_blocks: usize,
    /// Defaults to the stock count.
    pub pretrain_out_dim: Option<usize>,
    pub scale: ScaleMode,
    pub cross_mask: CrossMask,
    pub finetune_pretrain: bool,
}

impl Default for ModelDefaults {
    fn default() -> Self {
        ModelDefaults {
            d_model: None,
            latent_fraction: 0.7,
            n_blocks: 1,
            pretrain_out_dim: None,
            scale: ScaleMode::HeadWidth,
            cross_mask: CrossMask::Causal,
            finetune_pretrain: false,
        }
    }
}

/// Which filter variants the backtest runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    Off,
    On,
    Both,
}

impl FilterMode {
    pub fn variants(self) -> &'static [bool] {
        match self {
            FilterMode::Off => &[false],
            FilterMode::On => &[true],
            FilterMode::Both => &[false, true],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestSettings {
    pub weightings: Vec<Weighting>,
    pub filter: FilterMode,
    pub keep_fraction: f64,
    pub scope: FilterScope,
    /// Constant monthly risk-free rate subtracted in Sharpe and Sortino.
    pub rf: f64,
}

impl Default for BacktestSettings {
    fn default() -> Self {
        BacktestSettings {
            weightings: vec![Weighting::Equal, Weighting::Value],
            filter: FilterMode::Both,
            keep_fraction: 0.5,
            scope: FilterScope::Longs,
            rf: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub source: DataSource,
    pub periods: Vec<TestPeriod>,
    pub models: Vec<ModelSpec>,
    pub model_defaults: ModelDefaults,
    pub in_sample_len: usize,
    pub train: TrainOptions,
    pub backtest: BacktestSettings,
    pub histogram_bins: usize,
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative data paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let sections = parse_sections(text)?;
        let mut seen: Vec<(&str, Option<&str>)> = Vec::new();
        for s in &sections {
            let key = (s.name.as_str(), s.label.as_deref());
            if seen.contains(&key) {
                return fail(s.line, format!("section [{}] repeated", s.name));
            }
            seen.push(key);
            let labelled = s.name == "model";
            if labelled != s.label.is_some() {
                return fail(
                    s.line,
                    if labelled {
                        "[model] sections need a name, e.g. [model SERT-wide]".to_string()
                    } else {
                        format!("section [{}] takes no label", s.name)
                    },
                );
            }
            if !matches!(
                s.name.as_str(),
                "experiment" | "synthetic" | "data" | "periods" | "models" | "model" | "training" | "backtest" | "report"
            ) {
                return fail(s.line, format!("unknown section [{}]", s.name));
            }
        }
        let find = |name: &str| sections.iter().find(|s| s.name == name);
        let empty = Section {
            name: String::new(),
            label: None,
            line: 0,
            entries: BTreeMap::new(),
        };

        let mut r = Reader::new(find("experiment").unwrap_or(&empty));
        let seed = r.get("seed")?;
        let out = r.get::<String>("out")?.map(|o| base.join(o));
        let jobs = r.get("jobs")?;
        r.finish()?;
        if jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }

        let mut r = Reader::new(find("training").unwrap_or(&empty));
        let in_sample_len: Option<usize> = r.get("in_sample_len")?;
        let defaults = TrainOptions::default();
        let adam = AdamConfig {
            eta: r.get("lr")?.unwrap_or(defaults.adam.eta),
            beta1: r.get("beta1")?.unwrap_or(defaults.adam.beta1),
            beta2: r.get("beta2")?.unwrap_or(defaults.adam.beta2),
            epsilon: r.get("epsilon")?.unwrap_or(defaults.adam.epsilon),
        };
        let pretrain_adam = AdamConfig {
            eta: r.get("pretrain_lr")?.unwrap_or(defaults.pretrain_adam.eta),
            ..adam
        };
        let train = TrainOptions {
            adam,
            patience: r.get("patience")?.unwrap_or(defaults.patience),
            max_epochs: r.get("max_epochs")?.unwrap_or(defaults.max_epochs),
            pretrain_epochs: r.get("pretrain_epochs")?.unwrap_or(defaults.pretrain_epochs),
            pretrain_adam,
            val_fraction: r.get("val_fraction")?.unwrap_or(defaults.val_fraction),
            stride: r.get("stride")?,
            context_len: r.get("context_len")?,
        };
        r.finish()?;
        train.validate()?;
        if in_sample_len == Some(0) {
            return Err(Error::Config("in_sample_len must be positive".into()));
        }

        let source = match (find("synthetic"), find("data")) {
            (Some(_), Some(_)) => return Err(Error::Config("use either [synthetic] or [data], not both".into())),
            (None, None) => return Err(Error::Config("a [synthetic] or [data] section is required".into())),
            (Some(s), None) => {
                let mut r = Reader::new(s);
                let d = SyntheticSpec::default();
                let spec = SyntheticSpec {
                    months: r.get("months")?.unwrap_or(d.months),
                    factors: r.get("factors")?.unwrap_or(d.factors),
                    stocks: r.get("stocks")?.unwrap_or(d.stocks),
                    noise_sigma: r.get("noise_sigma")?.unwrap_or(d.noise_sigma),
                    missing_rate: r.get("missing_rate")?.unwrap_or(d.missing_rate),
                    return_scale: r.get("return_scale")?.unwrap_or(d.return_scale),
                    shuffle_labels: r.flag("shuffle_labels")?.unwrap_or(d.shuffle_labels),
                    in_sample_len: in_sample_len.unwrap_or(d.in_sample_len),
                    val_fraction: train.val_fraction,
                    start: r.get("start")?.unwrap_or(d.start),
                };
                r.finish()?;
                spec.validate()?;
                DataSource::Synthetic(spec)
            }
            (None, Some(s)) => {
                let mut r = Reader::new(s);
                let path = |v: Option<String>, key: &str| -> Result<PathBuf> {
                    let v = v.ok_or_else(|| Error::Config(format!("[data] needs `{key}`")))?;
                    Ok(base.join(v))
                };
                let factors = path(r.get("factors")?, "factors")?;
                let returns = path(r.get("returns")?, "returns")?;
                let caps = r.get::<String>("caps")?.map(|c| base.join(c));
                r.finish()?;
                DataSource::Files { factors, returns, caps }
            }
        };

        let source_len = match &source {
            DataSource::Synthetic(spec) => Some(spec.in_sample_len),
            DataSource::Files { .. } => None,
        };

        let periods = match find("periods") {
            None => return Err(Error::Config("a [periods] section with at least one period is required".into())),
            Some(s) => {
                let mut out = Vec::new();
                for (key, (value, line)) in &s.entries {
                    if key == "reference" {
                        for name in list(value) {
                            out.push(TestPeriod::reference(&name).or_else(|e| fail(*line, e))?);
                        }
                    } else {
                        if !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                            return fail(*line, format!("period name `{key}` may only use letters, digits, `-` and `_`"));
                        }
                        let Some((a, b)) = value.split_once("..") else {
                            return fail(*line, format!("period `{key}` must be `YYYY-MM..YYYY-MM`"));
                        };
                        let first: YearMonth = a.trim().parse().or_else(|e| fail(*line, e))?;
                        let last: YearMonth = b.trim().parse().or_else(|e| fail(*line, e))?;
                        out.push(TestPeriod::new(key.clone(), first, last).or_else(|e| fail(*line, e))?);
                    }
                }
                out
            }
        };
        if periods.is_empty() {
            return Err(Error::Config("no periods configured".into()));
        }
        let mut names: Vec<&str> = periods.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("period names must be unique".into()));
        }

        let mut model_defaults = ModelDefaults::default();
        let mut models: Vec<ModelSpec> = Vec::new();
        let table_rows = match find("models") {
            None => MODEL_MATRIX.iter().collect::<Vec<_>>(),
            Some(s) => {
                let mut r = Reader::new(s);
                let rows = match r.raw("matrix") {
                    None => Vec::new(),
                    Some((v, line)) => match v.to_ascii_lowercase().as_str() {
                        "all" => MODEL_MATRIX.iter().collect(),
                        "none" => Vec::new(),
                        _ => list(v)
                            .iter()
                            .map(|n| {
                                matrix_row(n)
                                    .map_or_else(|| fail(line, format!("`{n}` is not a configuration-matrix model")), Ok)
                            })
                            .collect::<Result<Vec<_>>>()?,
                    },
                };
                model_defaults.d_model = r.get("d_model")?;
                model_defaults.latent_fraction = r.get("latent_fraction")?.unwrap_or(model_defaults.latent_fraction);
                model_defaults.n_blocks = r.get("n_blocks")?.unwrap_or(model_defaults.n_blocks);
                model_defaults.pretrain_out_dim = r.get("pretrain_out_dim")?;
                if let Some((v, line)) = r.raw("scale") {
                    model_defaults.scale = match v {
                        "head" => ScaleMode::HeadWidth,
                        "model" => ScaleMode::ModelWidth,
                        _ => return fail(line, format!("scale must be `head` or `model`, found `{v}`")),
                    };
                }
                if let Some((v, line)) = r.raw("cross_mask") {
                    model_defaults.cross_mask = match v {
                        "causal" => CrossMask::Causal,
                        "full" => CrossMask::Full,
                        _ => return fail(line, format!("cross_mask must be `causal` or `full`, found `{v}`")),
                    };
                }
                model_defaults.finetune_pretrain = r.flag("finetune_pretrain")?.unwrap_or(false);
                r.finish()?;
                rows
            }
        };
        for row in table_rows {
            models.push(ModelSpec {
                name: row.name.to_string(),
                family: row.family,
                heads: row.heads,
                lnf: row.lnf,
                d_model: None,
            });
        }
        for s in sections.iter().filter(|s| s.name == "model") {
            let name = s.label.clone().expect("labelled section");
            if name.contains([',', '"', '/', '\\']) {
                return fail(s.line, format!("model name `{name}` may not contain `,` `\"` `/` or `\\`"));
            }
            let mut r = Reader::new(s);
            let family = match r.raw("family") {
                None => return fail(s.line, format!("[model {name}] needs `family`")),
                Some((v, line)) => v.parse::<ModelFamily>().or_else(|e| fail(line, e))?,
            };
            let spec = ModelSpec {
                name,
                family,
                heads: r.get("heads")?.unwrap_or(1),
                lnf: r.flag("lnf")?.unwrap_or(false),
                d_model: r.get("d_model")?,
            };
            r.finish()?;
            models.push(spec);
        }
        if models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        let mut names: Vec<&str> = models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("model `{}` defined twice", w[0])));
        }
        if models.iter().any(|m| m.heads == 0) {
            return Err(Error::Config("heads must be at least 1".into()));
        }

        let mut backtest = BacktestSettings::default();
        if let Some(s) = find("backtest") {
            let mut r = Reader::new(s);
            if let Some((v, line)) = r.raw("weightings") {
                backtest.weightings = list(v)
                    .iter()
                    .map(|w| match w.to_ascii_uppercase().as_str() {
                        "EW" => Ok(Weighting::Equal),
                        "VW" => Ok(Weighting::Value),
                        _ => fail(line, format!("weighting must be EW or VW, found `{w}`")),
                    })
                    .collect::<Result<_>>()?;
                if backtest.weightings.is_empty() {
                    return fail(line, "at least one weighting is required");
                }
            }
            if let Some((v, line)) = r.raw("filter") {
                backtest.filter = match v.to_ascii_lowercase().as_str() {
                    "off" => FilterMode::Off,
                    "on" => FilterMode::On,
                    "both" => FilterMode::Both,
                    _ => return fail(line, format!("filter must be off, on or both, found `{v}`")),
                };
            }
            backtest.keep_fraction = r.get("keep_fraction")?.unwrap_or(backtest.keep_fraction);
            if let Some((v, line)) = r.raw("scope") {
                backtest.scope = match v.to_ascii_lowercase().as_str() {
                    "longs" => FilterScope::Longs,
                    "all" => FilterScope::All,
                    _ => return fail(line, format!("scope must be longs or all, found `{v}`")),
                };
            }
            backtest.rf = r.get("rf")?.unwrap_or(0.0);
            r.finish()?;
        }
        if !(backtest.keep_fraction > 0.0 && backtest.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep_fraction {} outside (0, 1]", backtest.keep_fraction)));
        }

        let mut histogram_bins = DEFAULT_HISTOGRAM_BINS;
        if let Some(s) = find("report") {
            let mut r = Reader::new(s);
            histogram_bins = r.get("bins")?.unwrap_or(histogram_bins);
            r.finish()?;
        }
        if histogram_bins == 0 {
            return Err(Error::Config("bins must be at least 1".into()));
        }

        Ok(ExperimentConfig {
            seed,
            out,
            jobs,
            source,
            periods,
            models,
            model_defaults,
            in_sample_len: match &source_len {
                Some(n) => *n,
                None => in_sample_len.unwrap_or(REFERENCE_IN_SAMPLE_LEN),
            },
            train,
            backtest,
            histogram_bins,
        })
    }

    /// Input files whose hashes go into the run record.
    pub fn input_files(&self) -> Vec<PathBuf> {
        match &self.source {
            DataSource::Synthetic(_) => Vec::new(),
            DataSource::Files { factors, returns, caps } => {
                let mut v = vec![factors.clone(), returns.clone()];
                v.extend(caps.clone());
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
# small run
[experiment]
seed = 7

[synthetic]
months = 120
stocks = 5
factors = 4

[periods]
last = 2009-01..2009-12

[models]
matrix = SERT2, trans4
d_model = 8

[model wide]
family = sert
heads = 2
lnf = yes

[training]
in_sample_len = 60
context_len = 12

[backtest]
weightings = EW
filter = on
";

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/cfg"))
    }

    #[test]
    fn parses_a_full_file() {
        let c = parse(SMALL).unwrap();
        assert_eq!(c.seed, Some(7));
        let names: Vec<&str> = c.models.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["SERT2", "Trans4", "wide"]);
        assert!(c.models[2].lnf);
        assert_eq!(c.models[2].heads, 2);
        assert_eq!(c.model_defaults.d_model, Some(8));
        assert_eq!(c.periods[0].len(), 12);
        assert_eq!(c.in_sample_len, 60);
        assert_eq!(c.train.context_len, Some(12));
        assert_eq!(c.backtest.weightings, vec![Weighting::Equal]);
        assert_eq!(c.backtest.filter, FilterMode::On);
        match &c.source {
            DataSource::Synthetic(s) => assert_eq!((s.months, s.stocks, s.factors, s.in_sample_len), (120, 5, 4, 60)),
            other => panic!("unexpected source {other:?}"),
        }
    }

    #[test]
    fn default_model_list_is_the_full_matrix() {
        let c = parse("[synthetic]\n[periods]\nreference = 1911, 2212\n").unwrap();
        assert_eq!(c.models.len(), 20);
        assert_eq!(c.periods.len(), 2);
        assert_eq!(c.in_sample_len, SyntheticSpec::default().in_sample_len);
        let files = parse("[data]\nfactors = f.csv\nreturns = r.csv\n[periods]\nreference = 2112\n").unwrap();
        assert_eq!(files.in_sample_len, REFERENCE_IN_SAMPLE_LEN);
    }

    #[test]
    fn zero_models_is_rejected() {
        let e = parse("[synthetic]\n[periods]\nreference = 1911\n[models]\nmatrix = none\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("no models")));
    }

    #[test]
    fn file_paths_resolve_against_the_config_directory() {
        let c = parse("[data]\nfactors = f.csv\nreturns = /abs/r.csv\n[periods]\nreference = 2112\n").unwrap();
        assert_eq!(c.input_files(), vec![PathBuf::from("/cfg/f.csv"), PathBuf::from("/abs/r.csv")]);
    }

    #[test]
    fn mistakes_are_reported_with_line_numbers() {
        for (text, needle) in [
            ("[synthetic]\nmonts = 3\n[periods]\nreference = 1911\n", "line 2: unknown key `monts`"),
            ("[synthetic]\n[periods]\nreference = 1999\n", "line 3"),
            ("months = 3\n", "line 1: entry before"),
            ("[synthetic]\n[synthetic]\n", "line 2: section [synthetic] repeated"),
            ("[synthetic\n", "missing `]`"),
            ("[synthetic]\nmonths = many\n[periods]\nreference = 1911\n", "line 2: invalid value"),
            ("[synthetic]\n[periods]\nreference = 1911\n[model]\n", "need a name"),
            ("[synthetic]\n[periods]\nreference = 1911\n[models]\nmatrix = SERT9\n", "not a configuration-matrix"),
            ("[synthetic]\n[periods]\nx = 2001-05..2001-01\n", "ends"),
            ("[periods]\nreference = 1911\n", "[synthetic] or [data]"),
            ("[synthetic]\n", "[periods]"),
            ("[synthetic]\n[periods]\nreference = 1911\n[backtest]\nweightings = XW\n", "EW or VW"),
            ("[synthetic]\n[periods]\nreference = 1911\n[training]\npatience = 0\n", "patience"),
        ] {
            let e = parse(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e:?}");
            assert!(e.to_string().contains(needle), "{text}: `{e}` lacks `{needle}`");
        }
    }
}

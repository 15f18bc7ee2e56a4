//! INI run configuration with a fixed key set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ini::{Ini, ParseOption};
use sha2::{Digest, Sha256};

use crate::backbone::{AdamConfig, BackboneKind};
use crate::dataset::{AttributeFormat, MultiLabelPolicy, RecordFormat};
use crate::error::{Error, Result};
use crate::metrics::GroupAggregation;
use crate::samplers::{SamplerConfig, Strategy};
use crate::synth::SynthConfig;
use crate::trainer::{OuterConfig, TrainConfig};

#[derive(Debug, Clone, Copy)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Text,
    OptUsize,
    OptF64,
    F64List,
    UsizeList,
    Grid,
    Choice(&'static [&'static str]),
}

const STRATEGIES: &[&str] = &["uns", "nncf", "dns", "fairstatic", "fairneg"];

const KEYS: &[(&str, &str, Kind, &str)] = &[
    ("data", "source", Kind::Choice(&["files", "synth"]), "files"),
    ("data", "interactions", Kind::Text, ""),
    ("data", "attributes", Kind::Text, ""),
    ("data", "record_separator", Kind::Text, "::"),
    ("data", "user_col", Kind::Usize, "0"),
    ("data", "item_col", Kind::Usize, "1"),
    ("data", "attribute_separator", Kind::Text, ","),
    ("data", "attribute_item_col", Kind::Usize, "0"),
    ("data", "attribute_label_col", Kind::Usize, "1"),
    ("data", "label_separator", Kind::Text, ""),
    ("data", "labels", Kind::Text, ""),
    ("data", "multi_label", Kind::Choice(&["exclusive", "sole"]), "exclusive"),
    ("data", "split_seed", Kind::U64, "2023"),
    ("data", "prepared", Kind::Text, "prepared"),
    ("synth", "users", Kind::Usize, "200"),
    ("synth", "items", Kind::Usize, "120"),
    ("synth", "groups", Kind::Usize, "2"),
    ("synth", "density", Kind::F64, "0.05"),
    ("synth", "seed", Kind::U64, "0"),
    ("synth", "item_shares", Kind::F64List, ""),
    ("synth", "interaction_shares", Kind::F64List, ""),
    ("synth", "latent_dim", Kind::Usize, "8"),
    ("synth", "signal", Kind::F64, "2"),
    ("synth", "popularity_std", Kind::F64, "1"),
    ("model", "backbone", Kind::Choice(&["mf", "lightgcn"]), "mf"),
    ("model", "dim", Kind::Usize, "64"),
    ("model", "layers", Kind::Usize, "3"),
    ("model", "l2", Kind::F64, "0.01"),
    ("model", "lr", Kind::OptF64, ""),
    ("model", "beta1", Kind::F64, "0.9"),
    ("model", "beta2", Kind::F64, "0.999"),
    ("model", "eps", Kind::F64, "1e-8"),
    ("sampler", "strategy", Kind::Choice(STRATEGIES), "fairneg"),
    ("sampler", "beta", Kind::F64, "0.5"),
    ("sampler", "tau", Kind::F64, "1"),
    ("sampler", "dns_pool", Kind::Usize, "16"),
    ("sampler", "popularity_exponent", Kind::F64, "1"),
    ("sampler", "candidate_pool", Kind::OptUsize, ""),
    ("outer", "gamma", Kind::F64, "0.1"),
    ("outer", "alpha", Kind::F64, "0.1"),
    ("outer", "floor", Kind::F64, "0.001"),
    ("outer", "dynamic", Kind::Bool, "true"),
    ("outer", "gbce_cap", Kind::Usize, "500000"),
    ("outer", "gbce_subsample", Kind::Usize, "200000"),
    ("train", "epochs", Kind::Usize, "100"),
    ("train", "batch_size", Kind::Usize, "1024"),
    ("train", "patience", Kind::Usize, "10"),
    ("train", "eval_k", Kind::Usize, "20"),
    ("train", "seed", Kind::U64, "2023"),
    ("eval", "ks", Kind::UsizeList, "20,30"),
    ("eval", "aggregation", Kind::Choice(&["micro", "macro"]), "micro"),
    ("sweep", "gamma", Kind::Grid, ""),
    ("sweep", "beta", Kind::Grid, ""),
    ("sweep", "parallel", Kind::Bool, "false"),
];

fn lookup(section: &str, key: &str) -> Option<Kind> {
    KEYS.iter().find(|(s, k, _, _)| *s == section && *k == key).map(|e| e.2)
}

fn list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, ()> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| ()))
        .collect()
}

/// Expands `start:end:step` into its points (end inclusive), or a comma
/// list into its values.
pub fn parse_grid(value: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("invalid grid {value:?}"));
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    let parts: Vec<&str> = value.split(':').collect();
    match parts.as_slice() {
        [start, end, step] => {
            let [start, end, step]: [f64; 3] = [start, end, step]
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
                .into_iter()
                .collect::<Result<Vec<_>>>()?
                .try_into()
                .expect("three values");
            if !(step > 0.0) || !start.is_finite() || !end.is_finite() {
                return Err(bad());
            }
            let mut out = Vec::new();
            let mut i = 0;
            loop {
                let x = start + i as f64 * step;
                if x > end + step * 1e-9 {
                    break;
                }
                // strip representation noise such as 0.15000000000000002
                out.push((x * 1e10).round() / 1e10);
                i += 1;
            }
            Ok(out)
        }
        [_] => list::<f64>(value).map_err(|_| bad()),
        _ => Err(bad()),
    }
}

fn check(kind: Kind, section: &str, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("{section}.{key}: expected {what}, got {value:?}"));
    let ok = match kind {
        Kind::Usize => value.parse::<usize>().is_ok(),
        Kind::U64 => value.parse::<u64>().is_ok(),
        Kind::F64 => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => value.parse::<bool>().is_ok(),
        Kind::Text => true,
        Kind::OptUsize => value.is_empty() || value.parse::<usize>().is_ok(),
        Kind::OptF64 => value.is_empty() || value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::F64List => list::<f64>(value).is_ok(),
        Kind::UsizeList => list::<usize>(value).is_ok(),
        Kind::Grid => return parse_grid(value).map(|_| ()),
        Kind::Choice(options) => {
            if options.contains(&value) {
                true
            } else {
                return Err(bad(&format!("one of {options:?}")));
            }
        }
    };
    if ok {
        Ok(())
    } else {
        Err(bad(match kind {
            Kind::Usize | Kind::U64 | Kind::OptUsize => "a non-negative integer",
            Kind::F64 | Kind::OptF64 => "a finite number",
            Kind::Bool => "true or false",
            _ => "a comma-separated list of numbers",
        }))
    }
}

/// Separators may spell a tab as `\t`.
fn unescape(s: &str) -> String {
    s.replace("\\t", "\t")
}

/// Effective configuration: every known key with its default or
/// overridden value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<(String, String), String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|(s, k, _, d)| ((s.to_string(), k.to_string()), d.to_string()))
            .collect();
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let opt = ParseOption {
            enabled_quote: true,
            enabled_escape: false,
            ..Default::default()
        };
        let ini = Ini::load_from_str_opt(text, opt).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut config = RunConfig::default();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let Some(section) = section else {
                    return Err(Error::Config(format!("key {key:?} outside any section")));
                };
                config.set(section, key, value)?;
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let kind = lookup(section, key).ok_or_else(|| Error::Config(format!("unknown key {section}.{key}")))?;
        let value = value.trim();
        check(kind, section, key, value)?;
        self.values.insert((section.to_string(), key.to_string()), value.to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (lhs, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key {lhs:?} is not section.key")))?;
        self.set(section, key, value)
    }

    pub fn get(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unregistered key {section}.{key}"))
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> T {
        self.get(section, key)
            .parse()
            .unwrap_or_else(|_| panic!("{section}.{key} was validated on set"))
    }

    fn optional<T: std::str::FromStr>(&self, section: &str, key: &str) -> Option<T> {
        let v = self.get(section, key);
        (!v.is_empty()).then(|| self.parsed(section, key))
    }

    fn floats(&self, section: &str, key: &str) -> Vec<f64> {
        list(self.get(section, key)).expect("validated on set")
    }

    /// Canonical INI text of every effective value.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for ((section, key), value) in &self.values {
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            if value.is_empty() || value != value.trim() || value.contains([';', '#']) {
                out.push_str(&format!("{key} = \"{value}\"\n"));
            } else {
                out.push_str(&format!("{key} = {value}\n"));
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn source(&self) -> &str {
        self.get("data", "source")
    }

    pub fn prepared_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data", "prepared"))
    }

    /// Raw interaction and attribute paths; both are required for file input.
    pub fn raw_paths(&self) -> Result<(PathBuf, PathBuf)> {
        let i = self.get("data", "interactions");
        let a = self.get("data", "attributes");
        if i.is_empty() || a.is_empty() {
            return Err(Error::Config("data.interactions and data.attributes are required".into()));
        }
        Ok((PathBuf::from(i), PathBuf::from(a)))
    }

    pub fn record_format(&self) -> RecordFormat {
        RecordFormat {
            separator: unescape(self.get("data", "record_separator")),
            user_col: self.parsed("data", "user_col"),
            item_col: self.parsed("data", "item_col"),
        }
    }

    pub fn attribute_format(&self) -> AttributeFormat {
        let label_sep = self.get("data", "label_separator");
        AttributeFormat {
            separator: unescape(self.get("data", "attribute_separator")),
            item_col: self.parsed("data", "attribute_item_col"),
            label_col: self.parsed("data", "attribute_label_col"),
            label_separator: (!label_sep.is_empty()).then(|| unescape(label_sep)),
            policy: self.parsed::<MultiLabelPolicy>("data", "multi_label"),
        }
    }

    /// Attribute labels to keep; empty means every label.
    pub fn labels(&self) -> Vec<String> {
        self.get("data", "labels")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn split_seed(&self) -> u64 {
        self.parsed("data", "split_seed")
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let c = SynthConfig {
            users: self.parsed("synth", "users"),
            items: self.parsed("synth", "items"),
            groups: self.parsed("synth", "groups"),
            density: self.parsed("synth", "density"),
            seed: self.parsed("synth", "seed"),
            item_shares: self.floats("synth", "item_shares"),
            interaction_shares: self.floats("synth", "interaction_shares"),
            latent_dim: self.parsed("synth", "latent_dim"),
            signal: self.parsed("synth", "signal"),
            popularity_std: self.parsed("synth", "popularity_std"),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let backbone: BackboneKind = self.parsed("model", "backbone");
        let mut adam = AdamConfig::for_backbone(backbone);
        if let Some(lr) = self.optional("model", "lr") {
            adam.lr = lr;
        }
        adam.beta1 = self.parsed("model", "beta1");
        adam.beta2 = self.parsed("model", "beta2");
        adam.eps = self.parsed("model", "eps");
        let c = TrainConfig {
            backbone,
            dim: self.parsed("model", "dim"),
            layers: self.parsed("model", "layers"),
            l2: self.parsed("model", "l2"),
            adam,
            epochs_max: self.parsed("train", "epochs"),
            batch_size: self.parsed("train", "batch_size"),
            patience: self.parsed("train", "patience"),
            eval_k: self.parsed("train", "eval_k"),
            seed: self.parsed("train", "seed"),
            sampler: SamplerConfig {
                strategy: self.parsed::<Strategy>("sampler", "strategy"),
                beta: self.parsed("sampler", "beta"),
                tau: self.parsed("sampler", "tau"),
                dns_pool: self.parsed("sampler", "dns_pool"),
                popularity_exponent: self.parsed("sampler", "popularity_exponent"),
                candidate_pool: self.optional("sampler", "candidate_pool"),
            },
            outer: OuterConfig {
                gamma: self.parsed("outer", "gamma"),
                alpha: self.parsed("outer", "alpha"),
                floor: self.parsed("outer", "floor"),
                dynamic: self.parsed("outer", "dynamic"),
                gbce_cap: self.parsed("outer", "gbce_cap"),
                gbce_subsample: self.parsed("outer", "gbce_subsample"),
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn ks(&self) -> Result<Vec<usize>> {
        let ks: Vec<usize> = list(self.get("eval", "ks")).expect("validated on set");
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Config("eval.ks needs at least one positive k".into()));
        }
        Ok(ks)
    }

    pub fn aggregation(&self) -> GroupAggregation {
        self.parsed("eval", "aggregation")
    }

    pub fn sweep_parallel(&self) -> bool {
        self.parsed("sweep", "parallel")
    }

    /// Grid points as `(gamma, beta)`; an axis without a grid keeps the
    /// configured value.
    pub fn sweep_points(&self) -> Result<Vec<(f64, f64)>> {
        let gammas = parse_grid(self.get("sweep", "gamma"))?;
        let betas = parse_grid(self.get("sweep", "beta"))?;
        if gammas.is_empty() && betas.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        let gammas = if gammas.is_empty() { vec![self.parsed("outer", "gamma")] } else { gammas };
        let betas = if betas.is_empty() { vec![self.parsed("sampler", "beta")] } else { betas };
        Ok(gammas
            .iter()
            .flat_map(|&g| betas.iter().map(move |&b| (g, b)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_valid_configs() {
        let c = RunConfig::default();
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(c.ks().unwrap(), vec![20, 30]);
        assert_eq!(c.record_format(), RecordFormat::default());
        assert_eq!(c.attribute_format(), AttributeFormat::default());
    }

    #[test]
    fn parses_sections() {
        let c = RunConfig::from_ini_str(
            "[model]\nbackbone = lightgcn\n\n[sampler]\nstrategy = uns\n[data]\nrecord_separator = ::\nlabels = Sci-Fi, Horror\nlabel_separator = |\n",
        )
        .unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.backbone, BackboneKind::LightGcn);
        assert_eq!(t.adam.lr, 0.001);
        assert_eq!(t.sampler.strategy, Strategy::Uns);
        assert_eq!(c.labels(), vec!["Sci-Fi", "Horror"]);
        assert_eq!(c.attribute_format().label_separator.as_deref(), Some("|"));
        assert_eq!(c.record_format().separator, "::");
    }

    #[test]
    fn rejects_unknown_and_mistyped() {
        assert!(RunConfig::from_ini_str("[model]\nsize = 3\n").is_err());
        assert!(RunConfig::from_ini_str("[nope]\na = 1\n").is_err());
        assert!(RunConfig::from_ini_str("[model]\ndim = many\n").is_err());
        assert!(RunConfig::from_ini_str("[sampler]\nstrategy = random\n").is_err());
        assert!(RunConfig::from_ini_str("dim = 3\n").is_err());
    }

    #[test]
    fn beta_out_of_range_rejected() {
        let mut c = RunConfig::default();
        c.apply_override("sampler.beta=1.5").unwrap();
        assert!(matches!(c.train_config(), Err(Error::Config(_))));
    }

    #[test]
    fn override_wins_and_changes_hash() {
        let mut c = RunConfig::from_ini_str("[outer]\ngamma = 0.2\n").unwrap();
        let h = c.hash();
        c.apply_override("outer.gamma=0.05").unwrap();
        assert_eq!(c.train_config().unwrap().outer.gamma, 0.05);
        assert_ne!(c.hash(), h);
        assert!(c.apply_override("gamma=1").is_err());
        assert!(c.apply_override("outer.gamma").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_override("data.labels=Sci-Fi,Horror").unwrap();
        c.apply_override("data.record_separator=\\t").unwrap();
        let back = RunConfig::from_ini_str(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(back.record_format().separator, "\t");
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0:0.2:0.05").unwrap(), vec![0.0, 0.05, 0.1, 0.15, 0.2]);
        assert_eq!(parse_grid("0.1:0.9:0.2").unwrap(), vec![0.1, 0.3, 0.5, 0.7, 0.9]);
        assert_eq!(parse_grid("0.1, 0.4").unwrap(), vec![0.1, 0.4]);
        assert!(parse_grid("1:0:0.1").unwrap().is_empty());
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("0:1").is_err());
    }

    #[test]
    fn sweep_points_cover_grid() {
        let mut c = RunConfig::default();
        assert!(c.sweep_points().is_err());
        c.apply_override("sweep.gamma=0:0.2:0.05").unwrap();
        let pts = c.sweep_points().unwrap();
        assert_eq!(pts.len(), 5);
        assert!(pts.iter().all(|p| p.1 == 0.5));
        c.apply_override("sweep.beta=0.1:0.9:0.2").unwrap();
        assert_eq!(c.sweep_points().unwrap().len(), 25);
        c.apply_override("sweep.gamma=").unwrap();
        c.apply_override("sweep.beta=0.9:0.1:0.2").unwrap();
        assert!(c.sweep_points().is_err());
    }
}

//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Command-line overrides use the same keys. Every key is listed in
//! [`KEYS`]; anything else is rejected with an error naming the key.

use std::path::PathBuf;

use serde::Serialize;

use crate::datasets::{DataFiles, Protocol, SyntheticConfig};
use crate::error::{Error, Result};
use crate::meta::{MetaConfig, OptimizerKind};
use crate::rng::{SeedTree, Stream};
use crate::strategies::{Ablation, StrategyConfig, StrategyKind};
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    Files { train: DataFiles, test: DataFiles },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub num_tasks: usize,
    pub trainer: TrainerConfig,
    pub protocol: Protocol,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub seed_overrides: Vec<(Stream, u64)>,
    pub output_dir: PathBuf,
    /// Also run the same strategy without soft labels and compare.
    pub compare_baseline: bool,
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "dataset",
    "synthetic.num_classes",
    "synthetic.dim",
    "synthetic.separation",
    "synthetic.n_train_per_class",
    "synthetic.n_test_per_class",
    "data.format",
    "data.train",
    "data.test",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "num_tasks",
    "strategy",
    "strategy.use_ddn",
    "strategy.alpha",
    "strategy.derpp_logit_weight",
    "strategy.ablation",
    "strategy.label_smooth_eps",
    "meta.eta",
    "meta.gamma",
    "meta.inner_batch",
    "meta.outer_batch",
    "meta.steps_per_iter",
    "meta.optimizer",
    "ddn.beta",
    "ddn.hidden",
    "model.hidden",
    "buffer.capacity",
    "batch_size",
    "lr",
    "protocol",
    "epochs",
    "seeds",
    "output_dir",
    "compare_baseline",
];

/// Raw, ordered key/value pairs before interpretation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: Vec<(String, String)>,
}

fn known(key: &str) -> bool {
    KEYS.contains(&key) || key.strip_prefix("seed.").is_some_and(|s| Stream::from_name(s).is_some())
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let content = line.split('#').next().unwrap().trim();
            if !content.is_empty() {
                let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
                    offset,
                    message: format!("expected `key = value`, found {content:?}"),
                })?;
                let k = k.trim();
                if raw.get(k).is_some() {
                    return Err(Error::config(k, "given more than once"));
                }
                raw.set(k, v.trim())?;
            }
            offset += line.len();
        }
        Ok(raw)
    }

    /// Sets or replaces a key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::config(key, "unknown configuration key"));
        }
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, found {v:?}"))),
    }
}

fn parse_widths(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

/// `1,2,5` or `1-10` or a mix such as `1-3,7`.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = parse_num("seeds", a.trim())?;
                let b: u64 = parse_num("seeds", b.trim())?;
                if b < a {
                    return Err(Error::config("seeds", format!("empty range {part}")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse_num("seeds", part)?),
        }
    }
    if out.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let get = |k: &str| raw.get(k);
        let num_tasks: usize = get("num_tasks").map_or(Ok(5), |v| parse_num("num_tasks", v))?;

        let dataset = match get("dataset").unwrap_or("synthetic") {
            "synthetic" => {
                let mut s = SyntheticConfig::default();
                if let Some(v) = get("synthetic.num_classes") {
                    s.num_classes = parse_num("synthetic.num_classes", v)?;
                }
                if let Some(v) = get("synthetic.dim") {
                    s.dim = parse_num("synthetic.dim", v)?;
                }
                if let Some(v) = get("synthetic.separation") {
                    s.separation = parse_num("synthetic.separation", v)?;
                }
                if let Some(v) = get("synthetic.n_train_per_class") {
                    s.n_train_per_class = parse_num("synthetic.n_train_per_class", v)?;
                }
                if let Some(v) = get("synthetic.n_test_per_class") {
                    s.n_test_per_class = parse_num("synthetic.n_test_per_class", v)?;
                }
                if num_tasks == 0 || s.num_classes % num_tasks != 0 {
                    return Err(Error::config("num_tasks", "must divide synthetic.num_classes"));
                }
                s.classes_per_task = s.num_classes / num_tasks;
                DatasetSpec::Synthetic(s)
            }
            "files" => {
                let path = |k: &str| -> Result<PathBuf> {
                    get(k)
                        .map(PathBuf::from)
                        .ok_or_else(|| Error::config(k, "required for file datasets"))
                };
                match get("data.format").unwrap_or("csv") {
                    "csv" => DatasetSpec::Files {
                        train: DataFiles::Csv(path("data.train")?),
                        test: DataFiles::Csv(path("data.test")?),
                    },
                    "idx" => DatasetSpec::Files {
                        train: DataFiles::Idx {
                            images: path("data.train_images")?,
                            labels: path("data.train_labels")?,
                        },
                        test: DataFiles::Idx {
                            images: path("data.test_images")?,
                            labels: path("data.test_labels")?,
                        },
                    },
                    other => return Err(Error::config("data.format", format!("expected csv or idx, found {other:?}"))),
                }
            }
            other => return Err(Error::config("dataset", format!("expected synthetic or files, found {other:?}"))),
        };

        let kind_name = get("strategy").unwrap_or("er");
        let kind = StrategyKind::from_name(kind_name)
            .ok_or_else(|| Error::config("strategy", format!("expected er, derpp or erace, found {kind_name:?}")))?;
        let mut strategy = StrategyConfig::new(kind);
        if let Some(v) = get("strategy.use_ddn") {
            strategy.use_ddn = parse_bool("strategy.use_ddn", v)?;
        }
        if let Some(v) = get("strategy.alpha") {
            strategy.alpha = parse_num("strategy.alpha", v)?;
        }
        if let Some(v) = get("strategy.derpp_logit_weight") {
            strategy.derpp_logit_weight = parse_num("strategy.derpp_logit_weight", v)?;
        }
        let eps: f64 = get("strategy.label_smooth_eps").map_or(Ok(0.1), |v| parse_num("strategy.label_smooth_eps", v))?;
        strategy.ablation = match get("strategy.ablation").unwrap_or("none") {
            "none" => None,
            "random" => Some(Ablation::Random),
            "label_smooth" => Some(Ablation::LabelSmooth(eps)),
            "l2y" => Some(Ablation::L2y),
            other => {
                return Err(Error::config(
                    "strategy.ablation",
                    format!("expected none, random, label_smooth or l2y, found {other:?}"),
                ))
            }
        };

        let lr: f64 = get("lr").map_or(Ok(0.03), |v| parse_num("lr", v))?;
        let mut meta = MetaConfig {
            eta: lr,
            alpha: strategy.alpha,
            ..MetaConfig::default()
        };
        if let Some(v) = get("meta.eta") {
            meta.eta = parse_num("meta.eta", v)?;
        }
        if let Some(v) = get("meta.gamma") {
            meta.gamma = parse_num("meta.gamma", v)?;
        }
        if let Some(v) = get("meta.inner_batch") {
            meta.inner_batch = parse_num("meta.inner_batch", v)?;
        }
        if let Some(v) = get("meta.outer_batch") {
            meta.outer_batch = parse_num("meta.outer_batch", v)?;
        }
        if let Some(v) = get("meta.steps_per_iter") {
            meta.steps_per_iter = parse_num("meta.steps_per_iter", v)?;
        }
        if let Some(v) = get("meta.optimizer") {
            meta.optimizer = OptimizerKind::from_name(v)
                .ok_or_else(|| Error::config("meta.optimizer", format!("expected adam or sgd, found {v:?}")))?;
        }

        let mut trainer = TrainerConfig {
            strategy,
            meta,
            lr,
            ..TrainerConfig::default()
        };
        if let Some(v) = get("batch_size") {
            trainer.batch_size = parse_num("batch_size", v)?;
        }
        if let Some(v) = get("buffer.capacity") {
            trainer.buffer_capacity = parse_num("buffer.capacity", v)?;
        }
        if let Some(v) = get("model.hidden") {
            trainer.classifier_hidden = parse_widths("model.hidden", v)?;
        }
        if let Some(v) = get("ddn.hidden") {
            trainer.ddn_hidden = parse_widths("ddn.hidden", v)?;
        }
        if let Some(v) = get("ddn.beta") {
            trainer.beta = parse_num("ddn.beta", v)?;
        }

        let protocol_name = get("protocol").unwrap_or("online");
        let protocol = Protocol::from_name(protocol_name)
            .ok_or_else(|| Error::config("protocol", format!("expected online or offline, found {protocol_name:?}")))?;
        let epochs: usize = match get("epochs") {
            Some(v) => parse_num("epochs", v)?,
            None if protocol == Protocol::Offline => 50,
            None => 1,
        };
        let seeds = parse_seeds(get("seeds").unwrap_or("1-10"))?;
        let mut seed_overrides = Vec::new();
        for (k, v) in raw.entries() {
            if let Some(name) = k.strip_prefix("seed.") {
                seed_overrides.push((Stream::from_name(name).unwrap(), parse_num(k, v)?));
            }
        }
        let cfg = ExperimentConfig {
            dataset,
            num_tasks,
            trainer,
            protocol,
            epochs,
            seeds,
            seed_overrides,
            output_dir: PathBuf::from(get("output_dir").unwrap_or("runs/default")),
            compare_baseline: get("compare_baseline").map_or(Ok(false), |v| parse_bool("compare_baseline", v))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.num_tasks == 0 {
            return Err(Error::config("num_tasks", "must be at least 1"));
        }
        if self.trainer.beta.is_nan() || !(0.0..=1.0).contains(&self.trainer.beta) {
            return Err(Error::config("ddn.beta", "must lie in [0, 1]"));
        }
        if self.trainer.ddn_hidden.contains(&0) {
            return Err(Error::config("ddn.hidden", "layer widths must be at least 1"));
        }
        if self.trainer.classifier_hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be at least 1"));
        }
        if self.trainer.meta.steps_per_iter == 0 {
            return Err(Error::config("meta.steps_per_iter", "must be at least 1"));
        }
        match self.protocol {
            Protocol::Online if self.epochs != 1 => Err(Error::config("epochs", "the online protocol uses exactly one epoch")),
            Protocol::Offline if self.epochs == 0 => Err(Error::config("epochs", "must be at least 1")),
            _ => Ok(()),
        }?;
        if self.compare_baseline && !self.trainer.strategy.use_ddn && self.trainer.strategy.ablation.is_none() {
            return Err(Error::config(
                "compare_baseline",
                "needs soft labels (strategy.use_ddn or strategy.ablation) to compare against",
            ));
        }
        Ok(())
    }

    pub fn seed_tree(&self, seed: u64) -> SeedTree {
        self.seed_overrides
            .iter()
            .fold(SeedTree::new(seed), |t, &(s, v)| t.with_override(s, v))
    }

    /// The same experiment with one-hot replay labels.
    pub fn baseline(&self) -> ExperimentConfig {
        let mut b = self.clone();
        b.trainer.strategy.use_ddn = false;
        b.trainer.strategy.ablation = None;
        b.compare_baseline = false;
        b
    }
}

impl ExperimentConfig {
    /// Every effective setting as `key = value` lines. Feeding the text back
    /// through [`load`] reproduces this configuration.
    pub fn to_kv(&self) -> String {
        let mut lines: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| lines.push((k.to_string(), v));
        let path = |p: &PathBuf| p.display().to_string();
        let widths = |w: &[usize]| w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                put("dataset", "synthetic".into());
                put("synthetic.num_classes", s.num_classes.to_string());
                put("synthetic.dim", s.dim.to_string());
                put("synthetic.separation", format!("{:?}", s.separation));
                put("synthetic.n_train_per_class", s.n_train_per_class.to_string());
                put("synthetic.n_test_per_class", s.n_test_per_class.to_string());
            }
            DatasetSpec::Files { train, test } => {
                put("dataset", "files".into());
                match (train, test) {
                    (DataFiles::Csv(a), DataFiles::Csv(b)) => {
                        put("data.format", "csv".into());
                        put("data.train", path(a));
                        put("data.test", path(b));
                    }
                    (
                        DataFiles::Idx { images: ti, labels: tl },
                        DataFiles::Idx { images: vi, labels: vl },
                    ) => {
                        put("data.format", "idx".into());
                        put("data.train_images", path(ti));
                        put("data.train_labels", path(tl));
                        put("data.test_images", path(vi));
                        put("data.test_labels", path(vl));
                    }
                    _ => {}
                }
            }
        }
        let t = &self.trainer;
        put("num_tasks", self.num_tasks.to_string());
        put("strategy", t.strategy.kind.name().into());
        put("strategy.use_ddn", t.strategy.use_ddn.to_string());
        put("strategy.alpha", format!("{:?}", t.strategy.alpha));
        put("strategy.derpp_logit_weight", format!("{:?}", t.strategy.derpp_logit_weight));
        let (ablation, eps) = match t.strategy.ablation {
            None => ("none", None),
            Some(Ablation::Random) => ("random", None),
            Some(Ablation::LabelSmooth(e)) => ("label_smooth", Some(e)),
            Some(Ablation::L2y) => ("l2y", None),
        };
        put("strategy.ablation", ablation.into());
        if let Some(e) = eps {
            put("strategy.label_smooth_eps", format!("{e:?}"));
        }
        put("meta.eta", format!("{:?}", t.meta.eta));
        put("meta.gamma", format!("{:?}", t.meta.gamma));
        put("meta.inner_batch", t.meta.inner_batch.to_string());
        put("meta.outer_batch", t.meta.outer_batch.to_string());
        put("meta.steps_per_iter", t.meta.steps_per_iter.to_string());
        put("meta.optimizer", t.meta.optimizer.name().into());
        put("ddn.beta", format!("{:?}", t.beta));
        put("ddn.hidden", widths(&t.ddn_hidden));
        put("model.hidden", widths(&t.classifier_hidden));
        put("buffer.capacity", t.buffer_capacity.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr", format!("{:?}", t.lr));
        put("protocol", self.protocol.name().into());
        put("epochs", self.epochs.to_string());
        put("seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        for (s, v) in &self.seed_overrides {
            put(&format!("seed.{}", s.name()), v.to_string());
        }
        put("output_dir", path(&self.output_dir));
        put("compare_baseline", self.compare_baseline.to_string());
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Reads a config file (if any), then applies `key=value` overrides.
pub fn load(text: Option<&str>, overrides: &[String]) -> Result<(RawConfig, ExperimentConfig)> {
    let mut raw = match text {
        Some(t) => RawConfig::parse(t)?,
        None => RawConfig::default(),
    };
    for o in overrides {
        raw.apply_override(o)?;
    }
    let cfg = ExperimentConfig::from_raw(&raw)?;
    Ok((raw, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = ExperimentConfig::from_raw(&RawConfig::default()).unwrap();
        assert_eq!(cfg.trainer.batch_size, 32);
        assert_eq!(cfg.trainer.lr, 0.03);
        assert_eq!(cfg.trainer.meta.eta, 0.03);
        assert_eq!(cfg.trainer.strategy.alpha, 1.0);
        assert_eq!(cfg.trainer.beta, 0.9);
        assert_eq!(cfg.trainer.buffer_capacity, 100);
        assert_eq!(cfg.seeds, (1..=10).collect::<Vec<_>>());
        assert_eq!(cfg.protocol, Protocol::Online);
    }

    #[test]
    fn unknown_key_is_named() {
        match RawConfig::parse("bogus.key = 3\n") {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "bogus.key"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn comments_and_overrides() {
        let (_, cfg) = load(
            Some("# header\nstrategy = derpp  # trailing\n\nlr = 0.1\n"),
            &["lr=0.05".to_string(), "seed.buffer=99".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.trainer.strategy.kind, StrategyKind::DerPP);
        assert_eq!(cfg.trainer.lr, 0.05);
        assert_eq!(cfg.trainer.meta.eta, 0.05);
        assert_eq!(cfg.seed_tree(1).seed_for(Stream::Buffer), 99);
        assert_eq!(cfg.seed_tree(1).seed_for(Stream::Data), 1);
    }

    #[test]
    fn bad_values_name_their_key() {
        for (o, key) in [
            ("lr=-1", "lr"),
            ("buffer.capacity=0", "buffer.capacity"),
            ("ddn.beta=2", "ddn.beta"),
            ("strategy=foo", "strategy"),
            ("seeds=", "seeds"),
            ("epochs=3", "epochs"),
        ] {
            match load(None, &[o.to_string()]) {
                Err(Error::InvalidConfig { key: k, .. }) => assert_eq!(k, key, "{o}"),
                other => panic!("{o}: {other:?}"),
            }
        }
    }

    #[test]
    fn echo_round_trips() {
        let (_, cfg) = load(
            None,
            &[
                "strategy.use_ddn=true".into(),
                "strategy.alpha=0.5".into(),
                "seed.meta=4".into(),
                "model.hidden=7,3".into(),
            ],
        )
        .unwrap();
        let (_, again) = load(Some(&cfg.to_kv()), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("1-3,7").unwrap(), vec![1, 2, 3, 7]);
        assert!(parse_seeds("3-1").is_err());
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(RawConfig::parse("lr = 1\nlr = 2\n").is_err());
    }
}

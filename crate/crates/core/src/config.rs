//! Run configuration: a flat registry of `key = value` settings merged from
//! defaults, an optional config file and command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::bench::{default_cells, Method};
use crate::envsim::{EnvConfig, EnvKind};
use crate::policies::{BaseArch, HeadArch, TrainConfig};
use crate::{Error, Result};

const BASE_TABLE: &str = "Kinetix flow-policy training table";
const HEAD_TABLE: &str = "Kinetix correction-head training table";

struct Key {
    name: &'static str,
    default: &'static str,
    source: Option<&'static str>,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, source: None, help }
}

const fn sourced(name: &'static str, default: &'static str, source: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        source: Some(source),
        help,
    }
}

const KEYS: &[Key] = &[
    key("seed", "0", "root seed for every random stream"),
    key("jobs", "0", "worker threads for parallel stages (0 = all cores)"),
    key("task", "pursuit", "environment: pursuit | holdzone"),
    key("episodes", "2000", "expert episodes to record"),
    key("horizon", "8", "action chunk length H"),
    key("base.hidden", "512,512", "base policy hidden widths"),
    key("base.layer_norm", "false", "layer norm in the base policy"),
    sourced("base.lr", "3e-4", BASE_TABLE, "base learning rate"),
    sourced("base.weight_decay", "1e-2", BASE_TABLE, "base AdamW weight decay"),
    sourced("base.grad_clip", "10", BASE_TABLE, "base global-norm gradient clip"),
    sourced("base.warmup", "1000", BASE_TABLE, "base linear warmup steps"),
    sourced("base.batch", "512", BASE_TABLE, "base minibatch size"),
    sourced("base.epochs", "32", BASE_TABLE, "base training epochs"),
    key("head.hidden", "64,64", "correction head hidden widths"),
    key("head.layer_norm", "true", "layer norm in the correction head"),
    key("head.use_latent", "false", "feed the base latent to the head"),
    key("head.use_chunk", "false", "feed the whole base chunk to the head"),
    sourced("head.lr", "1e-4", HEAD_TABLE, "head learning rate"),
    sourced("head.weight_decay", "1e-3", HEAD_TABLE, "head AdamW weight decay"),
    sourced("head.grad_clip", "5", HEAD_TABLE, "head global-norm gradient clip"),
    sourced("head.warmup", "500", HEAD_TABLE, "head linear warmup steps"),
    sourced("head.batch", "512", HEAD_TABLE, "head minibatch size"),
    sourced("head.epochs", "16", HEAD_TABLE, "head training epochs"),
    key("eval_fraction", "0.1", "fraction of episodes held out for evaluation"),
    key("sweep.rollouts", "512", "paired rollouts per cell and method"),
    key("sweep.cells", "default", "default, or a list like 0:1,4:4 of delay:exec pairs"),
    key("sweep.methods", "naive,a2c2", "methods to evaluate"),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Where a value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Default,
    File,
    Flag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, (String, Origin)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|k| (k.name, (k.default.to_string(), Origin::Default))).collect(),
        }
    }
}

impl RunConfig {
    /// Sets one key, rejecting unknown names and ill-typed values.
    pub fn set(&mut self, name: &str, value: &str, origin: Origin) -> Result<()> {
        let k = lookup(name).ok_or_else(|| Error::Config(format!("unknown key '{name}'")))?;
        let previous = self.values.insert(k.name, (value.trim().to_string(), origin));
        if let Err(e) = self.check() {
            if let Some(p) = previous {
                self.values.insert(k.name, p);
            }
            return Err(e);
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str, origin: Origin) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v, origin)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.apply_str(&text, Origin::File)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v, Origin::Flag)
    }

    pub fn get(&self, name: &str) -> &str {
        &self.values.get(name).unwrap_or_else(|| panic!("key {name} is not registered")).0
    }

    fn parse<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(name);
        v.parse().map_err(|e| Error::Config(format!("{name} = {v}: {e}")))
    }

    fn widths(&self, name: &str) -> Result<Vec<usize>> {
        let v = self.get(name);
        let out: std::result::Result<Vec<usize>, _> = v.split(',').map(|s| s.trim().parse::<usize>()).collect();
        match out {
            Ok(w) if !w.is_empty() && w.iter().all(|&x| x > 0) => Ok(w),
            _ => Err(Error::Config(format!("{name} = {v}: expected comma-separated positive widths"))),
        }
    }

    fn check(&self) -> Result<()> {
        self.seed()?;
        self.jobs()?;
        self.env()?;
        self.episodes()?;
        self.base_arch()?;
        self.head_arch()?;
        self.base_train()?.validate()?;
        self.head_train()?.validate()?;
        self.rollouts()?;
        self.cells()?;
        self.methods()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn jobs(&self) -> Result<usize> {
        self.parse("jobs")
    }

    pub fn task(&self) -> Result<EnvKind> {
        self.parse("task")
    }

    pub fn env(&self) -> Result<EnvConfig> {
        Ok(EnvConfig::new(self.task()?))
    }

    pub fn episodes(&self) -> Result<usize> {
        match self.parse("episodes")? {
            0 => Err(Error::Config("episodes must be positive".into())),
            n => Ok(n),
        }
    }

    pub fn horizon(&self) -> Result<usize> {
        match self.parse("horizon")? {
            0 => Err(Error::Config("horizon must be positive".into())),
            h => Ok(h),
        }
    }

    pub fn base_arch(&self) -> Result<BaseArch> {
        Ok(BaseArch {
            horizon: self.horizon()?,
            hidden: self.widths("base.hidden")?,
            layer_norm: self.parse("base.layer_norm")?,
        })
    }

    pub fn head_arch(&self) -> Result<HeadArch> {
        Ok(HeadArch {
            hidden: self.widths("head.hidden")?,
            layer_norm: self.parse("head.layer_norm")?,
            use_latent: self.parse("head.use_latent")?,
            use_chunk: self.parse("head.use_chunk")?,
        })
    }

    fn train(&self, prefix: &str) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.parse(&format!("{prefix}.lr"))?,
            batch_size: self.parse(&format!("{prefix}.batch"))?,
            epochs: self.parse(&format!("{prefix}.epochs"))?,
            weight_decay: self.parse(&format!("{prefix}.weight_decay"))?,
            grad_clip: self.parse(&format!("{prefix}.grad_clip"))?,
            warmup_steps: self.parse(&format!("{prefix}.warmup"))?,
            seed: self.seed()?,
            eval_fraction: self.parse("eval_fraction")?,
        })
    }

    pub fn base_train(&self) -> Result<TrainConfig> {
        self.train("base")
    }

    pub fn head_train(&self) -> Result<TrainConfig> {
        self.train("head")
    }

    pub fn rollouts(&self) -> Result<usize> {
        match self.parse("sweep.rollouts")? {
            0 => Err(Error::Config("sweep.rollouts must be positive".into())),
            n => Ok(n),
        }
    }

    /// `(d, e)` pairs for the sweep.
    pub fn cells(&self) -> Result<Vec<(usize, usize)>> {
        let v = self.get("sweep.cells");
        if v == "default" {
            return Ok(default_cells(self.horizon()?));
        }
        v.split(',')
            .map(|pair| {
                let (d, e) = pair
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("sweep.cells entry '{pair}' is not delay:exec")))?;
                let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Config(format!("sweep.cells entry '{pair}': {e}")));
                Ok((parse(d)?, parse(e)?))
            })
            .collect()
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        let out: Vec<Method> = self
            .get("sweep.methods")
            .split(',')
            .map(|m| m.trim().parse::<Method>().map_err(|e| Error::Config(format!("sweep.methods: {e}"))))
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(Error::Config("sweep.methods is empty".into()));
        }
        Ok(out)
    }

    /// `key = value` lines; defaults taken from a published training table
    /// carry a trailing comment naming it.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let (v, origin) = &self.values[k.name];
            let mut note = String::new();
            match (origin, k.source) {
                (Origin::Default, Some(src)) => note = format!("  # default from the {src}"),
                (Origin::File, _) => note = "  # from config file".into(),
                (Origin::Flag, _) => note = "  # from command line".into(),
                _ => {}
            }
            let _ = writeln!(out, "{} = {v}{note}", k.name);
        }
        out
    }

    /// One line per key with its help text.
    pub fn describe_keys() -> String {
        KEYS.iter().map(|k| format!("{:<18} {:<10} {}\n", k.name, k.default, k.help)).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &str)> {
        self.values.iter().map(|(k, (v, _))| (*k, v.as_str()))
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_tables() {
        let c = RunConfig::default();
        let h = c.head_train().unwrap();
        assert_eq!(h.learning_rate, 1e-4);
        assert_eq!(h.weight_decay, 1e-3);
        assert_eq!(h.grad_clip, 5.0);
        assert_eq!(h.warmup_steps, 500);
        assert_eq!(h.batch_size, 512);
        assert_eq!(h.epochs, 16);
        let b = c.base_train().unwrap();
        assert_eq!((b.learning_rate, b.weight_decay, b.grad_clip), (3e-4, 1e-2, 10.0));
        assert_eq!((b.warmup_steps, b.batch_size, b.epochs), (1000, 512, 32));
    }

    #[test]
    fn render_annotates_table_defaults() {
        let text = RunConfig::default().render();
        let line = text.lines().find(|l| l.starts_with("head.lr ")).unwrap();
        assert!(line.contains("correction-head training table"), "{line}");
        let line = text.lines().find(|l| l.starts_with("seed ")).unwrap();
        assert!(!line.contains('#'));
    }

    #[test]
    fn file_then_flags_override() {
        let mut c = RunConfig::default();
        c.apply_str("# comment\nhead.epochs = 4  # short\n\nseed=9\n", Origin::File).unwrap();
        c.apply_override("seed=12").unwrap();
        assert_eq!(c.head_train().unwrap().epochs, 4);
        assert_eq!(c.seed().unwrap(), 12);
        assert!(c.render().contains("head.epochs = 4  # from config file"));
    }

    #[test]
    fn unknown_and_bad_values_rejected() {
        let mut c = RunConfig::default();
        let err = c.apply_str("head.lr = 1e-4\nhead.learning_rate = 1\n", Origin::File).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(c.apply_override("base.batch=0").is_err());
        assert_eq!(c.base_train().unwrap().batch_size, 512);
        assert!(c.apply_override("task=maze").is_err());
        assert!(c.apply_override("sweep.cells=1-2").is_err());
        assert!(c.apply_override("noequals").is_err());
    }

    #[test]
    fn explicit_cells_parse() {
        let mut c = RunConfig::default();
        c.apply_override("sweep.cells=0:1, 0:7").unwrap();
        assert_eq!(c.cells().unwrap(), vec![(0, 1), (0, 7)]);
        assert_eq!(RunConfig::default().cells().unwrap().len(), 11);
    }
}

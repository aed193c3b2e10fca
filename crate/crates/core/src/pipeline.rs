//! Pipeline stages shared by the command line and the test suites, plus run
//! manifests.
//!
//! A manifest is a `key = value` text file holding the command, the full
//! configuration snapshot and the sha256 of every input and output artifact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::bench::{run_sweep, write_sweep_csv, SweepReport, SweepSpec};
use crate::config::RunConfig;
use crate::datastore::{build_dcor, record_expert_dataset, write_dataset, AugmentOptions, BaseDataset, CorrectionDataset, Dataset};
use crate::envsim::EnvConfig;
use crate::numkit::{grad_check, GradCheckReport, MlpSpec};
use crate::policies::{self, save_policy, BasePolicy, ChunkPolicy, CorrectionHead, LossCurve, Policy};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Hex sha256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut m = Manifest::default();
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        for (k, v) in cfg.entries() {
            m.push(&format!("config.{k}"), v);
        }
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn artifact(&mut self, role: &str, name: &str, path: &Path) -> Result<()> {
        self.push(&format!("{role}.{name}.path"), path.display());
        self.push(&format!("{role}.{name}.sha256"), sha256_file(path)?);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format("manifest", format!("line {} is not key = value", i + 1)))?;
            m.push(k, v);
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Manifest::parse(&text)
    }

    /// Rebuilds the configuration snapshot stored in the manifest.
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.entries {
            if let Some(key) = k.strip_prefix("config.") {
                cfg.set(key, v, crate::config::Origin::File)?;
            }
        }
        Ok(cfg)
    }
}

/// Manifest path written next to an artifact.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn gen_expert(cfg: &RunConfig) -> Result<BaseDataset> {
    record_expert_dataset(&cfg.env()?, cfg.episodes()?, cfg.seed()?)
}

pub fn train_base(cfg: &RunConfig, ds: &BaseDataset) -> Result<(BasePolicy, LossCurve)> {
    policies::train_base(ds, &cfg.base_arch()?, &cfg.base_train()?)
}

/// Builds the correction dataset; the base must match the dataset's task and
/// dimensions.
pub fn infer_augment(cfg: &RunConfig, ds: &BaseDataset, base: &BasePolicy) -> Result<CorrectionDataset> {
    if base.task != ds.task || base.obs_dim() != ds.obs_dim || base.act_dim() != ds.act_dim {
        return Err(Error::shape(
            "infer-augment",
            format!("{} obs {} act {}", ds.task, ds.obs_dim, ds.act_dim),
            format!("base policy {} obs {} act {}", base.task, base.obs_dim(), base.act_dim()),
        ));
    }
    let arch = cfg.head_arch()?;
    let opts = AugmentOptions {
        capture_latent: arch.use_latent,
        capture_chunk: arch.use_chunk,
    };
    build_dcor(ds, base, base.horizon(), opts)
}

pub fn train_correction(cfg: &RunConfig, dcor: &CorrectionDataset) -> Result<(CorrectionHead, LossCurve)> {
    policies::train_correction(dcor, &cfg.head_arch()?, &cfg.head_train()?)
}

pub fn sweep(cfg: &RunConfig, base: &BasePolicy, head: Option<&CorrectionHead>) -> Result<SweepReport> {
    let spec = SweepSpec {
        env: EnvConfig::new(base.task),
        horizon: base.horizon(),
        cells: cfg.cells()?,
        rollouts: cfg.rollouts()?,
        base_seed: cfg.seed()?,
        methods: cfg.methods()?,
    };
    run_sweep(&spec, base, head)
}

/// Random small network shapes for the gradient check.
pub fn random_specs(count: usize, seed: u64) -> Vec<MlpSpec> {
    let mut r = rng::stream(seed, Stream::GradCheck);
    (0..count)
        .map(|i| {
            let depth = r.gen_range(1..=4);
            let sizes = (0..=depth).map(|_| r.gen_range(1..=12)).collect();
            let mut spec = MlpSpec::new(sizes, false, rng::mix(&[seed, i as u64]));
            for ln in &mut spec.layer_norm {
                *ln = r.gen_bool(0.5);
            }
            spec
        })
        .collect()
}

pub fn gradcheck_suite(count: usize, trials: usize, seed: u64) -> Result<Vec<(MlpSpec, GradCheckReport)>> {
    random_specs(count, seed)
        .into_iter()
        .map(|s| grad_check(&s, trials).map(|r| (s, r)))
        .collect()
}

/// Everything the default pipeline produced.
pub struct PipelineOutcome {
    pub dataset: BaseDataset,
    pub base: BasePolicy,
    pub base_curve: LossCurve,
    pub dcor_records: usize,
    pub head: CorrectionHead,
    pub head_curve: LossCurve,
    pub report: SweepReport,
    pub timings: Vec<(&'static str, Duration)>,
    pub manifest: Manifest,
}

/// Runs gen-expert, train-base, infer-augment, train-correction and sweep,
/// writing every artifact plus `manifest.txt` into `dir`.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Result<PipelineOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = Manifest::new("pipeline", cfg);
    let mut timings = Vec::new();
    let mut timed = |name: &'static str, t: Instant| {
        log::info!("{name} finished in {:.1?}", t.elapsed());
        timings.push((name, t.elapsed()));
    };

    let t = Instant::now();
    let dataset = gen_expert(cfg)?;
    let path = dir.join("dbase.bin");
    let dataset = match write_and_return(Dataset::Base(dataset), &path)? {
        Dataset::Base(d) => d,
        Dataset::Correction(_) => unreachable!(),
    };
    manifest.artifact("output", "dbase", &path)?;
    timed("gen-expert", t);

    let t = Instant::now();
    let (base, base_curve) = train_base(cfg, &dataset)?;
    let path = dir.join("base.policy");
    let base = match write_policy(Policy::Base(base), &path)? {
        Policy::Base(b) => b,
        Policy::Head(_) => unreachable!(),
    };
    manifest.artifact("output", "base", &path)?;
    timed("train-base", t);

    let t = Instant::now();
    let dcor = infer_augment(cfg, &dataset, &base)?;
    let dcor_records = dcor.len();
    let path = dir.join("dcor.bin");
    let dcor = match write_and_return(Dataset::Correction(dcor), &path)? {
        Dataset::Correction(d) => d,
        Dataset::Base(_) => unreachable!(),
    };
    manifest.artifact("output", "dcor", &path)?;
    timed("infer-augment", t);

    let t = Instant::now();
    let (head, head_curve) = train_correction(cfg, &dcor)?;
    drop(dcor);
    let path = dir.join("head.policy");
    let head = match write_policy(Policy::Head(head), &path)? {
        Policy::Head(h) => h,
        Policy::Base(_) => unreachable!(),
    };
    manifest.artifact("output", "head", &path)?;
    timed("train-correction", t);

    let t = Instant::now();
    let report = sweep(cfg, &base, Some(&head))?;
    let path = dir.join("sweep.csv");
    write_sweep_csv(&report.cells, &path)?;
    manifest.artifact("output", "sweep", &path)?;
    timed("sweep", t);

    for (name, d) in &timings {
        manifest.push(&format!("seconds.{name}"), format!("{:.3}", d.as_secs_f64()));
    }
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(PipelineOutcome {
        dataset,
        base,
        base_curve,
        dcor_records,
        head,
        head_curve,
        report,
        timings,
        manifest,
    })
}

fn write_and_return(ds: Dataset, path: &Path) -> Result<Dataset> {
    write_dataset(&ds, path)?;
    Ok(ds)
}

fn write_policy(p: Policy, path: &Path) -> Result<Policy> {
    save_policy(&p, path)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_restores_config() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("head.epochs=3").unwrap();
        let mut m = Manifest::new("train-correction", &cfg);
        m.push("note", "a = b");
        let back = Manifest::parse(&m.render()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("note"), Some("a = b"));
        assert_eq!(back.config().unwrap().head_train().unwrap().epochs, 3);
    }

    #[test]
    fn sha256_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn random_specs_are_valid_and_varied() {
        let specs = random_specs(16, 3);
        assert_eq!(specs.len(), 16);
        for s in &specs {
            s.validate().unwrap();
        }
        let flags: Vec<bool> = specs.iter().flat_map(|s| s.layer_norm.clone()).collect();
        assert!(flags.contains(&true) && flags.contains(&false));
    }

    #[test]
    fn augment_refuses_mismatched_base() {
        let cfg = RunConfig::default();
        let holdzone = record_expert_dataset(&EnvConfig::holdzone(), 2, 0).unwrap();
        let pursuit = record_expert_dataset(&EnvConfig::pursuit(), 2, 0).unwrap();
        let arch = policies::BaseArch {
            hidden: vec![4],
            ..Default::default()
        };
        let tc = policies::TrainConfig {
            epochs: 1,
            ..policies::TrainConfig::base_defaults()
        };
        let (base, _) = policies::train_base(&pursuit, &arch, &tc).unwrap();
        let err = infer_augment(&cfg, &holdzone, &base).unwrap_err();
        assert!(err.to_string().contains("infer-augment"), "{err}");
    }
}

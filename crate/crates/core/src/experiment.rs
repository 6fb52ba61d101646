//! Run configuration, end-to-end experiment driver and CSV output.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::he::{BackendKind, HeParams};
use crate::netsim::{dry_run_accounting, DryRunConfig, DryRunReport, NetProfile, ShapeManifest};
use crate::prme::PruneConfig;
use crate::protocol::{Federation, FederationConfig, Packing, PhaseTimes, RoundMetrics, Strategy, Timing};
use crate::trainer::{
    dirichlet_partition, fit, synth_task, Concentration, DataShard, Dataset, LocalTrainConfig, SynthSpec, ToyModel,
};

/// Environment variable that overrides the seed from files and flags.
pub const SEED_ENV: &str = "DICTPFL_SEED";

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub clients: usize,
    pub rounds: usize,
    pub rank: usize,
    pub s: f64,
    pub tau: usize,
    pub beta: f64,
    /// Dirichlet concentration; `inf` gives a homogeneous split.
    pub alpha: f64,
    pub lr: f64,
    pub seed: u64,
    pub backend: BackendKind,
    pub net: NetProfile,
    pub out: Option<PathBuf>,
    pub threads: usize,
    pub classes: usize,
    pub dim: usize,
    /// Training samples per class.
    pub samples: usize,
    /// Held-out samples per class.
    pub test_samples: usize,
    /// Public samples per class used to pretrain the base model centrally.
    pub public_samples: usize,
    /// Full-batch SGD steps of central pretraining; 0 keeps the random init.
    pub pretrain_steps: usize,
    pub margin: f64,
    pub noise: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub packing: Packing,
    pub timing: Timing,
    /// Ring dimension of the executing backend.
    pub ring_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::DictPfl,
            clients: 3,
            rounds: 10,
            rank: 4,
            s: 0.7,
            tau: 3,
            beta: 0.2,
            alpha: f64::INFINITY,
            lr: 0.5,
            seed: 0,
            backend: BackendKind::ToyRlwe,
            net: NetProfile::lan(),
            out: None,
            threads: 0,
            classes: 4,
            dim: 32,
            samples: 150,
            test_samples: 50,
            public_samples: 50,
            pretrain_steps: 50,
            margin: 3.0,
            noise: 1.0,
            hidden: 64,
            epochs: 1,
            batch: 0,
            packing: Packing::Compacted,
            timing: Timing::Modeled,
            ring_dim: HeParams::toy().ring_dim,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("invalid value '{value}' for {key}")))
}

impl RunConfig {
    /// Sets one option by its file/flag name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "strategy" => self.strategy = v.parse()?,
            "clients" => self.clients = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "rank" | "r" => self.rank = parse(key, v)?,
            "prune" | "s" => self.s = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "backend" => self.backend = v.parse()?,
            "net" => self.net = v.parse()?,
            "out" => self.out = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "threads" => self.threads = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "test_samples" => self.test_samples = parse(key, v)?,
            "public_samples" => self.public_samples = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "packing" => self.packing = v.parse()?,
            "timing" => self.timing = v.parse()?,
            "ring_dim" => self.ring_dim = parse(key, v)?,
            other => return Err(Error::Parameter(format!("unknown option '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Parameter(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parameter(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", &v),
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Parameter(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn concentration(&self) -> Result<Concentration> {
        Concentration::from_alpha(self.alpha)
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            strategy: self.strategy,
            rank: self.rank,
            prune: PruneConfig {
                s: self.s,
                tau: self.tau,
                beta: self.beta,
                seed: self.seed,
            },
            train: LocalTrainConfig {
                epochs: self.epochs,
                lr: self.lr,
                batch_size: self.batch,
            },
            packing: self.packing,
            seed: self.seed,
            threads: self.threads,
            timing: self.timing,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.federation_config().validate()?;
        self.concentration()?;
        if self.clients == 0 {
            return Err(Error::Parameter("clients must be at least 1".into()));
        }
        if self.classes < 2 || self.dim == 0 || self.hidden == 0 || self.samples == 0 || self.test_samples == 0 {
            return Err(Error::Parameter("task needs at least 2 classes and non-empty sizes".into()));
        }
        if self.clients > self.classes * self.samples {
            return Err(Error::Parameter(format!(
                "{} clients for {} training samples",
                self.clients,
                self.classes * self.samples
            )));
        }
        if let Strategy::FedHeTopK(k) = self.strategy {
            if k > 2 {
                return Err(Error::Parameter(format!("top-{k} exceeds the 2-layer model")));
            }
        }
        HeParams::toy().with_ring_dim(self.ring_dim).validate()?;
        Ok(())
    }
}

/// Client training data, held-out test data and a small public split, all
/// sampled from one blob task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
    pub public: Dataset,
}

pub fn make_task(cfg: &RunConfig) -> Result<TaskData> {
    let spec = SynthSpec {
        classes: cfg.classes,
        dim: cfg.dim,
        per_class: cfg.samples + cfg.test_samples + cfg.public_samples,
        margin: cfg.margin,
        noise: cfg.noise,
    };
    let all = synth_task(&spec, cfg.seed)?;
    let mut seen = vec![0usize; cfg.classes];
    let (mut train, mut test, mut public) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &y) in all.labels().iter().enumerate() {
        let c = &mut seen[y as usize];
        if *c < cfg.samples {
            train.push(i);
        } else if *c < cfg.samples + cfg.test_samples {
            test.push(i);
        } else {
            public.push(i);
        }
        *c += 1;
    }
    Ok(TaskData {
        train: all.subset(&train),
        test: all.subset(&test),
        public: all.subset(&public),
    })
}

/// Random-init MLP, optionally pretrained centrally on the public split.
pub fn base_model(cfg: &RunConfig, public: &Dataset) -> Result<ToyModel> {
    let model = ToyModel::mlp(&[cfg.dim, cfg.hidden, cfg.classes], cfg.seed)?;
    if cfg.pretrain_steps == 0 {
        return Ok(model);
    }
    if public.is_empty() {
        return Err(Error::Parameter("pretraining needs public samples".into()));
    }
    let shard = DataShard {
        owner: usize::MAX,
        data: public.clone(),
    };
    let train = LocalTrainConfig {
        epochs: cfg.pretrain_steps,
        lr: cfg.lr,
        batch_size: 0,
    };
    Ok(fit(&model, &shard, &train)?.0)
}

/// Rows of the held-out split used to score select-and-encrypt sensitivity.
const CALIBRATION_ROWS: usize = 32;

/// Builds the federation described by `cfg`: data, partition, base model and
/// backend.
pub fn build_federation(cfg: &RunConfig) -> Result<Federation> {
    cfg.validate()?;
    let task = make_task(cfg)?;
    let shards = dirichlet_partition(&task.train, cfg.clients, cfg.concentration()?, cfg.seed)?;
    let base = base_model(cfg, &task.public)?;
    let backend = cfg.backend.build(HeParams::toy().with_ring_dim(cfg.ring_dim))?;
    // the calibration batch is public: the public split if there is one,
    // otherwise the head of the held-out split
    let calib_src = if task.public.is_empty() { &task.test } else { &task.public };
    let calib: Vec<usize> = (0..calib_src.len().min(CALIBRATION_ROWS)).collect();
    let calib = calib_src.subset(&calib);
    Federation::new(cfg.federation_config(), Arc::from(backend), cfg.net.clone(), &base, shards)?
        .with_eval(task.test)?
        .with_calibration(&calib)
}

pub fn run(cfg: &RunConfig) -> Result<Vec<RoundMetrics>> {
    build_federation(cfg)?.run(cfg.rounds)
}

pub const METRICS_HEADER: [&str; 15] = [
    "round",
    "local_train_s",
    "encrypt_s",
    "upload_s",
    "aggregate_s",
    "download_s",
    "decrypt_s",
    "update_s",
    "ciphertext_up_bytes",
    "ciphertext_down_bytes",
    "plaintext_up_bytes",
    "plaintext_down_bytes",
    "ct_count",
    "loss",
    "accuracy",
];

pub fn write_metrics_csv(w: impl Write, metrics: &[RoundMetrics]) -> Result<()> {
    debug_assert_eq!(PhaseTimes::NAMES.len() + 8, METRICS_HEADER.len());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for m in metrics {
        let mut rec = vec![m.round.to_string()];
        rec.extend(m.times.as_array().iter().map(f64::to_string));
        rec.extend(
            [
                m.bytes.ciphertext_up,
                m.bytes.ciphertext_down,
                m.bytes.plaintext_up,
                m.bytes.plaintext_down,
                m.ciphertext_count(),
            ]
            .iter()
            .map(u64::to_string),
        );
        rec.push(m.loss.to_string());
        rec.push(m.accuracy.to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// One-line totals for a finished run.
pub fn summary_line(cfg: &RunConfig, metrics: &[RoundMetrics]) -> String {
    let bytes: u64 = metrics.iter().map(|m| m.bytes.total()).sum();
    let secs: f64 = metrics.iter().map(|m| m.times.total()).sum();
    let cts: u64 = metrics.iter().map(RoundMetrics::ciphertext_count).sum();
    let mut s = format!(
        "summary strategy={} clients={} rounds={} total_bytes={bytes} total_ciphertexts={cts} total_seconds={secs:.6}",
        cfg.strategy,
        cfg.clients,
        metrics.len()
    );
    if let Some(last) = metrics.last() {
        let _ = write!(s, " final_loss={:.6} final_accuracy={:.4}", last.loss, last.accuracy);
    }
    s
}

/// Dry-run accounting for the standard strategy set.
pub fn dry_run(manifest: &ShapeManifest, cfg: &DryRunConfig, sae_fraction: f64, top_k: usize) -> Result<Vec<DryRunReport>> {
    [
        Strategy::FedHeFull,
        Strategy::FedHeTopK(top_k.min(manifest.layers.len())),
        Strategy::SaE(sae_fraction),
        Strategy::DictPfl,
    ]
    .into_iter()
    .map(|s| dry_run_accounting(manifest, s, cfg))
    .collect()
}

pub fn write_dryrun_csv(w: impl Write, reports: &[DryRunReport]) -> Result<()> {
    let full = reports
        .iter()
        .find(|r| r.strategy == Strategy::FedHeFull)
        .map(|r| r.steady);
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "strategy",
        "phase",
        "encrypted_elements",
        "plaintext_elements",
        "ciphertexts",
        "ciphertext_bytes",
        "plaintext_bytes",
        "element_reduction",
        "byte_reduction",
    ])?;
    for r in reports {
        for (phase, c) in [("warmup", r.warmup), ("steady", r.steady)] {
            let ratio = |a: u64, b: u64| if b == 0 { "inf".to_string() } else { (a as f64 / b as f64).to_string() };
            let (er, br) = match full {
                Some(f) => (
                    ratio(f.encrypted_elements, c.encrypted_elements),
                    ratio(f.ciphertext_bytes, c.ciphertext_bytes),
                ),
                None => (String::new(), String::new()),
            };
            out.write_record([
                r.strategy.to_string(),
                phase.to_string(),
                c.encrypted_elements.to_string(),
                c.plaintext_elements.to_string(),
                c.ciphertexts.to_string(),
                c.ciphertext_bytes.to_string(),
                c.plaintext_bytes.to_string(),
                er,
                br,
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            rounds: 3,
            samples: 20,
            test_samples: 5,
            dim: 8,
            hidden: 8,
            ring_dim: 256,
            ..Default::default()
        }
    }

    #[test]
    fn file_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nstrategy = full\nclients=5\n\nprune=0.5 # trailing\nnet=wan\n").unwrap();
        assert_eq!(cfg.strategy, Strategy::FedHeFull);
        assert_eq!(cfg.clients, 5);
        assert_eq!(cfg.s, 0.5);
        assert_eq!(cfg.net, NetProfile::wan());
        cfg.set("clients", "7").unwrap();
        assert_eq!(cfg.clients, 7);
        assert!(cfg.apply_text("clients").is_err());
        assert!(cfg.apply_text("bogus=1").is_err());
        assert!(cfg.set("rounds", "-1").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.s = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.strategy = Strategy::FedHeTopK(3);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_shape_and_determinism() {
        let cfg = small();
        let a = run(&cfg).unwrap();
        let mut x = Vec::new();
        write_metrics_csv(&mut x, &a).unwrap();
        let mut y = Vec::new();
        write_metrics_csv(&mut y, &run(&cfg).unwrap()).unwrap();
        assert_eq!(x, y);
        let text = String::from_utf8(x).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 15);
        assert!(summary_line(&cfg, &a).starts_with("summary strategy=dictpfl"));
    }

    #[test]
    fn held_out_split_is_disjoint_and_sized() {
        let cfg = small();
        let task = make_task(&cfg).unwrap();
        assert_eq!(task.train.histogram(), vec![20; 4]);
        assert_eq!(task.test.histogram(), vec![5; 4]);
        assert_eq!(task.public.histogram(), vec![50; 4]);
    }

    #[test]
    fn dryrun_csv_has_reduction_columns() {
        let manifest = ShapeManifest::parse("a 768 768\nb 768 3072\n").unwrap();
        let reports = dry_run(&manifest, &DryRunConfig::default(), 0.1, 2).unwrap();
        let mut out = Vec::new();
        write_dryrun_csv(&mut out, &reports).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert!(text.lines().nth(1).unwrap().starts_with("full,warmup,"));
    }
}

//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::federation::{derive_seed, run_federation, AnnealSchedule, FederationConfig, FederationOutcome, Transport};
use crate::meta::{EpisodeSizes, LearnerConfig, Params, UpdateRule};
use crate::metrics::MetricsSink;
use crate::search::{Geometry, SuperNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Root under which run directories are created.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub rates: RatesConfig,
    #[serde(default)]
    pub anneal: AnnealSchedule,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default)]
    pub episode: EpisodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// `synthetic` or `idx`.
    pub kind: String,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub spread: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: "synthetic".into(),
            n_classes: 4,
            n_per_class: 400,
            spread: 0.5,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            max_train: None,
            max_test: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// `dirichlet` or `label_skew`.
    pub scheme: String,
    pub alpha: f64,
    pub tau: usize,
    /// Defaults to twice the episode size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_size: Option<usize>,
    pub max_retries: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            scheme: "dirichlet".into(),
            alpha: 0.5,
            tau: 2,
            min_size: None,
            max_retries: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// `desk` or `minimal`; the fields below override it.
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combo_size: Option<usize>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            cells: None,
            nodes: None,
            stem_channels: None,
            combo_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    pub clients: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub inner_steps: usize,
    pub workers: usize,
    pub transport: Transport,
    pub update_rule: UpdateRule,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            rounds: 10,
            clients: 10,
            clients_per_round: 5,
            local_epochs: 5,
            inner_steps: 3,
            workers: 1,
            transport: Transport::Channel,
            update_rule: UpdateRule::Joint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    pub task_w: f32,
    pub task_alpha: f32,
    pub meta_w: f32,
    pub meta_alpha: f32,
}

impl Default for RatesConfig {
    fn default() -> Self {
        let d = LearnerConfig::default();
        Self {
            task_w: d.eta_task.0,
            task_alpha: d.eta_task.1,
            meta_w: d.eta_meta.0,
            meta_alpha: d.eta_meta.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningConfig {
    pub threshold: f32,
    pub period: usize,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            threshold: crate::prune::DEFAULT_THRESHOLD,
            period: crate::prune::DEFAULT_PERIOD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub support: usize,
    pub query: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        let d = EpisodeSizes::default();
        Self {
            support: d.support,
            query: d.query,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            geometry: GeometryConfig::default(),
            federation: FederationSection::default(),
            rates: RatesConfig::default(),
            anneal: AnnealSchedule::default(),
            pruning: PruningConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

fn path_issue(field: &str, p: &Option<PathBuf>, issues: &mut Vec<String>) {
    match p {
        None => issues.push(format!("{field}: required for idx datasets")),
        Some(p) if !p.is_file() => issues.push(format!("{field}: {} does not exist", p.display())),
        Some(_) => {}
    }
}

impl RunConfig {
    /// Parses without validating.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    /// Reads, parses and validates a config file. Relative dataset paths
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.dataset;
        for p in [&mut d.train_images, &mut d.train_labels, &mut d.test_images, &mut d.test_labels]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let d = &self.dataset;
        match d.kind.as_str() {
            "synthetic" => {
                if d.n_classes < 2 {
                    issues.push("dataset.n_classes: must be at least 2".into());
                }
                if d.n_per_class < 4 {
                    issues.push("dataset.n_per_class: must be at least 4".into());
                }
                if !(d.spread >= 0.0 && d.spread.is_finite()) {
                    issues.push("dataset.spread: must be finite and >= 0".into());
                }
            }
            "idx" => {
                path_issue("dataset.train_images", &d.train_images, &mut issues);
                path_issue("dataset.train_labels", &d.train_labels, &mut issues);
                path_issue("dataset.test_images", &d.test_images, &mut issues);
                path_issue("dataset.test_labels", &d.test_labels, &mut issues);
            }
            other => issues.push(format!("dataset.kind: expected `synthetic` or `idx`, got `{other}`")),
        }
        let p = &self.partition;
        match p.scheme.as_str() {
            "dirichlet" => {
                if !(p.alpha > 0.0 && p.alpha.is_finite()) {
                    issues.push("partition.alpha: must be > 0".into());
                }
                if p.max_retries == 0 {
                    issues.push("partition.max_retries: must be at least 1".into());
                }
            }
            "label_skew" => {
                if p.tau == 0 {
                    issues.push("partition.tau: must be at least 1".into());
                }
                if d.kind == "synthetic" && p.tau > d.n_classes {
                    issues.push(format!("partition.tau: {} exceeds dataset.n_classes {}", p.tau, d.n_classes));
                }
            }
            other => issues.push(format!("partition.scheme: expected `dirichlet` or `label_skew`, got `{other}`")),
        }
        if !matches!(self.geometry.preset.as_str(), "desk" | "minimal") {
            issues.push(format!(
                "geometry.preset: expected `desk` or `minimal`, got `{}`",
                self.geometry.preset
            ));
        } else if let Err(e) = self.geometry_for(1, 8, 8, d.n_classes.max(2)).validate() {
            issues.push(format!("geometry: {e}"));
        }
        let f = &self.federation;
        if f.clients == 0 {
            issues.push("federation.clients: must be at least 1".into());
        }
        if f.clients_per_round == 0 || f.clients_per_round > f.clients {
            issues.push(format!(
                "federation.clients_per_round: must be in 1..={}, got {}",
                f.clients, f.clients_per_round
            ));
        }
        if f.local_epochs == 0 {
            issues.push("federation.local_epochs: must be at least 1".into());
        }
        if f.inner_steps == 0 {
            issues.push("federation.inner_steps: must be at least 1".into());
        }
        if f.workers == 0 {
            issues.push("federation.workers: must be at least 1".into());
        }
        let r = &self.rates;
        for (name, v) in [
            ("task_w", r.task_w),
            ("task_alpha", r.task_alpha),
            ("meta_w", r.meta_w),
            ("meta_alpha", r.meta_alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                issues.push(format!("rates.{name}: must be > 0"));
            }
        }
        let a = &self.anneal;
        if !(a.lambda_min > 0.0 && a.lambda_0 >= a.lambda_min && a.lambda_0.is_finite()) {
            issues.push("anneal: need lambda_0 >= lambda_min > 0".into());
        }
        if !(a.rate >= 0.0 && a.rate.is_finite()) {
            issues.push("anneal.rate: must be >= 0".into());
        }
        if !(self.pruning.threshold > 0.0 && self.pruning.threshold < 1.0) {
            issues.push("pruning.threshold: must be in (0, 1)".into());
        }
        if self.pruning.period == 0 {
            issues.push("pruning.period: must be at least 1".into());
        }
        if self.episode.support == 0 || self.episode.query == 0 {
            issues.push("episode: support and query must be at least 1".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn geometry_for(&self, in_channels: usize, height: usize, width: usize, n_classes: usize) -> Geometry {
        let g = &self.geometry;
        let mut geo = if g.preset == "minimal" {
            Geometry::minimal(in_channels, height, width, n_classes)
        } else {
            Geometry::desk(in_channels, height, width, n_classes)
        };
        geo.cells = g.cells.unwrap_or(geo.cells);
        geo.nodes = g.nodes.unwrap_or(geo.nodes);
        geo.stem_channels = g.stem_channels.unwrap_or(geo.stem_channels);
        geo.combo_size = g.combo_size.unwrap_or(geo.combo_size);
        geo
    }

    pub fn geometry(&self, data: &Dataset) -> Geometry {
        let [c, h, w] = data.sample_shape();
        self.geometry_for(c, h, w, data.n_classes)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        if d.kind == "idx" {
            let need = |p: &Option<PathBuf>| p.clone().ok_or_else(|| Error::Config(vec!["dataset: missing path".into()]));
            let train = data::load_idx(&need(&d.train_images)?, &need(&d.train_labels)?)?;
            let test = data::load_idx(&need(&d.test_images)?, &need(&d.test_labels)?)?;
            return Ok(Dataset::join(train, test)?.truncate(d.max_train, d.max_test));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0xDA7A]));
        let mut tasks = data::synth_tasks(1, d.n_per_class, d.n_classes, d.spread, &mut rng)?;
        Ok(tasks.remove(0).truncate(d.max_train, d.max_test))
    }

    pub fn min_shard_size(&self) -> usize {
        self.partition
            .min_size
            .unwrap_or(2 * (self.episode.support + self.episode.query))
    }

    pub fn partition(&self, data: &Dataset) -> Result<PartitionPlan> {
        let p = &self.partition;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0x9A27]));
        let n = self.federation.clients;
        let plan = match p.scheme.as_str() {
            "label_skew" => data::label_skew_partition(&data.labels, &data.train, n, p.tau, &mut rng)?,
            _ => data::dirichlet_partition(
                &data.labels,
                &data.train,
                n,
                p.alpha,
                self.min_shard_size(),
                p.max_retries,
                &mut rng,
            )?,
        };
        Ok(plan)
    }

    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            seed: self.seed,
            rounds: f.rounds,
            clients_per_round: f.clients_per_round,
            learner: LearnerConfig {
                eta_task: (self.rates.task_w, self.rates.task_alpha),
                eta_meta: (self.rates.meta_w, self.rates.meta_alpha),
                inner_steps: f.inner_steps,
                epochs: f.local_epochs,
                rule: f.update_rule,
            },
            episode: EpisodeSizes {
                support: self.episode.support,
                query: self.episode.query,
            },
            anneal: self.anneal,
            prune_threshold: self.pruning.threshold,
            prune_period: self.pruning.period,
            workers: f.workers,
            transport: f.transport,
        }
    }

    /// Seed for supernet initialization.
    pub fn init_seed(&self) -> u64 {
        derive_seed(&[self.seed, 0x1A17])
    }

    /// Partitions `data`, initializes the supernet and runs the federation.
    pub fn search(&self, data: &Dataset, sink: &mut dyn MetricsSink) -> Result<(SuperNet, FederationOutcome)> {
        let plan = self.partition(data)?;
        let geometry = self.geometry(data);
        let (net, w) = SuperNet::build(geometry, &mut ChaCha8Rng::seed_from_u64(self.init_seed()))?;
        let alpha = net.init_arch(self.anneal.at(0)).logits;
        let outcome = run_federation(&self.federation_config(), &net, Params { w, alpha }, data, &plan, sink)?;
        Ok((net, outcome))
    }
}

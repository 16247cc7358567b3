//! Run configuration: a JSON-file representation whose keys mirror the CLI
//! flags (dashes become underscores), merged as defaults < file < flags. The
//! effective configuration is echoed into the output directory so every run
//! directory is self-describing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use stalemp::dataset::SbmConfig;
use stalemp::layer::AugmentMode;
use stalemp::train::TrainConfig;
use stalemp::{streams, subseed};

/// Flags shared by every subcommand. Each flag has a config-file key of the
/// same name with dashes replaced by underscores; flags given on the command
/// line win over file values.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON config file; explicit flags override its fields
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Edge-list file (tab-separated "src\tdst", '#' comments)
    #[arg(long, value_name = "FILE")]
    pub edge_list: Option<PathBuf>,
    /// Binary feature matrix file
    #[arg(long, value_name = "FILE")]
    pub features: Option<PathBuf>,
    /// Label file, one class id per line
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Generate a stochastic-block-model dataset instead of loading files;
    /// keys: n, blocks, p_in, p_out, feat_dim, noise, mean_scale, label_noise
    #[arg(long, num_args = 1.., value_name = "K=V")]
    pub synth_sbm: Vec<String>,
    /// Add a self loop to every node before training
    #[arg(long)]
    pub add_self_loops: bool,
    /// Number of partition clusters
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Clusters drawn per mini-batch
    #[arg(long)]
    pub batch_clusters: Option<usize>,
    /// Number of attention layers
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden width of every non-output layer
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Feature-dropout probability on the first layer's live input rows
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Drift-regularizer weight
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Persistence threshold: frontier rows older than this are dropped
    #[arg(long)]
    pub g_thres: Option<u64>,
    /// Staleness channel on cached rows: none | concat | sum
    #[arg(long, value_name = "MODE")]
    pub augment: Option<String>,
    /// Disable the staleness penalty inside out-of-batch attention
    #[arg(long)]
    pub gamma_off: bool,
    /// Disable the drift regularization loss
    #[arg(long)]
    pub stale_loss_off: bool,
    /// Disable the staleness channel (same as --augment none)
    #[arg(long)]
    pub augment_off: bool,
    /// Load initial parameters (and cache, if present) from a previous run's
    /// checkpoint directory
    #[arg(long, value_name = "DIR")]
    pub warm_start: Option<PathBuf>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Master random seed; every random choice in the run derives from it
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run the bound diagnostics every N epochs
    #[arg(long, value_name = "N")]
    pub diagnose_every: Option<u64>,
    /// Write a parameter + cache checkpoint every N epochs
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<u64>,
    /// Fraction of nodes per class held out for validation
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Model parameter container (diagnose)
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    /// Cache snapshot container (diagnose)
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
}

/// Synthetic-dataset parameters as they appear in config files and `k=v`
/// flags; unset keys fall back to the generator defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SbmParams {
    pub n: Option<usize>,
    pub blocks: Option<usize>,
    pub p_in: Option<f64>,
    pub p_out: Option<f64>,
    pub feat_dim: Option<usize>,
    pub noise: Option<f64>,
    pub mean_scale: Option<f64>,
    pub label_noise: Option<f64>,
}

impl SbmParams {
    pub fn apply_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("synthetic-dataset parameter {pair:?} is not k=v"))?;
        fn parse<T: std::str::FromStr>(pair: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow::anyhow!("synthetic-dataset parameter {pair:?}: {e}"))
        }
        match key {
            "n" => self.n = Some(parse(pair, value)?),
            "blocks" => self.blocks = Some(parse(pair, value)?),
            "p_in" => self.p_in = Some(parse(pair, value)?),
            "p_out" => self.p_out = Some(parse(pair, value)?),
            "feat_dim" => self.feat_dim = Some(parse(pair, value)?),
            "noise" => self.noise = Some(parse(pair, value)?),
            "mean_scale" => self.mean_scale = Some(parse(pair, value)?),
            "label_noise" => self.label_noise = Some(parse(pair, value)?),
            other => bail!("unknown synthetic-dataset key {other:?}"),
        }
        Ok(())
    }

    /// Concrete generator config; the dataset seed is derived from the run
    /// seed so `synth` + `train --edge-list` reproduces `train --synth-sbm`.
    pub fn resolve(&self, run_seed: u64) -> SbmConfig {
        let d = SbmConfig::default();
        SbmConfig {
            n: self.n.unwrap_or(d.n),
            blocks: self.blocks.unwrap_or(d.blocks),
            p_in: self.p_in.unwrap_or(d.p_in),
            p_out: self.p_out.unwrap_or(d.p_out),
            feat_dim: self.feat_dim.unwrap_or(d.feat_dim),
            noise: self.noise.unwrap_or(d.noise),
            mean_scale: self.mean_scale.unwrap_or(d.mean_scale),
            label_noise: self.label_noise.unwrap_or(d.label_noise),
            seed: subseed(run_seed, streams::DATASET, 0, 0),
        }
    }
}

/// The effective configuration of one run. Serialized as `config.json` into
/// the output directory; the field set is the config-file schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub edge_list: Option<String>,
    pub features: Option<String>,
    pub labels: Option<String>,
    pub synth_sbm: Option<SbmParams>,
    pub add_self_loops: bool,
    pub clusters: usize,
    pub batch_clusters: usize,
    pub layers: usize,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lambda: f64,
    pub g_thres: Option<u64>,
    pub augment: String,
    pub gamma_off: bool,
    pub stale_loss_off: bool,
    pub augment_off: bool,
    pub warm_start: Option<String>,
    pub epochs: u64,
    pub seed: u64,
    pub out: String,
    pub diagnose_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub val_frac: f64,
    pub params: Option<String>,
    pub history: Option<String>,
    /// Sweep grids; ignored by `train`.
    pub grid_lambda: Option<Vec<f64>>,
    pub grid_batch_clusters: Option<Vec<usize>>,
    pub grid_augment: Option<Vec<String>>,
    pub grid_components: Option<Vec<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            edge_list: None,
            features: None,
            labels: None,
            synth_sbm: None,
            add_self_loops: false,
            clusters: t.num_clusters,
            batch_clusters: t.batch_clusters,
            layers: 2,
            hidden: 16,
            lr: t.lr,
            weight_decay: t.weight_decay,
            dropout: t.dropout,
            lambda: t.lambda,
            g_thres: None,
            augment: "concat".into(),
            gamma_off: false,
            stale_loss_off: false,
            augment_off: false,
            warm_start: None,
            epochs: 20,
            seed: t.seed,
            out: "out".into(),
            diagnose_every: None,
            checkpoint_every: None,
            val_frac: t.val_frac,
            params: None,
            history: None,
            grid_lambda: None,
            grid_batch_clusters: None,
            grid_augment: None,
            grid_components: None,
        }
    }
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl RunConfig {
    /// defaults < config file < explicit flags.
    pub fn from_args(args: &CommonArgs) -> Result<RunConfig> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config file {}", path.display()))?;
                serde_json::from_str::<RunConfig>(&text)
                    .with_context(|| format!("parsing config file {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(p) = &args.edge_list {
            cfg.edge_list = Some(path_string(p));
        }
        if let Some(p) = &args.features {
            cfg.features = Some(path_string(p));
        }
        if let Some(p) = &args.labels {
            cfg.labels = Some(path_string(p));
        }
        if !args.synth_sbm.is_empty() {
            let mut params = cfg.synth_sbm.take().unwrap_or_default();
            for pair in &args.synth_sbm {
                params.apply_pair(pair)?;
            }
            cfg.synth_sbm = Some(params);
        }
        if args.add_self_loops {
            cfg.add_self_loops = true;
        }
        if let Some(v) = args.clusters {
            cfg.clusters = v;
        }
        if let Some(v) = args.batch_clusters {
            cfg.batch_clusters = v;
        }
        if let Some(v) = args.layers {
            cfg.layers = v;
        }
        if let Some(v) = args.hidden {
            cfg.hidden = v;
        }
        if let Some(v) = args.lr {
            cfg.lr = v;
        }
        if let Some(v) = args.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = args.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = args.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = args.g_thres {
            cfg.g_thres = Some(v);
        }
        if let Some(v) = &args.augment {
            cfg.augment = v.clone();
        }
        if args.gamma_off {
            cfg.gamma_off = true;
        }
        if args.stale_loss_off {
            cfg.stale_loss_off = true;
        }
        if args.augment_off {
            cfg.augment_off = true;
        }
        if let Some(p) = &args.warm_start {
            cfg.warm_start = Some(path_string(p));
        }
        if let Some(v) = args.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        if let Some(p) = &args.out {
            cfg.out = path_string(p);
        }
        if let Some(v) = args.diagnose_every {
            cfg.diagnose_every = Some(v);
        }
        if let Some(v) = args.checkpoint_every {
            cfg.checkpoint_every = Some(v);
        }
        if let Some(v) = args.val_frac {
            cfg.val_frac = v;
        }
        if let Some(p) = &args.params {
            cfg.params = Some(path_string(p));
        }
        if let Some(p) = &args.history {
            cfg.history = Some(path_string(p));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let has_files =
            self.edge_list.is_some() || self.features.is_some() || self.labels.is_some();
        if has_files && self.synth_sbm.is_some() {
            bail!("give either dataset files or --synth-sbm, not both");
        }
        if has_files && (self.features.is_none() || self.labels.is_none() || self.edge_list.is_none())
        {
            bail!("file datasets need all of --edge-list, --features, --labels");
        }
        if !has_files && self.synth_sbm.is_none() {
            bail!("no dataset: give --edge-list/--features/--labels or --synth-sbm");
        }
        if self.clusters == 0 || self.batch_clusters == 0 {
            bail!("--clusters and --batch-clusters must be positive");
        }
        if self.batch_clusters > self.clusters {
            bail!(
                "--batch-clusters {} exceeds --clusters {}",
                self.batch_clusters,
                self.clusters
            );
        }
        if self.layers == 0 || self.hidden == 0 {
            bail!("--layers and --hidden must be positive");
        }
        if self.epochs == 0 {
            bail!("--epochs must be positive");
        }
        self.augment_mode()?;
        Ok(())
    }

    /// The model's staleness-channel mode after the --augment-off override.
    pub fn augment_mode(&self) -> Result<AugmentMode> {
        if self.augment_off {
            return Ok(AugmentMode::None);
        }
        self.augment
            .parse::<AugmentMode>()
            .map_err(|e| anyhow::anyhow!("--augment: {e}"))
    }

    /// The drift weight after the --stale-loss-off override.
    pub fn effective_lambda(&self) -> f64 {
        if self.stale_loss_off {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            lambda: self.lambda,
            num_clusters: self.clusters,
            batch_clusters: self.batch_clusters,
            g_thres: self.g_thres,
            seed: self.seed,
            stale_loss_enabled: !self.stale_loss_off,
            val_frac: self.val_frac,
        }
    }

    /// Echoes the effective config into the output directory.
    pub fn write_echo(&self, out_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        let path = out_dir.join("config.json");
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_args() -> CommonArgs {
        CommonArgs {
            synth_sbm: vec!["n=24".into(), "blocks=2".into()],
            ..Default::default()
        }
    }

    #[test]
    fn defaults_fill_and_flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(
            &file,
            r#"{"synth_sbm":{"n":80},"lr":0.01,"lambda":0.8,"epochs":7}"#,
        )
        .unwrap();
        let mut args = CommonArgs {
            config: Some(file),
            lr: Some(0.002),
            ..Default::default()
        };
        args.synth_sbm.clear();
        let cfg = RunConfig::from_args(&args).unwrap();
        assert_eq!(cfg.lr, 0.002, "flag beats file");
        assert_eq!(cfg.lambda, 0.8, "file beats default");
        assert_eq!(cfg.epochs, 7);
        assert_eq!(
            cfg.clusters,
            TrainConfig::default().num_clusters,
            "default survives"
        );
        assert_eq!(cfg.synth_sbm.as_ref().unwrap().n, Some(80));
    }

    #[test]
    fn synth_pairs_parse_and_reject_unknown_keys() {
        let cfg = RunConfig::from_args(&synth_args()).unwrap();
        let params = cfg.synth_sbm.unwrap();
        assert_eq!(params.n, Some(24));
        assert_eq!(params.blocks, Some(2));
        let sbm = params.resolve(5);
        assert_eq!(sbm.n, 24);
        assert_eq!(sbm.p_in, SbmConfig::default().p_in);

        let mut bad = synth_args();
        bad.synth_sbm.push("widgets=3".into());
        assert!(RunConfig::from_args(&bad).is_err());
        let mut not_kv = synth_args();
        not_kv.synth_sbm.push("n".into());
        assert!(RunConfig::from_args(&not_kv).is_err());
    }

    #[test]
    fn validation_rejects_inconsistent_configs() {
        let no_data = CommonArgs::default();
        assert!(RunConfig::from_args(&no_data).is_err());

        let mut both = synth_args();
        both.edge_list = Some("e.tsv".into());
        both.features = Some("f.bin".into());
        both.labels = Some("l.txt".into());
        assert!(RunConfig::from_args(&both).is_err());

        let mut partial = CommonArgs::default();
        partial.edge_list = Some("e.tsv".into());
        assert!(RunConfig::from_args(&partial).is_err());

        let mut too_many = synth_args();
        too_many.batch_clusters = Some(9);
        too_many.clusters = Some(4);
        assert!(RunConfig::from_args(&too_many).is_err());

        let mut bad_aug = synth_args();
        bad_aug.augment = Some("triple".into());
        assert!(RunConfig::from_args(&bad_aug).is_err());
    }

    #[test]
    fn toggles_shape_the_effective_model_settings() {
        let mut args = synth_args();
        args.augment = Some("sum".into());
        args.augment_off = true;
        args.stale_loss_off = true;
        let cfg = RunConfig::from_args(&args).unwrap();
        assert_eq!(cfg.augment_mode().unwrap(), AugmentMode::None);
        assert_eq!(cfg.effective_lambda(), 0.0);
        assert!(!cfg.train_config().stale_loss_enabled);
    }

    #[test]
    fn echo_round_trips_through_serde() {
        let cfg = RunConfig::from_args(&synth_args()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.write_echo(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}

//! Config-driven experiment stages, scale presets and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{calibrate_threshold, evaluate_attack, score_confidence_attack, score_loss_attack, write_scores_csv, AttackScore};
use crate::checkpoint::{parameter_checksum, save_backbone, save_enhanced, save_head, Checkpoint};
use crate::data::{
    load_dataset, make_split, reassign_mint_split, subsample, write_split_manifest, DatasetHandle, DatasetName, MintSplit, RecordSet,
    Split, SplitPlan,
};
use crate::error::{Error, Result};
use crate::eval::{audited_accuracy, write_results, Method, MetricRecord};
use crate::nets::{Backbone, BackboneSpec, EnhancedModel, MintHeadSpec, Setup};
use crate::seeds::{keyed, StageSeeds};
use crate::train::{carve_audited_validation, train_active, train_audited_only, train_passive_mint, TrainConfig, TrainState};

/// Environment variable naming the dataset cache root.
pub const DATA_ENV: &str = "AMINT_DATA_DIR";

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

fn default_half() -> f64 {
    0.5
}

fn default_tenth() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn entry_setup() -> Setup {
    Setup::Entry
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: DatasetName,
    /// Falls back to `$AMINT_DATA_DIR`, then `./data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Members kept after the split; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub externals: Option<usize>,
}

impl DatasetSection {
    pub fn resolved_root(&self) -> PathBuf {
        self.root.clone().or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("data"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_half")]
    pub member_fraction: f64,
    #[serde(default = "default_tenth")]
    pub mint_eval_fraction: f64,
    /// Share of members held out for early stopping of the audited task.
    #[serde(default = "default_tenth")]
    pub audited_val_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { member_fraction: 0.5, mint_eval_fraction: 0.1, audited_val_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Active,
    Passive,
    Mia,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Active => "active",
            Stage::Passive => "passive",
            Stage::Mia => "mia",
        }
    }
}

fn all_stages() -> Vec<Stage> {
    vec![Stage::Active, Stage::Passive, Stage::Mia]
}

/// Desk-sized MINT head: one 32-channel convolution per path.
pub fn desk_head() -> MintHeadSpec {
    MintHeadSpec { per_path_conv_channels: vec![32], dropout: 0.4, hidden_dim: 128 }
}

fn default_head() -> MintHeadSpec {
    desk_head()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    /// Tap setup of `train-active`.
    #[serde(default = "entry_setup")]
    pub setup: Setup,
    /// Tap setup the passive head reads.
    #[serde(default = "entry_setup")]
    pub passive_setup: Setup,
    /// Defaults to three blocks of (16, 32, 64) channels for the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneSpec>,
    #[serde(default = "default_head")]
    pub mint_head: MintHeadSpec,
    pub train: TrainConfig,
    /// Stages `reproduce` runs for this config.
    #[serde(default = "all_stages")]
    pub methods: Vec<Stage>,
    /// Audited-only checkpoint for `train-passive` and `run-mia`; defaults
    /// to `audited.ckpt` in the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audited_checkpoint: Option<PathBuf>,
    /// Train the audited-only model when its checkpoint is missing.
    #[serde(default = "default_true")]
    pub auto_train_audited: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Smoke,
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Scale::Smoke),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::config("scale", format!("unknown scale `{s}` (expected smoke or desk)"))),
        }
    }
}

impl Scale {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scale::Smoke => "smoke",
            Scale::Desk => "desk",
        }
    }

    pub fn datasets(&self) -> Vec<DatasetName> {
        match self {
            Scale::Smoke => vec![DatasetName::Mnist],
            Scale::Desk => vec![DatasetName::Mnist, DatasetName::Cifar10],
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        vec![0, 1, 2]
    }
}

impl ExperimentConfig {
    pub fn preset(scale: Scale, dataset: DatasetName, seed: u64) -> Self {
        let (n, epochs, patience) = match scale {
            Scale::Smoke => (1000, 3, 2),
            Scale::Desk => (10_000, 15, 4),
        };
        let mut train = TrainConfig::new(seed);
        train.max_epochs = epochs;
        train.early_stop_patience = patience;
        Self {
            seed,
            dataset: DatasetSection { name: dataset, root: None, members: Some(n), externals: Some(n) },
            split: SplitSection::default(),
            setup: Setup::Entry,
            passive_setup: Setup::Entry,
            backbone: None,
            mint_head: desk_head(),
            train,
            methods: all_stages(),
            audited_checkpoint: None,
            auto_train_audited: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let field =
                e.span().map(|s| text.get(s).unwrap_or("").trim().to_string()).filter(|s| !s.is_empty()).unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        self.backbone.clone().unwrap_or_else(|| BackboneSpec::desk(self.dataset.name.input_shape(), 10))
    }

    pub fn validate(&self) -> Result<()> {
        SplitPlan { seed: 0, member_fraction: self.split.member_fraction, mint_eval_fraction: self.split.mint_eval_fraction }.validate()?;
        if !(0.0..0.5).contains(&self.split.audited_val_fraction) {
            return Err(Error::config("split.audited_val_fraction", "must lie in [0, 0.5)"));
        }
        let spec = self.backbone_spec();
        spec.validate()?;
        if spec.input_shape != self.dataset.name.input_shape() {
            return Err(Error::config("backbone.input_shape", format!("does not match {} images", self.dataset.name)));
        }
        crate::nets::resolve_taps(&spec, self.setup)?;
        crate::nets::resolve_taps(&spec, self.passive_setup)?;
        self.mint_head.validate()?;
        self.train.validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods", "list at least one stage"));
        }
        for (name, n) in [("dataset.members", self.dataset.members), ("dataset.externals", self.dataset.externals)] {
            if n == Some(0) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

/// Data shared by every stage of one seeded run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub handle: DatasetHandle,
    pub split: Split,
    /// Members minus the audited validation records.
    pub d: RecordSet,
    pub val: RecordSet,
    pub e: RecordSet,
    pub seeds: StageSeeds,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let handle = load_dataset(cfg.dataset.name, &cfg.dataset.resolved_root())?;
    prepare_with(cfg, handle)
}

pub fn prepare_with(cfg: &ExperimentConfig, handle: DatasetHandle) -> Result<Prepared> {
    let seeds = StageSeeds::expand(cfg.seed);
    let plan =
        SplitPlan { seed: seeds.split, member_fraction: cfg.split.member_fraction, mint_eval_fraction: cfg.split.mint_eval_fraction };
    let mut split = make_split(&handle, &plan)?;
    let shrink = |set: &RecordSet, n: Option<usize>, salt: u64| -> Result<RecordSet> {
        match n {
            None => Ok(set.clone()),
            Some(n) => {
                let sub = subsample(set, n, keyed(seeds.split, salt), handle.num_classes)?;
                Ok(reassign_mint_split(&sub.records, cfg.split.mint_eval_fraction, keyed(seeds.split, salt + 1)))
            }
        }
    };
    split.members = shrink(&split.members, cfg.dataset.members, 0x10)?;
    split.externals = shrink(&split.externals, cfg.dataset.externals, 0x20)?;
    let (d, val) = carve_audited_validation(&split.members, cfg.split.audited_val_fraction, seeds.split)?;
    let e = split.externals.clone();
    Ok(Prepared { handle, split, d, val, e, seeds })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub stage: Stage,
    pub config: ExperimentConfig,
    pub seeds: StageSeeds,
    pub dataset_checksums: BTreeMap<String, String>,
    pub timings_secs: BTreeMap<String, f64>,
    pub parameter_checksums: BTreeMap<String, String>,
    pub finalized: bool,
}

impl RunManifest {
    fn write(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(out.join("manifest.json"), text)?;
        Ok(())
    }
}

fn write_state(out: &Path, prefix: &str, state: &TrainState) -> Result<()> {
    state.write_step_csv(&out.join(format!("{prefix}_steps.csv")))?;
    state.write_epoch_csv(&out.join(format!("{prefix}_epochs.csv")))
}

/// Timing helper writing into the manifest map.
struct Stopwatch<'a>(&'a mut BTreeMap<String, f64>);

impl Stopwatch<'_> {
    fn time<R>(&mut self, name: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let t = Instant::now();
        let r = f();
        self.0.insert(name.to_string(), t.elapsed().as_secs_f64());
        r.map_err(|e| match e {
            Error::TrainingAborted(msg) => Error::TrainingAborted(format!("stage `{name}`: {msg}")),
            other => other,
        })
    }
}

fn audited_checkpoint_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    cfg.audited_checkpoint.clone().unwrap_or_else(|| out.join("audited.ckpt"))
}

/// Loads the audited-only model, training and saving it when allowed.
fn obtain_audited(cfg: &ExperimentConfig, prep: &Prepared, out: &Path, manifest: &mut RunManifest) -> Result<Backbone<f32>> {
    let path = audited_checkpoint_path(cfg, out);
    if path.is_file() {
        let bb = Checkpoint::<f32>::read(&path)?.into_backbone()?;
        if bb.spec != cfg.backbone_spec() {
            return Err(Error::Checkpoint(format!("{} was trained with a different backbone spec", path.display())));
        }
        return Ok(bb);
    }
    if !cfg.auto_train_audited {
        return Err(Error::Checkpoint(format!("audited checkpoint {} not found and auto_train_audited = false", path.display())));
    }
    let mut sw = Stopwatch(&mut manifest.timings_secs);
    let (bb, state) = sw.time("train_audited_only", || train_audited_only(cfg.backbone_spec(), &prep.d, &prep.val, &cfg.train_config()))?;
    write_state(out, "audited", &state)?;
    save_backbone(&bb, &path)?;
    Ok(bb)
}

/// Runs one stage end to end and writes its artifacts under `out`.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    run_stage_with(stage, cfg, &prep, out)
}

pub fn run_stage_with(stage: Stage, cfg: &ExperimentConfig, prep: &Prepared, out: &Path) -> Result<Vec<MetricRecord>> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let mut manifest = RunManifest {
        toolkit_version: TOOLKIT_VERSION.to_string(),
        stage,
        config: cfg.clone(),
        seeds: prep.seeds,
        dataset_checksums: prep.handle.checksums.clone(),
        timings_secs: BTreeMap::new(),
        parameter_checksums: BTreeMap::new(),
        finalized: false,
    };
    manifest.write(out)?;
    write_split_manifest(&out.join("split.csv"), &prep.split)?;
    let dataset = cfg.dataset.name.as_str().to_string();
    let test = &prep.split.test;

    let records = match stage {
        Stage::Active => {
            let model = EnhancedModel::<f32>::new(cfg.backbone_spec(), cfg.setup, cfg.mint_head.clone(), prep.seeds.init)?;
            let mut sw = Stopwatch(&mut manifest.timings_secs);
            let (model, state) = sw.time("train_active", || train_active(model, &prep.d, &prep.e, &prep.val, &cfg.train_config()))?;
            write_state(out, "active", &state)?;
            save_enhanced(&model, &out.join("enhanced.ckpt"))?;
            let (mint_acc, audited_acc) = sw.time("evaluate", || {
                Ok((crate::train::active_mint_eval_accuracy(&model, &prep.d, &prep.e)?, audited_accuracy(&model.backbone, test)?))
            })?;
            manifest.parameter_checksums.insert("enhanced".into(), parameter_checksum(&model.params()));
            vec![MetricRecord { method: Method::Active, setup: Some(cfg.setup), dataset, seed: cfg.seed, mint_acc, audited_acc }]
        }
        Stage::Passive => {
            let bb = obtain_audited(cfg, prep, out, &mut manifest)?;
            let before = parameter_checksum(&bb.params());
            let taps = crate::nets::resolve_taps(&bb.spec, cfg.passive_setup)?;
            let mut sw = Stopwatch(&mut manifest.timings_secs);
            let (head, state) = sw.time("train_passive_mint", || {
                train_passive_mint(&bb, &taps, &prep.d, &prep.e, cfg.mint_head.clone(), &cfg.train_config())
            })?;
            write_state(out, "passive", &state)?;
            save_head(&head, &taps, &out.join("mint_head.ckpt"))?;
            let after = parameter_checksum(&bb.params());
            if before != after {
                return Err(Error::Invariant("frozen audited model changed during the passive stage".into()));
            }
            let (mint_acc, audited_acc) = sw.time("evaluate", || {
                let (m, x) = (prep.d.with_split(MintSplit::Eval), prep.e.with_split(MintSplit::Eval));
                Ok((crate::eval::head_mint_accuracy(&bb, &head, &taps, &m, &x)?, audited_accuracy(&bb, test)?))
            })?;
            manifest.parameter_checksums.insert("audited".into(), after);
            manifest.parameter_checksums.insert("mint_head".into(), parameter_checksum(&head.params()));
            vec![MetricRecord { method: Method::Passive, setup: Some(cfg.passive_setup), dataset, seed: cfg.seed, mint_acc, audited_acc }]
        }
        Stage::Mia => {
            let bb = obtain_audited(cfg, prep, out, &mut manifest)?;
            let mut sw = Stopwatch(&mut manifest.timings_secs);
            let records = sw.time("attacks", || {
                let audited_acc = audited_accuracy(&bb, test)?;
                let (dc, ec) = (prep.d.with_split(MintSplit::Fit), prep.e.with_split(MintSplit::Fit));
                let (dv, ev) = (prep.d.with_split(MintSplit::Eval), prep.e.with_split(MintSplit::Eval));
                let mut recs = Vec::new();
                type Scorer = fn(&Backbone<f32>, &RecordSet, &RecordSet) -> Result<Vec<AttackScore>>;
                let attacks: [(Method, &str, Scorer); 2] =
                    [(Method::MiaLoss, "mia_loss", score_loss_attack), (Method::MiaConf, "mia_conf", score_confidence_attack)];
                for (method, name, score) in attacks {
                    let calib = score(&bb, &dc, &ec)?;
                    let eval = score(&bb, &dv, &ev)?;
                    let calib_ids: std::collections::HashSet<usize> = calib.iter().map(|s| s.sample_id).collect();
                    if eval.iter().any(|s| calib_ids.contains(&s.sample_id)) {
                        return Err(Error::Invariant("calibration and evaluation records overlap".into()));
                    }
                    let rule = calibrate_threshold(&calib)?;
                    let mint_acc = evaluate_attack(&rule, &eval)?;
                    write_scores_csv(&out.join(format!("{name}_calibration_scores.csv")), &calib)?;
                    write_scores_csv(&out.join(format!("{name}_eval_scores.csv")), &eval)?;
                    fs::write(out.join(format!("{name}_rule.json")), serde_json::to_string_pretty(&rule).expect("rule serializes"))?;
                    recs.push(MetricRecord { method, setup: None, dataset: dataset.clone(), seed: cfg.seed, mint_acc, audited_acc });
                }
                Ok(recs)
            })?;
            manifest.parameter_checksums.insert("audited".into(), parameter_checksum(&bb.params()));
            records
        }
    };
    write_results(&out.join("results.csv"), &records)?;
    manifest.finalized = true;
    manifest.write(out)?;
    Ok(records)
}

/// One stage of a reproduction run.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub stage: Stage,
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

/// Units that must run in order (the attack stage reuses the passive
/// stage's audited checkpoint).
pub type Chain = Vec<Unit>;

/// Every unit of a reproduction at `scale`, grouped into dependency chains.
/// Run seeds are `base_seed`, `base_seed + 1` and `base_seed + 2`.
pub fn reproduce_plan(scale: Scale, out: &Path, base_seed: u64, data_root: Option<&Path>) -> Vec<Chain> {
    let mut chains = Vec::new();
    for ds in scale.datasets() {
        for s in scale.seeds() {
            let seed = base_seed + s;
            let mut cfg = ExperimentConfig::preset(scale, ds, seed);
            cfg.dataset.root = data_root.map(Path::to_path_buf);
            let run_dir = out.join(ds.as_str()).join(format!("seed-{seed}"));
            let passive_dir = run_dir.join("passive");
            let audited = passive_dir.join("audited.ckpt");
            chains.push(vec![
                Unit { stage: Stage::Passive, config: cfg.clone(), out: passive_dir },
                Unit {
                    stage: Stage::Mia,
                    config: ExperimentConfig { audited_checkpoint: Some(audited), auto_train_audited: false, ..cfg.clone() },
                    out: run_dir.join("mia"),
                },
            ]);
            for setup in Setup::ALL {
                chains.push(vec![Unit {
                    stage: Stage::Active,
                    config: ExperimentConfig { setup, ..cfg.clone() },
                    out: run_dir.join(format!("active-{}", setup.name())),
                }]);
            }
        }
    }
    chains
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for scale in [Scale::Smoke, Scale::Desk] {
            for ds in scale.datasets() {
                let cfg = ExperimentConfig::preset(scale, ds, 3);
                cfg.validate().unwrap();
                let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
                assert_eq!(again, cfg);
            }
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::preset(Scale::Smoke, DatasetName::Mnist, 0).to_toml();
        text.push_str("\nlearning_rat = 0.1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn odd_batch_size_names_the_field() {
        let mut cfg = ExperimentConfig::preset(Scale::Smoke, DatasetName::Mnist, 0);
        cfg.train.batch_size = 33;
        let err = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
    }

    #[test]
    fn plan_covers_every_stage_and_setup() {
        let chains = reproduce_plan(Scale::Desk, Path::new("/tmp/x"), 0, None);
        let units: Vec<&Unit> = chains.iter().flatten().collect();
        assert_eq!(units.len(), 2 * 3 * 5);
        assert!(units.iter().all(|u| u.out.starts_with("/tmp/x")));
    }
}

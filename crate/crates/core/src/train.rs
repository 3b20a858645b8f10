//! Training loops: joint active training, audited-only training and the
//! passive post-hoc head.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::parameter_checksum;
use crate::data::{compose_batches, subsample, MintSplit, MixedBatch, RecordSet};
use crate::error::{Error, Result};
use crate::eval::{accuracy_on, head_mint_accuracy, mint_accuracy};
use crate::layers::{Grads, Mode, Param};
use crate::nets::{Backbone, BackboneSpec, EnhancedModel, MintHead, MintHeadSpec, ParamGroup, TapConfig};
use crate::objective::{
    binary_cross_entropy, combine, softmax_cross_entropy, update_normalizer, LossNormalizer, LossWeights, MultiTaskLossOutput,
};
use crate::optim::{Adam, OptimizerKind};
use crate::seeds::{keyed, StageSeeds};
use crate::tensor::Maps;

fn default_momentum() -> f64 {
    0.99
}

fn default_monitor() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    /// Master seed of the run; set by the caller, never read from config.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub normalizer_momentum: f64,
    /// Per-role cap on FIT records used to report `mint_fit_acc` each epoch.
    #[serde(default = "default_monitor")]
    pub monitor_samples: usize,
    /// Control run: permute membership labels within every batch.
    #[serde(default)]
    pub shuffle_membership_labels: bool,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 20,
            early_stop_patience: 4,
            batch_size: 64,
            seed,
            weights: LossWeights::default(),
            optimizer: OptimizerKind::default(),
            normalizer_momentum: default_momentum(),
            monitor_samples: default_monitor(),
            shuffle_membership_labels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::config("train.learning_rate", "must lie in (0, 1]"));
        }
        if self.max_epochs > 0 && self.early_stop_patience >= self.max_epochs {
            return Err(Error::config("train.early_stop_patience", "must be smaller than max_epochs"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config("batch_size", format!("must be a positive even number, got {}", self.batch_size)));
        }
        if !(self.normalizer_momentum > 0.0 && self.normalizer_momentum < 1.0) {
            return Err(Error::config("train.normalizer_momentum", "must lie in (0, 1)"));
        }
        let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::config("train.optimizer", "Adam needs betas in [0, 1) and a positive epsilon"));
        }
        self.weights.validate()
    }
}

/// Mean loss terms and accuracies for one epoch. Accuracies a loop does not
/// track are `NaN`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mint_fit_acc: f64,
    pub mint_eval_acc: f64,
    pub audited_val_acc: f64,
    pub audited_raw: f64,
    pub mint_raw: f64,
    pub total: f64,
    pub criterion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: MultiTaskLossOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Epoch whose parameters were returned, if any epoch completed.
    pub best_epoch: Option<usize>,
    pub best_criterion: f64,
}

impl TrainState {
    fn new() -> Self {
        Self { epoch: 0, history: Vec::new(), steps: Vec::new(), best_epoch: None, best_criterion: f64::NEG_INFINITY }
    }

    /// Records an epoch; returns whether it is the new best.
    fn push(&mut self, rec: EpochRecord) -> bool {
        self.history.push(rec);
        self.epoch = self.history.len();
        if rec.criterion > self.best_criterion {
            self.best_criterion = rec.criterion;
            self.best_epoch = Some(rec.epoch);
            true
        } else {
            false
        }
    }

    fn patience_exhausted(&self, patience: usize) -> bool {
        match self.best_epoch {
            Some(b) => self.epoch - 1 - b >= patience,
            None => false,
        }
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|b| &self.history[b])
    }

    pub fn write_step_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,audited_raw,mint_raw,audited_normed,mint_normed,reg,total")?;
        for s in &self.steps {
            let l = s.loss;
            writeln!(
                f,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                s.step, l.audited_raw, l.mint_raw, l.audited_normed, l.mint_normed, l.reg, l.total
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,mint_fit_acc,mint_eval_acc,audited_val_acc,audited_raw,mint_raw,total,criterion")?;
        for r in &self.history {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9},{:.6}",
                r.epoch, r.mint_fit_acc, r.mint_eval_acc, r.audited_val_acc, r.audited_raw, r.mint_raw, r.total, r.criterion
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Splits the FIT members of `d` into a training part and an audited
/// validation part. Validation records leave every training path.
pub fn carve_audited_validation(d: &RecordSet, fraction: f64, seed: u64) -> Result<(RecordSet, RecordSet)> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(Error::config("split.audited_val_fraction", "must lie in [0, 0.5)"));
    }
    let fit = d.with_split(MintSplit::Fit);
    let n_val = (fraction * d.len() as f64).round() as usize;
    let n_val = n_val.min(fit.len());
    let val = subsample(&fit, n_val, keyed(seed, 0x7a1), 0)?.records;
    let val_ids: std::collections::HashSet<usize> = val.ids().into_iter().collect();
    let train = d.filter(|r| !val_ids.contains(&r.id));
    Ok((train, val))
}

/// Held-out monitors evaluated once per epoch.
struct Monitor {
    fit_members: RecordSet,
    fit_externals: RecordSet,
    eval_members: RecordSet,
    eval_externals: RecordSet,
    val: RecordSet,
}

impl Monitor {
    fn new(d: &RecordSet, e: &RecordSet, val: &RecordSet, cfg: &TrainConfig) -> Result<Self> {
        let cap = |set: RecordSet, salt: u64| -> Result<RecordSet> {
            let n = set.len().min(cfg.monitor_samples);
            Ok(subsample(&set, n, keyed(cfg.seed, salt), 0)?.records)
        };
        Ok(Self {
            fit_members: cap(d.with_split(MintSplit::Fit), 0xf1)?,
            fit_externals: cap(e.with_split(MintSplit::Fit), 0xf2)?,
            eval_members: d.with_split(MintSplit::Eval),
            eval_externals: e.with_split(MintSplit::Eval),
            val: val.clone(),
        })
    }

    fn mint(&self, bb: &Backbone<f32>, head: &MintHead<f32>, taps: &TapConfig) -> Result<(f64, f64)> {
        let acc = |m: &RecordSet, e: &RecordSet| {
            if m.is_empty() || e.is_empty() {
                Ok(f64::NAN)
            } else {
                head_mint_accuracy(bb, head, taps, m, e)
            }
        };
        Ok((acc(&self.fit_members, &self.fit_externals)?, acc(&self.eval_members, &self.eval_externals)?))
    }

    fn audited(&self, bb: &Backbone<f32>) -> Result<f64> {
        if self.val.is_empty() {
            return Ok(f64::NAN);
        }
        accuracy_on(bb, &self.val.pool, &self.val.ids())
    }
}

/// Mean of the finite values, `NaN` when none are.
fn finite_mean(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn criterion_value(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

fn add_l2(grads: &mut Grads<f32>, params: &[&Param<f32>], coeff: f64) {
    if coeff == 0.0 {
        return;
    }
    let c = coeff as f32;
    for (g, p) in grads.bufs.iter_mut().zip(params) {
        for (gi, &w) in g.iter_mut().zip(&p.value) {
            *gi += c * w;
        }
    }
}

fn check_finite(loss: &MultiTaskLossOutput, step: usize) -> Result<()> {
    if loss.total.is_finite() {
        return Ok(());
    }
    Err(Error::TrainingAborted(format!(
        "non-finite total loss at step {step}: audited_raw={} mint_raw={} audited_normed={} mint_normed={} reg={} total={}",
        loss.audited_raw, loss.mint_raw, loss.audited_normed, loss.mint_normed, loss.reg, loss.total
    )))
}

/// Distributes the held-out members over the epoch's batches so each one
/// reaches the audited loss once per epoch.
fn audited_extras(d_eval: &RecordSet, batches: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    if batches == 0 {
        return Vec::new();
    }
    let mut ids = d_eval.records.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(keyed(seed, 0xe000 + epoch));
    ids.shuffle(&mut rng);
    let per = ids.len().div_ceil(batches);
    (0..batches).map(|b| ids.iter().skip(b * per).take(per).map(|r| r.id).collect()).collect()
}

/// Joint training of the audited model and the MINT head.
///
/// `d` and `e` carry their FIT/EVAL flags; `val` is the audited validation
/// set carved out of `d` beforehand.
pub fn train_active(
    mut model: EnhancedModel<f32>,
    d: &RecordSet,
    e: &RecordSet,
    val: &RecordSet,
    cfg: &TrainConfig,
) -> Result<(EnhancedModel<f32>, TrainState)> {
    cfg.validate()?;
    model.backbone.check_taps(&model.taps)?;
    if !Arc::ptr_eq(&d.pool, &e.pool) {
        return Err(Error::Contract("members and externals must come from the same pool".into()));
    }
    let overlap = {
        let ids: std::collections::HashSet<usize> = d.ids().into_iter().collect();
        e.records.iter().any(|r| ids.contains(&r.id)) || val.records.iter().any(|r| ids.contains(&r.id))
    };
    if overlap {
        return Err(Error::Contract("member, external and validation sets must be disjoint".into()));
    }
    let seeds = StageSeeds::expand(cfg.seed);
    let monitor = Monitor::new(d, e, val, cfg)?;
    let d_eval = d.with_split(MintSplit::Eval);
    let mut adam = Adam::new(cfg.optimizer, cfg.learning_rate, &model.params());
    let all_slots: Vec<usize> = (0..model.params().len()).collect();
    let mut grads = model.zero_grads();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds.dropout);
    let mut label_rng = ChaCha8Rng::seed_from_u64(keyed(seeds.shuffle, 0x1abe1));
    let mut norm_a = LossNormalizer::new(cfg.normalizer_momentum);
    let mut norm_m = LossNormalizer::new(cfg.normalizer_momentum);
    let mut state = TrainState::new();
    let mut best = model.clone();
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let stream = compose_batches(d, e, cfg.batch_size, seeds.shuffle, epoch as u64)?;
        let extras = audited_extras(&d_eval, stream.num_batches(), seeds.shuffle, epoch as u64);
        let mut sums = [0.0f64; 3];
        let mut n_steps = 0usize;
        for (b, batch) in stream.enumerate() {
            let MixedBatch { member_images, member_class_labels, external_images, mut membership_labels, .. } = batch;
            if cfg.shuffle_membership_labels {
                membership_labels.shuffle(&mut label_rng);
            }
            let extra_ids = &extras[b];
            let mut labels: Vec<usize> = extra_ids.iter().map(|&i| d.pool.label(i)).collect();
            labels.extend(&member_class_labels);
            let head_imgs = Maps::concat(&member_images, &external_images)?;
            let images = if extra_ids.is_empty() { head_imgs } else { Maps::concat(&d.pool.to_maps(extra_ids), &head_imgs)? };
            let n_extra = extra_ids.len();
            let n_members = member_class_labels.len();
            let audited_range = 0..n_extra + n_members;
            let mint_range = n_extra..images.batch;

            let fwd = model.joint_forward(&images, audited_range, mint_range, Mode::Train, &mut dropout_rng)?;
            let logits = fwd.logits.as_ref().expect("audited samples present");
            let probs = fwd.probs.as_ref().expect("mint samples present");
            let (la, mut dlogits) = softmax_cross_entropy(logits, &labels)?;
            let (lm, mut dprobs) = binary_cross_entropy(probs, &membership_labels)?;
            norm_a = update_normalizer(norm_a, la as f64)?;
            norm_m = update_normalizer(norm_m, lm as f64)?;
            let params = model.params();
            let (loss, scales) = combine(la as f64, lm as f64, (&norm_a, &norm_m), &cfg.weights, &params);
            check_finite(&loss, step)?;

            let (sa, sm) = (scales.audited as f32, scales.mint as f32);
            dlogits.values.iter_mut().for_each(|g| *g *= sa);
            dprobs.iter_mut().for_each(|g| *g *= sm);
            grads.fill_zero();
            model.joint_backward(&fwd, Some(&dlogits), Some(&dprobs), &mut grads);
            add_l2(&mut grads, &params, scales.l2);
            drop(params);
            adam.step(&mut model.params_mut(), &grads, &all_slots);

            state.steps.push(StepRecord { step, loss });
            sums[0] += loss.audited_raw;
            sums[1] += loss.mint_raw;
            sums[2] += loss.total;
            n_steps += 1;
            step += 1;
        }
        let (mint_fit_acc, mint_eval_acc) = monitor.mint(&model.backbone, &model.head, &model.taps)?;
        let audited_val_acc = monitor.audited(&model.backbone)?;
        let denom = n_steps.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            mint_fit_acc,
            mint_eval_acc,
            audited_val_acc,
            audited_raw: sums[0] / denom,
            mint_raw: sums[1] / denom,
            total: sums[2] / denom,
            criterion: criterion_value(finite_mean(&[mint_eval_acc, audited_val_acc])),
        };
        log::info!(
            "active epoch {epoch}: mint fit {mint_fit_acc:.4} eval {mint_eval_acc:.4} audited val {audited_val_acc:.4} loss {:.4}",
            rec.total
        );
        if state.push(rec) {
            best = model.clone();
        }
        if state.patience_exhausted(cfg.early_stop_patience) {
            break;
        }
    }
    Ok((best, state))
}

/// Supervised training of the audited model alone on `d` (FIT and EVAL
/// members alike). Each step sees `batch_size / 2` members, matching the
/// member share of a mixed batch.
pub fn train_audited_only(spec: BackboneSpec, d: &RecordSet, val: &RecordSet, cfg: &TrainConfig) -> Result<(Backbone<f32>, TrainState)> {
    cfg.validate()?;
    let seeds = StageSeeds::expand(cfg.seed);
    let mut model = Backbone::<f32>::new(spec, seeds.init)?;
    let empty = d.filter(|_| false);
    let monitor = Monitor {
        fit_members: empty.clone(),
        fit_externals: empty.clone(),
        eval_members: empty.clone(),
        eval_externals: empty,
        val: val.clone(),
    };
    let mut adam = Adam::new(cfg.optimizer, cfg.learning_rate, &model.params());
    let slots: Vec<usize> = (0..model.num_slots()).collect();
    let mut grads = Grads::zeros_like(&model.params());
    let mut norm = LossNormalizer::new(cfg.normalizer_momentum);
    let no_mint = LossNormalizer { initialized: true, ..LossNormalizer::new(cfg.normalizer_momentum) };
    let weights = LossWeights { lambda2: 0.0, ..cfg.weights };
    let mut state = TrainState::new();
    let mut best = model.clone();
    let half = cfg.batch_size / 2;
    let mut step = 0usize;
    if d.is_empty() && cfg.max_epochs > 0 {
        return Err(Error::Contract("audited training needs at least one member".into()));
    }

    for epoch in 0..cfg.max_epochs {
        let mut order = d.records.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(keyed(seeds.shuffle, epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum_a, mut sum_t, mut n_steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(half) {
            let ids: Vec<usize> = chunk.iter().map(|r| r.id).collect();
            let labels: Vec<usize> = chunk.iter().map(|r| r.class_label).collect();
            let images = d.pool.to_maps(&ids);
            grads.fill_zero();
            let mut raw = 0.0f32;
            model.forward_backward(
                &images,
                |logits| {
                    let (l, mut g) = softmax_cross_entropy(logits, &labels)?;
                    raw = l;
                    norm = update_normalizer(norm, l as f64)?;
                    let s = (weights.lambda1 / norm.value()) as f32;
                    g.values.iter_mut().for_each(|v| *v *= s);
                    Ok(g)
                },
                &mut grads,
            )?;
            let params = model.params();
            let (loss, scales) = combine(raw as f64, 0.0, (&norm, &no_mint), &weights, &params);
            check_finite(&loss, step)?;
            add_l2(&mut grads, &params, scales.l2);
            drop(params);
            adam.step(&mut model.params_mut(), &grads, &slots);
            state.steps.push(StepRecord { step, loss });
            sum_a += loss.audited_raw;
            sum_t += loss.total;
            n_steps += 1;
            step += 1;
        }
        let audited_val_acc = monitor.audited(&model)?;
        let denom = n_steps.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            mint_fit_acc: f64::NAN,
            mint_eval_acc: f64::NAN,
            audited_val_acc,
            audited_raw: sum_a / denom,
            mint_raw: 0.0,
            total: sum_t / denom,
            criterion: criterion_value(audited_val_acc),
        };
        log::info!("audited epoch {epoch}: val {audited_val_acc:.4} loss {:.4}", rec.audited_raw);
        if state.push(rec) {
            best = model.clone();
        }
        if state.patience_exhausted(cfg.early_stop_patience) {
            break;
        }
    }
    Ok((best, state))
}

/// Post-hoc MINT head on activations of a frozen audited model. The head
/// is trained with plain binary cross-entropy (plus L2 on its own weights)
/// on FIT records and early-stopped on EVAL accuracy.
pub fn train_passive_mint(
    frozen: &Backbone<f32>,
    taps: &TapConfig,
    d: &RecordSet,
    e: &RecordSet,
    head_spec: MintHeadSpec,
    cfg: &TrainConfig,
) -> Result<(MintHead<f32>, TrainState)> {
    cfg.validate()?;
    frozen.check_taps(taps)?;
    let seeds = StageSeeds::expand(cfg.seed);
    let before = parameter_checksum(&frozen.params());
    let n_frozen = frozen.num_slots();
    let mut head = MintHead::<f32>::new(head_spec, frozen.aad_shapes(taps), n_frozen, seeds.init)?;
    let monitor = Monitor::new(d, e, &d.filter(|_| false), cfg)?;
    // One store over every slot so stray backbone gradients are detectable.
    let mut all_params = frozen.params();
    all_params.extend(head.params());
    let mut grads = Grads::zeros_like(&all_params);
    drop(all_params);
    let head_slots: Vec<usize> = head.slots().collect();
    let mut adam = Adam::new(cfg.optimizer, cfg.learning_rate, &head.params());
    let local_slots: Vec<usize> = (0..head_slots.len()).collect();
    let mut local = Grads::zeros_like(&head.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds.dropout);
    let mut label_rng = ChaCha8Rng::seed_from_u64(keyed(seeds.shuffle, 0x1abe1));
    let mut state = TrainState::new();
    let mut best = head.clone();
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let stream = compose_batches(d, e, cfg.batch_size, seeds.shuffle, epoch as u64)?;
        let (mut sum_m, mut sum_t, mut n_steps) = (0.0, 0.0, 0usize);
        for batch in stream {
            let mut labels = batch.membership_labels;
            if cfg.shuffle_membership_labels {
                labels.shuffle(&mut label_rng);
            }
            let images = Maps::concat(&batch.member_images, &batch.external_images)?;
            let aad = frozen.extract_aad(&images, taps)?;
            let trace = head.forward_traced(&aad, Mode::Train, &mut dropout_rng)?;
            let (lm, dprobs) = binary_cross_entropy(&trace.probs, &labels)?;
            grads.fill_zero();
            head.backward(&trace, &dprobs, &mut grads, false);
            if grads.squared_norm(0..n_frozen) != 0.0 {
                return Err(Error::Invariant("gradient reached a frozen audited-model parameter".into()));
            }
            let hp = head.params();
            let reg = cfg.weights.l2_coeff * crate::objective::l2_sum(&hp);
            let loss = MultiTaskLossOutput {
                total: lm as f64 + reg,
                audited_raw: 0.0,
                mint_raw: lm as f64,
                audited_normed: 0.0,
                mint_normed: lm as f64,
                reg,
            };
            check_finite(&loss, step)?;
            for (i, &s) in head_slots.iter().enumerate() {
                local.bufs[i].copy_from_slice(&grads.bufs[s]);
            }
            add_l2(&mut local, &hp, 2.0 * cfg.weights.l2_coeff);
            drop(hp);
            adam.step(&mut head.params_mut(), &local, &local_slots);
            state.steps.push(StepRecord { step, loss });
            sum_m += loss.mint_raw;
            sum_t += loss.total;
            n_steps += 1;
            step += 1;
        }
        let (mint_fit_acc, mint_eval_acc) = monitor.mint(frozen, &head, taps)?;
        let denom = n_steps.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            mint_fit_acc,
            mint_eval_acc,
            audited_val_acc: f64::NAN,
            audited_raw: 0.0,
            mint_raw: sum_m / denom,
            total: sum_t / denom,
            criterion: criterion_value(mint_eval_acc),
        };
        log::info!("passive epoch {epoch}: mint fit {mint_fit_acc:.4} eval {mint_eval_acc:.4} loss {:.4}", rec.mint_raw);
        if state.push(rec) {
            best = head.clone();
        }
        if state.patience_exhausted(cfg.early_stop_patience) {
            break;
        }
    }
    if parameter_checksum(&frozen.params()) != before {
        return Err(Error::Invariant("frozen audited model changed during passive training".into()));
    }
    Ok((best, state))
}

/// Squared gradient norm per parameter group under two isolated losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    /// Members-only audited loss.
    pub audited_loss: BTreeMap<ParamGroup, f64>,
    /// Externals-only MINT loss.
    pub external_mint_loss: BTreeMap<ParamGroup, f64>,
}

impl RoutingReport {
    /// Groups with a nonzero gradient under each loss.
    pub fn reached(&self) -> (Vec<ParamGroup>, Vec<ParamGroup>) {
        let nz = |m: &BTreeMap<ParamGroup, f64>| m.iter().filter(|(_, &v)| v != 0.0).map(|(&g, _)| g).collect();
        (nz(&self.audited_loss), nz(&self.external_mint_loss))
    }

    /// Externals never reach audited-only weights; class labels never reach the head.
    pub fn verify(&self) -> Result<()> {
        if self.external_mint_loss[&ParamGroup::AuditedOnly] != 0.0 {
            return Err(Error::Invariant("external samples produced gradient on audited-only parameters".into()));
        }
        if self.audited_loss[&ParamGroup::Mint] != 0.0 {
            return Err(Error::Invariant("audited loss produced gradient on MINT parameters".into()));
        }
        Ok(())
    }
}

pub fn gradient_routing_audit(model: &EnhancedModel<f32>, batch: &MixedBatch, seed: u64) -> Result<RoutingReport> {
    let part = model.partition_parameters();
    let norms = |g: &Grads<f32>| {
        BTreeMap::from([
            (ParamGroup::Shared, g.squared_norm(part.shared.iter().copied())),
            (ParamGroup::AuditedOnly, g.squared_norm(part.audited_only.iter().copied())),
            (ParamGroup::Mint, g.squared_norm(part.mint.iter().copied())),
        ])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let members = &batch.member_images;
    let fwd = model.joint_forward(members, 0..members.batch, 0..0, Mode::Train, &mut rng)?;
    let (_, dl) = softmax_cross_entropy(fwd.logits.as_ref().expect("audited samples"), &batch.member_class_labels)?;
    let mut g = model.zero_grads();
    model.joint_backward(&fwd, Some(&dl), None, &mut g);
    let audited_loss = norms(&g);

    let ext = &batch.external_images;
    let fwd = model.joint_forward(ext, 0..0, 0..ext.batch, Mode::Train, &mut rng)?;
    let zeros = vec![0u8; ext.batch];
    let (_, dp) = binary_cross_entropy(fwd.probs.as_ref().expect("mint samples"), &zeros)?;
    let mut g = model.zero_grads();
    model.joint_backward(&fwd, None, Some(&dp), &mut g);
    let external_mint_loss = norms(&g);

    Ok(RoutingReport { audited_loss, external_mint_loss })
}

/// Balanced MINT accuracy of `model` on the EVAL records of `d` and `e`.
pub fn active_mint_eval_accuracy(model: &EnhancedModel<f32>, d: &RecordSet, e: &RecordSet) -> Result<f64> {
    let (m, x) = (d.with_split(MintSplit::Eval), e.with_split(MintSplit::Eval));
    let (probs, labels) = crate::eval::membership_predictions(&model.backbone, &model.head, &model.taps, &m, &x)?;
    mint_accuracy(&probs, &labels)
}

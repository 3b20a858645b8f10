//! End-to-end training on synthetic data where the answer is known.

use std::sync::Arc;

use amint::data::{make_split, DatasetHandle, DatasetName, ImagePool, MintSplit, SplitPlan};
use amint::eval::head_mint_accuracy;
use amint::nets::{resolve_taps, BackboneSpec, ConvBlockSpec, EnhancedModel, InputShape, MintHeadSpec, Setup};
use amint::train::{carve_audited_validation, train_active, train_audited_only, train_passive_mint, TrainConfig};

fn spec() -> BackboneSpec {
    BackboneSpec {
        blocks: vec![ConvBlockSpec::new(2, 4), ConvBlockSpec::new(2, 4), ConvBlockSpec::new(2, 4)],
        num_classes: 10,
        input_shape: InputShape::new(12, 12, 1),
    }
}

fn head() -> MintHeadSpec {
    MintHeadSpec { per_path_conv_channels: vec![4], dropout: 0.2, hidden_dim: 8 }
}

/// Members are dark and externals bright, so membership is visible in the
/// very first activations.
fn marked_split(n: usize) -> amint::data::Split {
    let shape = InputShape::new(12, 12, 1);
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let blank = ImagePool::new(shape, vec![0; n * 144], labels.clone()).unwrap();
    let handle = DatasetHandle::from_pools(DatasetName::Mnist, 10, blank.clone(), blank);
    let split = make_split(&handle, &SplitPlan::new(8)).unwrap();
    let externals: std::collections::HashSet<usize> = split.externals.ids().into_iter().collect();
    let pixels: Vec<u8> = (0..n * 144)
        .map(|p| {
            let id = p / 144;
            let base = if externals.contains(&id) { 160 } else { 20 };
            (base + (p * 7 + id * 3) % 60) as u8
        })
        .collect();
    let pool = Arc::new(ImagePool::new(shape, pixels, labels).unwrap());
    let mut split = split;
    split.members.pool = Arc::clone(&pool);
    split.externals.pool = pool;
    split
}

fn cfg() -> TrainConfig {
    let mut c = TrainConfig::new(1);
    c.learning_rate = 5e-3;
    c.max_epochs = 4;
    c.early_stop_patience = 3;
    c.batch_size = 32;
    c
}

#[test]
fn active_head_detects_a_visible_membership_mark() {
    let split = marked_split(600);
    let (d, val) = carve_audited_validation(&split.members, 0.1, 2).unwrap();
    let model = EnhancedModel::<f32>::new(spec(), Setup::Entry, head(), 4).unwrap();
    let (model, state) = train_active(model, &d, &split.externals, &val, &cfg()).unwrap();
    let best = state.best().unwrap();
    assert!(best.mint_eval_acc > 0.9, "MINT eval accuracy {}", best.mint_eval_acc);
    let acc = amint::train::active_mint_eval_accuracy(&model, &d, &split.externals).unwrap();
    assert_eq!(acc, best.mint_eval_acc);
}

#[test]
fn passive_head_detects_a_visible_membership_mark_and_leaves_the_model_alone() {
    let split = marked_split(600);
    let (d, val) = carve_audited_validation(&split.members, 0.1, 2).unwrap();
    let (bb, _) = train_audited_only(spec(), &d, &val, &cfg()).unwrap();
    let before = amint::checkpoint::parameter_checksum(&bb.params());
    let taps = resolve_taps(&bb.spec, Setup::Entry).unwrap();
    let (h, _) = train_passive_mint(&bb, &taps, &d, &split.externals, head(), &cfg()).unwrap();
    assert_eq!(amint::checkpoint::parameter_checksum(&bb.params()), before);
    let acc = head_mint_accuracy(&bb, &h, &taps, &d.with_split(MintSplit::Eval), &split.externals.with_split(MintSplit::Eval)).unwrap();
    assert!(acc > 0.9, "passive MINT accuracy {acc}");
}

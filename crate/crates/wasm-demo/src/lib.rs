//! Browser bindings for three small MINT operations. Every function returns
//! a JSON string so the page needs no generated types.

use amint::baselines::{calibrate_threshold, AttackScore};
use amint::data::DatasetName;
use amint::nets::{resolve_taps, BackboneSpec, ConvBlockSpec, EnhancedModel, MintHeadSpec, Setup};
use amint::objective::{combine, update_normalizer, LossNormalizer, LossWeights};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, JsError> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| JsError::new(&format!("{what}: cannot parse `{s}`"))))
        .collect()
}

/// Tap points, AAD shapes and parameter counts for a backbone whose blocks
/// have the given channel widths (two layers each).
#[wasm_bindgen]
pub fn describe_setup(dataset: &str, setup: &str, channels: &str, head_channels: usize) -> Result<String, JsError> {
    let name: DatasetName = dataset.parse().map_err(js)?;
    let setup: Setup = setup.parse().map_err(js)?;
    let widths: Vec<usize> = parse_list(channels, "channels")?;
    let spec = BackboneSpec {
        blocks: widths.iter().map(|&c| ConvBlockSpec::new(2, c)).collect(),
        num_classes: 10,
        input_shape: name.input_shape(),
    };
    spec.validate().map_err(js)?;
    let taps = resolve_taps(&spec, setup).map_err(js)?;
    let head = MintHeadSpec { per_path_conv_channels: vec![head_channels], dropout: 0.4, hidden_dim: 128 };
    let model = EnhancedModel::<f32>::new(spec, setup, head, 0).map_err(js)?;
    let part = model.partition_parameters();
    let count = |slots: &[usize]| -> usize { slots.iter().map(|&s| model.params()[s].len()).sum() };
    let shapes = model.backbone.aad_shapes(&taps);
    Ok(json!({
        "taps": taps.taps.iter().map(|t| format!("block {} layer {}", t.block, t.layer)).collect::<Vec<_>>(),
        "aad_shapes": shapes.iter().map(|s| format!("{}x{}x{}", s.channels, s.height, s.width)).collect::<Vec<_>>(),
        "shared_params": count(&part.shared),
        "audited_only_params": count(&part.audited_only),
        "mint_params": count(&part.mint),
    })
    .to_string())
}

/// Runs the loss normalizers over paired sequences of raw losses and
/// returns the combined total at every step.
#[wasm_bindgen]
pub fn combine_losses(audited: &str, mint: &str, lambda1: f64, lambda2: f64, momentum: f64) -> Result<String, JsError> {
    let a: Vec<f64> = parse_list(audited, "audited losses")?;
    let m: Vec<f64> = parse_list(mint, "MINT losses")?;
    if a.len() != m.len() || a.is_empty() {
        return Err(JsError::new("need the same nonzero number of audited and MINT losses"));
    }
    let weights = LossWeights { lambda1, lambda2, l2_coeff: 0.0 };
    weights.validate().map_err(js)?;
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(JsError::new("momentum must lie in (0, 1)"));
    }
    let (mut na, mut nm) = (LossNormalizer::new(momentum), LossNormalizer::new(momentum));
    let mut steps = Vec::new();
    for (&la, &lm) in a.iter().zip(&m) {
        na = update_normalizer(na, la).map_err(js)?;
        nm = update_normalizer(nm, lm).map_err(js)?;
        let (out, scales) = combine::<f32>(la, lm, (&na, &nm), &weights, &[]);
        steps.push(json!({
            "audited_normed": out.audited_normed,
            "mint_normed": out.mint_normed,
            "total": out.total,
            "audited_scale": scales.audited,
            "mint_scale": scales.mint,
        }));
    }
    Ok(serde_json::Value::Array(steps).to_string())
}

/// Calibrates a threshold attack on member and external scores.
#[wasm_bindgen]
pub fn calibrate(members: &str, externals: &str) -> Result<String, JsError> {
    let m: Vec<f64> = parse_list(members, "member scores")?;
    let e: Vec<f64> = parse_list(externals, "external scores")?;
    let scores: Vec<AttackScore> = m
        .iter()
        .map(|&s| (s, 1))
        .chain(e.iter().map(|&s| (s, 0)))
        .enumerate()
        .map(|(i, (score, true_membership))| AttackScore { sample_id: i, score, true_membership })
        .collect();
    let rule = calibrate_threshold(&scores).map_err(js)?;
    Ok(json!({
        "threshold": rule.threshold,
        "balanced_accuracy": rule.calibration_accuracy,
        "degenerate": rule.degenerate,
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(s: Result<String, JsError>) -> serde_json::Value {
        serde_json::from_str(&s.ok().expect("call succeeds")).unwrap()
    }

    #[test]
    fn entry_taps_sit_in_the_first_block() {
        let v = value(describe_setup("mnist", "entry", "16,32,64", 32));
        assert_eq!(v["taps"][0], "block 0 layer 0");
        assert_eq!(v["aad_shapes"][1], "16x28x28");
    }

    #[test]
    fn constant_losses_normalize_to_one() {
        let v = value(combine_losses("2 2 2", "0.5 0.5 0.5", 1.0, 10.0, 0.9));
        assert!((v[2]["total"].as_f64().unwrap() - 11.0).abs() < 1e-12);
    }

    #[test]
    fn separable_scores_calibrate_perfectly() {
        let v = value(calibrate("0.9, 0.8", "0.1 0.2"));
        assert_eq!(v["balanced_accuracy"], 1.0);
    }
}

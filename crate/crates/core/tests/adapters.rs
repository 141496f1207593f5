mod common;

use common::*;
use rand::Rng;
use vqa_core::backbone::{BackboneSpec, Modality};
use vqa_core::scma::{closed_form_param_count, ScmaConfig, StructureVariant};
use vqa_core::model::{ModelConfig, QualityModel};
use vqa_core::prompt::PromptConfig;

fn max_diff(a: &vqa_core::tensor::Matrix, b: &[Vec<f64>]) -> f64 {
    a.data()
        .iter()
        .zip(b.concat())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn layer_adapter_matches_scalar_oracle() {
    for case in 0..100 {
        let (spec, _, store, state) = random_adapter_case(case);
        let mut r = rng(1000 + case);
        let layers = state.adapted_layers();
        let k = layers[r.random_range(0..layers.len())];
        for m in state.config().modalities() {
            let tokens = r.random_range(1..6);
            let x = random_rows(&mut r, tokens, width_of(&spec, m));
            let got = state.escma_delta(&store, &to_matrix(&x), k, m).unwrap();
            let want = adapter_delta_oracle(&store, state.layer_adapter(k, m).unwrap(), &x);
            assert!(max_diff(&got, &want) <= 1e-5, "case {case} layer {k} {m:?}");
        }
    }
}

#[test]
fn projection_adapter_matches_scalar_oracle() {
    for case in 0..100 {
        let (spec, _, store, state) = random_adapter_case(500 + case);
        let mut r = rng(2000 + case);
        for m in state.config().modalities() {
            let x = random_rows(&mut r, 1, width_of(&spec, m));
            let got = state.pscma_delta(&store, &to_matrix(&x), m).unwrap();
            let want = adapter_delta_oracle(&store, state.projection_adapter(m).unwrap(), &x);
            assert!(max_diff(&got, &want) <= 1e-5, "case {case} {m:?}");
        }
    }
}

#[test]
fn gated_residual_follows_the_gate() {
    for case in 0..20 {
        let (spec, _, mut store, state) = random_adapter_case(900 + case);
        let mut r = rng(case);
        let k = state.adapted_layers()[0];
        let m = state.config().modalities()[0];
        let w = width_of(&spec, m);
        let out = to_matrix(&random_rows(&mut r, 3, w));
        let x = to_matrix(&random_rows(&mut r, 3, w));
        let delta = state.escma_delta(&store, &x, k, m).unwrap();
        let gate = state.layer_adapter(k, m).unwrap().gate;
        let alpha = randn(&mut r);
        store.get_mut(gate).data_mut()[0] = alpha;
        let got = state.apply_escma(&store, &out, &delta, k, m).unwrap();
        for i in 0..out.len() {
            assert!((got.data()[i] - (out.data()[i] + alpha * delta.data()[i])).abs() < 1e-12);
        }
        store.get_mut(gate).data_mut()[0] = 0.0;
        assert_eq!(state.apply_escma(&store, &out, &delta, k, m).unwrap(), out);
    }
}

#[test]
fn shared_branches_reuse_one_bottleneck() {
    let mut seen = 0;
    for case in 0..40 {
        let (spec, cfg, _, state) = random_adapter_case(3000 + case);
        if !(cfg.adapt_visual && cfg.adapt_text && cfg.share_across_branches) {
            continue;
        }
        for k in state.adapted_layers() {
            let v = state.layer_adapter(k, Modality::Visual).unwrap();
            let t = state.layer_adapter(k, Modality::Textual).unwrap();
            assert_eq!(v.bottleneck, t.bottleneck);
            assert_eq!(v.down == t.down, spec.visual_width == spec.text_width);
        }
        seen += 1;
    }
    assert!(seen > 0);
}

#[test]
fn every_variant_matches_its_closed_form() {
    let spec = BackboneSpec::tiny();
    for v in StructureVariant::ALL {
        for pscma in [false, true] {
            let scma = ScmaConfig {
                enable_pscma: pscma,
                ..v.apply(&ScmaConfig::default())
            };
            let cfg = ModelConfig {
                scma: scma.clone(),
                ..Default::default()
            };
            let model = QualityModel::new(tiny_backbone(), cfg).unwrap();
            assert_eq!(
                model.trainable_param_count(),
                closed_form_param_count(&spec, &scma, &PromptConfig::default()),
                "{v:?} pscma={pscma}"
            );
        }
    }
}

use std::path::PathBuf;

use inrinv_core::encoder::{load_encoder, load_encoder_files, EncoderManifest, TensorContainer, FIXTURE_TOLERANCE};
use inrinv_core::imaging::load_png;
use inrinv_core::Error;

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny_vit")
}

#[test]
fn torch_reference_embedding_is_reproduced() {
    let h = load_encoder_files(data().join("encoder.manifest")).unwrap();
    assert_eq!(h.embed_dim(), 16);
    assert!(!h.has_text_tower());
    let m = EncoderManifest::load(data().join("encoder.manifest")).unwrap();
    let expected = m.fixture_embedding.unwrap();
    let e = h.embed_image(&load_png(data().join("fixture.png")).unwrap()).unwrap();
    let worst = e.values().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // the stored weights are f32; agreement is far tighter than the load tolerance
    assert!(worst < 1e-5, "max abs error {worst}");
    assert!(worst < FIXTURE_TOLERANCE);
}

#[test]
fn perturbed_reference_is_rejected() {
    let mut m = EncoderManifest::load(data().join("encoder.manifest")).unwrap();
    let c = TensorContainer::load(data().join("encoder.ntc")).unwrap();
    if let Some(e) = m.fixture_embedding.as_mut() {
        e[5] += 0.01;
    }
    match load_encoder(&c, &m) {
        Err(Error::FixtureMismatch { index, .. }) => assert_eq!(index, 5),
        other => panic!("expected a fixture mismatch, got {other:?}"),
    }
}

#[test]
fn missing_block_is_named() {
    let m = EncoderManifest::load(data().join("encoder.manifest")).unwrap();
    let c = TensorContainer::load(data().join("encoder.ntc")).unwrap();
    let mut pruned = TensorContainer::new();
    for t in c.tensors() {
        if t.name != "visual.transformer.resblocks.1.mlp.c_fc.bias" {
            pruned.insert(t.name.clone(), t.shape.clone(), t.data.clone()).unwrap();
        }
    }
    match load_encoder(&pruned, &m) {
        Err(Error::MissingTensor(name)) => assert!(name.contains("resblocks.1.mlp.c_fc.bias")),
        other => panic!("expected a missing tensor, got {other:?}"),
    }
}

#[test]
fn text_is_refused_without_a_text_tower() {
    let h = load_encoder_files(data().join("encoder.manifest")).unwrap();
    assert!(matches!(h.embed_text("a red disc"), Err(Error::NoTextTower)));
}

use super::*;
use crate::datapipe::Stage;
use image::RgbImage;
use rand::Rng;

fn random_input(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
    Tensor::from_vec(1, 3, side, side, (0..3 * side * side).map(|_| rng.random_range(-2.0..2.0)).collect())
}

fn is_head(name: &str) -> bool {
    name.starts_with("proj") || name.starts_with("conform")
}

#[test]
fn cnn27_maps_224_to_28() {
    let weights = build_backbone(&BackboneSpec::cnn27(), 7, &PretrainedSources::in_dir("/nonexistent")).unwrap();
    let model = Model::from_weights(&weights).unwrap();
    let frame = Frame::new("f", RgbImage::from_pixel(224, 224, image::Rgb([90, 120, 40])), Stage::Resized);
    let map = forward_map(&model, &frame).unwrap();
    assert_eq!((map.rows, map.cols), (28, 28));
    assert_eq!(map, forward_map(&model, &frame).unwrap());
    assert!(map.values.iter().all(|v| v.is_finite()));
}

#[test]
fn build_is_deterministic_per_seed() {
    let sources = PretrainedSources::in_dir("/nonexistent");
    let a = build_backbone(&BackboneSpec::cnn27(), 7, &sources).unwrap();
    let b = build_backbone(&BackboneSpec::cnn27(), 7, &sources).unwrap();
    let c = build_backbone(&BackboneSpec::cnn27(), 8, &sources).unwrap();
    assert_eq!(a.blob(), b.blob());
    assert_ne!(a.blob(), c.blob());
    let mask = a.trainable_mask();
    assert_eq!(mask.len(), a.tensors.len());
}

#[test]
fn weights_round_trip_exactly() {
    let (model, _) = Model::random(&BackboneSpec::cnn27().with_input_side(64), 5, &BackboneRegistry::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.weights");
    let w = model.to_weights();
    w.save(&path).unwrap();
    let back = ModelWeights::load(&path).unwrap();
    assert_eq!(back.blob(), w.blob());
    assert_eq!(back.digest(), w.digest());
    let reloaded = Model::from_weights(&back).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_input(&mut rng, 64);
    assert_eq!(model.forward(&x).unwrap().data, reloaded.forward(&x).unwrap().data);
}

#[test]
fn corrupted_weight_file_is_rejected() {
    let (model, _) = Model::random(&BackboneSpec::cnn27().with_input_side(32), 5, &BackboneRegistry::default()).unwrap();
    let mut bytes = model.to_weights().to_bytes().unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    assert!(ModelWeights::from_bytes(&bytes).is_err());
}

#[test]
fn geometry_examples() {
    let g = geometry_of(&BackboneSpec::cnn27()).unwrap();
    assert_eq!((g.total_stride, g.offset), (8, 4.0));
    assert!(g.fits(28, 28, 224, 224));
    assert!(g.field_extent > 8);

    let mut s = BackboneSpec::new(BackboneId::Vgg16);
    s.output_rows = 7;
    s.output_cols = 7;
    let g = geometry_of(&s).unwrap();
    assert_eq!((g.total_stride, g.offset), (32, 16.0));

    s.output_rows = 27;
    s.output_cols = 27;
    assert!(matches!(geometry_of(&s), Err(Error::Config(_))));
}

#[test]
fn cnn27_rejects_truncation_point() {
    let mut s = BackboneSpec::cnn27();
    s.truncation_point = Some("block3".into());
    assert!(s.validate().is_err());
}

#[test]
fn unknown_custom_backbone() {
    let spec = BackboneSpec::new("MyNet".parse().unwrap());
    let err = build_backbone(&spec, 1, &PretrainedSources::in_dir("/nonexistent")).unwrap_err();
    assert!(matches!(err, Error::UnknownBackbone(n) if n == "MyNet"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = BackboneSpec::new(BackboneId::InceptionV3).with_input_side(64);
    let err = build_backbone(&spec, 3, &PretrainedSources::in_dir(dir.path())).unwrap_err();
    assert!(matches!(err, Error::PretrainedUnavailable { .. }), "{err}");
}

#[test]
fn pretrained_trunk_is_copied_and_head_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let spec = BackboneSpec::new(BackboneId::InceptionV3);
    // A stand-in checkpoint with the torchvision names, drawn from an unrelated seed.
    let (donor, pretrained) = Model::random(&spec, 999, &BackboneRegistry::default()).unwrap();
    assert!(pretrained);
    let donor = donor.to_weights();
    let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = donor
        .tensors
        .iter()
        .filter(|t| !is_head(&t.name))
        .map(|t| (t.name.clone(), t.shape.clone(), t.data.clone()))
        .collect();
    pretrained::save_safetensors(&dir.path().join("InceptionV3.safetensors"), &tensors).unwrap();
    let source_checksum = donor.digest_where(|n| !is_head(n));

    let sources = PretrainedSources::in_dir(dir.path());
    let a = build_backbone(&spec, 3, &sources).unwrap();
    let b = build_backbone(&spec, 4, &sources).unwrap();
    assert_eq!(a.digest_where(|n| !is_head(n)), source_checksum);
    assert_eq!(b.digest_where(|n| !is_head(n)), source_checksum);
    assert_ne!(a.digest_where(is_head), b.digest_where(is_head));
    assert_eq!(a.backbone.truncation_point.as_deref(), Some("Conv2d_4a_3x3"));
    assert!(a.tensors.iter().any(|t| t.name.starts_with("conform")));

    let mut frozen_spec = spec.clone();
    frozen_spec.trunk_policy = TrunkPolicy::Freeze;
    let f = build_backbone(&frozen_spec, 3, &sources).unwrap();
    for (name, trainable) in f.trainable_mask() {
        let weight = f.tensors.iter().find(|t| t.name == name).unwrap().kind == crate::nn::ParamKind::Weight;
        assert_eq!(trainable, is_head(name) && weight, "{name}");
    }
}

#[test]
fn deep_backbones_emit_28_by_28_at_224() {
    let registry = BackboneRegistry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(&mut rng, 224);
    for id in [BackboneId::Vgg16, BackboneId::ResNet101, BackboneId::InceptionV3] {
        let (model, _) = Model::random(&BackboneSpec::new(id.clone()), 1, &registry).unwrap();
        let y = model.forward(&x).unwrap();
        assert_eq!((y.c, y.h, y.w), (1, 28, 28), "{id}");
        assert!(y.all_finite());
    }
}

#[test]
fn shape_contract_over_random_inputs() {
    let registry = BackboneRegistry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<Tensor> = (0..100).map(|_| random_input(&mut rng, 32)).collect();
    let batch = Tensor::stack(&inputs);
    for name in registry.names() {
        let id: BackboneId = name.parse().unwrap();
        let spec = BackboneSpec::new(id).with_input_side(32);
        let (model, _) = Model::random(&spec, 4, &registry).unwrap();
        let y = model.forward(&batch).unwrap();
        assert_eq!(y.shape(), [100, 1, spec.output_rows, spec.output_cols], "{name}");
        assert!(y.all_finite(), "{name}");
    }
}

#[test]
fn zero_input_through_zero_head_is_zero() {
    let (mut model, _) = Model::random(&BackboneSpec::cnn27().with_input_side(32), 1, &BackboneRegistry::default()).unwrap();
    for p in model.head_params_mut() {
        p.value.iter_mut().for_each(|v| *v = 0.0);
    }
    let y = model.forward(&Tensor::zeros(1, 3, 32, 32)).unwrap();
    assert!(y.data.iter().all(|&v| v == 0.0));
}

#[test]
fn one_pixel_perturbation_stays_finite() {
    let (model, _) = Model::random(&BackboneSpec::cnn27().with_input_side(64), 1, &BackboneRegistry::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let x = random_input(&mut rng, 64);
        let mut xp = x.clone();
        let i = rng.random_range(0..xp.data.len());
        xp.data[i] += 1e-3;
        let (a, b) = (model.forward(&x).unwrap(), model.forward(&xp).unwrap());
        let diff: f32 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff.is_finite() && diff < 1.0);
    }
}

#[test]
fn frame_shape_mismatch() {
    let (model, _) = Model::random(&BackboneSpec::cnn27(), 1, &BackboneRegistry::default()).unwrap();
    let frame = Frame::new("small", RgbImage::new(100, 100), Stage::Resized);
    assert!(matches!(forward_map(&model, &frame), Err(Error::Shape { .. })));
    let unresized = Frame::new("raw", RgbImage::new(224, 224), Stage::Raw);
    assert!(matches!(forward_map(&model, &unresized), Err(Error::Precondition(_))));
}

#[test]
fn backbone_ids_parse_loosely() {
    assert_eq!("resnet-101".parse::<BackboneId>().unwrap(), BackboneId::ResNet101);
    assert_eq!("Inception_V3".parse::<BackboneId>().unwrap(), BackboneId::InceptionV3);
    assert_eq!(BackboneId::Cnn27.to_string(), "CNN27");
    assert!("".parse::<BackboneId>().is_err());
}

//! Forward-pass contracts of the fusion model and the baselines.

use heritage_fusion::dataset::{Batch, Dims};
use heritage_fusion::gradcheck;
use heritage_fusion::model::baselines::BaselineNet;
use heritage_fusion::model::layers::MultiHeadAttention;
use heritage_fusion::model::{BaselineKind, Dropout, FusionConfig, FusionModel, Model, ModelSpec, Module};
use heritage_fusion::rng::{stream, Stream};
use heritage_fusion::tape::softmax_rows;
use heritage_fusion::{Tape, Tensor};
use rand::Rng;

const DIMS: Dims = Dims { sensor: 6, image: 10, classes: 5 };

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Synthetic);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn batch(n: usize, seed: u64) -> Batch {
    Batch {
        sensor: random(n, DIMS.sensor, seed),
        image: random(n, DIMS.image, seed + 1000),
        image_present: vec![true; n],
        labels: (0..n).map(|i| i % 5).collect(),
    }
}

fn fusion(seed: u64) -> FusionModel {
    FusionModel::new(FusionConfig { d_latent: 8, ..FusionConfig::default() }, &DIMS, seed).unwrap()
}

fn eval_logits(model: &Model, b: &Batch) -> Tensor {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, b, &mut Dropout::eval()).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn zero_sensor_input_encodes_to_zero() {
    let m = fusion(1);
    let mut b = batch(3, 1);
    b.sensor = Tensor::zeros(3, DIMS.sensor);
    let mut tape = Tape::new();
    let (zs, _) = m.encode(&mut tape, &b, &mut Dropout::eval()).unwrap();
    assert!(tape.value(zs).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_rows_have_unit_variance() {
    let m = FusionModel::new(FusionConfig::default(), &DIMS, 3).unwrap();
    let b = batch(5, 3);
    let mut tape = Tape::new();
    let (zs, zi) = m.encode(&mut tape, &b, &mut Dropout::eval()).unwrap();
    for z in [zs, zi] {
        let t = tape.value(z);
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9, "row {r}: mean {mean} var {var}");
        }
    }
}

#[test]
fn eval_forward_is_deterministic_and_dropout_is_seeded() {
    let model = Model::build(&ModelSpec::default(), DIMS, 4).unwrap();
    let b = batch(6, 4);
    assert_eq!(eval_logits(&model, &b), eval_logits(&model, &b));
    let train_logits = |seed| {
        let mut rng = stream(seed, Stream::Dropout);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &b, &mut Dropout::train(0.0, &mut rng)).unwrap();
        tape.value(out.logits).clone()
    };
    assert_eq!(train_logits(9), train_logits(9));
    assert_ne!(train_logits(9), eval_logits(&model, &b));
}

#[test]
fn zero_values_and_ffn_reduce_fusion_to_the_residual() {
    let mut m = fusion(5);
    m.params.fusion.attention.value.weight = Tensor::zeros(8, 8);
    m.params.fusion.ffn.expand.weight = Tensor::zeros(16, 8);
    m.params.fusion.ffn.contract.weight = Tensor::zeros(8, 16);
    let mut tape = Tape::new();
    let zs = tape.constant(random(4, 8, 5));
    let zi = tape.constant(random(4, 8, 6));
    let out = m.fuse(&mut tape, zs, zi).unwrap();
    assert_eq!(tape.value(out), tape.value(zs));
}

#[test]
fn single_key_attention_ignores_queries_and_keys() {
    let mut m = fusion(6);
    let run = |m: &FusionModel| {
        let mut tape = Tape::new();
        let zs = tape.constant(random(3, 8, 7));
        let zi = tape.constant(random(3, 8, 8));
        let out = m.fuse(&mut tape, zs, zi).unwrap();
        tape.value(out).clone()
    };
    let before = run(&m);
    m.params.fusion.attention.query.weight = random(8, 8, 70);
    m.params.fusion.attention.key.weight = random(8, 8, 71);
    assert_eq!(run(&m), before);

    let attn = &m.params.fusion.attention;
    let mut tape = Tape::new();
    let q = tape.constant(random(1, 8, 9));
    let kv = tape.constant(random(1, 8, 10));
    let w = attn.attention_weights(&mut tape, q, kv, 1, 1, 1).unwrap();
    assert!(w.data().iter().all(|&v| v == 1.0));
}

#[test]
fn fusion_is_permutation_equivariant() {
    let m = fusion(11);
    let (a, b) = (random(5, 8, 12), random(5, 8, 13));
    let perm = [3, 0, 4, 1, 2];
    let permute = |t: &Tensor| {
        let rows: Vec<&[f64]> = perm.iter().map(|&p| t.row_slice(p)).collect();
        Tensor::from_rows(&rows)
    };
    let fuse = |x: &Tensor, y: &Tensor| {
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let out = m.fuse(&mut tape, x, y).unwrap();
        tape.value(out).clone()
    };
    let direct = permute(&fuse(&a, &b));
    let permuted = fuse(&permute(&a), &permute(&b));
    assert!(direct.max_abs_diff(&permuted) < 1e-12);
}

#[test]
fn multi_key_attention_rows_are_distributions() {
    let mut rng = stream(14, Stream::Init);
    let attn = MultiHeadAttention::new(8, 2, true, true, &mut rng);
    let mut tape = Tape::new();
    let q = tape.constant(random(3 * 2, 8, 15));
    let kv = tape.constant(random(3 * 4, 8, 16));
    let w = attn.attention_weights(&mut tape, q, kv, 3, 2, 4).unwrap();
    assert_eq!(w.shape(), (2 * 3 * 2, 4));
    for r in 0..w.rows() {
        assert!((w.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(attn.forward(&mut tape, q, kv, 3, 2, 3).is_err());
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let mut m = fusion(17);
    m.params.head.out.weight = Tensor::zeros(5, 64);
    let model = Model { dims: DIMS, net: heritage_fusion::model::Net::Fusion(m) };
    let p = softmax_rows(&eval_logits(&model, &batch(4, 17)));
    assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn initialization_contract() {
    let a = Model::build(&ModelSpec::default(), DIMS, 21).unwrap();
    let b = Model::build(&ModelSpec::default(), DIMS, 21).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, Model::build(&ModelSpec::default(), DIMS, 22).unwrap());
    a.visit("", &mut |name, t, _| {
        if name.ends_with(".bias") || name == "missing_image" {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with(".gain") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
    });

    let big = Model::build(&ModelSpec::default(), Dims::default(), 23).unwrap();
    let heritage_fusion::model::Net::Fusion(f) = &big.net else { unreachable!() };
    for w in [&f.params.encoder.sensor_proj.weight, &f.params.encoder.image_proj.weight] {
        let fan_in = w.cols() as f64;
        let n = w.len() as f64;
        assert!(n >= 1000.0);
        let mean = w.sum() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 1.0 / fan_in.sqrt();
        assert!((std / target - 1.0).abs() < 0.2, "std {std} vs {target}");
    }
}

#[test]
fn missing_images_use_the_learned_token() {
    let mut model = Model::build(&ModelSpec::default(), DIMS, 24).unwrap();
    let mut b = batch(3, 24);
    b.image.row_slice_mut(1).fill(0.0);
    let zero_present = eval_logits(&model, &b);
    b.image_present[1] = false;
    assert_eq!(eval_logits(&model, &b), zero_present);
    model.visit_mut("", &mut |name, t, _| {
        if name == "missing_image" {
            t.data_mut().fill(0.5);
        }
    });
    let with_token = eval_logits(&model, &b);
    assert_ne!(with_token.row_slice(1), zero_present.row_slice(1));
    assert_eq!(with_token.row_slice(0), zero_present.row_slice(0));
}

#[test]
fn unimodal_baselines_ignore_the_other_modality() {
    for (kind, perturb_image) in [(BaselineKind::SensorOnly, true), (BaselineKind::ImageOnly, false)] {
        let model = Model::build(&ModelSpec::baseline(kind), DIMS, 25).unwrap();
        let b = batch(4, 25);
        let mut c = b.clone();
        if perturb_image {
            c.image = random(4, DIMS.image, 99);
            c.image_present[2] = false;
        } else {
            c.sensor = random(4, DIMS.sensor, 99);
        }
        assert_eq!(eval_logits(&model, &b), eval_logits(&model, &c), "{kind}");
    }
}

#[test]
fn concatenation_baseline_reads_both_modalities() {
    let model = Model::build(&ModelSpec::baseline(BaselineKind::TransformerConcat), Dims::default(), 26).unwrap();
    let heritage_fusion::model::Net::Baseline(b) = &model.net else { unreachable!() };
    let BaselineNet::TransformerConcat(t) = &b.net else { unreachable!() };
    assert_eq!(t.input_proj.weight.cols(), 28 + 512);
}

#[test]
fn every_architecture_produces_five_logits_and_checks_widths() {
    let mut specs = vec![ModelSpec::default()];
    specs.extend(BaselineKind::ALL.iter().map(|&k| ModelSpec::baseline(k)));
    for spec in specs {
        let model = Model::build(&spec, DIMS, 27).unwrap();
        let logits = eval_logits(&model, &batch(3, 27));
        assert_eq!(logits.shape(), (3, 5), "{spec}");
        let mut wrong = batch(3, 27);
        wrong.sensor = Tensor::zeros(3, DIMS.sensor + 1);
        assert!(model.forward(&mut Tape::new(), &wrong, &mut Dropout::eval()).is_err());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(FusionModel::new(FusionConfig { d_latent: 63, ..FusionConfig::default() }, &DIMS, 0).is_err());
    assert!(FusionModel::new(FusionConfig { dropout: 1.0, ..FusionConfig::default() }, &DIMS, 0).is_err());
    assert!("visualbert".parse::<BaselineKind>().is_err());
    let spec: ModelSpec = serde_json::from_str(r#"{"architecture":"baseline","kind":"perceiver","num_latents":2}"#).unwrap();
    assert_eq!(spec.name(), "perceiver");
    assert!(serde_json::from_str::<ModelSpec>(r#"{"architecture":"fusion","d_latnet":8}"#).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for report in gradcheck::run_suite(3).unwrap() {
        assert!(report.passed(), "{report:?}");
        assert!(report.n_params > 0);
    }
}

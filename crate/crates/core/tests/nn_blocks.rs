use evln::nn::{
    attend, attention_map, decode, encode, DenseLayer, DropoutLayer, DropoutMode,
    IncrementalModel, InitScheme, ModelConfig, SelfAttentionStage, StageVars, STAGES,
};
use evln::tensor::{Rng, Tape, Tensor};
use evln::Error;
use proptest::prelude::*;

mod common;
use common::brute_force_attention;

fn small_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        widths: [4, 6, 8],
        attention_reduction: 2,
        dropout: 0.1,
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn with_random_gammas(mut model: IncrementalModel, rng: &mut Rng) -> IncrementalModel {
    for st in &mut model.stages {
        st.gamma.data_mut()[0] = rng.uniform_range(-1.0, 1.0);
    }
    model
}

#[test]
fn step_one_model_has_empty_old_head() {
    let mut rng = Rng::new(1);
    let model = IncrementalModel::new(small_config(), 5, &mut rng).unwrap();
    let x = random(&mut rng, &[3, 1, 8, 8]);
    let out = model.infer(&x).unwrap();
    assert_eq!(out.logits_p.shape(), &[3, 0]);
    assert_eq!(out.var_p.shape(), &[3, 0]);
    assert_eq!(out.logits_c.shape(), &[3, 5]);
    assert_eq!(out.attn.len(), STAGES);
    assert_eq!(out.attn[0].shape(), &[3, 4, 8, 8]);
    assert_eq!(out.attn[1].shape(), &[3, 6, 4, 4]);
    assert_eq!(out.attn[2].shape(), &[3, 8, 2, 2]);
    assert!(out.var_c.data().iter().all(|&v| v > 0.0));
}

#[test]
fn forward_rejects_spatial_mismatch() {
    let mut rng = Rng::new(1);
    let model = IncrementalModel::new(small_config(), 2, &mut rng).unwrap();
    assert!(matches!(
        model.infer(&Tensor::zeros(&[1, 1, 4, 4])),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        model.infer(&Tensor::zeros(&[1, 3, 8, 8])),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn dropout_off_forward_is_deterministic() {
    let mut rng = Rng::new(2);
    let model = with_random_gammas(IncrementalModel::new(small_config(), 3, &mut rng).unwrap(), &mut rng);
    let x = random(&mut rng, &[2, 1, 8, 8]);
    let a = model.infer(&x).unwrap();
    let b = model.infer(&x).unwrap();
    assert_eq!(bits(&a.logits_c), bits(&b.logits_c));
    assert_eq!(bits(&a.var_c), bits(&b.var_c));
    for s in 0..STAGES {
        assert_eq!(bits(&a.attn[s]), bits(&b.attn[s]));
    }
}

#[test]
fn mc_dropout_passes_differ() {
    let mut cfg = small_config();
    cfg.dropout = 0.5;
    let mut rng = Rng::new(3);
    let model = IncrementalModel::new(cfg, 4, &mut rng).unwrap();
    let x = random(&mut rng, &[1, 1, 8, 8]);
    let mut mc = Rng::new(77);
    let run = |mc: &mut Rng| {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (out, _) = model.forward(&mut tape, xv, DropoutMode::McEval, mc).unwrap();
        tape.data(out.logits_c).to_vec()
    };
    let a = run(&mut mc);
    let b = run(&mut mc);
    assert_ne!(a, b);
}

#[test]
fn single_position_attention_is_value_projection() {
    let mut rng = Rng::new(4);
    let mut stage = SelfAttentionStage::zeros(4, 2);
    stage.reinit(InitScheme::UniformFanIn, &mut rng);
    let x = random(&mut rng, &[2, 4, 1, 1]);
    let o = attention_map(&stage, &x).unwrap();
    // o = W_out (W_value x)
    for n in 0..2 {
        for c in 0..4 {
            let mut expect = 0.0;
            for v in 0..2 {
                let mut val = 0.0;
                for i in 0..4 {
                    val += stage.value.at(&[v, i, 0, 0]) * x.at(&[n, i, 0, 0]);
                }
                expect += stage.output.at(&[c, v, 0, 0]) * val;
            }
            assert!((o.at(&[n, c, 0, 0]) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_weights_are_row_stochastic() {
    let mut rng = Rng::new(5);
    let mut stage = SelfAttentionStage::zeros(6, 2);
    stage.reinit(InitScheme::UniformFanIn, &mut rng);
    let mut tape = Tape::inference();
    let vars = StageVars::bind(&mut tape, &stage, false);
    let x = tape.constant(random(&mut rng, &[3, 6, 4, 5]));
    let att = attend(&mut tape, &vars, x).unwrap();
    assert_eq!(tape.shape(att.weights), &[3, 20, 20]);
    for row in tape.data(att.weights).chunks(20) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_brute_force() {
    let mut rng = Rng::new(6);
    for _ in 0..20 {
        let mut stage = SelfAttentionStage::zeros(4, 2);
        stage.reinit(InitScheme::UniformFanIn, &mut rng);
        let x = random(&mut rng, &[1, 4, 3, 3]);
        let o = attention_map(&stage, &x).unwrap();
        let oracle = brute_force_attention(&stage, &x);
        for (a, b) in o.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_gamma_reduces_to_plain_conv_stack() {
    let mut rng = Rng::new(7);
    let model = IncrementalModel::new(small_config(), 3, &mut rng).unwrap();
    let x = random(&mut rng, &[2, 1, 9, 8]);
    let out = model.infer(&x).unwrap();

    // The same network written out without attention stages.
    let mut tape = Tape::inference();
    let mut h = tape.constant(x);
    for b in &model.blocks {
        let w = tape.constant(b.weight.clone());
        let bias = tape.constant(b.bias.clone().reshape(&[b.out_channels(), 1, 1]).unwrap());
        h = tape.conv2d(h, w, 1, 1).unwrap();
        h = tape.add(h, bias).unwrap();
        h = tape.relu(h);
        h = tape.avg_pool2(h).unwrap();
    }
    let s = tape.shape(h).to_vec();
    let flat = tape.reshape(h, &[s[0], s[1], s[2] * s[3]]).unwrap();
    let summed = tape.sum_axis(flat, 2).unwrap();
    let feature = tape.scale(summed, 1.0 / (s[2] * s[3]) as f64);
    let w = tape.constant(model.head_c.weight.clone());
    let wt = tape.transpose(w).unwrap();
    let logits = tape.matmul(feature, wt).unwrap();
    let b = tape.constant(model.head_c.bias.clone());
    let logits = tape.add(logits, b).unwrap();
    assert_eq!(bits(&out.logits_c), bits(tape.value(logits)));
}

#[test]
fn init_contract() {
    let model = IncrementalModel::new(small_config(), 4, &mut Rng::new(9)).unwrap();
    for st in &model.stages {
        assert_eq!(st.gamma.data(), &[0.0]);
    }
    let again = IncrementalModel::new(small_config(), 4, &mut Rng::new(9)).unwrap();
    assert_eq!(model, again);
    let other = IncrementalModel::new(small_config(), 4, &mut Rng::new(10)).unwrap();
    assert_ne!(model, other);

    // fan_in = 100 -> |w| < 0.1
    let layer = DenseLayer::init(100, 50, InitScheme::UniformFanIn, &mut Rng::new(1));
    assert!(layer.weight.data().iter().all(|w| w.abs() < 0.1));
    for (name, t) in model.params() {
        assert!(t.data().iter().all(|v| v.is_finite()), "{name}");
    }
}

#[test]
fn expand_heads_sizes_and_carry_over() {
    let mut rng = Rng::new(11);
    let step1 = IncrementalModel::new(small_config(), 5, &mut rng).unwrap();
    let step2 = step1.expand_heads(5, &mut rng).unwrap();
    assert_eq!(step2.old_classes(), 5);
    assert_eq!(step2.new_classes(), 5);

    let base = IncrementalModel::zeros(small_config(), 10, 10).unwrap();
    let mut base = base;
    base.init_parameters(&mut rng, InitScheme::UniformFanIn);
    let grown = base.expand_heads(10, &mut rng).unwrap();
    assert_eq!(grown.old_classes(), 20);
    assert_eq!(grown.new_classes(), 10);
    assert_eq!(grown.var_p.outputs(), 20);
    assert_eq!(grown.var_c.outputs(), 10);
    assert_eq!(grown.blocks, base.blocks);
    assert_eq!(grown.stages, base.stages);
    assert!(base.expand_heads(0, &mut rng).is_err());
}

#[test]
fn snapshot_copy_isolation_and_idempotence() {
    let mut rng = Rng::new(12);
    let mut model = with_random_gammas(IncrementalModel::new(small_config(), 3, &mut rng).unwrap(), &mut rng);
    let x = random(&mut rng, &[2, 1, 8, 8]);
    let snap = model.snapshot();
    assert_eq!(snap.infer(&x).unwrap(), model.infer(&x).unwrap());
    assert_eq!(snap.snapshot(), snap);

    let before = snap.infer(&x).unwrap();
    // One plain gradient step on the live model.
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (out, vars) = model.forward(&mut tape, xv, DropoutMode::Train, &mut rng).unwrap();
    let loss = tape.sum(out.logits_c);
    tape.backward(loss).unwrap();
    for (p, v) in model.params_mut().into_iter().zip(vars.all()) {
        if let Some(g) = tape.grad(*v) {
            for (w, gi) in p.data_mut().iter_mut().zip(g) {
                *w -= 0.1 * gi;
            }
        }
    }
    assert_ne!(model.infer(&x).unwrap(), before);
    assert_eq!(snap.infer(&x).unwrap(), before);
}

#[test]
fn teacher_pass_carries_no_gradient() {
    let mut rng = Rng::new(13);
    let model = IncrementalModel::new(small_config(), 3, &mut rng).unwrap();
    let snap = model.snapshot();
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[1, 1, 8, 8]));
    let out = snap.forward(&mut tape, x).unwrap();
    assert!(!tape.requires_grad(out.logits_c));
    assert!(tape.is_recording());
}

#[test]
fn mc_dropout_mean_approaches_deterministic_output() {
    let mut rng = Rng::new(14);
    let layer = DenseLayer::init(16, 3, InitScheme::UniformFanIn, &mut rng);
    let x = Tensor::from_fn(&[1, 16], |_| rng.uniform_range(0.5, 1.5));
    let drop = DropoutLayer::new(0.1).unwrap();
    let run = |mode: DropoutMode, rng: &mut Rng| {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let d = drop.forward(&mut tape, xv, mode, rng).unwrap();
        let w = tape.constant(layer.weight.clone());
        let b = tape.constant(layer.bias.clone());
        let wt = tape.transpose(w).unwrap();
        let y = tape.matmul(d, wt).unwrap();
        let y = tape.add(y, b).unwrap();
        tape.data(y).to_vec()
    };
    let exact = run(DropoutMode::Off, &mut rng);
    let n = 10_000;
    let mut mean = [0.0; 3];
    let mut mc = Rng::new(15);
    for _ in 0..n {
        for (m, v) in mean.iter_mut().zip(run(DropoutMode::McEval, &mut mc)) {
            *m += v / n as f64;
        }
    }
    for (m, e) in mean.iter().zip(&exact) {
        assert!((m - e).abs() <= 0.02 * e.abs(), "{m} vs {e}");
    }
}

#[test]
fn container_round_trip_is_bit_exact() {
    let mut rng = Rng::new(16);
    let model = with_random_gammas(IncrementalModel::new(small_config(), 3, &mut rng).unwrap(), &mut rng);
    let model = model.expand_heads(2, &mut rng).unwrap();
    let bytes = model.to_bytes();
    assert_eq!(&bytes[..4], b"EVLN");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 29);
    let back = IncrementalModel::from_bytes(small_config(), &bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn container_errors() {
    let t = Tensor::zeros(&[2]);
    let mut bytes = encode(&[("a".to_string(), &t)]);
    assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    bytes[0] = b'X';
    assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    let model_bytes = encode(&[("a".to_string(), &t)]);
    assert!(IncrementalModel::from_bytes(small_config(), &model_bytes).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn expansion_preserves_old_logits(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let model = with_random_gammas(IncrementalModel::new(small_config(), 3, &mut rng).unwrap(), &mut rng);
        let model = model.expand_heads(2, &mut rng).unwrap();
        let grown = model.expand_heads(4, &mut rng).unwrap();
        let x = random(&mut rng, &[2, 1, 8, 8]);
        let before = model.infer(&x).unwrap();
        let after = grown.infer(&x).unwrap();
        let old = before.unified_logits().unwrap();
        for (a, b) in after.logits_p.data().iter().zip(old.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let old_var = before.unified_variance().unwrap();
        for (a, b) in after.var_p.data().iter().zip(old_var.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn variance_heads_stay_positive(seed in 0u64..10_000, scale in 0.1f64..1e4) {
        let mut rng = Rng::new(seed);
        let model = IncrementalModel::new(small_config(), 3, &mut rng).unwrap();
        let model = model.expand_heads(3, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |_| scale * rng.uniform_range(-1.0, 1.0));
        let out = model.infer(&x).unwrap();
        prop_assert!(out.var_p.data().iter().chain(out.var_c.data()).all(|&v| v > 0.0));
    }
}

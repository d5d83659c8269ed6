use ross_core::channel::{ChannelConfig, ChannelKind};
use ross_core::nnblocks::{Bindings, ParamStore};
use ross_core::selfcheck::perturbed;
use ross_core::{Tape, Tensor};
use ross_s2t::data::*;
use ross_s2t::pipeline::*;
use ross_s2t::txmodels::*;

fn tiny() -> (CorpusSpec, ModelConfig) {
    let spec = CorpusSpec { size: 24, max_len: 6, max_target_len: 8, ..CorpusSpec::default() };
    let model = ModelConfig {
        model_width: 16,
        heads: 2,
        ff_width: 16,
        converter_depth: 1,
        decoder_depth: 1,
        feature_width: 8,
        channel_hidden: 16,
        symbol_width: 4,
        intermediate_width: 8,
        disc_channels: 2,
        probe_hidden: 8,
        comp_channels: 4,
        comp_depth: 2,
        max_target_len: 8,
        probe_len: 8,
        ..ModelConfig::default()
    };
    (spec, model)
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 2, valid_size: 4, eval_every: 2, ..TrainConfig::default() }
}

#[test]
fn stage1_resume_is_bit_exact() {
    let (spec, model) = tiny();
    let nets = Networks::new(&model).unwrap();
    let corpus = generate_corpus(&spec).unwrap();
    let straight = train_stage1(&nets, &cfg(6), &corpus, None).unwrap();
    let half = train_stage1(&nets, &cfg(3), &corpus, None).unwrap();
    let resumed = train_stage1(&nets, &cfg(6), &corpus, Some(&half.checkpoint)).unwrap();
    assert!(resumed.checkpoint.bit_eq(&straight.checkpoint));
    let tail: Vec<_> = straight.losses.iter().filter(|r| r.step >= 3).cloned().collect();
    assert_eq!(resumed.losses, tail);
    let again = train_stage1(&nets, &cfg(6), &corpus, None).unwrap();
    assert_eq!(again.checkpoint.to_bytes(), straight.checkpoint.to_bytes());
}

#[test]
fn later_stages_leave_earlier_parameters_alone() {
    let (spec, model) = tiny();
    let nets = Networks::new(&model).unwrap();
    let corpus = generate_corpus(&spec).unwrap();
    let valid = generate_corpus(&spec.validation(4)).unwrap();
    let s1 = train_stage1(&nets, &cfg(2), &corpus, None).unwrap().checkpoint;
    let before = s1.to_bytes();
    let s2 = train_stage2(&nets, &cfg(3), &corpus, &s1, &valid, None).unwrap();
    assert_eq!(s1.to_bytes(), before);
    assert!(Net::Encoder.slice(&s2.checkpoint).is_empty());
    assert!(!Net::Generator.slice(&s2.checkpoint).is_empty());
    for k in ["baseline_mse", "valid_mse", "d_real", "d_fake"] {
        assert!(s2.metrics.contains_key(k), "{k}");
    }
    let s3 = train_stage3(&nets, &cfg(3), &corpus, &s1, &s2.checkpoint, None).unwrap();
    for n in [Net::Encoder, Net::Generator, Net::Decoder] {
        assert!(n.slice(&s3.checkpoint).is_empty(), "{n:?}");
    }
    assert!(!Net::Compensator.slice(&s3.checkpoint).is_empty());
    let bundle = Bundle::new(&nets, &[&s1, &s2.checkpoint, &s3.checkpoint]).unwrap();
    let u = &corpus.utterances[0];
    let ch = ChannelConfig::new(ChannelKind::Rayleigh, 6.0, 1);
    for route in [Route::DeepSc, Route::GeneratorOnly, Route::Full] {
        let a = infer(&bundle, &u.frames, &route, &ch, 3).unwrap();
        let b = infer(&bundle, &u.frames, &route, &ch, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= model.max_target_len);
    }
}

#[test]
fn compensator_with_empty_probe_is_pass_through() {
    let (_, model) = tiny();
    let nets = Networks::new(&model).unwrap();
    // nonzero weights everywhere, including the zero-initialised last layer
    let params = perturbed(&nets.decls(Net::Compensator), 9);
    let f = Tensor::from_fn(vec![8, model.feature_width], |k| (k as f64 * 0.37).sin());
    let mut tape = Tape::new();
    let b = Bindings::of(&mut tape, &params, false);
    let x = tape.constant(f.clone());
    let y = nets.compensator.forward(&mut tape, &b, x, &[false; 8]).unwrap();
    assert_eq!(tape.value(y).data(), f.data());
    let y = nets.compensator.forward(&mut tape, &b, x, &[true; 8]).unwrap();
    assert_ne!(tape.value(y).data(), f.data());
}

#[test]
fn missing_checkpoint_names_stage_and_file() {
    let (_, model) = tiny();
    let nets = Networks::new(&model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("stage1.ckpt");
    match Bundle::load(&nets, &[(1, &p)]) {
        Err(PipelineError::MissingCheckpoint { stage: 1, path }) => assert_eq!(path, p),
        other => panic!("{other:?}"),
    }
    let empty = ParamStore::new(0);
    assert!(Bundle::new(&nets, &[&empty]).is_err());
}

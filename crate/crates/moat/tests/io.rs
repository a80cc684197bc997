use moat::checkpoint::{self, decode, encode, load_into};
use moat::config::{emit_config, parse_config};
use moat::error::Error;
use moat_core::analysis::count_params;
use moat_core::nn::{Ctx, Mode, ParamStore};
use moat_core::rng::{stream, uniform_tensor, Stream};
use moat_core::zoo::{adapt_downstream, downstream_plan, family_config, micro_config, Model, FAMILY};
use moat_core::Tensor;

fn micro(seed: u64) -> Model<f32> {
    Model::new(&micro_config([16, 16, 32, 32, 64], 32, 3), seed).unwrap()
}

fn logits(m: &Model<f32>) -> Tensor<f32> {
    let x = uniform_tensor::<f32, _>(&mut stream(4, Stream::Data), &[2, 32, 32, 3], -1.0, 1.0);
    let mut cx = Ctx::new(&m.store, Mode::Eval, 0);
    let xv = cx.input(x);
    let y = m.forward(&mut cx, xv).unwrap();
    cx.value(y).clone()
}

fn snapshot<T: moat_core::Real>(s: &ParamStore<T>) -> Vec<Tensor<T>> {
    s.entries().iter().map(|e| (*e.value).clone()).collect()
}

// ---------------------------------------------------------------- checkpoints

#[test]
fn save_load_save_is_byte_identical_and_forward_is_bit_identical() {
    let src = micro(1);
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    checkpoint::save(&src.store, &p1).unwrap();
    let mut dst = micro(2);
    let report = checkpoint::load(&mut dst.store, &p1).unwrap();
    assert_eq!(report.loaded, src.store.len());
    assert!(report.dropped.is_empty());
    checkpoint::save(&dst.store, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(logits(&src), logits(&dst));
}

#[test]
fn double_precision_round_trip() {
    let src = micro(1).cast::<f64>();
    let bytes = encode(&src.store);
    let mut dst = micro(2).cast::<f64>();
    load_into(&mut dst.store, &bytes).unwrap();
    assert_eq!(encode(&dst.store), bytes);
    assert!(decode(&bytes).unwrap().iter().all(|r| r.dtype == moat_core::DType::F64));
}

#[test]
fn encoding_does_not_depend_on_declaration_order() {
    let m = micro(3);
    let mut all = named(&m);
    all.reverse();
    let reversed = ParamStore::from_tensors(all).unwrap();
    assert_eq!(encode(&reversed), encode(&m.store));
}

#[test]
fn corruption_is_detected_before_anything_changes() {
    let bytes = encode(&micro(1).store);
    let mut dst = micro(2);
    let before = snapshot(&dst.store);

    let truncated = &bytes[..bytes.len() - 100];
    assert!(matches!(load_into(&mut dst.store, truncated), Err(Error::Checksum { .. })));
    let mut flipped = bytes.clone();
    flipped[200] ^= 1;
    assert!(matches!(load_into(&mut dst.store, &flipped), Err(Error::Checksum { .. })));
    assert!(matches!(load_into(&mut dst.store, &bytes[..10]), Err(Error::Format(_))));
    assert_eq!(snapshot(&dst.store), before);
}

fn with_checksum(mut body: Vec<u8>) -> Vec<u8> {
    let c = checkpoint::checksum(&body);
    body.extend_from_slice(&c.to_le_bytes());
    body
}

fn single_tensor(name: &str, dtype: u8, shape: &[u64], data: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"MOAT");
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&1u64.to_le_bytes());
    b.extend_from_slice(&(name.len() as u32).to_le_bytes());
    b.extend_from_slice(name.as_bytes());
    b.push(dtype);
    b.push(shape.len() as u8);
    for d in shape {
        b.extend_from_slice(&d.to_le_bytes());
    }
    b.extend_from_slice(data);
    with_checksum(b)
}

#[test]
fn hand_written_image_decodes() {
    let bytes = single_tensor("w", 0, &[2], &[0, 0, 128, 63, 0, 0, 0, 64]);
    let recs = decode(&bytes).unwrap();
    assert_eq!(recs[0].name, "w");
    assert_eq!(recs[0].shape, [2]);
    assert_eq!(recs[0].data, [1.0, 2.0]);
}

#[test]
fn unknown_dtype_is_reported() {
    let bytes = single_tensor("w", 7, &[1], &[0; 4]);
    assert!(matches!(decode(&bytes), Err(Error::UnknownDtype(7))));
}

#[test]
fn shape_mismatch_names_the_parameter() {
    let src = Model::<f32>::new(&micro_config([16, 16, 32, 32, 64], 32, 5), 0).unwrap();
    let mut dst = micro(0);
    let before = snapshot(&dst.store);
    let err = load_into(&mut dst.store, &encode(&src.store)).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { ref name, .. } if name.starts_with("head.")), "{err}");
    assert_eq!(snapshot(&dst.store), before);
}

fn named(m: &Model<f32>) -> Vec<(String, Tensor<f32>)> {
    m.store.entries().iter().map(|e| (e.spec.name.clone(), (*e.value).clone())).collect()
}

#[test]
fn missing_and_unexpected_tensors() {
    let mut fewer = named(&micro(0));
    let removed = fewer.remove(3).0;
    let mut dst = micro(1);
    let err = load_into(&mut dst.store, &encode(&ParamStore::from_tensors(fewer).unwrap())).unwrap_err();
    assert!(matches!(err, Error::MissingTensor(ref n) if *n == removed), "{err}");

    let mut more = named(&micro(0));
    more.push(("extra.weight".into(), Tensor::zeros(&[1])));
    let err = load_into(&mut dst.store, &encode(&ParamStore::from_tensors(more).unwrap())).unwrap_err();
    assert!(matches!(err, Error::UnexpectedTensor(ref n) if n == "extra.weight"), "{err}");
}

#[test]
fn downstream_load_drops_exactly_the_bias_tables() {
    let cls = micro(5);
    let down = adapt_downstream(&cls, downstream_plan(1), 32).unwrap().model;
    let mut target = Model::<f32>::new(down.config(), 9).unwrap();
    let report = load_into(&mut target.store, &encode(&cls.store)).unwrap();
    let mut dropped = report.dropped.clone();
    let mut want = cls.arch.rel_bias_names();
    dropped.sort();
    want.sort();
    assert_eq!(dropped, want);
    assert_eq!(encode(&target.store), encode(&down.store));
}

#[test]
fn param_count_equals_trainable_checkpoint_scalars() {
    for name in ["tiny-moat-0", "tiny-moat-2"] {
        let m = Model::<f32>::new(&family_config(name).unwrap(), 0).unwrap();
        let recs = decode(&encode(&m.store)).unwrap();
        let trainable: usize = recs
            .iter()
            .filter(|r| !r.name.ends_with(".running_mean") && !r.name.ends_with(".running_var"))
            .map(|r| r.data.len())
            .sum();
        assert_eq!(trainable as u64, count_params(&m.arch), "{name}");
    }
}

// ---------------------------------------------------------------- configs

#[test]
fn every_family_config_round_trips() {
    for name in FAMILY {
        let cfg = family_config(name).unwrap();
        let text = emit_config(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(emit_config(&back), text);
    }
}

#[test]
fn downstream_and_training_sections_round_trip() {
    let m = micro(0);
    let mut cfg = adapt_downstream(&m, downstream_plan(1), 64).unwrap().model.config().clone();
    cfg.train = Some(moat_core::train::TrainConfig { peak_lr: 1e-3, total_steps: 7, warmup_steps: 2, ..Default::default() });
    let text = emit_config(&cfg);
    assert!(text.contains("\"window-1\""));
    let back = parse_config(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(emit_config(&back), text);
}

fn base_text() -> String {
    emit_config(&micro_config([16, 16, 32, 32, 64], 32, 3))
}

#[test]
fn missing_stage_key_names_the_stage() {
    let text = base_text();
    let idx = text.match_indices("channels = 32").nth(1).unwrap().0;
    let broken = format!("{}{}", &text[..idx], &text[idx + "channels = 32".len()..]);
    let err = parse_config(&broken).unwrap_err();
    assert!(matches!(err, Error::MissingKey(ref k) if k == "stages[3].channels"), "{err}");
}

#[test]
fn attention_width_rule_is_cited() {
    let text = base_text().replacen("channels = 64", "channels = 100", 1);
    let err = parse_config(&text).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Invalid(_)));
    assert!(msg.contains("stage 5") && msg.contains("32"), "{msg}");
}

#[test]
fn unknown_keys_and_bad_values() {
    let err = parse_config(&format!("colour = \"red\"\n{}", base_text())).unwrap_err();
    assert!(matches!(err, Error::UnknownKey(ref k) if k == "colour"), "{err}");
    let err = parse_config(&base_text().replacen("blocks = 1", "blocks = 1\ndepth = 2", 1)).unwrap_err();
    assert!(matches!(err, Error::UnknownKey(ref k) if k.ends_with(".depth")), "{err}");
    let err = parse_config(&base_text().replace("num_classes = 3", "num_classes = \"three\"")).unwrap_err();
    assert!(matches!(err, Error::BadValue { ref key, .. } if key == "num_classes"), "{err}");
    let err = parse_config(&base_text().replace("num_classes = 3\n", "")).unwrap_err();
    assert!(matches!(err, Error::MissingKey(ref k) if k == "num_classes"), "{err}");
}

#[test]
fn syntax_errors_carry_a_position() {
    let err = parse_config("name = \"x\"\nnum_classes = = 3\n").unwrap_err();
    assert!(matches!(err, Error::Syntax { line: 2, .. }), "{err}");
}

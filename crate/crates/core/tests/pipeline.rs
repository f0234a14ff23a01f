use diffmark::autodiff::Rng;
use diffmark::codec::WatermarkBits;
use diffmark::config::RunConfig;
use diffmark::io::{load_model_file, save_model, synth_dataset};
use diffmark::model::Model;
use diffmark::train::{finetune, pretrain};
use diffmark::vocoder::DenoiserConfig;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.audio.clip_seconds = 0.128;
    cfg.audio.window_len = 64;
    cfg.audio.hop = 16;
    cfg.audio.n_mels = 8;
    cfg.schedule.steps = 3;
    cfg.vocoder = DenoiserConfig {
        channels: 4,
        blocks: 2,
        dilation_cycle: 2,
        step_embed_dim: 4,
        step_hidden: 8,
    };
    cfg.codec.payload_bits = 6;
    cfg.codec.decoder_channels = vec![4, 8];
    cfg.codec.decoder_hidden = 8;
    cfg.pretrain.steps = 5;
    cfg.pretrain.segment = 256;
    cfg.sdft.steps = 6;
    cfg.sdft.batch = 2;
    cfg
}

#[test]
fn finetuning_leaves_the_base_untouched() {
    let cfg = tiny();
    let mut rng = Rng::new(1);
    let data = synth_dataset(4, &cfg.audio, &mut rng).unwrap();
    let mut model = Model::new(&cfg, &mut rng).unwrap();
    pretrain(&mut model, &data, &mut rng, |_, _| {}).unwrap();
    let base: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("vocoder."))
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    let enc_before = model.store.snapshot("enc.");
    let reports = finetune(&mut model, &data, &mut rng, |_| {}).unwrap();
    assert_eq!(reports.len(), 6);
    for (name, value) in &base {
        let id = model.store.id(name).unwrap();
        assert_eq!(model.store.value(id).data(), value.data(), "{name} moved");
    }
    assert_ne!(model.store.snapshot("enc."), enc_before);
    assert!(model.has_adapters());
}

#[test]
fn checkpoints_reproduce_generation_and_extraction() {
    let cfg = tiny();
    let mut rng = Rng::new(2);
    let data = synth_dataset(4, &cfg.audio, &mut rng).unwrap();
    let mut model = Model::new(&cfg, &mut rng).unwrap();
    model.attach_adapters(&mut rng).unwrap();
    finetune(&mut model, &data, &mut rng, |_| {}).unwrap();

    // Stored values are f32, so compare against a model that went through
    // the same rounding.
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.sldo");
    save_model(&model, &path).unwrap();
    let a = load_model_file(&path).unwrap();
    save_model(&a, &path).unwrap();
    let b = load_model_file(&path).unwrap();

    let cond = a.conditioning(&[&data.clips[0]]).unwrap();
    let payload = [WatermarkBits::random(6, &mut rng).unwrap()];
    let ya = a.synthesize(Some(&payload), &cond, &mut Rng::new(5)).unwrap();
    let yb = b.synthesize(Some(&payload), &cond, &mut Rng::new(5)).unwrap();
    assert_eq!(ya[0].samples, yb[0].samples);
    assert_eq!(a.extract_logits(&ya[0]).unwrap(), b.extract_logits(&yb[0]).unwrap());
}

#[test]
fn merged_adapters_match_unmerged_generation() {
    let cfg = tiny();
    let mut rng = Rng::new(3);
    let data = synth_dataset(2, &cfg.audio, &mut rng).unwrap();
    let mut model = Model::new(&cfg, &mut rng).unwrap();
    model.attach_adapters(&mut rng).unwrap();
    finetune(&mut model, &data, &mut rng, |_| {}).unwrap();
    let mut merged = model.clone();
    merged.merge_adapters().unwrap();
    assert!(!merged.has_adapters());

    let cond = model.conditioning(&[&data.clips[1]]).unwrap();
    let payload = [WatermarkBits::new(vec![1, 0, 1, 1, 0, 0]).unwrap()];
    let y = model.synthesize(Some(&payload), &cond, &mut Rng::new(9)).unwrap();
    let ym = merged.synthesize(Some(&payload), &cond, &mut Rng::new(9)).unwrap();
    let diff = y[0].samples.iter().zip(&ym[0].samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "max diff {diff}");
}

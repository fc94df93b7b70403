use focustrack::autodiff::GradientTape;
use focustrack::config::RunConfig;
use focustrack::eval::{evaluate, MetricsReport};
use focustrack::model::{init_params, ModelConfig};
use focustrack::sra::{sra_update, SraState};
use focustrack::synthdata::{generate, Sequence, SynthSpec};
use focustrack::tracker::{run_many, run_sequence, TrackerConfig};
use focustrack::train::{train, TrainConfig};
use proptest::prelude::*;

fn seq(seed: u64, frames: usize) -> Sequence {
    generate(&SynthSpec {
        frames,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn train_save_load_track_evaluate() {
    let model = ModelConfig::toy();
    let data: Vec<_> = (0..4).map(|i| seq(40 + i, 20)).collect();
    let cfg = TrainConfig {
        steps: 30,
        batch: 4,
        lr_backbone: 3e-4,
        lr_heads: 5e-3,
        probe_pairs: 8,
        ..TrainConfig::default()
    };
    let out = train(&model, &cfg, &data, None, |_, _| {}).unwrap();
    assert_eq!(out.trace.len(), 30);
    assert!(out.probe_final.total < out.probe_initial.total);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ntc1");
    focustrack::ntc1::save(&out.tape, Some(serde_json::json!({"steps": 30})), &path).unwrap();
    let (loaded, manifest) = focustrack::ntc1::load::<f32>(&path).unwrap();
    assert_eq!(manifest.meta.unwrap()["steps"], 30);

    let test = seq(900, 15);
    let tc = TrackerConfig::default();
    let a = run_sequence(&model, &out.tape, tc, &test).unwrap();
    let b = run_sequence(&model, &loaded, tc, &test).unwrap();
    assert_eq!(a.outputs, b.outputs);
    let m = evaluate(&a.result.boxes(), &a.result.exist_pred, &test.ann).unwrap();
    for v in [m.auc, m.p20, m.pnorm, m.sa] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn parallel_tracking_matches_serial_and_orders_by_name() {
    let model = ModelConfig::toy();
    let w: GradientTape<f32> = init_params(&model, 2).unwrap();
    // generated out of name order on purpose
    let seqs: Vec<_> = [7, 3, 5].iter().map(|&s| seq(s, 6)).collect();
    let tc = RunConfig::default().tracker();
    let many = run_many(&model, &w, tc, &seqs, 3);
    let names: Vec<_> = many.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["synth_0003", "synth_0005", "synth_0007"]);
    let mut per = std::collections::BTreeMap::new();
    for (name, run) in many {
        let run = run.unwrap();
        let s = seqs.iter().find(|s| s.name == name).unwrap();
        assert_eq!(run.outputs, run_sequence(&model, &w, tc, s).unwrap().outputs);
        per.insert(name, evaluate(&run.result.boxes(), &run.result.exist_pred, &s.ann).unwrap());
    }
    assert_eq!(MetricsReport::from_sequences(per).unwrap().per_sequence.len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn tracker_outputs_stay_sane(seed in 0u64..10_000, use_sra: bool, use_atm: bool, weights_seed in 0u64..4) {
        let model = ModelConfig::toy();
        let w: GradientTape<f32> = init_params(&model, weights_seed).unwrap();
        let s = seq(seed, 8);
        let tc = TrackerConfig { use_sra, use_atm, ..TrackerConfig::default() };
        let run = run_sequence(&model, &w, tc, &s).unwrap();
        prop_assert_eq!(run.outputs.len(), 7);
        prop_assert_eq!(run.result.res.len(), 8);
        let side = SynthSpec::default().frame_side as f64;
        let mut state = SraState::new(tc.sra).unwrap();
        for o in &run.outputs {
            // the factor used on a frame is the schedule's state after the previous frames
            prop_assert_eq!(o.factor, state.f);
            if use_sra {
                state = sra_update(state, o.logits, o.p_max);
            }
            prop_assert!(o.bbox.w >= 1.0 && o.bbox.h >= 1.0 && o.bbox.w <= side && o.bbox.h <= side);
            prop_assert!((0.0..=side).contains(&o.bbox.cx) && (0.0..=side).contains(&o.bbox.cy));
            prop_assert!((0.0..=1.0).contains(&o.logits) && (0.0..=1.0).contains(&o.p_max));
            prop_assert_eq!(o.window_used, tc.use_window && o.factor == tc.sra.f_base);
        }
    }
}

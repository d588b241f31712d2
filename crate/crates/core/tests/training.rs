use hsc::gradcheck::{check_store, check_store_with, Stencil, DEFAULT_TOLERANCE};
use hsc::numerics::{RngState, Tensor};
use hsc::pipeline::{sample_dataset, Codec, CodecConfig};
use hsc::training::losses::{loss_fcn, loss_scn};
use hsc::training::*;
use hsc::HscError;

fn setup(n: usize) -> (Codec, Vec<Tensor>) {
    let codec = Codec::init(CodecConfig::default()).unwrap();
    let images = sample_dataset(&codec, n, 3)
        .unwrap()
        .into_iter()
        .map(|s| s.x)
        .collect();
    (codec, images)
}

fn tiny(gie: usize, rd: usize, joint: usize) -> TrainSchedule {
    TrainSchedule {
        gie_steps: gie,
        rd_steps: rd,
        joint_steps: joint,
        batch: 2,
        ..Default::default()
    }
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let (codec, images) = setup(4);
    let out = train(&codec, &tiny(0, 0, 0), &LossWeights::default(), &images).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.codec.params(), codec.params());
    assert_eq!(out.codec.hash(), codec.hash());
}

#[test]
fn training_is_deterministic() {
    let (codec, images) = setup(6);
    let a = train(&codec, &tiny(3, 3, 3), &LossWeights::default(), &images).unwrap();
    let b = train(&codec, &tiny(3, 3, 3), &LossWeights::default(), &images).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.codec.hash(), b.codec.hash());
    let stages: Vec<Stage> = a.log.iter().map(|r| r.stage).collect();
    assert_eq!(
        stages,
        [[Stage::Gie; 3], [Stage::Rd; 3], [Stage::Joint; 3]].concat()
    );
    assert!((0..9).all(|i| a.log[i].step == i));
}

#[test]
fn stages_only_touch_their_parameters() {
    let (codec, images) = setup(4);
    let w = LossWeights::default();
    let rd = train(&codec, &tiny(0, 4, 0), &w, &images).unwrap().codec;
    for prefix in ["gie.", "gen."] {
        assert_eq!(
            rd.params().prefix_hash(prefix),
            codec.params().prefix_hash(prefix),
            "{prefix}"
        );
    }
    assert_ne!(
        rd.params().prefix_hash("fcn."),
        codec.params().prefix_hash("fcn.")
    );
    assert_ne!(
        rd.params().prefix_hash("scn."),
        codec.params().prefix_hash("scn.")
    );

    let gie = train(&codec, &tiny(4, 0, 0), &w, &images).unwrap().codec;
    for prefix in ["gen.", "scn.", "fcn."] {
        assert_eq!(
            gie.params().prefix_hash(prefix),
            codec.params().prefix_hash(prefix),
            "{prefix}"
        );
    }
    let joint = train(&codec, &tiny(0, 0, 3), &w, &images).unwrap().codec;
    assert_eq!(
        joint.params().prefix_hash("gen."),
        codec.params().prefix_hash("gen.")
    );
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let (codec, _) = setup(1);
    let bad = vec![Tensor::full(&[3, 32, 32], f64::NAN)];
    match train(&codec, &tiny(2, 0, 0), &LossWeights::default(), &bad) {
        Err(HscError::Divergence {
            stage: "gie",
            step: 0,
            ..
        }) => {}
        other => panic!("unexpected {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn empty_data_and_bad_settings_are_rejected() {
    let (codec, _) = setup(1);
    assert!(train(&codec, &tiny(1, 0, 0), &LossWeights::default(), &[]).is_err());
    let bad = LossWeights {
        lambda3: -1.0,
        ..Default::default()
    };
    assert!(train(&codec, &tiny(0, 0, 0), &bad, &[]).is_err());
    let sched = TrainSchedule {
        batch: 0,
        ..Default::default()
    };
    assert!(sched.validate().is_err());
}

#[test]
fn every_stage_objective_has_correct_gradients() {
    let (codec, images) = setup(3);
    let w = LossWeights::default();
    for (stage, x) in Stage::ALL.into_iter().zip(&images) {
        // the rate-distortion objective is smooth but of order 10^4
        let stencil = if stage == Stage::Rd {
            Stencil::WIDE
        } else {
            Stencil::NARROW
        };
        let report = check_store_with(
            codec.params(),
            |store| stage_gradients(&codec, store, &w, stage, x, 9),
            50,
            &mut RngState::new(stage as u64 + 1),
            stencil,
        )
        .unwrap();
        assert_eq!(report.draws, 50);
        assert!(report.passes(DEFAULT_TOLERANCE), "{stage}: {report:?}");
    }
}

#[test]
fn rate_distortion_losses_have_correct_gradients() {
    let mut rng = RngState::new(4);
    let mut store = hsc::params::ParamStore::new();
    store.insert("a", rng.normal_tensor(&[20], 1.0));
    store.insert("b", rng.normal_tensor(&[20], 1.0));
    store.insert("r", Tensor::scalar(3.0));
    for scn in [true, false] {
        let eval = |s: &hsc::params::ParamStore| {
            let mut ctx = hsc::params::Ctx::new(s, &[""]);
            let (a, b, r) = (ctx.p("a")?, ctx.p("b")?, ctx.p("r")?);
            let sq = ctx.g.mul(r, r)?;
            let (_, total) = if scn {
                loss_scn(&mut ctx, a, b, sq, 2.5)?
            } else {
                loss_fcn(&mut ctx, a, b, sq, 0.7)?
            };
            ctx.gradients(total)
        };
        let report = check_store(&store, eval, 50, &mut rng).unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
    }
}

#[test]
fn larger_semantic_multiplier_lowers_semantic_distortion() {
    let (codec, images) = setup(32);
    let held_out: Vec<Tensor> = sample_dataset(&codec, 16, 77)
        .unwrap()
        .into_iter()
        .map(|s| s.x)
        .collect();
    let distortion = |lambda3: f64| {
        let w = LossWeights {
            lambda3,
            ..Default::default()
        };
        let sched = TrainSchedule {
            rd_steps: 300,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..Default::default()
            },
            ..tiny(0, 0, 0)
        };
        let trained = train(&codec, &sched, &w, &images).unwrap().codec;
        held_out
            .iter()
            .map(|x| {
                let (s, f) = trained.analyze(x).unwrap();
                let enc = trained.encode_latents(&s, &f, true).unwrap();
                enc.s_hat.flat().sub(s.flat()).unwrap().sum_sq()
            })
            .sum::<f64>()
            / held_out.len() as f64
    };
    let d: Vec<f64> = [1.0, 10.0, 100.0].into_iter().map(distortion).collect();
    assert!(d[0] >= d[1] && d[1] >= d[2], "{d:?}");
}

#[test]
fn config_round_trips_and_log_is_csv() {
    let cfg = TrainConfig::default();
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let partial =
        TrainConfig::from_toml("[schedule]\ngie_steps = 5\n[weights]\nlambda4 = 2.0\n").unwrap();
    assert_eq!(partial.schedule.gie_steps, 5);
    assert_eq!(partial.weights.lambda4, 2.0);
    assert_eq!(partial.schedule.rd_steps, TrainSchedule::default().rd_steps);
    assert!(TrainConfig::from_toml("[schedule]\nbogus = 1\n").is_err());

    let (codec, images) = setup(2);
    let out = train(&codec, &tiny(2, 1, 0), &LossWeights::default(), &images).unwrap();
    let mut buf = Vec::new();
    write_loss_log(&out.log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("2,rd,"));
}

#[test]
fn context_fit_reduces_rate_and_touches_only_the_context() {
    let (codec, images) = setup(8);
    let inputs = hsc::harness::ablation::context_inputs(&codec, &images).unwrap();
    let before = hsc::harness::ablation::mean_feature_bits(&codec, &inputs).unwrap();
    let sched = TrainSchedule {
        rd_steps: 100,
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..tiny(0, 0, 0)
    };
    let fitted = fit_context(&codec, &sched, &inputs).unwrap().codec;
    let after = hsc::harness::ablation::mean_feature_bits(&fitted, &inputs).unwrap();
    assert!(after < before, "{after} >= {before}");
    for prefix in ["gie.", "gen.", "scn.", "fcn.enc", "fcn.dec"] {
        assert_eq!(
            fitted.params().prefix_hash(prefix),
            codec.params().prefix_hash(prefix),
            "{prefix}"
        );
    }
}

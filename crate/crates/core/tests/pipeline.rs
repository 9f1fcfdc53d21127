use candle_core::{DType, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidswap_core::codec::{pretrain_codec, CodecConfig, CodecTrainConfig};
use vidswap_core::dil::{pretrain_identity_encoder, IdentityEncoderConfig, IdentityTrainConfig};
use vidswap_core::edm::{cfg_combine, edm_sample, Guided, RawNetwork, SamplerSchedule};
use vidswap_core::eval::{evaluate, EvalConfig};
use vidswap_core::metrics::{pretrain_factor_regressor, FvdExtractor, RegressorConfig, RegressorTrainConfig};
use vidswap_core::tensor::{bit_equal, max_abs_diff, randn, to_f64_vec};
use vidswap_core::trainer::{fit, read_metrics_log, swap, FitOptions, CHECKPOINT_FILE, METRICS_FILE};
use vidswap_core::videodata::{ClipSource, IdentityCodebook, SyntheticDataset, SyntheticDatasetConfig};
use vidswap_core::{Model, ModelConfig, Pretrained, SwapOptions, TrainConfig, TrainState};

fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.denoiser.latent_channels = 4;
    m.denoiser.base_channels = 8;
    m.denoiser.channel_mult = vec![1, 2];
    m.denoiser.heads = 2;
    m.denoiser.d_model = 16;
    m.denoiser.frames = 3;
    m.fal.input_channels = 4;
    m.fal.widths = [8, 8, 8];
    m.fal.heads = 2;
    m.fal.low_channels = 8;
    m.fal.id_dim = 16;
    m.fal.rid_tokens = 2;
    m
}

#[test]
fn pretrain_train_checkpoint_swap_evaluate() {
    let data = SyntheticDataset::new(SyntheticDatasetConfig {
        clips: 8,
        frames: 5,
        identities: 4,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let (codec, codec_log) = pretrain_codec(
        CodecConfig {
            channels: 4,
            hidden: 8,
            ..Default::default()
        },
        &CodecTrainConfig {
            steps: 5,
            batch_frames: 4,
            ..Default::default()
        },
        &data,
    )
    .unwrap();
    assert!(codec_log.iter().all(|l| l.is_finite()));
    let cb = IdentityCodebook::new(4);
    let enc_cfg = IdentityEncoderConfig {
        widths: [8, 8, 8, 8],
        embed_dim: 16,
        ..Default::default()
    };
    let (idenc, _) = pretrain_identity_encoder(
        enc_cfg,
        &IdentityTrainConfig {
            steps: 3,
            batch: 4,
            identities: 4,
            ..Default::default()
        },
        &cb,
    )
    .unwrap();
    let (reg, _) = pretrain_factor_regressor(
        RegressorConfig::default(),
        &RegressorTrainConfig {
            steps: 2,
            batch: 4,
            ..Default::default()
        },
        &cb,
    )
    .unwrap();
    let pre = Pretrained::new(&codec, &idenc).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        total_steps: 4,
        batch_size: 2,
        warmup_steps: 1,
        checkpoint_every: 2,
        ..Default::default()
    };
    let mut st = TrainState::new(tiny_model(), cfg, &pre).unwrap();
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        stop_at: None,
    };
    let records = fit(&mut st, &pre, &data, &opts, |_| {}).unwrap();
    assert_eq!(records.len(), 4);
    let logged = read_metrics_log(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(logged.len(), 4);
    for (r, l) in records.iter().zip(&logged) {
        assert_eq!(r.step, l.step);
        assert!((r.loss_total - r.recombined_total(&st.config)).abs() < 1e-9);
    }

    let loaded = Model::load(dir.path().join(CHECKPOINT_FILE), &pre).unwrap();
    assert_eq!(loaded.weights_hash().unwrap(), st.model.weights_hash().unwrap());

    let target = data.clip(0).unwrap();
    let source = data.clip(3).unwrap().source_face(0).unwrap();
    let sw = SwapOptions {
        schedule: SamplerSchedule {
            steps: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = swap(&st.model, &pre, &source, &target, &sw).unwrap();
    let b = swap(&loaded, &pre, &source, &target, &sw).unwrap();
    assert!(a.windowed);
    assert_eq!(a.clip.frames.dims(), target.frames.dims());
    assert!(bit_equal(&a.clip.frames, &b.clip.frames).unwrap());
    let px = to_f64_vec(&a.generated).unwrap();
    assert!(px.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));

    let ext = FvdExtractor::pinned().unwrap();
    let ec = EvalConfig {
        pairs: 4,
        batch: 2,
        frames: 3,
        gallery_frames: 1,
        seed: 0,
    };
    let ev = evaluate(&loaded, &pre, &reg, &ext, &data, &ec, &sw).unwrap();
    let r = &ev.report;
    assert_eq!(r.n_samples, 4);
    assert_eq!(ev.rows.len(), 4);
    assert!((0.0..=1.0).contains(&r.idr));
    assert!(r.fvd.is_finite() && r.fvd >= 0.0);
    assert!(r.vidd.is_finite() && r.vidd >= 0.0);
    assert!(r.attr_errors.mean().is_finite());
    let again = evaluate(&loaded, &pre, &reg, &ext, &data, &ec, &sw).unwrap();
    assert_eq!(serde_json::to_string(&again.report).unwrap(), serde_json::to_string(r).unwrap());
}

/// Raw output `a·cond·x`.
struct Linear(f64);

impl RawNetwork for Linear {
    type Cond = f64;

    fn raw(&self, x: &Tensor, _c_noise: &Tensor, cond: &f64) -> vidswap_core::Result<Tensor> {
        Ok((x * (self.0 * cond))?)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampler_is_deterministic_and_guidance_interpolates(seed in 0u64..1000, scale in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = (randn(&mut rng, &[1, 2, 1, 2, 2], DType::F64).unwrap() * 5.0).unwrap();
        let schedule = SamplerSchedule { steps: 4, sigma_max: 5.0, guidance_scale: scale, ..Default::default() };
        let g = Guided { cond: 1.0, uncond: Some(0.5) };
        let a = edm_sample(&Linear(0.3), &g, &schedule, 0.5, &init).unwrap();
        let b = edm_sample(&Linear(0.3), &g, &schedule, 0.5, &init).unwrap();
        prop_assert!(bit_equal(&a, &b).unwrap());
        prop_assert!(to_f64_vec(&a).unwrap().iter().all(|v| v.is_finite()));

        let u = randn(&mut rng, &[3, 4], DType::F64).unwrap();
        let c = randn(&mut rng, &[3, 4], DType::F64).unwrap();
        let mixed = cfg_combine(&u, &c, scale).unwrap();
        let want = ((&u * (1.0 - scale)).unwrap() + (&c * scale).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&mixed, &want).unwrap() < 1e-12);
    }
}

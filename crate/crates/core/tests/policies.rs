use linkadapt_core::baselines::{BoCmabPolicy, OllaCmabPolicy};
use linkadapt_core::channel::DeploymentRanges;
use linkadapt_core::config::{ExperimentConfig, Scheme};
use linkadapt_core::env::{check_frame_constraints, Env, EnvConfig, FrameOracle, Observation, Policy};
use linkadapt_core::experiment::{build_policy, env_config, run};
use linkadapt_core::phy::ideal_rate;
use linkadapt_core::rng::{stream, Stream};
use proptest::prelude::*;

fn tiny(scheme: Scheme, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        scheme,
        seed,
        epochs: 2,
        slots_per_epoch: 80,
        eval_episodes: 2,
        hidden: "16".parse().unwrap(),
        batch: 8,
        gp_capacity: 16,
        ..ExperimentConfig::default()
    }
}

fn static_env(devices: usize, frames: usize) -> EnvConfig {
    let cfg = ExperimentConfig { devices, rho: 1.0, ..ExperimentConfig::default() };
    let mut env = env_config(&cfg);
    env.frames = frames;
    env.deployment = DeploymentRanges { speed: (0.0, 0.0), ..DeploymentRanges::default() };
    env
}

fn observation(served: Vec<bool>, cqi: u32) -> Observation {
    let k = served.len();
    Observation {
        slot: 0,
        frame: 0,
        slot_in_frame: served.iter().filter(|s| **s).count(),
        cqi_history: vec![vec![cqi; 13]; k],
        served,
        last_feedback: vec![None; k],
        last_rate: vec![1.0; k],
        olla_delta: vec![0.0; k],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_scheme_respects_an_adversarial_mask(
        mask in proptest::collection::vec(any::<bool>(), 4),
        scheme_idx in 0usize..6,
        cqi in 0u32..16,
        seed in 0u64..1000,
    ) {
        prop_assume!(mask.iter().any(|m| !m));
        let cfg = tiny(Scheme::ALL[scheme_idx], seed);
        let mut policy = build_policy(&cfg).unwrap();
        let obs = observation(mask.clone(), cqi);
        let snr = vec![vec![5.0; 4]; 4 - obs.slot_in_frame];
        let mut rng = stream(seed, Stream::Policy);
        for _ in 0..5 {
            let d = policy.decide(&obs, &FrameOracle { snr: &snr }, &mut rng).unwrap();
            prop_assert!(!mask[d.device]);
            prop_assert!(d.rate >= 0.0 && d.rate.is_finite());
        }
    }
}

#[test]
fn ideal_dominates_olla_cmab_on_average() {
    let seeds: Vec<u64> = (0..20).collect();
    let mean = |scheme: Scheme| {
        seeds
            .iter()
            .map(|&s| {
                let r = run(&tiny(scheme, s)).unwrap();
                check_frame_constraints(&r.eval.records, 4).unwrap();
                r.eval.summary.sum_rate
            })
            .sum::<f64>()
            / seeds.len() as f64
    };
    let ideal = mean(Scheme::Ideal);
    let olla = mean(Scheme::OllaCmab);
    assert!(ideal > olla, "olla-cmab {olla} vs ideal {ideal}");
}

#[test]
fn olla_cmab_settles_on_the_best_device() {
    let cfg = static_env(1, 1);
    // true SNR sits just above each report's midpoint, so CQI-driven rates succeed
    let snr_db = [3.0, 12.0, 6.0].map(|s: f64| cfg.cqi.dequantize(cfg.cqi.quantize(s)).unwrap() + 0.5);
    let mut policy = OllaCmabPolicy::new(3, cfg.fbl, cfg.cqi, 6.0, 0.01);
    let mut rng = stream(1, Stream::Policy);
    let mut late_best = 0;
    for t in 0..2000 {
        let obs = Observation {
            cqi_history: snr_db.iter().map(|&s| vec![cfg.cqi.quantize(s); 13]).collect(),
            ..observation(vec![false; 3], 0)
        };
        let snr: Vec<Vec<f64>> = vec![snr_db.iter().map(|s| 10f64.powf(s / 10.0)).collect()];
        let d = policy.decide(&obs, &FrameOracle { snr: &snr }, &mut rng).unwrap();
        let rate = d.rate;
        let ok = linkadapt_core::phy::bler(snr[0][d.device], rate, 192).unwrap() < 1e-3;
        let record = slot_record(d.device, rate, ok);
        policy.observe(&obs, &d, &record, &obs, &mut rng).unwrap();
        if t >= 1500 && d.device == 1 {
            late_best += 1;
        }
    }
    assert!(late_best as f64 / 500.0 > 0.9, "{late_best}");
}

fn slot_record(device: usize, rate: f64, ack: bool) -> linkadapt_core::env::SlotRecord {
    use linkadapt_core::phy::Feedback;
    linkadapt_core::env::SlotRecord {
        episode: 0,
        slot: 0,
        frame: 0,
        slot_in_frame: 0,
        device,
        cqi: 0,
        true_snr_db: 0.0,
        requested_rate: rate,
        olla_delta: 0.0,
        rate,
        mcs_index: None,
        bler: if ack { 0.0 } else { 1.0 },
        feedback: if ack { Feedback::Ack } else { Feedback::Nack },
        optimal_rate: 0.0,
        optimal_mcs: None,
    }
}

#[test]
fn bo_cmab_converges_on_a_static_link() {
    let snr = 10f64.powf(1.0);
    let target = ideal_rate(snr, 1e-3, 192).unwrap();
    let cfg = ExperimentConfig::default();
    let mut policy = BoCmabPolicy::new(1, 64, 6.0).with_rate_lengthscale(cfg.bo_cmab_lengthscale);
    let mut rng = stream(2, Stream::Policy);
    let obs = observation(vec![false], 8);
    let oracle = vec![vec![snr]];
    let mut rates = Vec::new();
    for _ in 0..200 {
        let d = policy.decide(&obs, &FrameOracle { snr: &oracle }, &mut rng).unwrap();
        let ok = linkadapt_core::phy::bler(snr, d.rate, 192).unwrap() < 1e-3;
        policy.observe(&obs, &d, &slot_record(0, d.rate, ok), &obs, &mut rng).unwrap();
        rates.push(d.rate);
    }
    let mut late = rates[150..].to_vec();
    late.sort_by(f64::total_cmp);
    let median = late[late.len() / 2];
    assert!((median - target).abs() < 0.1, "median rate {median} vs ideal {target}");
}

#[test]
fn static_channel_episode_has_constant_truth() {
    let cfg = static_env(3, 4);
    let mut env = Env::new(cfg, 5, Stream::Channel).unwrap();
    let mut policy = build_policy(&ExperimentConfig { devices: 3, scheme: Scheme::Ideal, ..ExperimentConfig::default() })
        .unwrap();
    let mut rng = stream(5, Stream::Policy);
    let (_, records) = env.run_episode(policy.as_mut(), &mut rng).unwrap();
    for d in 0..3 {
        let snrs: Vec<f64> = records.iter().filter(|r| r.device == d).map(|r| r.true_snr_db).collect();
        assert!(snrs.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9), "{snrs:?}");
    }
    assert!(records.iter().all(|r| r.bler <= 1e-3 + 1e-12));
}

use super::*;
use crate::envs::{modsum_condition, EnvSpec};
use crate::flowlat::{SamplerConfig, WindowConfig};
use crate::guidance::GuidanceConfig;
use crate::numcore::{finite_diff_check, grad, seeded_rng, AdamState, AdamWConfig, Graph};
use crate::reasoner::{LatentReasoner, ModelConfig};
use crate::textpol::{LatentPool, SamplingOptions};

fn model() -> LatentReasoner {
    LatentReasoner::new(
        ModelConfig {
            latent_rows: 2,
            latent_cols: 2,
            velocity_hidden: vec![6],
            text_embed: 3,
            text_hidden: 6,
            max_len: 4,
            encoder_embed: 3,
            encoder_hidden: 4,
            latent_pool: LatentPool::Flat,
        },
        10,
    )
    .unwrap()
}

fn sampler() -> SamplerConfig {
    SamplerConfig {
        steps: 6,
        window: Some(WindowConfig { size: 2, range: (0, 3) }),
        ..SamplerConfig::train_default()
    }
}

fn grpo(n: usize, m: usize) -> GrpoConfig {
    GrpoConfig {
        n,
        m,
        ..GrpoConfig::default()
    }
}

fn env() -> EnvSpec {
    EnvSpec::Modsum { answer_len: 2 }
}

/// Rollouts whose rewards are replaced so both advantage tensors are
/// non-trivial regardless of what the tiny policy produced.
fn rollout(seed: u64, n: usize, m: usize) -> (LatentPolicy, Vec<f64>, RolloutGroup) {
    let mdl = model();
    let params = mdl.init_params(&mut seeded_rng(seed)).values;
    let policy = LatentPolicy::from(&mdl);
    let cfg = grpo(n, m);
    let mut group = collect_rollouts(
        &policy,
        &params,
        &env(),
        &modsum_condition(3),
        &sampler(),
        Some(&GuidanceConfig::default()),
        &cfg,
        &SamplingOptions::default(),
        &mut seeded_rng(seed + 100),
    )
    .unwrap();
    let mut rng = seeded_rng(seed + 7);
    use rand::Rng as _;
    group.rewards = (0..n).map(|_| (0..m).map(|_| rng.random_range(0..2) as f64).collect()).collect();
    group.rewards[0][0] = 1.0;
    group.rewards[0][1] = 0.0;
    group.rewards[1] = vec![1.0; m];
    group.latent_adv = Some(latent_advantages(&group.rewards, cfg.std_floor).unwrap());
    group.text_adv = text_local_advantages(&group.rewards, cfg.std_floor).unwrap();
    (policy, params, group)
}

#[test]
fn rollout_shapes_and_rescoring() {
    let mdl = model();
    let params = mdl.init_params(&mut seeded_rng(1)).values;
    let policy = LatentPolicy::from(&mdl);
    let q = modsum_condition(4);
    let g = collect_rollouts(
        &policy,
        &params,
        &env(),
        &q,
        &sampler(),
        Some(&GuidanceConfig::default()),
        &grpo(4, 3),
        &SamplingOptions::default(),
        &mut seeded_rng(2),
    )
    .unwrap();
    assert_eq!(g.trajectories.len(), 4);
    assert_eq!(g.answers.iter().map(Vec::len).sum::<usize>(), 12);
    for (row, rs) in g.answers.iter().zip(&g.rewards) {
        for (a, r) in row.iter().zip(rs) {
            assert_eq!(*r, env().answer_reward(&a.tokens, &q));
            assert_eq!(a.reward, *r);
        }
    }
    assert!(!g.latent_skipped());
}

#[test]
fn single_trajectory_skips_latent_advantages() {
    let mdl = model();
    let params = mdl.init_params(&mut seeded_rng(1)).values;
    let g = collect_rollouts(
        &LatentPolicy::from(&mdl),
        &params,
        &env(),
        &modsum_condition(0),
        &sampler(),
        Some(&GuidanceConfig {
            enabled: false,
            ..Default::default()
        }),
        &grpo(1, 2),
        &SamplingOptions::default(),
        &mut seeded_rng(3),
    )
    .unwrap();
    assert!(g.latent_skipped());
    let mut g2 = Graph::new(&params);
    let mut c = ClipCount::default();
    assert!(latent_group_loss(&mut g2, &LatentPolicy::from(&mdl), &g, &grpo(2, 2), None, &mut c)
        .unwrap()
        .is_none());
}

#[test]
fn losses_vanish_on_policy_with_unit_ratios() {
    for seed in 0..5 {
        let (policy, params, group) = rollout(seed, 3, 3);
        let cfg = grpo(3, 3);
        let mut g = Graph::new(&params);
        let l = policy_losses(&mut g, &policy, std::slice::from_ref(&group), &cfg, None).unwrap();
        assert!(g.scalar(l.latent).abs() < 1e-9);
        assert!(g.scalar(l.text).abs() < 1e-9);
        assert!(l.latent_clips.total > 0 && l.latent_clips.clipped == 0);
        assert!(l.text_clips.total > 0 && l.text_clips.clipped == 0);
        for tr in &group.trajectories {
            for (k, s) in tr.stochastic_steps() {
                let r = (crate::flowlat::step_logprob(&params, &policy.velocity, tr, k).unwrap()
                    - s.logp_old.unwrap())
                .exp();
                assert!((r - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn on_policy_gradient_is_the_plain_policy_gradient() {
    let (policy, params, group) = rollout(11, 3, 3);
    let cfg = grpo(3, 3);
    let (_, clipped) = grad(&params, |g| {
        let l = policy_losses(g, &policy, std::slice::from_ref(&group), &cfg, None)?;
        Ok(joint_loss_node(g, &l, &cfg))
    })
    .unwrap();
    // -(w_lat/N) Σ A_n Σ_t log p  -  (w_text/NM) Σ A_nm Σ_j log p
    let (_, plain) = grad(&params, |g| {
        let text = policy.text.as_ref().unwrap();
        let mut terms = Vec::new();
        let n = group.trajectories.len() as f64;
        for (tr, a) in group.trajectories.iter().zip(group.latent_adv.as_ref().unwrap()) {
            for (k, _) in tr.stochastic_steps() {
                let (lp, _) = crate::flowlat::step_logprob_node(g, &policy.velocity, tr, k)?;
                terms.push(g.scale(lp, -cfg.w_latent * a / n));
            }
        }
        for ((tr, answers), advs) in group.trajectories.iter().zip(&group.answers).zip(&group.text_adv) {
            let z = g.constant(tr.final_state.clone());
            let ctx = text.context_node(g, &group.question.features, Some(z))?;
            for (ans, a) in answers.iter().zip(advs) {
                for lp in text.sequence_logprob_nodes(g, ctx, &ans.tokens)? {
                    terms.push(g.scale(lp, -cfg.w_text * a / (9.0 * ans.tokens.len() as f64)));
                }
            }
        }
        Ok(g.add_all(&terms))
    })
    .unwrap();
    let scale = plain.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(scale > 0.0);
    for (a, b) in clipped.iter().zip(&plain) {
        assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
    }
}

#[test]
fn zero_advantages_give_zero_loss_and_gradient() {
    let (policy, params, mut group) = rollout(5, 3, 2);
    group.latent_adv = Some(vec![0.0; 3]);
    group.text_adv = vec![vec![0.0; 2]; 3];
    let cfg = grpo(3, 2);
    let (v, gr) = grad(&params, |g| {
        let l = policy_losses(g, &policy, std::slice::from_ref(&group), &cfg, None)?;
        Ok(joint_loss_node(g, &l, &cfg))
    })
    .unwrap();
    assert_eq!(v, 0.0);
    assert!(gr.iter().all(|x| *x == 0.0));
}

#[test]
fn constant_reward_row_contributes_nothing_to_text_loss() {
    let (policy, params, mut group) = rollout(6, 3, 3);
    let cfg = grpo(3, 3);
    let text_only = |group: &RolloutGroup| {
        grad(&params, |g| {
            let mut c = ClipCount::default();
            Ok(text_group_loss(g, &policy, group, &cfg, &mut c)?.unwrap_or_else(|| g.constant_scalar(0.0)))
        })
        .unwrap()
        .1
    };
    group.rewards[1] = vec![1.0; 3];
    group.text_adv = text_local_advantages(&group.rewards, cfg.std_floor).unwrap();
    let with_row = text_only(&group);
    let mut dropped = group.clone();
    dropped.answers[1].clear();
    dropped.text_adv[1].clear();
    // Same gradient up to the 1/(NM) count, which changes from 9 to 6.
    let without = text_only(&dropped);
    for (a, b) in with_row.iter().zip(&without) {
        assert!((a * 9.0 - b * 6.0).abs() < 1e-12);
    }
}

#[test]
fn off_policy_loss_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (policy, params, group) = rollout(20 + seed, 2, 2);
        let cfg = GrpoConfig {
            eps_latent: 0.3,
            kl_beta: 0.5,
            ..grpo(2, 2)
        };
        let moved: Vec<f64> = params
            .iter()
            .enumerate()
            .map(|(i, p)| p + 1e-3 * ((i * 7919 % 13) as f64 - 6.0) / 6.0)
            .collect();
        let kl = KlReference {
            params: &params,
            noise_level: 0.8,
            t_clamp: 1e-3,
        };
        // Per-coordinate relative error; a larger step keeps round-off off
        // the near-zero embedding gradients.
        let err = finite_diff_check(&moved, 1e-4, |g| {
            let l = policy_losses(g, &policy, std::slice::from_ref(&group), &cfg, Some(kl))?;
            Ok(joint_loss_node(g, &l, &cfg))
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn missing_old_logprob_is_a_data_error() {
    let (policy, params, mut group) = rollout(8, 2, 2);
    let k = group.trajectories[0].stochastic_steps().next().unwrap().0;
    group.trajectories[0].steps[k].logp_old = None;
    let mut g = Graph::new(&params);
    let mut c = ClipCount::default();
    assert!(matches!(
        latent_group_loss(&mut g, &policy, &group, &grpo(2, 2), None, &mut c),
        Err(crate::Error::Data(_))
    ));
}

fn trainer(lr: f64) -> (RlTrainer, RlState) {
    let mdl = model();
    let params = mdl.init_params(&mut seeded_rng(4));
    let t = RlTrainer {
        policy: LatentPolicy::from(&mdl),
        env: env(),
        sampler: sampler(),
        guidance: GuidanceConfig::default(),
        grpo: grpo(3, 3),
        sampling: SamplingOptions::default(),
        optim: AdamWConfig {
            lr,
            ..Default::default()
        },
    };
    let n = params.len();
    let s = t.start(params, AdamState::new(n));
    (t, s)
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (t, mut s) = trainer(0.0);
    let before = s.params.clone();
    let rec = t
        .train_step(&mut s, &[modsum_condition(1), modsum_condition(2)], &mut seeded_rng(9))
        .unwrap();
    assert_eq!(s.params, before);
    assert!(!rec.skipped);
    assert_eq!(s.step, 1);
}

#[test]
fn updates_touch_only_policy_slices() {
    let (t, mut s) = trainer(1e-2);
    let before = s.params.clone();
    let qs: Vec<_> = (0..10).map(modsum_condition).collect();
    for i in 0..4 {
        t.train_step(&mut s, &qs, &mut seeded_rng(i)).unwrap();
    }
    let enc = before.range("encoder").unwrap();
    assert!(s.params.values[enc.clone()] == before.values[enc]);
    let vel = before.range("velocity").unwrap();
    assert!(s.params.values[vel.clone()] != before.values[vel]);
}

#[test]
fn metrics_record_schema() {
    let (t, mut s) = trainer(1e-3);
    let rec = t.train_step(&mut s, &[modsum_condition(5)], &mut seeded_rng(1)).unwrap();
    let v = serde_json::to_value(&rec).unwrap();
    let obj = v.as_object().unwrap();
    for f in MetricsRecord::FIELDS {
        assert!(obj.contains_key(f), "missing {f}");
    }
    assert_eq!(obj.len(), MetricsRecord::FIELDS.len());
    assert!((0.0..=1.0).contains(&rec.mean_reward));
    assert!(rec.text_entropy > 0.0);
    assert_eq!(rec.policy, "ladi");
}



use std::cell::Cell;

use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ndcore::Tensor;

fn dataset() -> DemoDataset {
    generate_demos(ModeSet::M2, 10, 3, &AvoidConfig::default()).unwrap()
}

fn scripted(ds: &DemoDataset, family: Family, t_p: usize) -> ScriptedPolicy {
    ScriptedPolicy {
        family,
        normalizer: ds.normalizer().clone(),
        t_p,
        lookahead: 0.1,
        max_step: 0.04,
    }
}

fn runner(ds: &DemoDataset, n: usize, t_a: usize, t_p: usize, seed: u64) -> VecRunner {
    VecRunner::new(
        RunnerConfig {
            n_envs: n,
            t_a,
            t_p,
            reset_at_iteration: true,
        },
        AvoidConfig::default(),
        ds.normalizer().clone(),
        seed,
    )
    .unwrap()
}

struct Counting<P> {
    inner: P,
    calls: Cell<usize>,
}

impl<P: ChunkPolicy> ChunkPolicy for Counting<P> {
    fn act(&self, obs: &Tensor, rng: &mut ChaCha8Rng) -> crate::Result<PolicyOutput> {
        self.calls.set(self.calls.get() + 1);
        self.inner.act(obs, rng)
    }
}

#[test]
fn scripted_top_policy_always_succeeds() {
    let ds = dataset();
    let (summary, eps) = evaluate(
        &scripted(&ds, Family::Top, 4),
        &AvoidConfig::default(),
        ds.normalizer(),
        4,
        4,
        20,
        0,
    )
    .unwrap();
    assert_eq!(summary.success_rate, 1.0);
    assert_eq!(eps.len(), 20);
    let (summary, _) = evaluate(
        &scripted(&ds, Family::Middle, 4),
        &AvoidConfig::default(),
        ds.normalizer(),
        4,
        4,
        20,
        0,
    )
    .unwrap();
    assert_eq!(summary.success_rate, 0.0);
    assert_eq!(summary.goal_rate, 1.0);
}

#[test]
fn single_tick_chunks_predict_every_step() {
    let ds = dataset();
    let p = Counting {
        inner: scripted(&ds, Family::Top, 1),
        calls: Cell::new(0),
    };
    let mut r = runner(&ds, 2, 1, 1, 0);
    let ro = r.collect(&p, 15, 0).unwrap();
    assert_eq!(p.calls.get(), 15);
    assert_eq!(ro.env_ticks, 30);
}

#[test]
fn zero_band_noise_is_a_no_op() {
    let ds = dataset();
    let p = scripted(&ds, Family::Top, 4);
    let mut a = runner(&ds, 3, 4, 4, 5);
    let mut b = runner(&ds, 3, 4, 4, 5);
    b.noise = Some(NoiseInjection {
        lo_max: 0.0,
        hi_max: 0.0,
        ..Default::default()
    });
    let ra = a.collect(&p, 30, 12).unwrap();
    let rb = b.collect(&p, 30, 12).unwrap();
    assert_eq!(ra.episodes, rb.episodes);
    for (x, y) in ra.steps.iter().zip(&rb.steps) {
        assert_eq!(x.obs, y.obs);
        assert_eq!(x.rewards, y.rewards);
    }
}

#[test]
fn noise_band_schedule() {
    let n = NoiseInjection::default();
    assert_eq!(n.band(0.0), (0.0, 0.0));
    assert_eq!(n.band(4.9), (0.0, 0.0));
    assert_eq!(n.band(10.0), (0.1, 0.2));
    assert_eq!(n.band(50.0), (0.1, 0.2));
    let (lo, hi) = n.band(7.5);
    assert!((lo - 0.05).abs() < 1e-15 && (hi - 0.1).abs() < 1e-15);
}

#[test]
fn injected_noise_perturbs_targets() {
    let ds = dataset();
    let p = scripted(&ds, Family::Top, 4);
    let mut a = runner(&ds, 2, 4, 4, 5);
    let mut b = runner(&ds, 2, 4, 4, 5);
    b.noise = Some(NoiseInjection::default());
    let ra = a.collect(&p, 5, 20).unwrap();
    let rb = b.collect(&p, 5, 20).unwrap();
    assert_eq!(rb.band, (0.1, 0.2));
    assert_ne!(ra.steps[4].obs, rb.steps[4].obs);
}

#[test]
fn per_env_streams_are_independent_of_batch_size() {
    let ds = dataset();
    let p = scripted(&ds, Family::Middle, 4);
    let mut one = runner(&ds, 1, 4, 4, 9);
    let mut three = runner(&ds, 3, 4, 4, 9);
    let r1 = one.collect(&p, 20, 0).unwrap();
    let r3 = three.collect(&p, 20, 0).unwrap();
    let e1: Vec<_> = r1.episodes.iter().collect();
    let e3: Vec<_> = r3.episodes.iter().filter(|e| e.env == 0).collect();
    assert_eq!(e1, e3);
    for (s1, s3) in r1.steps.iter().zip(&r3.steps) {
        assert_eq!(s1.obs.row(0), s3.obs.row(0));
        assert_eq!(s1.rewards[0], s3.rewards[0]);
    }
}

#[test]
fn episode_bookkeeping_invariants() {
    let ds = dataset();
    let mut r = runner(&ds, 4, 4, 4, 1);
    // A random policy produces collisions, timeouts and goals.
    struct RandomPolicy;
    impl ChunkPolicy for RandomPolicy {
        fn act(&self, obs: &Tensor, rng: &mut ChaCha8Rng) -> crate::Result<PolicyOutput> {
            Ok(PolicyOutput {
                chunks: Tensor::uniform(obs.rows(), 8, 1.0, rng),
                trace: None,
                logprob: None,
            })
        }
    }
    let ro = r.collect(&RandomPolicy, 60, 0).unwrap();
    assert!(!ro.episodes.is_empty());
    for e in &ro.episodes {
        assert!(e.reward == 0.0 || e.reward == 1.0);
        assert_eq!(e.reward == 1.0, e.event == Event::GoalTop);
        assert_eq!(e.states.len(), e.length + 1);
        assert_eq!(e.actions.len(), e.length);
    }
    for s in &ro.steps {
        for i in 0..4 {
            assert!(!(s.terminated[i] && s.truncated[i]));
            assert!(s.rewards[i] == 0.0 || s.rewards[i] == 1.0);
        }
    }
    let text = trajectories_to_jsonl(&ro.episodes).unwrap();
    assert_eq!(trajectories_from_jsonl(&text).unwrap(), ro.episodes);
    assert!(trajectories_from_jsonl("{not json").is_err());
}

use std::sync::atomic::{AtomicUsize, Ordering};

use riskloop_core::engine::{run_problem, EngineConfig, EngineError, StreamState};
use riskloop_core::providers::{
    ProviderError, Providers, Sample, Sampler, SamplerRequest, SyntheticProvider, SyntheticTask,
};
use riskloop_core::streams::{self, run_stream};
use riskloop_core::trace::{replay, KRule};
use riskloop_core::types::{Mode, ProblemSpec, RecoveryMode, Verdict};

fn two_way() -> SyntheticTask {
    SyntheticTask::single("two-way", &[("right", 0.7), ("wrong", 0.3)], 0)
}

fn success_rate(cfg: &EngineConfig, runs: u64) -> f64 {
    let task = two_way();
    let p = SyntheticProvider::new([task.clone()]).unwrap();
    let spec = task.problem_spec();
    let mut solved = 0;
    for seed in 0..runs {
        let cfg = EngineConfig { seed, ..cfg.clone() };
        let mut stream = StreamState::new(&cfg);
        let out = run_problem(&spec, &cfg, Providers::new(&p, &p, &p), &mut stream, "s").unwrap();
        assert!(out.trace.iter().all(|r| r.mode == Mode::Direct));
        solved += out.result.solved as usize;
    }
    solved as f64 / runs as f64
}

#[test]
fn without_branching_success_tracks_correct_mass() {
    let cfg = EngineConfig {
        disable_branching: true,
        disable_refinement: true,
        ..EngineConfig::default()
    };
    let rate = success_rate(&cfg, 1000);
    assert!((rate - 0.7).abs() <= 0.05, "rate {rate}");
}

#[test]
fn without_branching_refinement_still_recovers() {
    let cfg = EngineConfig {
        disable_branching: true,
        ..EngineConfig::default()
    };
    let rate = success_rate(&cfg, 300);
    assert!(rate > 0.95, "rate {rate}");
}

#[test]
fn without_sensing_uncertainty_is_constant() {
    let cfg = EngineConfig {
        disable_sensing: true,
        ..EngineConfig::default()
    };
    let run = run_stream(&streams::mixed_ambiguity(20, 1), &cfg, "ns").unwrap();
    for o in &run.outputs {
        for r in &o.trace {
            assert_eq!(r.u, 0.5);
            assert!(!r.sensing && r.edges.is_empty() && r.cluster_sizes.is_empty());
        }
        assert!(replay(&o.trace, 1e-9).ok());
    }
}

#[test]
fn without_calibration_temperature_is_frozen() {
    let cfg = EngineConfig {
        disable_calibration: true,
        ..EngineConfig::default()
    };
    let run = run_stream(&streams::overconfident(60, 2), &cfg, "nc").unwrap();
    assert_eq!(run.state.calibration.temperature, 1.0);
    assert!(run.state.calibration.observations.is_empty());
    assert!(run.outputs.iter().flat_map(|o| &o.trace).all(|r| r.temperature == 1.0));
}

#[test]
fn without_refinement_failure_returns_immediately() {
    let cfg = EngineConfig {
        disable_refinement: true,
        ..EngineConfig::default()
    };
    let run = run_stream(&streams::adversarial(30, 3), &cfg, "nr").unwrap();
    for o in &run.outputs {
        assert_eq!(o.result.refinements_used, 0);
        assert_eq!(o.trace.len(), 1);
        assert!(o.trace[0].refinement.is_none());
    }
}

#[test]
fn fixed_k_routes_everything_to_branch() {
    let cfg = EngineConfig {
        fixed_k: Some(7),
        ..EngineConfig::default()
    };
    let run = run_stream(&streams::mixed_ambiguity(30, 4), &cfg, "fk").unwrap();
    for r in run.outputs.iter().flat_map(|o| &o.trace) {
        assert_eq!((r.mode, r.k, r.k_rule), (Mode::Branch, 7, KRule::Fixed));
        assert_eq!(r.candidates.len(), 7);
    }
}

#[test]
fn full_restart_invalidates_every_step() {
    let cfg = EngineConfig {
        recovery_mode: RecoveryMode::FullRestart,
        ..EngineConfig::default()
    };
    let run = run_stream(&[streams::diamond()], &cfg, "fr").unwrap();
    let o = &run.outputs[0];
    let cycles: Vec<_> = o.trace.iter().filter_map(|r| r.refinement.as_ref()).collect();
    assert!(!cycles.is_empty());
    for (c, r) in cycles.iter().zip(o.trace.iter().filter(|r| r.refinement.is_some())) {
        assert_eq!(c.root_position, 0);
        assert!(c.invalidated.contains(&r.step_id));
        assert_eq!(c.invalidated.len(), r.position + 1);
    }
    assert!(replay(&o.trace, 1e-9).ok());
}

#[test]
fn refined_steps_are_never_direct() {
    for mode in [
        RecoveryMode::RootCause,
        RecoveryMode::FullRestart,
        RecoveryMode::LocalRetry,
    ] {
        let cfg = EngineConfig {
            recovery_mode: mode,
            initial_temperature: 0.5,
            ..EngineConfig::default()
        };
        let run = run_stream(&streams::graded_ambiguity(60, 5), &cfg, "rd").unwrap();
        for o in &run.outputs {
            for (i, r) in o.trace.iter().enumerate() {
                if let Some(f) = &r.refinement {
                    let next = o.trace[i + 1..].iter().find(|n| n.position == f.root_position);
                    if let Some(n) = next {
                        assert_ne!(n.mode, Mode::Direct);
                    }
                }
            }
        }
    }
}

struct FlakySampler {
    inner: SyntheticProvider,
    calls: AtomicUsize,
    fail_after: usize,
}

impl Sampler for FlakySampler {
    fn sample(&self, problem: &ProblemSpec, request: &SamplerRequest) -> Result<Vec<Sample>, ProviderError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.fail_after {
            return Err(ProviderError::Transport("connection reset".into()));
        }
        self.inner.sample(problem, request)
    }
}

#[test]
fn provider_failure_carries_the_partial_trace() {
    let task = streams::diamond();
    let inner = SyntheticProvider::new([task.clone()]).unwrap();
    let sampler = FlakySampler {
        inner: inner.clone(),
        calls: AtomicUsize::new(0),
        fail_after: 12,
    };
    let cfg = EngineConfig {
        parallelism: 1,
        ..EngineConfig::default()
    };
    let mut stream = StreamState::new(&cfg);
    let err = run_problem(
        &task.problem_spec(),
        &cfg,
        Providers::new(&sampler, &inner, &inner),
        &mut stream,
        "flaky",
    )
    .unwrap_err();
    match err {
        EngineError::Provider { source, trace } => {
            assert_eq!(source, ProviderError::Transport("connection reset".into()));
            assert_eq!(trace.len(), 2);
            assert!(trace.iter().all(|r| r.verdict == Verdict::Pass));
        }
        other => panic!("unexpected {other:?}"),
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the criteria execute one
//! after another; the timing-sensitive ones would otherwise compete for cores
//! with the training runs.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use a2c2::asyncexec::{run_episode, validate_schedule, Schedule, Violation};
use a2c2::bench::{compare, measure_latency, Method, SweepReport};
use a2c2::config::{Origin, RunConfig};
use a2c2::datastore::{
    build_dcor, dcor_record_count, record_expert_dataset, AugmentOptions, BaseDataset, Episode, Normalizer, ReplaySource,
};
use a2c2::envsim::{self, EnvConfig, EnvKind};
use a2c2::numkit::{MlpSpec, MlpWeights};
use a2c2::pipeline::{gradcheck_suite, run_pipeline, PipelineOutcome};
use a2c2::policies::{
    held_out_records, train_correction, BaseArch, BasePolicy, ChunkPolicy, CorrectionHead, HeadArch, TrainConfig,
};
use a2c2::wire::{client_run, serve, ClientConfig, Connection, Payload, ServerConfig};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn valid_schedules(h: usize) -> Vec<Schedule> {
    let mut out = Vec::new();
    for d in 0..=h {
        for e in 1..=h {
            if let Ok(s) = validate_schedule(h, e, d) {
                out.push(s);
            }
        }
    }
    out
}

/// Untrained base at the default architecture.
fn fresh_base(env: &EnvConfig, seed: u64) -> BasePolicy {
    let arch = BaseArch::default();
    let mut sizes = vec![env.obs_dim()];
    sizes.extend(&arch.hidden);
    sizes.push(arch.horizon * env.act_dim());
    let w = MlpWeights::init(&MlpSpec::new(sizes, arch.layer_norm, seed)).unwrap();
    BasePolicy::new(env.kind, arch.horizon, w, Normalizer::identity(env.obs_dim()), Normalizer::identity(env.act_dim())).unwrap()
}

fn gradient_correctness() -> Check {
    let t = Instant::now();
    let results = gradcheck_suite(16, 3, 2024).map_err(|e| e.to_string())?;
    let worst = results.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    ensure(
        results.len() >= 16 && worst < 1e-3 && secs < 30.0,
        format!("{} specs, max relative error {worst:.2e}, {secs:.1}s", results.len()),
    )
}

fn residual_identity() -> Check {
    let env = EnvConfig::pursuit();
    let base = fresh_base(&env, 5);
    let zero = CorrectionHead::zeros(env.kind, env.obs_dim(), env.act_dim(), 8, &HeadArch::default()).unwrap();
    let schedules = valid_schedules(8);
    let mut checked = 0;
    for s in &schedules {
        for seed in 0..32 {
            let naive = run_episode(&env, &base, None, *s, seed).unwrap();
            let fixed = run_episode(&env, &base, Some(&zero), *s, seed).unwrap();
            if !naive.bit_eq(&fixed) {
                return Err(format!("trace differs at d={} e={} seed {seed}", s.delay, s.exec));
            }
            checked += 1;
        }
    }
    Ok(format!("{} schedules x 32 seeds, {checked} trace pairs bit-identical", schedules.len()))
}

fn synchronous_equivalence() -> Check {
    let mut compared = 0;
    for env in [EnvConfig::pursuit(), EnvConfig::holdzone()] {
        let base = fresh_base(&env, 9);
        for seed in 0..32u64 {
            let trace = run_episode(&env, &base, None, Schedule::new(8, 1, 0).unwrap(), seed).unwrap();
            // Replan every step and execute the first action.
            let mut state = envsim::reset(&env, seed);
            let mut t = 0;
            while !state.done {
                let chunk = base.predict_chunk(&state.observation()).unwrap();
                let a = chunk.chunk.action(0).to_vec();
                state.step(&a).unwrap();
                let s = trace.steps.get(t).ok_or_else(|| format!("{} seed {seed}: trace too short", env.kind))?;
                let same = s.executed.iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()) && s.state_hash == state.state_hash();
                if !same {
                    return Err(format!("{} seed {seed}: step {t} differs", env.kind));
                }
                t += 1;
            }
            if t != trace.steps.len() || state.success != trace.success {
                return Err(format!("{} seed {seed}: length or outcome differs", env.kind));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} episodes bit-identical to the per-step replanning loop"))
}

fn dcor_combinatorics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for case in 0..100 {
        let t_len = rng.gen_range(1..=50usize);
        let h = rng.gen_range(1..=10usize);
        let ep = Episode {
            seed: case,
            obs: (0..t_len * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            actions: (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let ds = BaseDataset::new(EnvKind::HoldZone, 2, 1, vec![ep]).unwrap();
        let dcor = build_dcor(&ds, &ReplaySource::new(2, 1, h), h, AugmentOptions::default()).unwrap();
        let mut brute = 0;
        for t in 0..t_len {
            for k in 0..h {
                if t >= k {
                    brute += 1;
                }
            }
        }
        let closed = if t_len >= h { h * t_len - h * (h - 1) / 2 } else { t_len * (t_len + 1) / 2 };
        if dcor.len() != brute || brute != closed || dcor_record_count(t_len, h) != closed {
            return Err(format!("T={t_len} H={h}: built {} brute {brute} closed {closed}", dcor.len()));
        }
    }
    Ok("100 random (T, H) cases match exactly".into())
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
enum Found {
    ZeroHorizon,
    Empty,
    Gap,
    Exhausted,
}

/// Walks the request/adoption timeline step by step and records every way it
/// breaks: a cycle start that finds the previous request still running, or a
/// step whose chunk index runs past the horizon.
fn simulate_timeline(h: usize, e: usize, d: usize) -> Vec<Found> {
    if h == 0 {
        return vec![Found::ZeroHorizon];
    }
    if e == 0 {
        return vec![Found::Empty];
    }
    let mut found = Vec::new();
    let mut active_src = 0usize;
    let mut pending: Option<(usize, usize)> = None;
    for t in 0..(4 * (h + e + d) + 8) {
        if let Some((src, at)) = pending {
            if at <= t {
                active_src = src;
                pending = None;
            }
        }
        if t > 0 && t % e == 0 {
            if pending.is_some() {
                found.push(Found::Gap);
            } else {
                pending = Some((t, t + d));
            }
        }
        if let Some((src, at)) = pending {
            if at <= t {
                active_src = src;
                pending = None;
            }
        }
        if t - active_src >= h {
            found.push(Found::Exhausted);
        }
    }
    found.dedup();
    found
}

fn schedule_validity() -> Check {
    let mut triples = 0;
    for h in 0..=12usize {
        for e in 0..=h + 2 {
            for d in 0..=h + 2 {
                triples += 1;
                let sim = simulate_timeline(h, e, d);
                let agrees = match validate_schedule(h, e, d) {
                    Ok(_) => sim.is_empty(),
                    Err(v) => {
                        let kind = match v {
                            Violation::ZeroHorizon => Found::ZeroHorizon,
                            Violation::EmptyExecution => Found::Empty,
                            Violation::WaitingGap { .. } => Found::Gap,
                            Violation::ChunkExhausted { .. } => Found::Exhausted,
                        };
                        sim.contains(&kind)
                    }
                };
                if !agrees {
                    return Err(format!("H={h} e={e} d={d}: simulation found {sim:?}"));
                }
            }
        }
    }
    Ok(format!("{triples} (H, e, d) triples agree with the timeline simulation"))
}

fn mean_abs_prediction(head: &CorrectionHead, dcor: &a2c2::datastore::CorrectionDataset, idx: &[usize]) -> Vec<f64> {
    let mut sum = vec![0.0f64; head.act_dim];
    let mut signed = vec![0.0f64; head.act_dim];
    for &i in idx {
        let r = dcor.record(i);
        let p = head.predict_residual(&r.obs, &r.base_action, r.k as usize, &r.latent, &r.chunk).unwrap();
        for c in 0..p.len() {
            sum[c] += (p[c] as f64).abs();
            signed[c] += p[c] as f64;
        }
    }
    let n = idx.len() as f64;
    sum.iter().chain(&signed).map(|v| v / n).collect()
}

fn oracle_residual_convergence() -> Check {
    let t = Instant::now();
    let env = EnvConfig::pursuit();
    let ds = record_expert_dataset(&env, 300, 17).unwrap();
    let cfg = TrainConfig::head_defaults();
    let arch = HeadArch::default();

    let exact = build_dcor(&ds, &ReplaySource::new(env.obs_dim(), env.act_dim(), 8), 8, AugmentOptions::default()).unwrap();
    let (head, _) = train_correction(&exact, &arch, &cfg).unwrap();
    let held = held_out_records(&exact, &cfg);
    let m = mean_abs_prediction(&head, &exact, &held);
    let zero_err = m[..env.act_dim()].iter().sum::<f64>() / env.act_dim() as f64;

    let bias = [0.3f32, -0.2];
    let biased = build_dcor(
        &ds,
        &ReplaySource::new(env.obs_dim(), env.act_dim(), 8).with_offset(bias.to_vec()),
        8,
        AugmentOptions::default(),
    )
    .unwrap();
    let (head, _) = train_correction(&biased, &arch, &cfg).unwrap();
    let held = held_out_records(&biased, &cfg);
    let m = mean_abs_prediction(&head, &biased, &held);
    let recovered = &m[env.act_dim()..];
    let bias_err = recovered.iter().zip(&bias).map(|(r, b)| (r + *b as f64).abs()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    ensure(
        zero_err < 1e-3 && bias_err < 0.02 && secs < 300.0,
        format!(
            "held-out mean |da| {zero_err:.2e}; base offset {:?}, head learned [{:.4}, {:.4}] (max err {bias_err:.4}); {secs:.1}s",
            bias, recovered[0], recovered[1]
        ),
    )
}

fn rate(r: &SweepReport, m: Method, d: usize, e: usize) -> Result<f64, String> {
    r.cell(m, d, e).map(|c| c.success_rate).ok_or_else(|| format!("missing cell {m} d={d} e={e}"))
}

fn delay_degradation(p: &PipelineOutcome) -> Check {
    let mut rates = Vec::new();
    for d in 0..=4 {
        let c = p.report.cell(Method::Naive, d, d.max(1)).ok_or(format!("missing naive d={d}"))?;
        if c.n < 512 {
            return Err(format!("only {} rollouts", c.n));
        }
        rates.push(c.success_rate);
    }
    let monotone = rates.windows(2).all(|w| w[1] <= w[0] + 0.03);
    ensure(
        monotone,
        format!("naive success for d=0..4 (e=max(d,1)): {}", rates.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ")),
    )
}

fn delay_robustness(p: &PipelineOutcome) -> Check {
    let naive = p.report.cell(Method::Naive, 4, 4).ok_or("missing naive d4e4")?;
    let fixed = p.report.cell(Method::A2c2, 4, 4).ok_or("missing a2c2 d4e4")?;
    let cmp = compare(fixed, naive).map_err(|e| e.to_string())?;
    let disjoint = fixed.ci_low > naive.ci_high;
    ensure(
        naive.n >= 512 && cmp.difference >= 0.10 && disjoint,
        format!(
            "d=4 e=4: naive {:.3} [{:.3}, {:.3}], a2c2 {:.3} [{:.3}, {:.3}], gap {:+.1} pp",
            naive.success_rate,
            naive.ci_low,
            naive.ci_high,
            fixed.success_rate,
            fixed.ci_low,
            fixed.ci_high,
            100.0 * cmp.difference
        ),
    )
}

fn long_horizon_robustness(dir: &Path) -> Check {
    let mut cfg = RunConfig::default();
    for (k, v) in [("task", "holdzone"), ("episodes", "250"), ("base.epochs", "16"), ("sweep.cells", "0:1,0:7")] {
        cfg.set(k, v, Origin::Flag).map_err(|e| e.to_string())?;
    }
    let p = run_pipeline(&cfg, dir).map_err(|e| e.to_string())?;
    let r = &p.report;
    let naive_drop = rate(r, Method::Naive, 0, 1)? - rate(r, Method::Naive, 0, 7)?;
    let fixed_drop = rate(r, Method::A2c2, 0, 1)? - rate(r, Method::A2c2, 0, 7)?;
    let n = r.cells.iter().map(|c| c.n).min().unwrap_or(0);
    ensure(
        n >= 512 && naive_drop - fixed_drop >= 0.05,
        format!(
            "holdzone d=0, e=1 to e=7 drop: naive {:.1} pp, a2c2 {:.1} pp",
            100.0 * naive_drop,
            100.0 * fixed_drop
        ),
    )
}

fn harness_equivalence(p: &PipelineOutcome) -> Check {
    let env = EnvConfig::new(p.base.task);
    let dt = 0.02;
    let server = serve(
        ServerConfig {
            bind: "127.0.0.1:0".into(),
            delay: Duration::from_secs_f64(3.0 * dt),
            jitter: Duration::ZERO,
            seed: 0,
        },
        Arc::new(p.base.clone()),
    )
    .map_err(|e| e.to_string())?;
    let addr = server.local_addr().to_string();
    let schedule = Schedule::new(8, 4, 3).unwrap();
    let mut worst = 0.0f32;
    let mut steps = 0;
    for seed in 0..8u64 {
        let cfg = ClientConfig {
            addr: addr.clone(),
            dt,
            schedule,
            env,
            seed: 900 + seed,
        };
        let net = client_run(&cfg, None).map_err(|e| e.to_string())?;
        let sim = run_episode(&env, &p.base, None, schedule, 900 + seed).map_err(|e| e.to_string())?;
        if net.measured_delays.iter().any(|&d| d != 3) {
            return Err(format!("seed {seed}: measured delays {:?}", net.measured_delays));
        }
        if net.trace.steps.len() != sim.steps.len() || net.trace.success != sim.success {
            return Err(format!("seed {seed}: {} vs {} steps", net.trace.steps.len(), sim.steps.len()));
        }
        for (a, b) in net.trace.steps.iter().zip(&sim.steps) {
            if a.k != b.k {
                return Err(format!("seed {seed}: chunk index differs at step {}", a.t));
            }
            for (x, y) in a.executed.iter().zip(&b.executed) {
                worst = worst.max((x - y).abs());
            }
        }
        steps += sim.steps.len();
    }

    let mut conn = Connection::connect(&addr).map_err(|e| e.to_string())?;
    let obs = envsim::reset(&env, 0).observation();
    conn.send(Payload::Obs(obs.clone())).map_err(|e| e.to_string())?;
    let second = conn.send(Payload::Obs(obs)).map_err(|e| e.to_string())?;
    let (m, _) = conn.recv().map_err(|e| e.to_string())?;
    let busy = m.request_id == second && matches!(m.payload, Payload::Err { code: a2c2::wire::protocol::code::BUSY, .. });
    conn.close();
    server.shutdown();
    ensure(
        worst <= 1e-6 && busy,
        format!("8 seeds, {steps} steps, max action difference {worst:.1e}; double-send answered BUSY: {busy}"),
    )
}

fn latency_asymmetry(p: &PipelineOutcome) -> Check {
    let env = EnvConfig::new(p.base.task);
    let obs = envsim::reset(&env, 1).observation();
    let l = measure_latency(&p.base, &p.head, &obs, 200).map_err(|e| e.to_string())?;
    ensure(
        l.ratio() >= 20.0 && l.head_seconds < 0.05,
        format!(
            "base {:.1} us, head {:.2} us per step, ratio {:.1}x",
            l.base_seconds * 1e6,
            l.head_seconds * 1e6,
            l.ratio()
        ),
    )
}

fn end_to_end_budget(elapsed: Duration, gates: &[(u32, bool)]) -> Check {
    let failing: Vec<u32> = gates.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    ensure(
        elapsed < Duration::from_secs(600) && failing.is_empty(),
        format!("default pursuit pipeline took {:.1}s; failing gates: {failing:?}", elapsed.as_secs_f64()),
    )
}

struct Suite {
    results: Vec<(u32, &'static str, bool)>,
}

impl Suite {
    fn run(&mut self, id: u32, name: &'static str, f: impl FnOnce() -> Check) -> bool {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (ok, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!(
            "criterion {id:>2} {name}: {} ({detail}) [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        self.results.push((id, name, ok));
        ok
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        // Answer libtest-style discovery without running anything.
        return ExitCode::SUCCESS;
    }
    let mut suite = Suite { results: Vec::new() };
    suite.run(1, "gradient correctness", gradient_correctness);
    suite.run(2, "residual identity", residual_identity);
    suite.run(3, "synchronous equivalence", synchronous_equivalence);
    suite.run(4, "correction dataset combinatorics", dcor_combinatorics);
    suite.run(5, "schedule validity", schedule_validity);
    suite.run(6, "oracle residual convergence", oracle_residual_convergence);

    let dir = tempfile::tempdir().expect("temp dir");
    let started = Instant::now();
    let pipeline = run_pipeline(&RunConfig::default(), &dir.path().join("pursuit"));
    let elapsed = started.elapsed();
    match pipeline {
        Ok(p) => {
            for (stage, d) in &p.timings {
                println!("  pursuit pipeline {stage}: {:.1}s", d.as_secs_f64());
            }
            let c7 = suite.run(7, "delay degradation trend", || delay_degradation(&p));
            let c8 = suite.run(8, "delay robustness", || delay_robustness(&p));
            suite.run(9, "long-horizon robustness", || long_horizon_robustness(&dir.path().join("holdzone")));
            suite.run(10, "harness equivalence", || harness_equivalence(&p));
            let c11 = suite.run(11, "latency asymmetry", || latency_asymmetry(&p));
            suite.run(12, "end-to-end budget", || end_to_end_budget(elapsed, &[(7, c7), (8, c8), (11, c11)]));
        }
        Err(e) => {
            for (id, name) in [
                (7, "delay degradation trend"),
                (8, "delay robustness"),
                (10, "harness equivalence"),
                (11, "latency asymmetry"),
                (12, "end-to-end budget"),
            ] {
                suite.run(id, name, || Err(format!("pursuit pipeline failed: {e}")));
            }
            suite.run(9, "long-horizon robustness", || long_horizon_robustness(&dir.path().join("holdzone")));
        }
    }

    let failed: Vec<_> = suite.results.iter().filter(|r| !r.2).collect();
    println!(
        "acceptance: {} passed, {} failed",
        suite.results.len() - failed.len(),
        failed.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

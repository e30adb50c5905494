//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//! Lines are written straight to stdout so they show up without
//! `--nocapture`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use asyncsim::bench_ingest::{
    device_speedup, generation_summary, strategy_comparison, Averaging, BenchmarkRecord,
};
use asyncsim::microbench::{run_sweep, speedup_table, sweep_csv, OccupancyMode, SweepConfig, SweepRow};
use asyncsim::patterns::{
    build_drop_off, build_overlap, build_register_bypass, build_sync_baseline, check_schedule, emulate,
};
use asyncsim::sim::occupancy;
use asyncsim::{simulate, Grid, MachineParams, PatternKind, Precision, Roofline, Step, WaitKind, Workload};
use asyncsim_cli::{specs_report, Metric, SpecsArgs, SweepArgs};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn sweep_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("sweeps/acceptance.json")
}

fn specs(metric: Metric, precision: Precision, pairs: &[&str]) -> asyncsim_cli::Report {
    specs_report(&SpecsArgs {
        specs: "builtin".into(),
        metric,
        precision,
        format: asyncsim_cli::Format::Csv,
        pairs: pairs.iter().map(|s| s.to_string()).collect(),
    })
    .expect("builtin specs")
}

fn derived_metrics() -> Verdict {
    let bf = specs(Metric::Bf, Precision::Fp64, &[]);
    let col = bf.column("bf_fp64").unwrap();
    let rtx = bf.find(&[("name", "RTX 2060 SUPER")]).unwrap()[col].as_f64().unwrap();
    let up = specs(Metric::Upgrade, Precision::Fp32, &["V100:A100"]);
    let row = up.find(&[("from", "V100"), ("to", "A100")]).unwrap();
    let get = |name: &str| row[up.column(name).unwrap()].as_f64().unwrap();
    let (f, b, t) = (get("flop_ratio"), get("bw_ratio"), get("t_speedup"));
    let near = |x: f64, want: f64| (x - want).abs() <= 0.01;
    check(
        near(rtx, 2.0) && near(f, 1.38) && near(b, 1.73) && near(t, 1.38),
        format!("RTX 2060 SUPER fp64 B/F {rtx:.4}; V100->A100 {f:.3}/{b:.3}/{t:.3}"),
    )
}

fn roofline_properties(roof: &Roofline, rows: &[SweepRow]) -> Verdict {
    let ridge = roof.ridge_point();
    let mut prev = roof.attainable(0.0);
    for i in 0..=100_000 {
        let ai = 10f64.powf(-4.0 + 8.0 * i as f64 / 100_000.0);
        let y = roof.attainable(ai);
        if y < prev {
            return Err(format!("attainable drops at ai={ai}"));
        }
        prev = y;
    }
    let left = roof.attainable(ridge * (1.0 - 1e-12));
    let right = roof.attainable(ridge * (1.0 + 1e-12));
    let jump = (left - right).abs() / right;
    if jump >= 1e-9 {
        return Err(format!("discontinuity {jump:e} at the ridge"));
    }
    let mut worst = 0.0f64;
    for r in rows {
        if let Some(g) = r.gflops {
            worst = worst.max(g / roof.attainable(r.ai));
        }
    }
    check(
        worst <= 1.0 + 1e-6,
        format!("monotone, ridge jump {jump:.1e}, max achieved/roof {worst:.4} over {} rows", rows.len()),
    )
}

fn reference(input: &[f32], iterations: u32) -> Vec<f32> {
    input
        .iter()
        .map(|&x0| {
            let mut x = x0;
            for _ in 0..iterations {
                x = 0.5f32 * x + 0.5f32;
            }
            x
        })
        .collect()
}

fn build(p: PatternKind, n: usize, te: usize, it: u32, k: usize) -> Workload {
    match p {
        PatternKind::SyncBaseline => build_sync_baseline(n, te, it),
        PatternKind::RegisterBypass => build_register_bypass(n, te, it),
        PatternKind::Overlap => build_overlap(n, te, it, k, WaitKind::Pipeline),
        PatternKind::DropOff => build_drop_off(n * te, it),
    }
    .unwrap()
}

fn functional_equivalence() -> Verdict {
    let strategy = (
        prop::sample::select(PatternKind::ALL.to_vec()),
        1usize..=64,
        1usize..=1024,
        0u32..=32,
        any::<u64>(),
        any::<u64>(),
    );
    let cases = std::cell::Cell::new(0u32);
    let result = runner(100).run(&strategy, |(p, n, te, it, kseed, xseed)| {
        // Overlap needs at least two tiles to double-buffer
        let n = if p == PatternKind::Overlap { n.max(2) } else { n };
        let k = if n > 1 { 2 + (kseed as usize) % (n - 1) } else { 2 };
        let w = build(p, n, te, it, k);
        let mut state = xseed;
        let input: Vec<f32> = (0..n * te).map(|_| unit(&mut state)).collect();
        let got = emulate(&w, &input).unwrap();
        let want = reference(&input, it);
        prop_assert!(got.iter().map(|x| x.to_bits()).eq(want.iter().map(|x| x.to_bits())));
        cases.set(cases.get() + 1);
        Ok(())
    });
    match result {
        Ok(()) => Ok(format!("{} randomized cases bit-identical", cases.get())),
        Err(e) => Err(e.to_string()),
    }
}

/// splitmix64 mapped to [0, 1)
fn unit(state: &mut u64) -> f32 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn micro_instances() -> Verdict {
    let m = MachineParams {
        clock: 1.0,
        sm_count: 1,
        max_warps_per_sm: 64,
        max_blocks_per_sm: 32,
        shared_mem_per_sm: 1 << 20,
        global_latency: 100,
        global_bandwidth: 32.0,
        async_channels_per_sm: 4,
        async_issue_cost: 1,
        sync_issue_cost: 4,
        flops_per_cycle_per_warp: 64,
        warp_width: 32,
        barrier_wait_latency: 0,
    };
    let grid = Grid::new(1, 32);
    let sync = build_sync_baseline(1, 32, 0).unwrap().without_write_back();
    let asyn = build_register_bypass(1, 32, 0)
        .unwrap()
        .with_wait_kind(WaitKind::Pipeline)
        .without_write_back();
    let s = simulate(&sync, &m, grid).map_err(|e| e.to_string())?.elapsed;
    let a = simulate(&asyn, &m, grid).map_err(|e| e.to_string())?.elapsed;
    check(s == 108 && a == 105, format!("sync {s} cycles, async {a} cycles"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn calibration(rows: &[SweepRow], ridge: f64) -> Verdict {
    let low = |r: &&SweepRow| r.ai <= ridge / 8.0;
    let high = |r: &&SweepRow| r.ai >= 4.0 * ridge;
    let full = |r: &&SweepRow| r.coord.occupancy == OccupancyMode::Full;
    let overlap_mean = |w: WaitKind| {
        let v: Vec<f64> = rows
            .iter()
            .filter(full)
            .filter(low)
            .filter(|r| r.pattern == PatternKind::Overlap && r.wait == Some(w))
            .filter_map(|r| r.speedup)
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let (Some(pipe), Some(barrier)) = (overlap_mean(WaitKind::Pipeline), overlap_mean(WaitKind::Barrier)) else {
        return Err("sweep has no low-intensity overlap rows".into());
    };
    let a = (1.05..=1.45).contains(&pipe);
    let b = (1.02..=1.40).contains(&barrier) && barrier <= pipe;

    let range = |it: &mut dyn Iterator<Item = f64>| {
        it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
    };
    let hi_rows: Vec<&SweepRow> = rows.iter().filter(high).filter(|r| r.pattern.is_async()).collect();
    let (c_lo, c_hi) = range(&mut hi_rows.iter().filter(|r| full(r)).filter_map(|r| r.speedup));
    let (s_lo, s_hi) = range(&mut hi_rows.iter().filter(|r| !full(r)).filter_map(|r| r.speedup));
    let c = c_lo >= 0.90 && c_hi <= 1.02;

    // slowdown = starved elapsed / full elapsed at the same coordinate
    let mut slow: BTreeMap<(PatternKind, Option<WaitKind>), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(low).filter(|r| !full(r)) {
        let mut coord = r.coord;
        coord.occupancy = OccupancyMode::Full;
        let twin = rows.iter().find(|x| x.coord == coord && x.pattern == r.pattern && x.wait == r.wait);
        if let (Some(s), Some(f)) = (r.elapsed_cycles, twin.and_then(|t| t.elapsed_cycles)) {
            slow.entry((r.pattern, r.wait)).or_default().push(s / f);
        }
    }
    let sync_slow = slow.get(&(PatternKind::SyncBaseline, None)).map(|v| mean(v));
    let async_slow: Vec<(String, f64)> = slow
        .iter()
        .filter(|((p, _), _)| p.is_async())
        .map(|((p, w), v)| (format!("{p}-{}", w.map_or("none", WaitKind::as_str)), mean(v)))
        .collect();
    let d = match sync_slow {
        Some(s) => !async_slow.is_empty() && async_slow.iter().all(|(_, a)| s > *a),
        None => false,
    };
    let async_txt: Vec<String> = async_slow.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
    check(
        a && b && c && d,
        format!(
            "(a) pipeline {pipe:.3} {}; (b) barrier {barrier:.3} {}; (c) full-occupancy high-ai [{c_lo:.3}, {c_hi:.3}] {} \
             (starved rows [{s_lo:.3}, {s_hi:.3}]); (d) starved slowdown sync {:.3} vs {} {}",
            ok_word(a),
            ok_word(b),
            ok_word(c),
            sync_slow.unwrap_or(f64::NAN),
            async_txt.join(", "),
            ok_word(d),
        ),
    )
}

fn ok_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "OUT OF BAND"
    }
}

fn determinism(first_csv: &str) -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("sweep.csv");
    asyncsim_cli::cmd_sweep(&SweepArgs {
        sweep: sweep_path(),
        machine: "a100-like".into(),
        out: Some(out.clone()),
        seed: None,
    })
    .map_err(|e| e.to_string())?;
    let second = std::fs::read(&out).map_err(|e| e.to_string())?;
    check(
        second == first_csv.as_bytes(),
        format!("{} bytes, identical: {}", second.len(), second == first_csv.as_bytes()),
    )
}

fn rec(device: &str, bench: &str, variant: &str, input: &str, t: f64) -> BenchmarkRecord {
    BenchmarkRecord {
        device: device.into(),
        benchmark: bench.into(),
        variant: variant.into(),
        input_label: input.into(),
        times: vec![t],
    }
}

fn aggregation() -> Verdict {
    let gens = vec![
        rec("old", "p", "baseline", "-", 2.0),
        rec("old", "q", "baseline", "-", 4.0),
        rec("new", "p", "baseline", "-", 1.0),
        rec("new", "q", "baseline", "-", 1.0),
    ];
    let s = generation_summary(&gens, &["old".into(), "new".into()], Averaging::Arithmetic)
        .map_err(|e| e.to_string())?;
    let (m, sd) = (s.pairs[0].mean, s.pairs[0].stddev);
    let strat = vec![
        rec("A100", "lud", "baseline", "8192", 1.32),
        rec("A100", "lud", "register_bypass", "8192", 1.0),
        rec("A100", "hotspot", "baseline", "1024", 1.18),
        rec("A100", "hotspot", "overlap", "1024", 1.0),
    ];
    let lud = strategy_comparison(&strat, "A100", "lud").map_err(|e| e.to_string())?["8192"]["register_bypass"];
    let hot = strategy_comparison(&strat, "A100", "hotspot").map_err(|e| e.to_string())?["1024"]["overlap"];
    check(
        m == 3.0 && (sd - 1.414).abs() < 5e-4 && lud == 1.32 && hot == 1.18 && (1.12..=1.23).contains(&hot),
        format!("mean {m} sd {sd:.4}; LUD {lud}; Hotspot {hot}"),
    )
}

fn invariants() -> Verdict {
    const CASES: u32 = 1000;
    let mut report = Vec::new();
    let fail = |name: &str, e: String| format!("{name}: {e}");

    let times = || prop::collection::vec(1e-3f64..1e3, 1..5);
    let cells = prop::collection::vec((times(), times()), 1..6);
    let to_records = |cells: &[(Vec<f64>, Vec<f64>)], scale: f64| {
        let mut out = Vec::new();
        for (i, (a, b)) in cells.iter().enumerate() {
            for (dev, ts) in [("a", a), ("b", b)] {
                out.push(BenchmarkRecord {
                    device: dev.into(),
                    benchmark: format!("k{i}"),
                    variant: "baseline".into(),
                    input_label: "-".into(),
                    times: ts.iter().map(|t| t * scale).collect(),
                });
            }
        }
        out
    };

    runner(CASES)
        .run(&cells, |c| {
            let recs = to_records(&c, 1.0);
            let ab = device_speedup(&recs, "a", "b").unwrap();
            let ba = device_speedup(&recs, "b", "a").unwrap();
            for (k, r) in &ab {
                prop_assert!((r * ba[k] - 1.0).abs() <= 4.0 * f64::EPSILON);
            }
            Ok(())
        })
        .map_err(|e| fail("antisymmetry", e.to_string()))?;
    report.push("antisymmetry");

    runner(CASES)
        .run(&(cells.clone(), 1e-3f64..1e3), |(c, k)| {
            let order = ["a".to_string(), "b".to_string()];
            let s0 = generation_summary(&to_records(&c, 1.0), &order, Averaging::Arithmetic).unwrap();
            let s1 = generation_summary(&to_records(&c, k), &order, Averaging::Arithmetic).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0);
            let (p0, p1) = (&s0.pairs[0], &s1.pairs[0]);
            prop_assert!(p0.per_benchmark.iter().all(|(b, r)| close(*r, p1.per_benchmark[b])));
            prop_assert!(close(p0.mean, p1.mean) && close(p0.stddev, p1.stddev));
            Ok(())
        })
        .map_err(|e| fail("scale invariance", e.to_string()))?;
    report.push("scale invariance");

    let machine = (1u32..=64, 1u64..=256 * 1024, 1u32..=64, prop::sample::select(vec![8u32, 16, 32, 64]));
    runner(CASES)
        .run(&(machine, 0u64..=300 * 1024, 1usize..=32), |((max_blocks, shared, max_warps, ww), need, warps)| {
            let m = MachineParams {
                max_blocks_per_sm: max_blocks,
                shared_mem_per_sm: shared,
                max_warps_per_sm: max_warps,
                warp_width: ww,
                ..MachineParams::a100_like()
            };
            let threads = warps * ww as usize;
            let got = occupancy(&m, need, threads);
            if need > shared || warps as u32 > max_warps {
                prop_assert!(got.is_err());
            } else {
                let by_shared = shared.checked_div(need).unwrap_or(u64::MAX);
                let want = (max_blocks as u64).min(by_shared).min((max_warps / warps as u32) as u64);
                prop_assert_eq!(got.unwrap() as u64, want);
            }
            Ok(())
        })
        .map_err(|e| fail("occupancy", e.to_string()))?;
    report.push("occupancy formula");

    let shape = (prop::sample::select(PatternKind::ALL.to_vec()), 2usize..256, 1usize..4096, any::<usize>());
    runner(CASES)
        .run(&shape, |(p, n, te, kseed)| {
            let k = 2 + kseed % (n - 1);
            let w = build(p, n, te, 1, k);
            let copies: usize = w
                .schedule()
                .iter()
                .filter(|s| matches!(s, Step::LoadSync { .. } | Step::CopyAsync { .. }))
                .count();
            prop_assert_eq!(copies * w.tile_elements, n * te);
            prop_assert_eq!(w.copy_bytes(), (n * te * 4) as u64);
            Ok(())
        })
        .map_err(|e| fail("bytes accounting", e.to_string()))?;
    report.push("bytes accounting");

    runner(CASES)
        .run(&(2usize..512, any::<usize>()), |(n, kseed)| {
            let k = 2 + kseed % (n - 1);
            let steps = build_overlap(n, 8, 1, k, WaitKind::Barrier).unwrap().schedule();
            prop_assert!(check_schedule(&steps, n, k).is_ok());
            let mut live: Vec<Option<usize>> = vec![None; k];
            for s in &steps {
                match *s {
                    Step::CopyAsync { tile, buffer } => {
                        prop_assert!(live[buffer].is_none());
                        live[buffer] = Some(tile);
                    }
                    Step::Compute { tile, buffer: Some(b) } => {
                        prop_assert_eq!(live[b], Some(tile));
                        live[b] = None;
                    }
                    _ => {}
                }
            }
            Ok(())
        })
        .map_err(|e| fail("buffer safety", e.to_string()))?;
    report.push("buffer safety");

    Ok(format!("{} x {CASES} cases: {}", report.len(), report.join(", ")))
}

struct Line {
    id: u32,
    name: &'static str,
    verdict: Verdict,
    secs: f64,
    budget: f64,
}

fn timed(f: impl FnOnce() -> Verdict) -> (Verdict, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn main() {
    // cargo passes libtest flags; filtering is not supported, so a filter
    // that does not name this target skips it
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }

    let machine = MachineParams::a100_like();
    let roof = machine.roofline();
    let cfg = SweepConfig::load(sweep_path()).expect("shipped acceptance sweep parses");

    let t = Instant::now();
    let rows = speedup_table(&run_sweep(&cfg, &machine).expect("sweep runs")).expect("baselines present");
    let csv = sweep_csv(&rows).expect("csv");
    let sweep_secs = t.elapsed().as_secs_f64();

    let mut lines = Vec::new();
    let mut add = |id, name, budget, (verdict, secs): (Verdict, f64)| {
        lines.push(Line { id, name, verdict, secs, budget });
    };
    add(1, "derived metrics", 1.0, timed(derived_metrics));
    add(2, "roofline properties", 1.0, timed(|| roofline_properties(&roof, &rows)));
    add(3, "functional oracle equivalence", 10.0, timed(functional_equivalence));
    add(4, "analytic micro-instances", 1.0, timed(micro_instances));
    let (v, secs) = timed(|| calibration(&rows, roof.ridge_point()));
    add(5, "calibration bands", 60.0, (v, secs + sweep_secs));
    let (v, secs) = timed(|| determinism(&csv));
    add(6, "determinism", 2.0 * 60.0, (v, secs + sweep_secs));
    add(7, "aggregation arithmetic", 1.0, timed(aggregation));
    add(8, "invariant suite", 30.0, timed(invariants));

    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    writeln!(out, "\nacceptance: {} sweep rows in {sweep_secs:.1}s", rows.len()).unwrap();
    for l in &lines {
        let in_time = l.secs <= l.budget;
        let pass = l.verdict.is_ok() && in_time;
        failed += usize::from(!pass);
        let detail = match &l.verdict {
            Ok(d) | Err(d) => d,
        };
        writeln!(
            out,
            "criterion {} {:<30} {}  ({:.2}s of {:.0}s{})  {detail}",
            l.id,
            l.name,
            if pass { "PASS" } else { "FAIL" },
            l.secs,
            l.budget,
            if in_time { "" } else { ", over budget" },
        )
        .unwrap();
    }
    writeln!(out, "acceptance: {} passed, {failed} failed\n", lines.len() - failed).unwrap();
    out.flush().unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

// `ensure!` negates its condition so that NaN comparisons fail.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use attnedit::edit::{run_edit, run_with_record_prompt, EditOptions};
use attnedit::harness::runner::{default_grid, Harness, SweepAxis, Variant, VariantSpec};
use attnedit::harness::suite::generate_stratified;
use attnedit::harness::{composite, fmt4, RunConfig};
use attnedit::hook::{AttnHub, Band, Branch, HookCtx, ProjKind, ProjSite};
use attnedit::mmdit::{build_model, encode_source, ModelConfig, SampleConfig};
use attnedit::numerics::TensorF;
use attnedit::ops::{k_probe, kv_inject, BandSpec, KvInject, OpContext, OpSpec, ProbeLog};
use attnedit::router::{build_centroids, routed_edit, AnchorSet, CentroidClassifier, EditCategory, RouteTable};
use attnedit::text::{gaussian_vec, HashedBow};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn site(layer: usize, kind: ProjKind) -> ProjSite {
    ProjSite::new(layer, kind)
}

fn c1_blend_oracle() -> Result<(), String> {
    let band = Band::new(0..1, 0..1);
    let x = TensorF::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]).map_err(e2s)?;
    let out = kv_inject(site(0, ProjKind::ImgK), 0, x.clone(), &KvInject { alpha: 0.5, band }, 2).map_err(e2s)?;
    ensure!(
        out.data() == [3.0, 4.0, 5.0, 6.0, 5.0, 6.0, 7.0, 8.0],
        "alpha=0.5 gave {:?}",
        out.data()
    );
    for alpha in [0.0f32, 0.25, 0.5, 0.75, 1.0] {
        let out = kv_inject(site(0, ProjKind::ImgV), 0, x.clone(), &KvInject { alpha, band }, 2).map_err(e2s)?;
        for i in 0..4 {
            let (n, s) = (x.data()[i], x.data()[i + 4]);
            let want = (1.0 - alpha) * n + alpha * s;
            ensure!(
                (out.data()[i] - want).abs() <= 1e-6,
                "alpha={alpha} idx {i}: {} vs {want}",
                out.data()[i]
            );
            ensure!(out.data()[i + 4] == s, "source half changed at alpha={alpha}");
        }
    }
    Ok(())
}

fn c2_identity_closure() -> Result<(), String> {
    let h = Harness::new(RunConfig::default()).map_err(e2s)?;
    let suite = generate_stratified(100, 0);
    let grid: Vec<Variant> = [
        ("kvinject_a0", "kvinject:alpha=0"),
        ("kvscale_f1", "compose(kvscale:half=src,factor=1;kvscale:half=noi,factor=1)"),
        ("textscale_f1", "textscale:factor=1"),
        (
            "empty_bands",
            "compose(kvinject:alpha=0.7,layers=6-6;kvscale:half=noi,factor=2,steps=3-3;textscale:factor=3,layers=4-4)",
        ),
    ]
    .iter()
    .map(|(n, s)| Variant::op(*n, s.parse().unwrap()))
    .collect();
    let sweep = h.sweep(None, &grid, &suite).map_err(e2s)?;
    let base = sweep.baseline();
    ensure!(base.is_complete() && base.cases.len() == 100, "baseline incomplete");
    for row in &sweep.rows[1..] {
        for (a, b) in row.result.cases.iter().zip(&base.cases) {
            ensure!(
                a.latent_checksum.is_some() && a.latent_checksum == b.latent_checksum,
                "{} differs from baseline on {}",
                row.result.name,
                a.case_id
            );
        }
    }
    ensure!(sweep.rows[4].result.applied == 0, "an empty band fired");
    Ok(())
}

fn c3_band_gating() -> Result<(), String> {
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone()).map_err(e2s)?;
    let source = encode_source("cat in a park", &cfg, 1);
    let sc = SampleConfig::default();
    let band = BandSpec::layers(6, 9).with_steps(0, 7);
    let run = run_edit(
        &model,
        &source,
        "Make the cat red",
        &OpSpec::kv_inject(0.3, band),
        &sc,
        EditOptions::default(),
    )
    .map_err(e2s)?;
    ensure!(run.total_applied() == 84, "in-band modifications {} != 84", run.total_applied());
    let applied = run.hub.applied_log(0);
    ensure!(applied.len() == 6, "{} sites fired, want 6", applied.len());
    for (s, n) in &applied {
        ensure!(
            (6..9).contains(&s.layer) && ProjKind::IMAGE_KV.contains(&s.kind),
            "fired at {s}"
        );
        ensure!(*n == 14, "{s} fired {n} times, want 14");
    }
    let full = run_edit(
        &model,
        &source,
        "Make the cat red",
        &OpSpec::kv_inject(0.3, BandSpec::layers(6, 9)),
        &sc,
        EditOptions::default(),
    )
    .map_err(e2s)?;
    for (s, n) in full.hub.applied_log(0) {
        ensure!(n == 56, "{s} fired {n} times under full steps, want 56");
    }
    Ok(())
}

fn c4_hook_accounting() -> Result<(), String> {
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone()).map_err(e2s)?;
    let source = encode_source("dog on a table", &cfg, 2);
    let sc = SampleConfig::default();
    let expected = 6 * cfg.num_layers as u64 * 2 * sc.steps as u64;
    ensure!(expected == 4032, "toy accounting {expected}");
    let ctx = OpContext::new(&cfg, sc.steps);
    let mut ops: Vec<OpSpec> = vec![OpSpec::Baseline];
    for axis in SweepAxis::ALL {
        for v in default_grid(axis, &ctx) {
            if let VariantSpec::Op(op) = v.spec {
                if !ops.contains(&op) {
                    ops.push(op);
                }
            }
        }
    }
    for op in &ops {
        let run = run_edit(&model, &source, "Remove the dog", op, &sc, EditOptions::default()).map_err(e2s)?;
        let want = if op.is_two_pass() { 2 * expected } else { expected };
        ensure!(
            run.total_firings() == want,
            "{op}: {} dispatches, want {want}",
            run.total_firings()
        );
    }
    ensure!(ops.iter().any(OpSpec::is_two_pass), "no two-pass op exercised");
    Ok(())
}

fn c5_masactrl_self_consistency() -> Result<(), String> {
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone()).map_err(e2s)?;
    let source = encode_source("horse in a field", &cfg, 3);
    let sc = SampleConfig {
        seed: 77,
        ..Default::default()
    };
    let prompt = "Make the horse golden";
    let ctx = OpContext::new(&cfg, sc.steps);
    let mut base = Vec::new();
    model
        .sample_with(&source, prompt, &sc, &mut AttnHub::new(), |_, x| base.push(x.clone()))
        .map_err(e2s)?;
    for full_stream in [false, true] {
        let op = OpSpec::MasaCtrl {
            band: BandSpec::ALL,
            neutral_prompt: prompt.into(),
            full_stream,
        };
        let mut hub = AttnHub::new();
        hub.attach_all(op.instantiate(&ctx).map_err(e2s)?).map_err(e2s)?;
        hub.set_record_mode(true);
        model.sample(&source, prompt, &sc, &mut hub).map_err(e2s)?;
        hub.set_record_mode(false);
        let mut steps = Vec::new();
        model
            .sample_with(&source, prompt, &sc, &mut hub, |_, x| steps.push(x.clone()))
            .map_err(e2s)?;
        ensure!(steps.len() == base.len(), "step count");
        for (i, (a, b)) in steps.iter().zip(&base).enumerate() {
            ensure!(a.data() == b.data(), "full_stream={full_stream}: step {i} differs from baseline");
        }
        let run = run_with_record_prompt(&model, &source, prompt, Some(prompt), &op, &sc, EditOptions::default())
            .map_err(e2s)?;
        ensure!(run.latent.data() == base[base.len() - 1].data(), "run_edit path differs");
    }
    Ok(())
}

fn c6_composite_arithmetic() -> Result<(), String> {
    let rows = [
        ("baseline", 0.2193, 0.5565, 0.3879),
        ("kvinject", 0.2203, 0.5852, 0.4028),
        ("router auto", 0.2214, 0.6012, 0.4113),
        ("router oracle", 0.2218, 0.6037, 0.4127),
    ];
    for (name, t, i, printed) in rows {
        let c = composite(t, i);
        ensure!((c - printed).abs() <= 5e-5 + 1e-12, "{name}: {c} vs {printed}");
        let r: f64 = fmt4(c).parse().unwrap();
        ensure!((r - printed).abs() <= 1e-4 + 1e-12, "{name}: rounded {r} vs {printed}");
    }
    ensure!(composite(0.0, 0.0) == 0.0, "zero");
    Ok(())
}

fn c7_routing_table() -> Result<(), String> {
    use EditCategory::*;
    let t = RouteTable::default();
    let mid = BandSpec::frac(0.5, 0.75);
    let (a3, a5) = (OpSpec::kv_inject(0.3, mid), OpSpec::kv_inject(0.5, mid));
    for (c, want) in [
        (Replace, &a3),
        (Attribute, &a3),
        (Background, &a3),
        (Remove, &a5),
        (Style, &a5),
        (Add, &OpSpec::Baseline),
    ] {
        ensure!(t.route(c) == want, "{c} routes to {}", t.route(c));
    }
    let groups = t.shared_groups();
    ensure!(
        groups == vec![vec![Replace, Attribute, Background], vec![Add], vec![Remove, Style]],
        "groups {groups:?}"
    );
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone()).map_err(e2s)?;
    let classifier = CentroidClassifier::default_toy().map_err(e2s)?;
    for case in generate_stratified(12, 4).cases {
        let source = encode_source(&case.source_label, &cfg, case.seed);
        let sc = SampleConfig {
            seed: case.seed,
            ..Default::default()
        };
        let edit = |oracle| routed_edit(&model, &source, &case.instruction, &t, &classifier, oracle, &sc).map_err(e2s);
        let oracle = edit(Some(case.category))?;
        let group = groups.iter().find(|g| g.contains(&case.category)).unwrap();
        for &other in group.iter().filter(|c| **c != case.category) {
            let wrong = edit(Some(other))?;
            ensure!(
                wrong.latent.data() == oracle.latent.data(),
                "{}: {other} differs from oracle",
                case.id
            );
        }
        let auto = edit(None)?;
        if group.contains(&auto.category) {
            ensure!(
                auto.latent.data() == oracle.latent.data(),
                "{}: auto differs within group",
                case.id
            );
        }
    }
    Ok(())
}

fn c8_tie_break() -> Result<(), String> {
    let anchors = AnchorSet::default();
    let reference = CentroidClassifier::default_toy().map_err(e2s)?;
    let probes: Vec<String> = generate_stratified(60, 8).cases.into_iter().map(|c| c.instruction).collect();
    for seed in 0..10u64 {
        let c = CentroidClassifier::default_toy().map_err(e2s)?;
        ensure!(c.classify("") == EditCategory::Replace, "empty instruction on run {seed}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffled = AnchorSet::new(
            EditCategory::ALL
                .into_iter()
                .map(|cat| {
                    let mut v = anchors.get(cat).to_vec();
                    v.shuffle(&mut rng);
                    (cat, v)
                })
                .collect(),
        )
        .map_err(e2s)?;
        let p = build_centroids(&shuffled, Box::new(HashedBow::default())).map_err(e2s)?;
        for cat in EditCategory::ALL {
            ensure!(
                p.centroid(cat) == reference.centroid(cat),
                "centroid of {cat} moved under permutation"
            );
        }
        for s in &probes {
            ensure!(p.classify(s) == reference.classify(s), "`{s}` changed class under permutation");
        }
    }
    Ok(())
}

fn c9_paired_seeds() -> Result<(), String> {
    let h = Harness::new(RunConfig::default()).map_err(e2s)?;
    let suite = generate_stratified(6, 9);
    let grid = default_grid(SweepAxis::Main, &h.op_context());
    let sweep = h.sweep(Some(SweepAxis::Main), &grid, &suite).map_err(e2s)?;
    sweep.paired_audit().map_err(e2s)?;
    for row in &sweep.rows {
        for (c, case) in row.result.cases.iter().zip(&suite.cases) {
            ensure!(
                c.consumed.seed == case.seed
                    && c.consumed.source_label == case.source_label
                    && c.consumed.prompt == case.instruction,
                "{} consumed unexpected inputs for {}",
                row.result.name,
                c.case_id
            );
        }
    }
    let mut tampered = sweep.clone();
    tampered.rows[3].result.cases[2].consumed.prompt.push('!');
    ensure!(tampered.paired_audit().is_err(), "audit missed a tampered prompt");
    Ok(())
}

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attnedit"))
        .args(args)
        .output()
        .map_err(e2s)?;
    ensure!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(out.stdout)
}

fn c10_parallel_determinism() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let suite = path("suite.json");
    cli(&["suite", "gen", "--n", "24", "--seed", "10", "--out", &suite])?;
    let mut reports = Vec::new();
    for workers in ["1", "4"] {
        let json = path(&format!("alpha_w{workers}.json"));
        cli(&["sweep", "--axis", "alpha", "--suite", &suite, "--out", &json, "--workers", workers])?;
        let csv = cli(&["report", "--in", &json, "--format", "csv"])?;
        reports.push((std::fs::read(&json).map_err(e2s)?, csv));
    }
    ensure!(reports[0].0 == reports[1].0, "json reports differ between 1 and 4 workers");
    ensure!(reports[0].1 == reports[1].1, "csv reports differ between 1 and 4 workers");
    let rows = String::from_utf8_lossy(&reports[0].1)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count();
    ensure!(rows == 8, "expected a header and 7 rows, got {rows} lines");
    Ok(())
}

fn c11_distance_law() -> Result<(), String> {
    let band = Band::new(0..1, 0..1);
    let (s, d) = (8, 16);
    for alpha in [0.0f32, 0.1, 0.25, 0.3, 0.5, 0.7, 0.75, 0.9, 1.0] {
        for seed in 0..100u64 {
            let x = TensorF::new([1, 2 * s, d], gaussian_vec(seed * 31 + 7, 2 * s * d, 1.5)).map_err(e2s)?;
            let out = kv_inject(site(0, ProjKind::ImgK), 0, x.clone(), &KvInject { alpha, band }, s).map_err(e2s)?;
            let dist = |t: &TensorF| -> f64 {
                (0..s * d)
                    .map(|i| f64::from(t.data()[i] - x.data()[s * d + i]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let (before, after) = (dist(&x), dist(&out));
            let want = (1.0 - f64::from(alpha)) * before;
            ensure!(
                (after - want).abs() <= 1e-5 * before.max(1e-12),
                "alpha={alpha} seed={seed}: {after} vs {want}"
            );
        }
    }
    Ok(())
}

fn c12_probe() -> Result<(), String> {
    let ctx = HookCtx {
        site: site(0, ProjKind::ImgK),
        step: 0,
        branch: Branch::Cond,
    };
    let mut log = ProbeLog::default();
    let half = gaussian_vec(1, 32, 1.0);
    let negated: Vec<f32> = half.iter().map(|v| -v).collect();
    let same = TensorF::new([1, 4, 16], [half.clone(), half.clone()].concat()).map_err(e2s)?;
    let neg = TensorF::new([1, 4, 16], [half, negated].concat()).map_err(e2s)?;
    k_probe(&ctx, same, &mut log, 2).map_err(e2s)?;
    k_probe(&ctx, neg, &mut log, 2).map_err(e2s)?;
    let got: Vec<f64> = log.get(0, 0).iter().map(|s| s.cos_sim).collect();
    ensure!(got == [1.0, -1.0], "probe gave {got:?}");
    for seed in 0..100 {
        let x = TensorF::new([1, 4, 16], gaussian_vec(100 + seed, 64, 3.0)).map_err(e2s)?;
        let mut l = ProbeLog::default();
        k_probe(&ctx, x, &mut l, 2).map_err(e2s)?;
        let c = l.get(0, 0)[0].cos_sim;
        ensure!((-1.0..=1.0).contains(&c), "probe out of range: {c}");
    }
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone()).map_err(e2s)?;
    let source = encode_source("boat by the sea", &cfg, 5);
    let band = BandSpec::layers(6, 9).with_steps(0, 7);
    let opts = EditOptions {
        trace: false,
        probe: true,
    };
    let run = run_edit(
        &model,
        &source,
        "Remove the boat",
        &OpSpec::kv_inject(1.0, band),
        &SampleConfig::default(),
        opts,
    )
    .map_err(e2s)?;
    let log = run.probe.expect("probe requested");
    let log = log.lock().unwrap();
    let mut in_band = 0;
    for ((layer, step), s) in log.iter() {
        ensure!((-1.0..=1.0).contains(&s.cos_sim), "out of range at L{layer} S{step}");
        if (6..9).contains(&layer) && step < 7 {
            in_band += 1;
            ensure!(s.cos_sim == 1.0, "in-band probe at L{layer} S{step} = {}", s.cos_sim);
        }
    }
    ensure!(in_band == 3 * 7 * 2, "in-band probe readings {in_band}");
    Ok(())
}

fn main() -> ExitCode {
    let checks: [(&str, Check, Option<Duration>); 12] = [
        ("KVInject blend oracle and affine law", c1_blend_oracle, Some(Duration::from_secs(1))),
        (
            "identity ops match baseline bit-exactly on 100 cases",
            c2_identity_closure,
            Some(Duration::from_secs(120)),
        ),
        ("layer/step band gating and firing counts", c3_band_gating, None),
        ("dispatch totals per sample", c4_hook_accounting, None),
        (
            "MasaCtrl record/replay with identical prompt equals baseline",
            c5_masactrl_self_consistency,
            Some(Duration::from_secs(30)),
        ),
        ("composite reproduces reference pairs", c6_composite_arithmetic, None),
        ("routing table and route-sharing robustness", c7_routing_table, None),
        ("classifier tie-break and anchor-order invariance", c8_tie_break, None),
        ("paired-seed audit across a sweep", c9_paired_seeds, None),
        (
            "sweep reports independent of worker count",
            c10_parallel_determinism,
            Some(Duration::from_secs(300)),
        ),
        ("KVInject distance law", c11_distance_law, None),
        ("K-similarity probe sanity", c12_probe, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in checks.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = t.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(()), Some(l)) if elapsed > *l => Err(format!("took {elapsed:.1?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(()) => println!("PASS [{:>2}] {name} ({:.2}s)", i + 1, elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{:>2}] {name} ({:.2}s): {msg}", i + 1, elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

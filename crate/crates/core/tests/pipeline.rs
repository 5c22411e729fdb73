// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use attnedit::hook::{AttnHub, AttnOp, HookCtx, ProjKind, ProjSite};
use attnedit::mmdit::{build_model, encode_source, ModelConfig, SampleConfig};
use attnedit::numerics::TensorF;
use attnedit::ops::{BandSpec, OpContext, OpSpec};
use attnedit::harness::runner::{Harness, Variant};
use attnedit::harness::suite::generate_stratified;
use attnedit::harness::{MetricsReport, RunConfig};
use attnedit::router::{build_centroids, AnchorSet, CentroidClassifier, RouteTable};
use attnedit::text::HashedBow;

type Seen = Arc<Mutex<BTreeMap<(ProjSite, usize, usize), u64>>>;

/// Fingerprints the part of each tensor that the ops under test must leave
/// alone: the source half of image K/V and the whole text K/V. A `Record`
/// guard sits before the op chain, a `Check` guard after it.
struct Guard {
    check: bool,
    seen: Seen,
    source_start: usize,
    forwards: usize,
}

impl Guard {
    fn pair(source_start: usize) -> (Box<dyn AttnOp>, Box<dyn AttnOp>, Seen) {
        let seen: Seen = Arc::default();
        let mk = |check| {
            Box::new(Guard {
                check,
                seen: seen.clone(),
                source_start,
                forwards: 0,
            }) as Box<dyn AttnOp>
        };
        (mk(false), mk(true), seen)
    }

    fn protected(&self, site: ProjSite, x: &TensorF) -> u64 {
        if ProjKind::TEXT_KV.contains(&site.kind) {
            x.bit_checksum()
        } else {
            x.slice_tokens(self.source_start, x.tokens()).unwrap().bit_checksum()
        }
    }
}

impl AttnOp for Guard {
    fn name(&self) -> String {
        format!("guard({})", if self.check { "check" } else { "record" })
    }

    fn kinds(&self) -> &'static [ProjKind] {
        &[ProjKind::ImgK, ProjKind::ImgV, ProjKind::TxtK, ProjKind::TxtV]
    }

    fn active(&self, _: &HookCtx) -> bool {
        true
    }

    fn apply(&mut self, ctx: &HookCtx, x: TensorF) -> attnedit::Result<TensorF> {
        let key = (ctx.site, ctx.step, ctx.branch.index());
        let sum = self.protected(ctx.site, &x);
        let mut seen = self.seen.lock().unwrap();
        if self.check {
            assert_eq!(seen.remove(&key), Some(sum), "protected values changed at {} step {}", ctx.site, ctx.step);
            self.forwards += 1;
        } else {
            seen.insert(key, sum);
        }
        Ok(x)
    }
}

fn guarded_run(op: &OpSpec) -> usize {
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone()).unwrap();
    let sc = SampleConfig::default();
    let ctx = OpContext::new(&cfg, sc.steps);
    let (record, check, seen) = Guard::pair(cfg.source_start());
    let mut hub = AttnHub::new();
    hub.attach(record).unwrap();
    hub.attach_all(op.instantiate(&ctx).unwrap()).unwrap();
    hub.attach(check).unwrap();
    model
        .sample(&encode_source("tree in a field", &cfg, 4), "Make the tree golden", &sc, &mut hub)
        .unwrap();
    assert!(seen.lock().unwrap().is_empty());
    // 4 guarded kinds x 12 layers x 2 forwards x 28 steps
    hub.applied_log(hub.op_names().len() - 1).values().sum::<u64>() as usize
}

#[test]
fn kv_inject_leaves_source_half_and_text_untouched() {
    for op in ["kvinject:alpha=0.3,layers=frac:0.5-0.75", "kvinject:alpha=1", "kvinject:alpha=0.7,steps=0-7"] {
        assert_eq!(guarded_run(&op.parse().unwrap()), 4 * 12 * 2 * 28, "{op}");
    }
}

#[test]
fn masactrl_inject_leaves_source_half_untouched() {
    let op = OpSpec::MasaCtrl {
        band: BandSpec::ALL,
        neutral_prompt: "a photo".into(),
        full_stream: false,
    };
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone()).unwrap();
    let sc = SampleConfig::default();
    let ctx = OpContext::new(&cfg, sc.steps);
    let (record, check, _) = Guard::pair(cfg.source_start());
    let mut hub = AttnHub::new();
    hub.attach(record).unwrap();
    hub.attach_all(op.instantiate(&ctx).unwrap()).unwrap();
    hub.attach(check).unwrap();
    let source = encode_source("tree in a field", &cfg, 4);
    hub.set_record_mode(true);
    model.sample(&source, "a photo", &sc, &mut hub).unwrap();
    hub.set_record_mode(false);
    model.sample(&source, "Make the tree golden", &sc, &mut hub).unwrap();
}

#[test]
fn one_anchor_routes_like_five_on_the_shipped_suite() {
    let suite = generate_stratified(100, 0);
    let table = RouteTable::default();
    let five = CentroidClassifier::default_toy().unwrap();
    let one = build_centroids(&AnchorSet::default().truncated(1).unwrap(), Box::new(HashedBow::default())).unwrap();
    let mut agree = 0;
    let mut centroids_differ = false;
    for c in &suite.cases {
        let (a, b) = (five.classify(&c.instruction), one.classify(&c.instruction));
        agree += usize::from(table.route(a) == table.route(b));
        centroids_differ |= five.centroid(a) != one.centroid(a);
    }
    assert!(centroids_differ);
    assert!(agree >= 90, "only {agree}/100 routes agree");
}

#[test]
fn composite_of_means_equals_mean_of_composites() {
    let h = Harness::new(RunConfig::parse("num_layers = 6\nsteps = 8").unwrap()).unwrap();
    let r = h
        .run_variant(&Variant::op("kv", "kvinject:alpha=0.5".parse().unwrap()), &generate_stratified(12, 3))
        .unwrap();
    let per_case: Vec<MetricsReport> = r.cases.iter().map(|c| c.metrics.unwrap()).collect();
    let mean_of_composites = per_case.iter().map(|m| m.composite).sum::<f64>() / per_case.len() as f64;
    assert!((r.mean.unwrap().composite - mean_of_composites).abs() < 1e-6);
    for m in &per_case {
        assert_eq!(m.composite, 0.5 * m.clip_t + 0.5 * m.dino_i);
        assert!((-1.0..=1.0).contains(&m.clip_t) && (-1.0..=1.0).contains(&m.dino_i));
        assert!(m.clip_d.is_some());
    }
}

#[test]
fn step_band_fires_on_a_quarter_of_the_forwards() {
    let h = Harness::new(RunConfig::default()).unwrap();
    let suite = generate_stratified(2, 1);
    let mid = BandSpec::frac(0.5, 0.75);
    let early = h.run_variant(&Variant::op("early", OpSpec::kv_inject(0.3, mid.with_steps(0, 7))), &suite).unwrap();
    let full = h.run_variant(&Variant::op("full", OpSpec::kv_inject(0.3, mid)), &suite).unwrap();
    assert_eq!(early.applied * 4, full.applied);
    assert_eq!(early.applied, 2 * 3 * 2 * 7 * 2);
    assert_eq!(early.dispatches, full.dispatches);
}

#[test]
fn kv_inject_overhead_is_small() {
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone()).unwrap();
    let source = encode_source("lamp on a table", &cfg, 8);
    let sc = SampleConfig::default();
    let ctx = OpContext::new(&cfg, sc.steps);
    let op: OpSpec = "kvinject:alpha=0.3,layers=frac:0.5-0.75".parse().unwrap();
    let time = |spec: &OpSpec| {
        (0..5)
            .map(|_| {
                let mut hub = AttnHub::new();
                hub.attach_all(spec.instantiate(&ctx).unwrap()).unwrap();
                let t = Instant::now();
                model.sample(&source, "Remove the lamp", &sc, &mut hub).unwrap();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let base = time(&OpSpec::Baseline);
    let kv = time(&op);
    assert!(kv < 1.25 * base, "kvinject {kv:.4}s vs baseline {base:.4}s");
}

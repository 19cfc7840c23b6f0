//! Pass/fail report for the ten primary acceptance criteria.
//!
//! Criteria 7 to 10 train the toy pipeline end to end, which takes a long
//! time on one core. Run with
//! `cargo test --release -p dualprior --test acceptance -- --nocapture`
//! to see the report lines as they are produced.

use std::time::Instant;

use candle_core::Device;
use dualprior::fusion::{ModulationSharing, PriorsMode};
use dualprior::harness::check::{self, CheckReport, Suite};
use dualprior::harness::eval::{self, EvalOptions};
use dualprior::harness::train;
use dualprior::harness::{Checkpoint, RunConfig, TrainData, TrainOptions};
use dualprior::metrics::EvalReport;
use dualprior::video::{generate_dataset, Dataset};

const ALGEBRA_SECONDS: f64 = 1.0;
const QUANTIZATION_SECONDS: f64 = 5.0;
const GRADIENT_SECONDS: f64 = 120.0;
const SMOKE_CLIPS: usize = 8;
const STAGE1_MAX_ITERATIONS: usize = 2000;
const STAGE1_L1: f64 = 0.05;
const STAGE1P_ACCURACY: f64 = 0.9;
const SMOKE_SECONDS: f64 = 30.0 * 60.0;
const PSNR_GAIN_DB: f64 = 2.0;
const END_TO_END_SECONDS: f64 = 2.0 * 3600.0;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const ABLATION_MIN_HITS: usize = 2;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

impl Line {
    fn print(&self) {
        println!("[{}] {:>2} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.id, self.name, self.detail);
    }
}

fn checks_line(id: usize, name: &'static str, report: &CheckReport, names: &[&str], max_seconds: Option<f64>) -> Line {
    let mut passed = true;
    let mut parts = Vec::new();
    let mut seconds = 0.0;
    for n in names {
        match report.get(n) {
            Some(o) => {
                passed &= o.passed;
                seconds += o.seconds;
                parts.push(format!("{n}={:.2e}/{:.0e}", o.value, o.threshold));
            }
            None => {
                passed = false;
                parts.push(format!("{n} missing"));
            }
        }
    }
    if let Some(max) = max_seconds {
        passed &= seconds < max;
        parts.push(format!("{seconds:.2}s < {max}s"));
    }
    Line { id, name, passed, detail: parts.join(", ") }
}

fn variant(base: &RunConfig, seed: u64, priors: PriorsMode, sharing: ModulationSharing) -> RunConfig {
    let mut cfg = base.clone();
    cfg.stage2.seed = Some(seed);
    cfg.restorer.fusion.priors = priors;
    cfg.restorer.fusion.sharing = sharing;
    cfg
}

struct Prefix {
    s0: Checkpoint,
    s1p: Checkpoint,
}

fn stage2_report(cfg: &RunConfig, data: &TrainData, ds: &Dataset, prefix: &Prefix) -> EvalReport {
    let ckpt = train::train_stage2(cfg, data, &prefix.s1p, &prefix.s0, &TrainOptions::default()).unwrap();
    eval::evaluate(cfg, &ckpt, ds, &EvalOptions::default()).unwrap()
}

fn describe(r: &EvalReport) -> String {
    format!("{:.3} dB / {:.5}", r.aggregate.psnr, r.aggregate.ewarp)
}

#[test]
fn primary_criteria() {
    let mut lines: Vec<Line> = Vec::new();
    let mut emit = |l: Line| {
        l.print();
        lines.push(l);
    };

    let algebra = check::run(Suite::Algebra);
    let oracles = check::run(Suite::Oracles);
    emit(checks_line(1, "one-step algebra", &algebra, &["one_step_oracle_inversion"], Some(ALGEBRA_SECONDS)));
    emit(checks_line(2, "quantization oracle", &oracles, &["quantization_exhaustive", "quantization_ties"], Some(QUANTIZATION_SECONDS)));
    emit(checks_line(3, "zero-init transparency", &algebra, &["zero_init_transparency"], None));
    let gradients = check::run(Suite::Gradients);
    let names: Vec<&str> = gradients.outcomes.iter().map(|o| o.name.as_str()).collect();
    emit(checks_line(4, "gradient suite", &gradients, &names, Some(GRADIENT_SECONDS)));
    emit(checks_line(
        5,
        "warp and temporal loss",
        &oracles,
        &["temporal_static_zero", "temporal_scalar_loop", "warp_integer_exact"],
        None,
    ));
    let freeze = check::run(Suite::Freeze);
    emit(checks_line(6, "stage freeze contracts", &freeze, &["stage1p_freeze", "stage2_freeze"], None));

    let base = RunConfig::toy();
    let mut smoke = base.clone();
    smoke.dataset.train_clips = SMOKE_CLIPS;
    let smoke_data = TrainData::new(&generate_dataset(&smoke.dataset).unwrap(), &Device::Cpu).unwrap();
    let start = Instant::now();
    let s1 = train::train_stage1(&smoke, &smoke_data, &TrainOptions::default()).unwrap();
    let s1p = train::train_stage1p(&smoke, &smoke_data, &s1, &TrainOptions::default()).unwrap();
    let smoke_seconds = start.elapsed().as_secs_f64();
    let l1 = s1.header.extra["final_l1"];
    let (acc_s, acc_t) = (s1p.header.extra["accuracy_s"], s1p.header.extra["accuracy_t"]);
    emit(Line {
        id: 7,
        name: "training smoke",
        passed: smoke.stage1.iterations <= STAGE1_MAX_ITERATIONS
            && l1 <= STAGE1_L1
            && acc_s >= STAGE1P_ACCURACY
            && acc_t >= STAGE1P_ACCURACY
            && smoke_seconds <= SMOKE_SECONDS,
        detail: format!(
            "{SMOKE_CLIPS} clips: stage1 L1 {l1:.4} <= {STAGE1_L1} after {} its, stage1' accuracy {acc_s:.3}/{acc_t:.3} >= {STAGE1P_ACCURACY}, {smoke_seconds:.0}s",
            smoke.stage1.iterations
        ),
    });

    let ds = generate_dataset(&base.dataset).unwrap();
    let data = TrainData::new(&ds, &Device::Cpu).unwrap();
    let start = Instant::now();
    let s0 = train::train_stage0(&base, &data, &TrainOptions::default()).unwrap();
    let s1 = train::train_stage1(&base, &data, &TrainOptions::default()).unwrap();
    let s1p = train::train_stage1p(&base, &data, &s1, &TrainOptions::default()).unwrap();
    println!(
        "      full schedule: stage0 held-out {:.2} dB, stage1 L1 {:.4}, stage1' accuracy {:.3}/{:.3}",
        s0.header.extra["heldout_psnr"],
        s1.header.extra["final_l1"],
        s1p.header.extra["accuracy_s"],
        s1p.header.extra["accuracy_t"]
    );
    let prefix = Prefix { s0, s1p };
    let lq = eval::evaluate_lq(&base, &ds).unwrap();
    let main = stage2_report(&variant(&base, ABLATION_SEEDS[0], PriorsMode::Both, ModulationSharing::Shared), &data, &ds, &prefix);
    let e2e_seconds = start.elapsed().as_secs_f64();
    let gain = main.aggregate.psnr - lq.aggregate.psnr;
    emit(Line {
        id: 8,
        name: "end-to-end restoration",
        passed: gain >= PSNR_GAIN_DB && main.aggregate.ewarp <= lq.aggregate.ewarp && e2e_seconds <= END_TO_END_SECONDS,
        detail: format!(
            "restored {} vs LQ {}, gain {gain:.3} dB >= {PSNR_GAIN_DB}, {e2e_seconds:.0}s",
            describe(&main),
            describe(&lq)
        ),
    });

    let mut prior_hits = 0;
    let mut share_hits = 0;
    let mut prior_rows = Vec::new();
    let mut share_rows = Vec::new();
    for (k, &seed) in ABLATION_SEEDS.iter().enumerate() {
        let both = if k == 0 {
            main.clone()
        } else {
            stage2_report(&variant(&base, seed, PriorsMode::Both, ModulationSharing::Shared), &data, &ds, &prefix)
        };
        let spatial = stage2_report(&variant(&base, seed, PriorsMode::Spatial, ModulationSharing::Shared), &data, &ds, &prefix);
        let temporal = stage2_report(&variant(&base, seed, PriorsMode::Temporal, ModulationSharing::Shared), &data, &ds, &prefix);
        let per_layer = stage2_report(&variant(&base, seed, PriorsMode::Both, ModulationSharing::PerLayer), &data, &ds, &prefix);
        let (b, s, t) = (&both.aggregate, &spatial.aggregate, &temporal.aggregate);
        let prior_ok = b.psnr >= s.psnr && b.psnr >= t.psnr && t.ewarp <= s.ewarp;
        let share_ok = b.psnr >= per_layer.aggregate.psnr;
        prior_hits += prior_ok as usize;
        share_hits += share_ok as usize;
        prior_rows.push(format!(
            "seed {seed} {}: both {} spatial {} temporal {}",
            if prior_ok { "ok" } else { "miss" },
            describe(&both),
            describe(&spatial),
            describe(&temporal)
        ));
        share_rows.push(format!(
            "seed {seed} {}: shared {:.3} dB per-layer {:.3} dB",
            if share_ok { "ok" } else { "miss" },
            b.psnr,
            per_layer.aggregate.psnr
        ));
    }
    emit(Line {
        id: 9,
        name: "prior ablation direction",
        passed: prior_hits >= ABLATION_MIN_HITS,
        detail: format!("{prior_hits}/{} seeds; {}", ABLATION_SEEDS.len(), prior_rows.join("; ")),
    });
    emit(Line {
        id: 10,
        name: "modulation sharing direction",
        passed: share_hits >= ABLATION_MIN_HITS,
        detail: format!("{share_hits}/{} seeds; {}", ABLATION_SEEDS.len(), share_rows.join("; ")),
    });

    println!("\nacceptance summary");
    for l in &lines {
        l.print();
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

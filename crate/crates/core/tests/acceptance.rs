//! Acceptance suite. Each criterion is its own test and also writes a
//! `criterion N: PASS|FAIL ...` line to stderr (not captured by the harness)
//! so the measured values show up in the test log.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sasv_fusion::baselines::{baseline2_model, scale_domination_demo};
use sasv_fusion::checkpoint::{Checkpoint, SavedModel};
use sasv_fusion::baselines::Baseline2Params;
use sasv_fusion::embedstore::{compute_sv_scores, EmbeddingTable, EnrollmentStrategy};
use sasv_fusion::fusionnet::{
    batch_loss, init_params, total_loss, train, AdamState, FusionDims, FusionInput, FusionParams, Parameters,
    TrainConfig, DEFAULT_HIDDEN,
};
use sasv_fusion::metrics::{compute_eer, compute_report, ScoredTrial};
use sasv_fusion::pipeline::{asv_only_scores, fusion_dims, fusion_inputs, utterance_scores};
use sasv_fusion::protocol::{parse_enrollment, parse_trials, serialize_enrollment, serialize_trials, TrialLabel};
use sasv_fusion::syndata::{generate, SyntheticCorpusSpec};

use common::{full_pipeline, max_gradient_error, GRAD_FLOOR, naive_eer, oracle_eer, random_scores, snapshot};

const EER_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-12;

fn report(n: u32, ok: bool, detail: String) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
    assert!(ok, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_1_eer_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut elapsed = Duration::ZERO;
    for i in 0..200 {
        // Log-uniform class sizes over 1..=2000, independent per class.
        let np = (2000f64.powf(rng.gen::<f64>())).round().max(1.0) as usize;
        let nn = (2000f64.powf(rng.gen::<f64>())).round().max(1.0) as usize;
        let grid = if i % 3 == 0 { Some(0.25) } else { None };
        let shift = rng.gen_range(-1.0..3.0);
        let pos = random_scores(&mut rng, np, shift, grid);
        let neg = random_scores(&mut rng, nn, 0.0, grid);
        let t0 = Instant::now();
        let eer = compute_eer(&pos, &neg).unwrap();
        elapsed += t0.elapsed();
        let (rate, threshold) = oracle_eer(&pos, &neg);
        worst = worst.max((eer.rate - rate).abs()).max((eer.threshold - threshold).abs());
        if np * nn <= 40_000 {
            worst = worst.max((eer.rate - naive_eer(&pos, &neg)).abs());
        }
    }
    report(
        1,
        worst <= EER_TOL && elapsed < Duration::from_secs(5),
        format!("max |diff| {worst:.3e} (tol {EER_TOL:e}), compute_eer time {elapsed:?} (limit 5s)"),
    );
}

fn labelled(rng: &mut ChaCha8Rng) -> Vec<ScoredTrial> {
    let mut out = Vec::new();
    for (label, n, shift) in [(TrialLabel::Target, 80, 1.5), (TrialLabel::NonTarget, 120, 0.0), (TrialLabel::Spoof, 60, 0.7)] {
        let n = rng.gen_range(1..=n);
        out.extend(random_scores(rng, n, shift, None).into_iter().map(|score| ScoredTrial { label, score }));
    }
    out
}

#[test]
fn criterion_2_eers_invariant_under_monotone_transforms() {
    type Transform = (&'static str, fn(f64) -> f64);
    let transforms: [Transform; 5] = [
        ("3x+7", |x| 3.0 * x + 7.0),
        ("0.01x-2", |x| 0.01 * x - 2.0),
        ("exp", f64::exp),
        ("x^3+x", |x| x * x * x + x),
        ("atan", f64::atan),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let scored = labelled(&mut rng);
        let base = compute_report(&scored).unwrap();
        for (_, f) in &transforms {
            let mapped: Vec<ScoredTrial> = scored.iter().map(|s| ScoredTrial { label: s.label, score: f(s.score) }).collect();
            let r = compute_report(&mapped).unwrap();
            for (a, b) in [(base.sv, r.sv), (base.spf, r.spf), (base.sasv, r.sasv)] {
                worst = worst.max((a.rate - b.rate).abs());
            }
        }
    }
    report(2, worst <= EER_TOL, format!("50 sets x 5 transforms, max |ΔEER| {worst:.3e} (tol {EER_TOL:e})"));
}

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for net in 0..20 {
        let num_sv = rng.gen_range(1..=3);
        let cm_models = rng.gen_range(1..=2);
        let cm_dim: usize = (0..cm_models).map(|_| rng.gen_range(1..=3)).sum();
        let dims = FusionDims::new(cm_dim, num_sv).with_hidden(&[4, 3, 2]);
        let params = init_params(&dims, 100 + net).unwrap();
        let items: Vec<FusionInput> = (0..5)
            .map(|i| FusionInput {
                cm_concat: (0..cm_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                sv_scores: (0..num_sv).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                label: TrialLabel::ALL[(i + net as usize) % 3],
            })
            .collect();
        worst = worst.max(max_gradient_error(&params, &items, FD_STEP));
    }
    report(3, worst < GRAD_TOL, format!("20 nets, max relative error {worst:.3e} (tol {GRAD_TOL:e}, h {FD_STEP:e}, denominator floor {GRAD_FLOOR:e})"));
}

#[test]
fn criterion_4_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = FusionDims::new(6, 2).with_hidden(&[8, 4]);
    let zero = FusionParams::zeros(&dims).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let item = FusionInput {
            cm_concat: (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            sv_scores: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            label: TrialLabel::ALL[i % 3],
        };
        let (loss, _) = total_loss(&zero, std::slice::from_ref(&item)).unwrap();
        worst = worst.max((loss.total - 2.0 * std::f64::consts::LN_2).abs());
    }

    let params = init_params(&dims, 9).unwrap();
    let batch: Vec<FusionInput> = (0..37)
        .map(|i| FusionInput {
            cm_concat: (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            sv_scores: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            label: TrialLabel::ALL[i % 3],
        })
        .collect();
    let once: Vec<&FusionInput> = batch.iter().collect();
    let twice: Vec<&FusionInput> = batch.iter().chain(&batch).collect();
    let (l1, g1) = batch_loss(&params, &once, [1.0, 1.0]).unwrap();
    let (l2, g2) = batch_loss(&params, &twice, [1.0, 1.0]).unwrap();
    let exact = l1 == l2
        && g1.flatten().iter().zip(g2.flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    report(
        4,
        worst <= LOSS_TOL && exact,
        format!("zero-net max |L - 2ln2| {worst:.3e} (tol {LOSS_TOL:e}); duplicated batch bit-identical: {exact}"),
    );
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

/// Learning rate 1e-3 rather than the 1e-4 flag default: at 1e-4 fifty
/// epochs are not enough to converge on this corpus.
fn short_schedule() -> TrainConfig {
    TrainConfig { learning_rate: 1e-3, epochs: 50, ..Default::default() }
}

#[test]
fn criterion_5_end_to_end_trend() {
    let t0 = Instant::now();
    let (asv_spf, cm_sv, fusion_sasv, best_epoch) = single_threaded(|| {
        let c = generate(&SyntheticCorpusSpec::default()).unwrap();
        let strategy = EnrollmentStrategy::default();
        let asv = compute_report(&asv_only_scores(&c.dev, &c.asv_tables, strategy).unwrap()).unwrap();
        let cm_map = c.cm_scores(0);
        let cm = compute_report(&utterance_scores(&c.dev, |u| cm_map.get(u).copied()).unwrap()).unwrap();
        let tr = fusion_inputs(&c.train, &c.asv_tables, &c.cm_tables, strategy).unwrap();
        let dv = fusion_inputs(&c.dev, &c.asv_tables, &c.cm_tables, strategy).unwrap();
        let dims = fusion_dims(&c.asv_tables, &c.cm_tables, &DEFAULT_HIDDEN);
        let out = train(&dims, &tr, &dv, &short_schedule()).unwrap();
        let best = out.best_epoch.unwrap();
        (asv.spf.rate, cm.sv.rate, out.history.epochs[best].dev.sasv.rate, best)
    });
    let elapsed = t0.elapsed();
    let ok = asv_spf > 0.20
        && (0.40..=0.60).contains(&cm_sv)
        && fusion_sasv < 0.01
        && elapsed < Duration::from_secs(60);
    report(
        5,
        ok,
        format!(
            "ASV-only SPF-EER {:.2}% (>20), CM-only SV-EER {:.2}% (40-60), fusion SASV-EER {:.2}% at epoch {best_epoch} (<1), {elapsed:.1?} single-threaded (<60s)",
            100.0 * asv_spf,
            100.0 * cm_sv,
            100.0 * fusion_sasv
        ),
    );
}

#[test]
fn criterion_6_baseline1_dominated_by_inflated_cm_scale() {
    let c = generate(&SyntheticCorpusSpec::default()).unwrap();
    let strategy = EnrollmentStrategy::default();
    let sv: Vec<f64> = compute_sv_scores(&c.dev, &c.asv_tables[..1], strategy).unwrap().iter().map(|r| r[0]).collect();
    let cm_map = c.cm_scores(0);
    let cm: Vec<f64> = c.dev.trials.iter().map(|t| cm_map[&t.test_utt_id]).collect();
    let labels: Vec<TrialLabel> = c.dev.trials.iter().map(|t| t.label).collect();
    let (_, b1) = scale_domination_demo(&sv, &cm, &labels, 20.0).unwrap();
    let run = baseline2_model(&c.asv_tables[0], Some(&c.cm_tables[0]), &c.train, &c.dev, strategy, &DEFAULT_HIDDEN, &short_schedule())
        .unwrap();
    let b2 = compute_report(&run.dev_scores).unwrap().sasv.rate;
    let gap = 100.0 * (b1.rate - b2);
    report(
        6,
        gap >= 5.0,
        format!("Baseline1 (CM x20) SASV-EER {:.2}%, Baseline2 {:.2}%, gap {gap:.2}pp (>= 5)", 100.0 * b1.rate, 100.0 * b2),
    );
}

#[test]
fn criterion_7_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = [(Some(1), "a"), (Some(8), "b"), (None, "c"), (Some(1), "c")]
        .iter()
        .map(|(threads, name)| {
            let root = dir.path().join(name);
            snapshot(&root, &full_pipeline(&root, 17, *threads, 4))
        })
        .collect();
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    let files = runs[0].len();
    report(
        7,
        identical && files >= 15,
        format!("{files} files byte-identical across --threads 1, 8, default, and a rerun over existing outputs: {identical}"),
    );
}

#[test]
fn criterion_8_formats_round_trip_byte_identically() {
    let c = generate(&SyntheticCorpusSpec { seed: 8, ..Default::default() }).unwrap();
    let mut checked = 0;
    let mut ok = true;

    for t in c.asv_tables.iter().chain(&c.cm_tables) {
        let first = t.to_bytes();
        let second = EmbeddingTable::from_bytes(t.model_id(), &first).unwrap().to_bytes();
        ok &= first == second;
        checked += 1;
    }

    for set in [&c.train, &c.dev] {
        let trials = serialize_trials(&set.trials);
        ok &= serialize_trials(&parse_trials(&trials).unwrap()) == trials;
        let enroll = serialize_enrollment(&set.enrollment);
        ok &= serialize_enrollment(&parse_enrollment(&enroll).unwrap()) == enroll;
        checked += 2;
    }

    let fusion = init_params(&FusionDims::new(32, 2), 8).unwrap();
    let mut adam = AdamState::new(&fusion);
    adam.step = 3;
    adam.m[0][0] = -0.125;
    adam.v[1][1] = 3e-7;
    let b2 = Baseline2Params::init(16, 16, &DEFAULT_HIDDEN, 8).unwrap();
    for ck in [
        Checkpoint { model: SavedModel::Fusion(fusion), adam: Some(adam) },
        Checkpoint::new(SavedModel::Baseline2(b2)),
    ] {
        let first = ck.to_bytes();
        let back = Checkpoint::from_bytes(&first).unwrap();
        ok &= back == ck && back.to_bytes() == first;
        checked += 1;
    }
    report(8, ok, format!("{checked} artifacts (embedding tables, protocols, checkpoints) rewritten byte-identically: {ok}"));
}

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng;
use sasv_fusion::fusionnet::{batch_loss, Model};

/// Exhaustive-sweep EER: every distinct score is tried as a threshold and
/// FAR/FRR are counted directly. Returns `(rate, threshold)`.
///
/// Accept iff `score >= t`. The rate is read at the first threshold where
/// `FAR - FRR <= 0`, linearly interpolated from the previous threshold;
/// if no threshold closes the gap, a final point `(FAR 0, FRR 1)` placed at
/// the top score does.
pub fn oracle_eer(pos: &[f64], neg: &[f64]) -> (f64, f64) {
    let mut sp = pos.to_vec();
    let mut sn = neg.to_vec();
    sp.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sn.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let point = |t: f64| {
        let far = (sn.len() - sn.partition_point(|&s| s < t)) as f64 / sn.len() as f64;
        let frr = sp.partition_point(|&s| s < t) as f64 / sp.len() as f64;
        (t, far, frr)
    };
    let mut prev = point(ts[0]);
    for &t in &ts[1..] {
        let cur = point(t);
        let d1 = cur.1 - cur.2;
        if d1 == 0.0 {
            return (cur.1, cur.0);
        }
        if d1 < 0.0 {
            return interpolate(prev, cur);
        }
        prev = cur;
    }
    interpolate(prev, (prev.0, 0.0, 1.0))
}

fn interpolate(a: (f64, f64, f64), b: (f64, f64, f64)) -> (f64, f64) {
    let (d0, d1) = (a.1 - a.2, b.1 - b.2);
    let w = d0 / (d0 - d1);
    (a.1 + w * (b.1 - a.1), a.0 + w * (b.0 - a.0))
}

/// Naive O(n·t) version of the same sweep, for cross-checking the oracle
/// on small inputs.
pub fn naive_eer(pos: &[f64], neg: &[f64]) -> f64 {
    let mut ts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let pts: Vec<(f64, f64, f64)> = ts
        .iter()
        .map(|&t| {
            let far = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
            let frr = pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64;
            (t, far, frr)
        })
        .collect();
    for k in 1..pts.len() {
        if pts[k].1 - pts[k].2 <= 0.0 {
            return if pts[k].1 == pts[k].2 { pts[k].1 } else { interpolate(pts[k - 1], pts[k]).0 };
        }
    }
    let last = *pts.last().unwrap();
    interpolate(last, (last.0, 0.0, 1.0)).0
}

/// Random scores; with `grid` set, values are snapped to it so ties occur.
pub fn random_scores<R: Rng>(rng: &mut R, n: usize, shift: f64, grid: Option<f64>) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) + shift;
            match grid {
                Some(g) => (v / g).round() * g,
                None => v,
            }
        })
        .collect()
}

pub const GRAD_FLOOR: f64 = 1e-5;

/// Largest relative error between the analytic batch-mean gradient and
/// central finite differences with step `h`. Relative error is
/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`: below the floor the difference
/// quotient itself is dominated by rounding (about `eps * L / h`, ~1e-11
/// for h = 1e-5), so the check becomes absolute there.
pub fn max_gradient_error<M: Model>(params: &M, items: &[M::Input], h: f64) -> f64 {
    let refs: Vec<&M::Input> = items.iter().collect();
    let (_, grad) = batch_loss(params, &refs, [1.0, 1.0]).unwrap();
    let analytic = grad.flatten();
    let loss_at = |k: usize, delta: f64| {
        let mut q = params.clone();
        let mut idx = k;
        for t in q.tensors_mut() {
            if idx < t.len() {
                t[idx] += delta;
                break;
            }
            idx -= t.len();
        }
        batch_loss(&q, &refs, [1.0, 1.0]).unwrap().0.total
    };
    (0..analytic.len())
        .map(|k| {
            let fd = (loss_at(k, h) - loss_at(k, -h)) / (2.0 * h);
            (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(GRAD_FLOOR)
        })
        .fold(0.0, f64::max)
}

pub fn sasv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sasv")).args(args).output().expect("spawn sasv")
}

pub fn sasv_ok(args: &[&str]) -> Output {
    let out = sasv(args);
    assert!(
        out.status.success(),
        "sasv {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// `gen-synth` → `train` → `evaluate` under `root`, returning the files
/// produced (corpus, checkpoint, history, report, scores, exports).
pub fn full_pipeline(root: &Path, seed: u64, threads: Option<usize>, epochs: usize) -> Vec<PathBuf> {
    let seed = seed.to_string();
    let epochs = epochs.to_string();
    let mut common: Vec<String> = vec!["--seed".into(), seed];
    if let Some(t) = threads {
        common.extend(["--threads".into(), t.to_string()]);
    }
    let c = root.join("corpus");
    let m = root.join("model");
    let r = root.join("report");
    let with = |mut v: Vec<String>| {
        v.extend(common.iter().cloned());
        v
    };
    let s = |x: &Path| x.to_str().unwrap().to_string();
    let run = |v: Vec<String>| {
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        sasv_ok(&refs);
    };
    run(with(vec!["gen-synth".into(), "--out".into(), s(&c)]));
    let tables = |v: &mut Vec<String>| {
        for t in ["asv0", "asv1"] {
            v.extend(["--asv".into(), s(&c.join(format!("{t}.sveb")))]);
        }
        for t in ["cm0", "cm1"] {
            v.extend(["--cm".into(), s(&c.join(format!("{t}.sveb")))]);
        }
    };
    let mut train = with(vec![
        "train".into(),
        "--train-trials".into(),
        s(&c.join("train_trials.txt")),
        "--train-enroll".into(),
        s(&c.join("train_enroll.txt")),
        "--dev-trials".into(),
        s(&c.join("dev_trials.txt")),
        "--dev-enroll".into(),
        s(&c.join("dev_enroll.txt")),
        "--lr".into(),
        "1e-3".into(),
        "--epochs".into(),
        epochs,
        "--out".into(),
        s(&m),
    ]);
    tables(&mut train);
    run(train);
    let mut eval = with(vec![
        "evaluate".into(),
        "--checkpoint".into(),
        s(&m.join("model.ckpt")),
        "--trials".into(),
        s(&c.join("dev_trials.txt")),
        "--enroll".into(),
        s(&c.join("dev_enroll.txt")),
        "--out".into(),
        s(&r),
        "--det-points".into(),
        "25".into(),
        "--hist-bins".into(),
        "20".into(),
    ]);
    tables(&mut eval);
    run(eval);
    let mut files = Vec::new();
    for d in [&c, &m, &r] {
        let mut names: Vec<PathBuf> = fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        files.extend(names);
    }
    files
}

/// Relative paths and contents of every file in `files` under `root`.
pub fn snapshot(root: &Path, files: &[PathBuf]) -> Vec<(PathBuf, Vec<u8>)> {
    files
        .iter()
        .map(|f| (f.strip_prefix(root).unwrap().to_path_buf(), fs::read(f).unwrap()))
        .collect()
}

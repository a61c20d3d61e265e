//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any binding criterion fails.
//!
//! `cargo test -p stmae-core --test acceptance -- 1 2 5` runs a subset.

use std::collections::HashMap;
use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::Rng as _;
use stmae::config::RunConfig;
use stmae::data::{synth_generate, Dataset};
use stmae::evaluation::{auroc, average_precision, evaluate_features, extract_test_features, MetricsReport};
use stmae::fptd::{decouple_indices, fold, partition_patches, unfold, GridShape};
use stmae::lpsr::Pfdf;
use stmae::model::layers::ParamMut;
use stmae::model::transformer::Block;
use stmae::model::{transition_reassemble, Carf, LatentSubset, Mode};
use stmae::pipeline;
use stmae::residuals::{patch_loss, residual_maps, total_loss, intensity_loss, LossModality};
use stmae::rng::rng;
use stmae::training::Checkpoint;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_map(r: &mut impl rand::Rng, h: usize, w: usize, c: usize) -> Array3<f32> {
    Array3::from_shape_fn((h, w, c), |_| r.random_range(-2.0f32..2.0))
}

fn pfdf(data: Array3<f32>) -> Pfdf {
    Pfdf { data, source: "acceptance".into() }
}

fn partition_and_transition() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1);
    let mut violations = 0usize;
    let pairs = 2000;
    for _ in 0..pairs {
        let n = 2 * r.random_range(1..=32usize);
        let seed: u64 = r.random();
        let (a, b) = decouple_indices(n, seed).unwrap();
        let mut owner = vec![None; n];
        for (half, list) in [(0u8, &a), (1u8, &b)] {
            for &i in list.iter() {
                if i >= n || owner[i].replace(half).is_some() {
                    violations += 1;
                }
            }
        }
        if a.len() != n / 2 || b.len() != n / 2 || owner.iter().any(Option::is_none) {
            violations += 1;
        }
        // Tag each latent with the position it came from.
        let tag = |idx: &[usize]| Array2::from_shape_fn((idx.len(), 1), |(j, _)| idx[j] as f64);
        let full = transition_reassemble(
            &LatentSubset { tokens: tag(&a), indices: a.clone() },
            &LatentSubset { tokens: tag(&b), indices: b.clone() },
        )
        .unwrap();
        let mut used = vec![false; n];
        for pos in 0..n {
            let from = full[[pos, 0]] as usize;
            if std::mem::replace(&mut used[from], true) || owner[from] == owner[pos] {
                violations += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        violations == 0 && secs < 10.0,
        format!("{pairs} (N, seed) pairs, {violations} violations, {secs:.2}s (limit 10s)"),
    )
}

fn loss_identities() -> Outcome {
    let t = Instant::now();
    let mut r = rng(2);
    let mut worst_self = 0.0f64;
    for _ in 0..100 {
        let (h, w, c) = (r.random_range(1..=6) * 2, r.random_range(1..=6) * 2, r.random_range(1..=12));
        let phi = pfdf(random_map(&mut r, h, w, c));
        let rep = total_loss(&Carf { data: phi.data.clone() }, &phi, 5.0, 2).unwrap();
        worst_self = worst_self.max(rep.total);
    }
    // Per-patch orientation terms, including exact opposites and zero rows.
    let mut ori_range = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..2000 {
        let d = r.random_range(1..=16);
        let v = Array2::from_shape_fn((1, d), |_| r.random_range(-3.0f64..3.0));
        let u = match i % 4 {
            0 => -&v,
            1 => Array2::zeros((1, d)),
            2 => &v * r.random_range(0.1..10.0),
            _ => Array2::from_shape_fn((1, d), |_| r.random_range(-3.0f64..3.0)),
        };
        let (rep, _) = patch_loss(u.view(), v.view(), 1, 1.0, LossModality::Orientation).unwrap();
        ori_range = (ori_range.0.min(rep.l_ori), ori_range.1.max(rep.l_ori));
    }
    let mut worst_k1 = 0.0f64;
    for _ in 0..100 {
        let (h, w, c) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=16));
        let phi = pfdf(random_map(&mut r, h, w, c));
        let carf = Carf { data: random_map(&mut r, h, w, c) };
        let l_int = intensity_loss(&carf, &phi, 1).unwrap();
        let (a_i, _) = residual_maps(carf.data.view(), phi.data.view()).unwrap();
        let sum: f64 = a_i.iter().map(|&v| v as f64).sum();
        worst_k1 = worst_k1.max((l_int - sum).abs() / l_int.max(1.0));
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst_self < 1e-6 && ori_range.0 >= 0.0 && ori_range.1 <= 2.0 && worst_k1 < 1e-6 && secs < 10.0;
    outcome(
        pass,
        format!(
            "max total_loss(phi, phi) {worst_self:.2e} (< 1e-6); orientation terms in [{:.3e}, {:.6}] (within [0, 2]); \
             K=1 intensity vs sum A_i rel err {worst_k1:.2e} (< 1e-6); {secs:.2}s (limit 10s)",
            ori_range.0, ori_range.1
        ),
    )
}

fn rel_err(num: f64, ana: f64) -> f64 {
    (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6)
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let mut r = rng(3);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    // Loss with respect to the reconstruction.
    for _ in 0..20 {
        let (n, d) = (r.random_range(1..=8), r.random_range(1..=16));
        let u = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0f64..1.0));
        let v = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0f64..1.0));
        let loss = |u: &Array2<f64>| patch_loss(u.view(), v.view(), 1, 5.0, LossModality::Both).unwrap().0.total;
        let (_, grad) = patch_loss(u.view(), v.view(), 1, 5.0, LossModality::Both).unwrap();
        for idx in 0..u.len() {
            let mut up = u.clone();
            up.as_slice_mut().unwrap()[idx] += h;
            let mut down = u.clone();
            down.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&up) - loss(&down)) / (2.0 * h);
            worst = worst.max(rel_err(num, grad.as_slice().unwrap()[idx]));
            checked += 1;
        }
    }
    // Through one pre-norm transformer block: inputs and every parameter.
    let (n, d) = (8, 16);
    let mut block = Block::<f64>::new(&mut rng(4), d, 2, 2);
    let x = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0f64..1.0));
    let target = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0f64..1.0));
    let loss = |b: &Block<f64>, x: &Array2<f64>| {
        let (z, _) = b.forward(x, n);
        patch_loss(z.view(), target.view(), 1, 5.0, LossModality::Both).unwrap().0.total
    };
    let (z, cache) = block.forward(&x, n);
    let (_, dz) = patch_loss(z.view(), target.view(), 1, 5.0, LossModality::Both).unwrap();
    let dx = block.backward(&cache, &dz);
    for idx in 0..x.len() {
        let mut up = x.clone();
        up.as_slice_mut().unwrap()[idx] += h;
        let mut down = x.clone();
        down.as_slice_mut().unwrap()[idx] -= h;
        let num = (loss(&block, &up) - loss(&block, &down)) / (2.0 * h);
        worst = worst.max(rel_err(num, dx.as_slice().unwrap()[idx]));
        checked += 1;
    }
    let mut grads: Vec<Vec<f64>> = Vec::new();
    block.visit_mut("block", &mut |p: ParamMut<'_, f64>| grads.push(p.grad.to_vec()));
    let shift = |b: &mut Block<f64>, which: usize, idx: usize, delta: f64| {
        let mut k = 0;
        b.visit_mut("block", &mut |p: ParamMut<'_, f64>| {
            if k == which {
                p.value[idx] += delta;
            }
            k += 1;
        });
    };
    for (pi, grad) in grads.iter().enumerate() {
        for (idx, &g) in grad.iter().enumerate() {
            shift(&mut block, pi, idx, h);
            let up = loss(&block, &x);
            shift(&mut block, pi, idx, -2.0 * h);
            let down = loss(&block, &x);
            shift(&mut block, pi, idx, h);
            worst = worst.max(rel_err((up - down) / (2.0 * h), g));
            checked += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("{checked} partials (N <= 8, D <= 16, f64), max rel err {worst:.2e} (< 1e-4), {secs:.2}s (limit 60s)"),
    )
}

fn brute_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            pairs += 1.0;
            wins += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// Precision at the rank of each positive, ties ranked in input order.
fn brute_ap(s: &[f64], l: &[bool]) -> f64 {
    let ahead = |i: usize, j: usize| s[j] > s[i] || (s[j] == s[i] && j < i);
    let mut at: Vec<(usize, f64)> = (0..s.len())
        .filter(|&i| l[i])
        .map(|i| {
            let rank = (0..s.len()).filter(|&j| ahead(i, j)).count() + 1;
            let hits = (0..s.len()).filter(|&j| l[j] && ahead(i, j)).count() + 1;
            (rank, hits as f64 / rank as f64)
        })
        .collect();
    at.sort_by_key(|&(rank, _)| rank);
    at.iter().map(|&(_, p)| p).sum::<f64>() / at.len() as f64
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    let mut r = rng(4);
    let mut mismatches = 0;
    let mut done = 0;
    while done < 200 {
        let n = r.random_range(2..=200);
        // Few distinct values so ties are common.
        let levels = r.random_range(1..=n.min(20)) as u32;
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / 4.0).collect();
        let l: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        if l.iter().all(|&x| x) || l.iter().all(|&x| !x) {
            continue;
        }
        done += 1;
        if auroc(&s, &l).unwrap() != brute_auroc(&s, &l) || average_precision(&s, &l).unwrap() != brute_ap(&s, &l) {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 30.0,
        format!("{done} instances (n <= 200, tied scores), {mismatches} inexact matches, {secs:.2}s (limit 30s)"),
    )
}

fn tiny_config() -> RunConfig {
    RunConfig::resolve(
        &RunConfig::desk(),
        None,
        &[
            "backbone.name=pixel".into(),
            "image.size=32".into(),
            "pfdf.size=16".into(),
            "training.epochs=1".into(),
            "synth.resolution=32".into(),
            "synth.train=8".into(),
        ],
    )
    .unwrap()
}

fn round_trips() -> Outcome {
    let mut r = rng(5);
    let mut fold_ok = true;
    for _ in 0..200 {
        let k = [1, 2, 4][r.random_range(0..3)];
        let (h, w, c) = (k * r.random_range(1..=5), k * r.random_range(1..=5), r.random_range(1..=8));
        let map = random_map(&mut r, h, w, c);
        let grid = GridShape::new(h, w, c, k).unwrap();
        let bits = |a: &Array3<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        fold_ok &= bits(&fold(unfold(map.view(), grid).view(), grid)) == bits(&map);
        fold_ok &= bits(&partition_patches(&pfdf(map.clone()), k).unwrap().to_map()) == bits(&map);
    }

    let cfg = tiny_config();
    let ds = synth_generate(&cfg.synth).unwrap();
    let fx = cfg.feature_config().build().unwrap();
    let feats = pipeline::extract_train_features(&fx, &ds).unwrap();
    let ckpt = pipeline::train_features(&cfg, &feats, &mut |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let bytes_ok = ckpt.to_bytes().unwrap() == back.to_bytes().unwrap();
    let out_ok = feats.iter().enumerate().all(|(i, f)| {
        let a = ckpt.model.forward(f, i as u64).unwrap().data;
        let b = back.model.forward(f, i as u64).unwrap().data;
        a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    outcome(
        fold_ok && bytes_ok && out_ok,
        format!(
            "fold(unfold) bitwise on 200 maps: {fold_ok}; checkpoint bytes identical after save/load: {bytes_ok}; \
             forward outputs bitwise equal: {out_ok}"
        ),
    )
}

/// Desk-scale benchmark shared by the end-to-end and ablation criteria.
struct Desk {
    base: RunConfig,
    ds: Dataset,
    train: Vec<Pfdf>,
    test: Vec<Pfdf>,
    extract_secs: f64,
    runs: HashMap<(Mode, u64), (MetricsReport, f64)>,
}

impl Desk {
    fn new() -> Self {
        let base = RunConfig::desk();
        let t = Instant::now();
        let ds = synth_generate(&base.synth).unwrap();
        let fx = base.feature_config().build().unwrap();
        let train = pipeline::extract_train_features(&fx, &ds).unwrap();
        let test = extract_test_features(&fx, &ds).unwrap();
        Desk {
            extract_secs: t.elapsed().as_secs_f64(),
            base,
            ds,
            train,
            test,
            runs: HashMap::new(),
        }
    }

    /// Metrics and training seconds of one mode and seed.
    fn run(&mut self, mode: Mode, seed: u64) -> &(MetricsReport, f64) {
        if !self.runs.contains_key(&(mode, seed)) {
            let cfg = RunConfig::resolve(
                &self.base,
                None,
                &[
                    format!("model.mode=\"{}\"", mode.name()),
                    format!("training.seed={seed}"),
                    format!("eval.seed={seed}"),
                ],
            )
            .unwrap();
            let t = Instant::now();
            let ckpt = pipeline::train_features(&cfg, &self.train, &mut |_| Ok(())).unwrap();
            let secs = t.elapsed().as_secs_f64();
            let fx = cfg.feature_config().build().unwrap();
            let ev = evaluate_features(&pipeline::scorer(&cfg, &fx, &ckpt), &self.ds, &self.test, &mut |_, _| Ok(())).unwrap();
            eprintln!("  {} seed {seed}: {} ({secs:.0}s training)", mode.name(), ev.report.summary());
            self.runs.insert((mode, seed), (ev.report, secs));
        }
        &self.runs[&(mode, seed)]
    }
}

fn desk_end_to_end(desk: &mut Desk) -> Outcome {
    let s = &desk.base.synth;
    let shape = format!(
        "{} variant, {}px, {} train, {}+{} test",
        desk.base.model.variant.name(),
        s.resolution,
        s.train,
        s.test_normal,
        s.test_anomalous
    );
    let extract = desk.extract_secs;
    let (report, secs) = desk.run(Mode::StMae, 0).clone();
    let px = report.pixel_auroc.unwrap_or(f64::NAN);
    outcome(
        secs <= 600.0 && px >= 0.90 && report.image_auroc >= 0.90,
        format!(
            "{shape}: training {secs:.0}s (limit 600s, feature extraction {extract:.0}s more), \
             pixel AUROC {px:.4} (>= 0.90), image AUROC {:.4} (>= 0.90)",
            report.image_auroc
        ),
    )
}

fn ablation_direction(desk: &mut Desk) -> Outcome {
    let seeds = [0u64, 1, 2];
    let mean = |desk: &mut Desk, mode| {
        seeds.iter().map(|&s| desk.run(mode, s).0.pixel_auroc.unwrap_or(f64::NAN)).sum::<f64>() / seeds.len() as f64
    };
    let st = mean(desk, Mode::StMae);
    let ae = mean(desk, Mode::Ae);
    let per_seed: Vec<String> = seeds
        .iter()
        .map(|&s| {
            let a = desk.runs[&(Mode::StMae, s)].0.pixel_auroc.unwrap_or(f64::NAN);
            let b = desk.runs[&(Mode::Ae, s)].0.pixel_auroc.unwrap_or(f64::NAN);
            format!("{:+.4}", a - b)
        })
        .collect();
    outcome(
        st - ae >= 0.02,
        format!(
            "mean pixel AUROC over seeds 0-2: stmae {st:.4}, ae {ae:.4}, gap {:+.4} (>= 0.02); per seed [{}]",
            st - ae,
            per_seed.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut failed = Vec::new();
    let mut line = |n: u32, name: &str, o: Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {n} [{verdict}] {name}: {}", o.detail).unwrap();
        out.flush().unwrap();
        if !o.pass {
            failed.push(n);
        }
    };
    if run(1) {
        line(1, "partition and transition invariants", partition_and_transition());
    }
    if run(2) {
        line(2, "loss identities", loss_identities());
    }
    if run(3) {
        line(3, "finite-difference gradients", gradient_check());
    }
    if run(4) {
        line(4, "metric oracles", metric_oracles());
    }
    if run(5) {
        line(5, "round-trips", round_trips());
    }
    if run(6) || run(7) {
        let mut desk = Desk::new();
        if run(6) {
            line(6, "desk-scale end to end", desk_end_to_end(&mut desk));
        }
        if run(7) {
            line(7, "stmae beats ae", ablation_direction(&mut desk));
        }
    }
    if run(8) {
        println!(
            "criterion 8 [SKIP] full-scale MVTec AD: needs pretrained VGG19 weights, the dataset and a GPU; \
             run `stmae eval` with backbone.weights pointing at converted weights"
        );
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}

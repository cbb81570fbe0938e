//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use sparse_lstm::bench::{bench_backward, BenchConfig};
use sparse_lstm::data::{batch_iterate, DataConfig};
use sparse_lstm::gradcheck::{grad_check, GradCheckDims, DEFAULT_THRESHOLD};
use sparse_lstm::lstm::LstmStack;
use sparse_lstm::sparsify::{
    coarse_sparsify, decode_index, embed_index, fine_sparsify, meprop_topk, CoarseGeometry, SparsifierConfig,
    SparsityPattern,
};
use sparse_lstm::tensor::{gemm, gemm_gate, GemmMode, MacCounter, Matrix};
use sparse_lstm::train::{evaluate_perplexity, train, ModelConfig, TrainConfig, TrainSchedule, Trainer};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1. Gradient fidelity.

fn gradient_fidelity() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        // The first half runs at the largest allowed dims.
        let dims = if i < 10 {
            GradCheckDims { batch: 4, hidden: 8, input: 8, steps: 4, layers: 2 }
        } else {
            GradCheckDims {
                batch: rng.gen_range(1..=4),
                hidden: rng.gen_range(1..=8),
                input: rng.gen_range(1..=8),
                steps: rng.gen_range(1..=4),
                layers: 2,
            }
        };
        let report = grad_check(dims, 100 + i).map_err(|e| e.to_string())?;
        ensure(report.passes(DEFAULT_THRESHOLD), || {
            format!("instance {i} {dims:?}: max rel err {:.3e}", report.max_rel_err)
        })?;
        worst = worst.max(report.max_rel_err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("20 instances, max rel err {worst:.2e}, {secs:.1} s"))
}

// 2. Selection oracle equivalence.

/// Random `rows x cols` values in one of three regimes: continuous,
/// small integers (frequent exact ties) or duplicated column blocks.
fn selection_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, unit: usize) -> Matrix<f64> {
    match rng.gen_range(0..3) {
        0 => Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)),
        1 => Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-2i32..=2) as f64),
        _ => {
            let groups = cols / unit;
            let src = Matrix::from_fn(rows, unit * 2, |_, _| rng.gen_range(-1.0..1.0));
            let pick: Vec<usize> = (0..groups).map(|_| rng.gen_range(0..2)).collect();
            Matrix::from_fn(rows, cols, |r, c| src[(r, pick[c / unit] * unit + c % unit)])
        }
    }
}

fn squared_block(m: &Matrix<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let mut acc = 0.0;
    for c in cols {
        for r in rows.clone() {
            acc += m[(r, c)] * m[(r, c)];
        }
    }
    acc
}

/// A unit survives when fewer than `keep` units beat it; a unit beats
/// another by a larger norm, or an equal norm and a lower index.
fn oracle_keep(norms: &[f64], keep: usize) -> Vec<usize> {
    (0..norms.len())
        .filter(|&i| {
            let beaten_by = (0..norms.len())
                .filter(|&j| norms[j] > norms[i] || (norms[j] == norms[i] && j < i))
                .count();
            beaten_by < keep
        })
        .collect()
}

fn selection_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ties = 0;
    for trial in 0..1000 {
        let p = [1, 2, 4][rng.gen_range(0..3)];
        let region = [2, 4, 8, 16][rng.gen_range(0..4)];
        let removed = rng.gen_range(0..region);
        let regions = rng.gen_range(1..=3);
        let rows = rng.gen_range(1..=6);
        let cols = p * region * regions;
        let m = selection_matrix(&mut rng, rows, cols, p);
        let norms: Vec<f64> = (0..cols / p).map(|s| squared_block(&m, 0..rows, s * p..(s + 1) * p)).collect();
        let kept: Vec<Vec<usize>> = norms.chunks(region).map(|n| oracle_keep(n, region - removed)).collect();
        ties += norms.chunks(region).filter(|n| n.windows(2).any(|w| w[0] == w[1])).count();
        let expected = SparsityPattern::Coarse { rows, cols, slice_width: p, region, removed, kept };
        let got = coarse_sparsify(&m, p, region, removed).map_err(|e| e.to_string())?;
        ensure(got.pattern.as_ref() == Some(&expected), || format!("coarse trial {trial}: {:?} != {expected:?}", got.pattern))?;
    }
    for trial in 0..1000 {
        let tile_rows = [1, 2, 4, 8][rng.gen_range(0..4)];
        let tile_cols = [1, 2, 4][rng.gen_range(0..3)];
        let tiles = rng.gen_range(1..=4);
        let keep = rng.gen_range(0..=tiles);
        let (rows, cols) = (tile_rows * tiles, tile_cols * rng.gen_range(1..=6));
        let m = selection_matrix(&mut rng, rows, cols, tile_cols);
        let kept: Vec<Vec<usize>> = (0..cols / tile_cols)
            .map(|s| {
                let norms: Vec<f64> = (0..tiles)
                    .map(|t| squared_block(&m, t * tile_rows..(t + 1) * tile_rows, s * tile_cols..(s + 1) * tile_cols))
                    .collect();
                oracle_keep(&norms, keep)
            })
            .collect();
        let expected = SparsityPattern::Fine { rows, cols, tile_rows, tile_cols, keep, kept };
        let got = fine_sparsify(&m, tile_rows, tile_cols, keep).map_err(|e| e.to_string())?;
        ensure(got.pattern.as_ref() == Some(&expected), || format!("fine trial {trial}: {:?} != {expected:?}", got.pattern))?;
        let masked = Matrix::from_fn(rows, cols, |r, c| if expected.keeps(r, c) { m[(r, c)] } else { 0.0 });
        ensure(got.dnet == masked, || format!("fine trial {trial}: masked values differ"))?;
    }
    for trial in 0..1000 {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(1..=40);
        let k = rng.gen_range(1..=cols);
        let m = selection_matrix(&mut rng, rows, cols, 1);
        let norms: Vec<f64> = (0..cols).map(|c| squared_block(&m, 0..rows, c..c + 1)).collect();
        let expected = SparsityPattern::ColumnTopK { rows, cols, k, kept: oracle_keep(&norms, k) };
        let got = meprop_topk(&m, k).map_err(|e| e.to_string())?;
        ensure(got.pattern.as_ref() == Some(&expected), || format!("top-k trial {trial}: {:?} != {expected:?}", got.pattern))?;
    }
    Ok(format!("3 x 1000 matrices match, {ties} coarse regions with exact ties"))
}

// 3. Skip-GEMM equivalence.

fn ulps(a: f32, b: f32) -> u32 {
    let key = |x: f32| {
        let bits = x.to_bits() as i32;
        if bits < 0 {
            i32::MIN.wrapping_sub(bits)
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

fn skip_gemm_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_ulps = 0;
    let mut kinds = [0usize; 3];
    for trial in 0..500 {
        let hidden = 8 * rng.gen_range(1..=4);
        let gates = 4 * hidden;
        let batch = 8 * rng.gen_range(1..=3);
        let kind = rng.gen_range(0..3);
        kinds[kind] += 1;
        let config = match kind {
            0 => {
                let region = [2, 4, 8][rng.gen_range(0..3)];
                SparsifierConfig::coarse(region, rng.gen_range(0..region))
            }
            1 => SparsifierConfig::fine(rng.gen_range(0..=batch / 8)),
            _ => SparsifierConfig::ColumnTopK { k: rng.gen_range(1..=gates) },
        };
        let mode = GemmMode::ALL[rng.gen_range(0..4)];
        let k_out = rng.gen_range(1..=20);
        let mut rand_mat = |r, c| Matrix::<f32>::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let dnet = rand_mat(batch, gates);
        let (other, init) = if mode.is_weight_gradient() {
            (rand_mat(batch, k_out), rand_mat(gates, k_out))
        } else {
            (rand_mat(gates, k_out), rand_mat(batch, k_out))
        };
        let g = config.apply(dnet).map_err(|e| e.to_string())?;
        let mut sparse = init.clone();
        gemm_gate(&g, &other, mode, &mut sparse, &mut MacCounter::new()).map_err(|e| e.to_string())?;
        let mut dense = init;
        gemm(&g.expand(), &other, &mut dense, mode.is_weight_gradient(), false, &mut MacCounter::new())
            .map_err(|e| e.to_string())?;
        for (a, b) in sparse.data().iter().zip(dense.data()) {
            let d = ulps(*a, *b);
            max_ulps = max_ulps.max(d);
            ensure(d <= 4, || format!("trial {trial} {config:?} {mode:?}: {a} vs {b} ({d} ulp)"))?;
        }
        // Both paths contract in ascending order, so they agree exactly.
        ensure(sparse == dense, || format!("trial {trial} {config:?} {mode:?}: not bit-identical"))?;
    }
    Ok(format!("500 pairs (coarse/fine/top-k {kinds:?}), max {max_ulps} ulp, all bit-identical"))
}

// 4. MAC proportionality.

fn backward_macs(batch: usize, sparsifier: SparsifierConfig) -> Result<MacCounter, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (input, hidden, steps) = (24, 32, 5);
    let stack = LstmStack::<f32>::uniform(input, hidden, 2, 0.1, &mut rng);
    let xs: Vec<Matrix<f32>> =
        (0..steps).map(|_| Matrix::from_fn(batch, input, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let mut macs = MacCounter::new();
    stack
        .run_bptt(&xs, &stack.zero_state(batch), &sparsifier, &mut macs, |outs| {
            Ok((0.0, outs.iter().map(|h| h.map(|v| v - 0.25)).collect()))
        })
        .map_err(|e| e.to_string())?;
    Ok(macs)
}

fn mac_proportionality() -> Result<String, String> {
    let cases = [
        ("coarse R=8 S=2", 16, SparsifierConfig::coarse(8, 2), 1, 4),
        ("coarse R=8 S=4", 16, SparsifierConfig::coarse(8, 4), 1, 2),
        ("coarse R=8 S=6", 16, SparsifierConfig::coarse(8, 6), 3, 4),
        // Fine K = N / (2 My) at N = 16 and N = 32.
        ("fine N=16 K=1", 16, SparsifierConfig::fine(1), 1, 2),
        ("fine N=32 K=2", 32, SparsifierConfig::fine(2), 1, 2),
        ("fine N=32 K=3", 32, SparsifierConfig::fine(3), 1, 4),
        ("fine N=32 K=1", 32, SparsifierConfig::fine(1), 3, 4),
    ];
    let mut lines = Vec::new();
    for (name, batch, config, num, den) in cases {
        let dense = backward_macs(batch, SparsifierConfig::Identity)?;
        ensure(dense.executed_macs == dense.dense_macs, || "identity run skipped work".into())?;
        let sparse = backward_macs(batch, config)?;
        ensure(sparse.dense_macs == dense.dense_macs, || format!("{name}: dense totals differ"))?;
        // Sparsity s removes s of the work: executed = (1 - s) * dense.
        ensure(sparse.executed_macs * den == sparse.dense_macs * (den - num), || {
            format!("{name}: executed {} of {}", sparse.executed_macs, sparse.dense_macs)
        })?;
        lines.push(format!("{name} {:.3}", sparse.ratio()));
    }
    Ok(lines.join(", "))
}

// 5. Codec.

fn codec_round_trip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let p = rng.gen_range(1..=4);
        let region = [2, 4, 8, 16, 32][rng.gen_range(0..5)];
        let removed = rng.gen_range(0..region);
        let rows = rng.gen_range(1..=8);
        let cols = p * region * rng.gen_range(1..=3);
        let dnet = Matrix::<f32>::from_fn(rows, cols, |_, _| {
            let mag = rng.gen_range(1.0f32..2.0) * 2f32.powi(rng.gen_range(-30..30));
            if rng.gen() {
                mag
            } else {
                -mag
            }
        });
        let g = coarse_sparsify(&dnet, p, region, removed).map_err(|e| e.to_string())?;
        let pattern = g.pattern.clone().expect("coarse pattern");
        let embedded = embed_index(&g.dnet, &pattern).map_err(|e| e.to_string())?;
        let geometry = CoarseGeometry::of(&pattern).expect("coarse geometry");
        let decoded = decode_index(&embedded, &geometry).map_err(|e| e.to_string())?;
        ensure(decoded == pattern, || format!("trial {trial}: decoded pattern differs"))?;
        for (a, b) in g.dnet.data().iter().zip(embedded.data()) {
            let rel = ((a - b) / a).abs() as f64;
            worst = worst.max(rel);
            ensure(rel < 2f64.powi(-18), || format!("trial {trial}: {a} -> {b}"))?;
        }
    }
    Ok(format!("1000 patterns round-trip, max perturbation 2^{:.2}", worst.log2()))
}

// 6. Dense-after-sparse behaviour at desk scale.

#[derive(Deserialize)]
struct PinnedBaseline {
    seed: u64,
    steps: u64,
    lr: f64,
    valid_ppl: f64,
}

fn dense_after_sparse() -> Result<String, String> {
    let pinned: PinnedBaseline =
        serde_json::from_str(include_str!("../data/pinned_dense_baseline.json")).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let data = DataConfig::default();
    let corpus = data.load().map_err(|e| e.to_string())?;
    let model = ModelConfig::desk(corpus.vocab.len());
    let run = |mut schedule: TrainSchedule| -> Result<(f64, f64), String> {
        schedule.lr = pinned.lr;
        let config = TrainConfig {
            model,
            schedule,
            data: data.clone(),
            seed: pinned.seed,
            eval_every: 0,
            wall_time: false,
        };
        let untrained = Trainer::<f32>::new(config.clone(), &corpus.train).map_err(|e| e.to_string())?;
        let valid = batch_iterate(&corpus.valid, model.batch, model.unroll).map_err(|e| e.to_string())?;
        let before = evaluate_perplexity(untrained.model(), valid).map_err(|e| e.to_string())?;
        let out = train::<f32>(&config, &corpus.train, Some(&corpus.valid), &mut std::io::sink())
            .map_err(|e| e.to_string())?;
        Ok((before, out.valid_ppl.expect("validation ran")))
    };
    let sparse = |config, fraction| TrainSchedule::sparse_then_dense(config, fraction, pinned.steps).map_err(|e| e.to_string());
    let (untrained, dense) = run(TrainSchedule::dense(pinned.steps))?;
    let (_, coarse) = run(sparse(SparsifierConfig::coarse(8, 4), 1.0)?)?;
    let (_, fine) = run(sparse(SparsifierConfig::fine(model.batch / (2 * 8)), 1.0)?)?;
    let (_, mixed) = run(sparse(SparsifierConfig::coarse(8, 4), 0.75)?)?;
    let summary = format!(
        "untrained {untrained:.3}, dense {dense:.6} (pinned {:.4}), coarse {coarse:.4}, fine {fine:.4}, mixed 3/4 {mixed:.4}, {:.0} s",
        pinned.valid_ppl,
        start.elapsed().as_secs_f64()
    );
    ensure(coarse < untrained / 2.0 && fine < untrained / 2.0, || format!("(a) sparse runs did not converge: {summary}"))?;
    ensure((mixed - dense).abs() <= 0.05 * dense, || format!("(b) mixed gap {:.2}%: {summary}", 100.0 * (mixed / dense - 1.0)))?;
    ensure((dense - pinned.valid_ppl).abs() <= 0.01 * pinned.valid_ppl, || format!("(c) baseline drifted: {summary}"))?;
    Ok(summary)
}

// 7. Benchmark sanity.

fn benchmark_sanity() -> Result<String, String> {
    let report = bench_backward(&BenchConfig::large(), SparsifierConfig::coarse(8, 4)).map_err(|e| e.to_string())?;
    ensure(report.sparse.mac_ratio == 0.5, || format!("MAC ratio {}", report.sparse.mac_ratio))?;
    ensure(report.speedup > 1.0, || format!("speedup {:.3}", report.speedup))?;
    Ok(format!(
        "MAC ratio {:.3}, median {:.1} ms vs {:.1} ms, speedup {:.2}x (reference GPU figures: 45% and 36% faster)",
        report.sparse.mac_ratio, report.sparse.total_ms, report.baseline.total_ms, report.speedup
    ))
}

// 8. Determinism.

fn determinism() -> Result<String, String> {
    let data = DataConfig::default();
    let corpus = data.load().map_err(|e| e.to_string())?;
    let mut model = ModelConfig::desk(corpus.vocab.len());
    model.hidden = 32;
    model.embedding_dim = 32;
    let config = TrainConfig {
        model,
        schedule: TrainSchedule::sparse_then_dense(SparsifierConfig::coarse(8, 4), 0.5, 60).map_err(|e| e.to_string())?,
        data,
        seed: 7,
        eval_every: 20,
        wall_time: false,
    };
    let run = || -> Result<(Vec<u8>, Vec<u8>), String> {
        let mut metrics = Vec::new();
        let out = train::<f32>(&config, &corpus.train, Some(&corpus.valid), &mut metrics).map_err(|e| e.to_string())?;
        Ok((metrics, out.checkpoint.to_bytes().map_err(|e| e.to_string())?))
    };
    let (m1, c1) = run()?;
    let (m2, c2) = run()?;
    ensure(m1 == m2, || "metrics differ".into())?;
    ensure(c1 == c2, || "checkpoints differ".into())?;
    Ok(format!("metrics {} bytes and checkpoint {} bytes identical", m1.len(), c1.len()))
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("selection oracle equivalence", selection_oracle),
        ("skip-GEMM equivalence", skip_gemm_equivalence),
        ("MAC proportionality", mac_proportionality),
        ("codec round trip", codec_round_trip),
        ("dense after sparse", dense_after_sparse),
        ("benchmark sanity", benchmark_sanity),
        ("determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance runner: one PASS / FAIL / SKIP line per criterion.
//!
//! The real-traffic check needs the dataset on disk. Point `NBAIOT_MANIFEST`
//! at an ingest manifest (or `NBAIOT_DATA` at a dataset cache) to enable it.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use common::*;
use nbaiot_core::cost::{
    cost_gat, cost_gcn, cost_graph_build, cost_mlp, cost_pipeline, cost_vae, cost_vit,
    reference_inputs, CostInputs,
};
use nbaiot_core::dataset::{ingest, load_manifest, DataMatrix};
use nbaiot_core::engine::{Tape, Tensor};
use nbaiot_core::knn::{build_knn, Graph};
use nbaiot_core::metrics::compute_metrics;
use nbaiot_core::pipeline::{prepare, run_pipeline, PipelineConfig, PipelineKind, Task};
use nbaiot_core::synth::{gaussian_blobs, BlobSpec};
use nbaiot_core::vae::reparameterize;
use nbaiot_core::vit::{patchify, unpatchify};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let worst = full_grad_suite();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-2 && secs < 60.0,
        format!("max rel error {worst:.2e} (< 1e-2), {secs:.1}s (< 60s)"),
    )
}

fn knn_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for t in 0..50 {
        let n = rng.random_range(4..=1000);
        // Every other dataset lives on a coarse grid so that distance ties occur.
        let emb: Vec<f32> = (0..n * 8)
            .map(|_| {
                if t % 2 == 0 {
                    rng.random_range(0..3) as f32
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let g = build_knn(&emb, 8, 3).unwrap();
        let want = brute_knn(&emb, 8, 3);
        mismatches += (0..n)
            .filter(|&i| g.neighbors(i) != want[i].as_slice())
            .count();
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 30.0,
        format!("50 datasets, {mismatches} mismatched rows, {secs:.1}s (< 30s)"),
    )
}

fn gcn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let (d, k) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let p = rng.random_range(0.0..0.3);
        let raw = random_graph(&mut rng, n, p);
        let x = rand_matrix(&mut rng, n, d);
        let w = rand_matrix(&mut rng, d, k);
        let got = tape_gcn(&raw.normalized().to_csr(), &x, &w);
        let want = dense_gcn(&raw, &to_f64(&x), &to_f64(&w), d, k);
        worst = worst.max(max_abs_diff(&to_f64(&got), &want));
    }
    verdict(
        worst <= 1e-5,
        format!("100 graphs, max abs diff {worst:.2e} (<= 1e-5)"),
    )
}

fn gat_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut row_err = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=64);
        let g = random_graph(&mut rng, n, 0.2).normalized();
        let x = rand_matrix(&mut rng, n, 4);
        let w = rand_matrix(&mut rng, 4, 3);
        let a = rand_matrix(&mut rng, 3, 2);
        let (_, alpha) = tape_gat(&g.to_csr(), &x, &w, &a, 0.2);
        for i in 0..n {
            let s: f64 = alpha[g.offsets[i]..g.offsets[i + 1]]
                .iter()
                .map(|&v| v as f64)
                .sum();
            row_err = row_err.max((s - 1.0).abs());
        }
    }

    let g = Graph::from_edges(3, &[(0, 1), (1, 0)])
        .unwrap()
        .normalized();
    let x = rand_matrix(&mut rng, 3, 4);
    let w = rand_matrix(&mut rng, 4, 5);
    let a = rand_matrix(&mut rng, 5, 2);
    let (out, _) = tape_gat(&g.to_csr(), &x, &w, &a, 0.2);
    let mut tape = Tape::inference();
    let (xv, wv) = (tape.constant(x), tape.constant(w));
    let h = tape.matmul(xv, wv).unwrap();
    let isolated_exact = out.row(2) == tape.value(h).row(2);

    let g = random_graph(&mut rng, 20, 0.3).normalized();
    let row = rand_matrix(&mut rng, 1, 4);
    let x = Tensor::matrix(20, 4, row.data().repeat(20));
    let w = rand_matrix(&mut rng, 4, 3);
    let a = rand_matrix(&mut rng, 3, 2);
    let (_, alpha) = tape_gat(&g.to_csr(), &x, &w, &a, 0.2);
    let uniform_err = (0..20)
        .flat_map(|i| {
            let deg = g.degree(i) as f64;
            alpha[g.offsets[i]..g.offsets[i + 1]]
                .iter()
                .map(move |&v| (v as f64 - 1.0 / deg).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);

    verdict(
        row_err <= 1e-6 && isolated_exact && uniform_err <= 1e-6,
        format!(
            "row sum err {row_err:.1e}, isolated node exact: {isolated_exact}, uniform err {uniform_err:.1e}"
        ),
    )
}

fn vae_analytics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut kl_err = 0.0f64;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mu = rand_matrix(&mut rng, r, c);
        let lv = rand_matrix(&mut rng, r, c);
        let want: f64 = mu
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| 0.5 * ((m as f64).powi(2) + (l as f64).exp() - l as f64 - 1.0))
            .sum::<f64>()
            / r as f64;
        let mut tape = Tape::inference();
        let (m, l) = (tape.constant(mu), tape.constant(lv));
        let kl = tape.gaussian_kl(m, l).unwrap();
        kl_err = kl_err.max((tape.value(kl).item() as f64 - want).abs());
    }

    let mut tape = Tape::inference();
    let (m, l) = (
        tape.constant(Tensor::zeros(3, 8)),
        tape.constant(Tensor::zeros(3, 8)),
    );
    let kl = tape.gaussian_kl(m, l).unwrap();
    let kl_zero = tape.value(kl).item();

    let n = 100_000;
    let mu = [0.7f32, -1.3];
    let mut tape = Tape::inference();
    let m = tape.constant(Tensor::matrix(n, 2, mu.repeat(n)));
    let l = tape.constant(Tensor::matrix(n, 2, [0.0f32, 0.5].repeat(n)));
    let z = reparameterize(&mut tape, m, l, &mut rng).unwrap();
    let z = tape.value(z);
    let mc_err = (0..2)
        .map(|c| {
            let mean = (0..n).map(|r| z.get(r, c) as f64).sum::<f64>() / n as f64;
            (mean - mu[c] as f64).abs()
        })
        .fold(0.0, f64::max);

    verdict(
        kl_err <= 1e-5 && kl_zero == 0.0 && mc_err <= 0.02,
        format!("KL err {kl_err:.1e}, KL(0,0) = {kl_zero}, MC mean err {mc_err:.4} (<= 0.02)"),
    )
}

fn vit_patching() -> Outcome {
    let x: Vec<f32> = (0..115).map(|i| i as f32).collect();
    let p = patchify(&x, 5, 23).unwrap();
    let first_ok = p[..5] == [0.0, 23.0, 46.0, 69.0, 92.0];
    let count = p.chunks(5).count();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let round_trip = (0..100).all(|_| {
        let r: Vec<f32> = (0..115).map(|_| rng.random_range(-1e3..1e3)).collect();
        unpatchify(&patchify(&r, 5, 23).unwrap(), 5, 23).unwrap() == r
    });
    verdict(
        first_ok && count == 23 && p.len() == 115 && round_trip,
        format!(
            "patch 0 = {:?}, {count} patches of 5, round trip exact: {round_trip}",
            &p[..5]
        ),
    )
}

fn end_to_end_synthetic() -> Outcome {
    let start = Instant::now();
    let blobs = gaussian_blobs(&BlobSpec::three_class(42));
    let data = prepare(&blobs, Task::Multiclass, 0, None).unwrap();
    let config = PipelineConfig::default();
    let mut parts = Vec::new();
    let mut ok = data.n_train() == 3000 && data.n_test() == 750;
    for kind in PipelineKind::ALL {
        let run = run_pipeline(kind, &data, &config).unwrap();
        ok &= run.report.accuracy >= 0.95;
        parts.push(format!("{kind} {:.2}%", 100.0 * run.report.accuracy));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    verdict(
        ok,
        format!(
            "{}/{} rows; {} (>= 95%); {secs:.0}s (< 300s)",
            data.n_train(),
            data.n_test(),
            parts.join(", ")
        ),
    )
}

fn real_traffic() -> Outcome {
    let data: DataMatrix = if let Ok(m) = std::env::var("NBAIOT_MANIFEST") {
        ingest(&load_manifest(Path::new(&m)).unwrap()).unwrap()
    } else if let Ok(d) = std::env::var("NBAIOT_DATA") {
        DataMatrix::read_cache(Path::new(&d)).unwrap()
    } else {
        return Outcome::Skip("dataset not available (set NBAIOT_MANIFEST or NBAIOT_DATA)".into());
    };
    let start = Instant::now();
    let config = PipelineConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();

    let binary = prepare(&data, Task::Binary, 0, Some(5000)).unwrap();
    for kind in PipelineKind::ALL {
        let r = run_pipeline(kind, &binary, &config).unwrap().report;
        let worst = r.accuracy.min(r.precision_w).min(r.recall_w).min(r.f1_w);
        ok &= worst >= 0.99;
        parts.push(format!("binary {kind} min {:.2}%", 100.0 * worst));
    }

    let multi = prepare(&data, Task::Multiclass, 0, Some(5000)).unwrap();
    let mut acc = std::collections::BTreeMap::new();
    for kind in PipelineKind::ALL {
        let r = run_pipeline(kind, &multi, &config).unwrap().report;
        acc.insert(kind, r.accuracy);
    }
    ok &= acc[&PipelineKind::VaeMlp] >= 0.95;
    let floor = acc[&PipelineKind::VaeMlp].min(acc[&PipelineKind::VitMlp]);
    let ordering = acc[&PipelineKind::VaeGcn] < floor && acc[&PipelineKind::VaeGat] < floor;
    for (kind, a) in &acc {
        parts.push(format!("multiclass {kind} {:.2}%", 100.0 * a));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 1800.0;
    parts.push(format!(
        "graph kinds below the others (informative): {ordering}"
    ));
    parts.push(format!("{secs:.0}s (< 1800s)"));
    verdict(ok, parts.join("; "))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let mut exact = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..=500);
        let c = rng.random_range(1..=10);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let m = compute_metrics(&truth, &pred, &names).unwrap();
        let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        exact &= m.recall_w == m.accuracy && m.accuracy == correct as f64 / n as f64;
    }
    let two: Vec<String> = vec!["0".into(), "1".into()];
    let m = compute_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], &two).unwrap();
    let f1_err = (m.f1_w - 11.0 / 15.0).abs();
    verdict(
        exact && f1_err <= 1e-10,
        format!("weighted recall == accuracy on 1000 vectors: {exact}; 4-sample F1 {:.10} (err {f1_err:.1e})", m.f1_w),
    )
}

fn cost_model() -> Outcome {
    let formulas = [
        cost_vae(1, 1, 1).unwrap() == 1,
        cost_vit(1, 1, 1).unwrap() == 2,
        cost_graph_build(1, 1, 1).unwrap() == 2,
        cost_gcn(1, 1, 1, 1, 1).unwrap() == 2,
        cost_gat(1, 1, 1, 1, 1, 1).unwrap() == 2,
        cost_mlp(1, 1, 1).unwrap() == 1,
    ];
    let rows: Vec<u128> = PipelineKind::ALL
        .iter()
        .map(|&k| cost_pipeline(k, &CostInputs::ones()).unwrap().total)
        .collect();
    let worked = cost_gcn(2, 300, 8, 100, 16).unwrap();
    let x = reference_inputs();
    let total = |k| cost_pipeline(k, &x).unwrap().total;
    let mlp = total(PipelineKind::VaeMlp);
    let (gcn, gat) = (total(PipelineKind::VaeGcn), total(PipelineKind::VaeGat));
    verdict(
        formulas.iter().all(|&b| b) && rows == [3, 5, 5, 3] && worked == 30_400 && gcn > mlp && gat > mlp,
        format!(
            "all-ones rows {rows:?}, cost_gcn example {worked}, full scale VAE-MLP {mlp} < VAE-GCN {gcn}, VAE-GAT {gat}"
        ),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_nbaiot"))
        .args(args)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.nbds");
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    if !run_cli(&["synth", "--out", &s(&data)]) {
        return Outcome::Fail("synth failed".into());
    }
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("cmp{i}"))).collect();
    for out in &outs {
        let ok = run_cli(&[
            "compare",
            "--data",
            &s(&data),
            "--deterministic",
            "--seed",
            "7",
            "--out",
            &s(out),
        ]);
        if !ok {
            return Outcome::Fail("compare failed".into());
        }
    }
    let mut same = 0;
    let mut differ = Vec::new();
    for kind in PipelineKind::ALL {
        let read = |o: &PathBuf| std::fs::read(o.join(kind.as_str()).join("report.json")).ok();
        match (read(&outs[0]), read(&outs[1])) {
            (Some(a), Some(b)) if a == b => same += 1,
            _ => differ.push(kind.as_str()),
        }
    }
    verdict(
        differ.is_empty(),
        format!("{same}/4 report.json byte-identical across two runs; differing: {differ:?}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradients),
        ("knn oracle", knn_oracle),
        ("gcn oracle", gcn_oracle),
        ("gat normalization and degenerate cases", gat_checks),
        ("vae analytics", vae_analytics),
        ("vit patching", vit_patching),
        ("end-to-end synthetic", end_to_end_synthetic),
        ("n-baiot desk scale", real_traffic),
        ("metrics oracle", metrics_oracle),
        ("cost model", cost_model),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let took = fmt_secs(start.elapsed());
        match outcome {
            Outcome::Pass(d) => println!("PASS {name}: {d} [{took}]"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL {name}: {d} [{took}]");
            }
            Outcome::Skip(d) => println!("SKIP {name}: {d}"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

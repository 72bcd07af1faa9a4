//! Acceptance criteria, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line; run with `--nocapture` to see them.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hicolora::adapter::{
    route_with_noise, semadapt_forward_high, semadapt_forward_low, unirep_forward, FrozenNoise, HiCoLayerParams,
    LayerMode, RoutePhase, RoutingDecision,
};
use hicolora::cluster::{select_k, silhouette, spectral_cluster};
use hicolora::dstsim::{aga, builtin_schemas, generate_corpus, jga, synthetic_embeddings, SplitSpec, State, Triple};
use hicolora::init::{kaiming_zero_init, milora_init, pissa_init, semsvd_init, InitPair};
use hicolora::model::EncoderConfig;
use hicolora::numkit::{argmax, gumbel_noise, gumbel_softmax, gumbel_softmax_with_noise, normalize, softmax, svd};
use hicolora::trainer::{build_model, cluster_schemas, merge_gap, split_corpus, Experiment, TaskData, TrainConfig, Variant};
use hicolora::{Error, Matrix, RngStream};

fn report(n: u32, pass: bool, detail: impl std::fmt::Display) {
    println!("criterion {n:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn unit_rows(k: usize, d: usize, rng: &mut RngStream) -> Matrix {
    let raw = Matrix::random_normal(k, d, 1.0, rng);
    let rows: Vec<Vec<f64>> = (0..k).map(|i| normalize(raw.row(i)).unwrap()).collect();
    Matrix::from_rows(&rows).unwrap()
}

fn reconstruction(pair: &InitPair, w0: &Matrix) -> f64 {
    pair.residual_error(w0).unwrap()
}

#[test]
fn criterion_01_residual_exactness() {
    let start = Instant::now();
    let mut rng = RngStream::new(101);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let rows = 8 + rng.index(57);
        let cols = 8 + rng.index(41);
        let w0 = Matrix::random_normal(rows, cols, 1.0, &mut rng);
        let r = 1 + (i % 8);
        let centroids = unit_rows(3, cols, &mut rng);
        for lambda in [0.0, 0.5, 3.0] {
            worst = worst.max(reconstruction(&semsvd_init(&w0, r, lambda, &centroids).unwrap().0, &w0));
        }
        worst = worst.max(reconstruction(&pissa_init(&w0, r).unwrap(), &w0));
        worst = worst.max(reconstruction(&milora_init(&w0, r).unwrap(), &w0));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && secs < 5.0;
    report(1, pass, format!("max relative residual {worst:.2e} (≤ 1e-9), {secs:.2}s (< 5s)"));
    assert!(pass);
}

#[test]
fn criterion_02_semsvd_reductions() {
    let mut rng = RngStream::new(202);
    let w0 = Matrix::random_normal(14, 10, 1.0, &mut rng);
    let r = 4;
    let centroids = unit_rows(2, 10, &mut rng);
    let pissa = pissa_init(&w0, r).unwrap();
    let (sem0, _) = semsvd_init(&w0, r, 0.0, &centroids).unwrap();
    let gap0 = [sem0.a.max_abs_diff(&pissa.a), sem0.b.max_abs_diff(&pissa.b), sem0.base.max_abs_diff(&pissa.base)]
        .into_iter()
        .map(Result::unwrap)
        .fold(0.0, f64::max);

    // A centroid orthogonal to every retained right singular vector.
    let v = svd(&w0).unwrap().v;
    let mut c = Matrix::random_normal(1, 10, 1.0, &mut rng).row(0).to_vec();
    for k in 0..r {
        let vk = v.col(k);
        let proj: f64 = c.iter().zip(&vk).map(|(a, b)| a * b).sum();
        c.iter_mut().zip(&vk).for_each(|(a, b)| *a -= proj * b);
    }
    let orth = Matrix::row_vector(&normalize(&c).unwrap());
    let (sem_orth, _) = semsvd_init(&w0, r, 0.5, &orth).unwrap();
    let gap_orth = sem_orth.b.matmul(&sem_orth.a).unwrap().max_abs_diff(&pissa.b.matmul(&pissa.a).unwrap()).unwrap();

    let e1 = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
    let (id, _) = semsvd_init(&Matrix::identity(3), 3, 0.5, &e1).unwrap();
    let ba = id.b.matmul(&id.a).unwrap();
    let id_gap = ba
        .max_abs_diff(&Matrix::from_diag(&[1.5, 1.0, 1.0]))
        .unwrap()
        .max(id.base.max_abs_diff(&Matrix::from_diag(&[-0.5, 0.0, 0.0])).unwrap());

    let pass = gap0 <= 1e-12 && gap_orth <= 1e-12 && id_gap <= 1e-15;
    report(
        2,
        pass,
        format!("λ=0 vs PiSSA {gap0:.1e}; orthogonal centroid vs PiSSA {gap_orth:.1e}; identity example {id_gap:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_initial_forward_preservation() {
    let mut rng = RngStream::new(303);
    let (mut svd_worst, mut kaiming_exact): (f64, bool) = (0.0, true);
    for _ in 0..10 {
        let (d_out, d_in) = (6 + rng.index(20), 6 + rng.index(20));
        let w0 = Matrix::random_normal(d_out, d_in, 1.0, &mut rng);
        let centroids = unit_rows(2, d_in, &mut rng);
        let x = Matrix::random_normal(7, d_in, 1.0, &mut rng);
        let reference = x.matmul_nt(&w0).unwrap();
        let r = 3;
        let pairs = [
            semsvd_init(&w0, r, 0.5, &centroids).unwrap().0,
            pissa_init(&w0, r).unwrap(),
            milora_init(&w0, r).unwrap(),
        ];
        let as_layer = |p: &InitPair| {
            let mut l = HiCoLayerParams::random(d_out, d_in, r, 1, 1, LayerMode::FullCollaboration, &mut RngStream::new(0));
            l.base = p.base.clone();
            l.a_ur = p.a.clone();
            l.b_ur = p.b.clone();
            l
        };
        for p in &pairs {
            let h = unirep_forward(&as_layer(p), &x).unwrap();
            svd_worst = svd_worst.max(h.relative_error(&reference).unwrap());
        }
        let k = kaiming_zero_init(&w0, r, &mut rng).unwrap();
        kaiming_exact &= unirep_forward(&as_layer(&k), &x).unwrap() == reference;
    }
    let pass = svd_worst <= 1e-9 && kaiming_exact;
    report(3, pass, format!("SVD family max relative gap {svd_worst:.1e} (≤ 1e-9); Kaiming+zero exact: {kaiming_exact}"));
    assert!(pass);
}

fn small_task(seed: u64, dim: usize, dialogs: usize) -> (TaskData, hicolora::cluster::JointClusterModel, hicolora::dstsim::Split) {
    let schemas = builtin_schemas();
    let corpus = generate_corpus(&schemas, dialogs, 3, &mut RngStream::new(seed)).unwrap();
    let table = synthetic_embeddings(&schemas, dim, seed).unwrap();
    let clusters = cluster_schemas(&schemas, &table, Default::default(), seed).unwrap();
    let split = split_corpus(
        &corpus,
        &SplitSpec { train_domains: vec![], heldout_domain: "taxi".into(), dev_fraction: 0.1 },
        seed,
    )
    .unwrap();
    let data = TaskData::build(&corpus, &split.train, &table, 6, seed).unwrap();
    (data, clusters, split)
}

#[test]
fn criterion_04_merge_equivalence() {
    let start = Instant::now();
    let (data, clusters, split) = small_task(404, 16, 10);
    let encoder = EncoderConfig { num_layers: 2, hidden_dim: 16, heads: 2, ffn_dim: 32, ..Default::default() };
    let cfg = TrainConfig { rank: 3, seed: 404, ..Default::default() };
    let mut model = build_model(&data, &clusters, &encoder, &cfg).unwrap();
    // Move every fusion logit and adapter off its initial value.
    let mut rng = RngStream::new(405);
    let perturbed: Vec<Matrix> = model
        .trainable(Default::default())
        .into_iter()
        .map(|(_, m)| m.add(&Matrix::random_normal(m.rows(), m.cols(), 0.3, &mut rng)).unwrap())
        .collect();
    model.set_trainable(Default::default(), &perturbed).unwrap();
    let merged = model.merge(&data.all_bundles()).unwrap();

    let bundles = data.all_bundles();
    let vocab = model.vocab.tokens().to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = 3 + rng.index(12);
        let context: Vec<String> = (0..len).map(|_| vocab[rng.index(vocab.len())].clone()).collect();
        let b = bundles[rng.index(bundles.len())];
        let u = model.infer_logits(&context, b).unwrap();
        let m = merged.infer_logits(&context, b).unwrap();
        worst = u.iter().zip(&m).fold(worst, |w, (x, y)| w.max((x - y).abs()));
    }
    // The gate used by `merge` before writing: a corrupted fold must be refused.
    let mut broken = merged.clone();
    broken.head_b.data_mut()[0] += 1e-3;
    let refused = matches!(merge_gap(&model, &broken, &data, &split.test), Err(Error::Numerical { .. }));
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-5 && refused && secs < 10.0;
    report(4, pass, format!("max logit gap {worst:.1e} over 100 inputs (≤ 1e-5); violation refused: {refused}; {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_05_low_high_consistency() {
    let mut rng = RngStream::new(505);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (d, r, m, n) = (4 + rng.index(12), 1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(4));
        let mut layer = HiCoLayerParams::random(d, d, r, m, n, LayerMode::HeuristicGrouping, &mut rng);
        let a = Matrix::random_normal(r, d, 0.5, &mut rng);
        let b = Matrix::random_normal(d, r, 0.5, &mut rng);
        layer.a_sa = vec![a; m];
        layer.b_sa = vec![b; n];
        let x_sa = Matrix::random_normal(1, d, 1.0, &mut rng);
        let routing = RoutingDecision {
            domain_weights: softmax(Matrix::random_normal(1, m, 1.0, &mut rng).row(0), 1.0).unwrap(),
            slot_weights: softmax(Matrix::random_normal(1, n, 1.0, &mut rng).row(0), 1.0).unwrap(),
            hard: false,
            phase: RoutePhase::Infer,
            noise_seed: None,
        };
        let low = semadapt_forward_low(&layer, &x_sa, &routing).unwrap();
        let full = HiCoLayerParams { mode: LayerMode::FullCollaboration, ..layer.clone() };
        let high = semadapt_forward_high(&full, &x_sa).unwrap();
        worst = worst.max(low.max_abs_diff(&high).unwrap() / high.max_abs().max(1.0));
    }
    let pass = worst <= 1e-12;
    report(5, pass, format!("max scaled difference {worst:.1e} over 50 layers (≤ 1e-12)"));
    assert!(pass);
}

#[test]
fn criterion_06_gradient_fidelity() {
    let start = Instant::now();
    let (data, clusters, split) = small_task(606, 8, 4);
    let encoder = EncoderConfig { num_layers: 2, hidden_dim: 8, heads: 2, ffn_dim: 16, ..Default::default() };
    let cfg = TrainConfig { rank: 2, seed: 606, ..Default::default() };
    let mut model = build_model(&data, &clusters, &encoder, &cfg).unwrap();
    let mut rng = RngStream::new(607);
    model.head_w = Matrix::random_normal(model.num_classes(), 8, 0.5, &mut rng);
    let dialog = &split.train[0];
    let slot = &data.schema(&dialog.domain).unwrap().slots[0].name;
    let bundle = data.bundle(&dialog.domain, slot).unwrap();
    let ids = model.input_ids(&dialog.history_tokens(1), bundle);
    let noise = FrozenNoise { domain: gumbel_noise(clusters.m, &mut rng), slot: gumbel_noise(clusters.n, &mut rng) };
    let report_g = model.gradient_check(&ids, bundle, 1, &noise, 1e-5).unwrap();
    let names: Vec<String> = model.trainable(Default::default()).into_iter().map(|(n, _)| n).collect();
    let has_beta = names.iter().any(|n| n.ends_with("beta_logit"));
    let secs = start.elapsed().as_secs_f64();
    let pass = report_g.worst() <= 1e-4 && has_beta && secs < 60.0;
    report(
        6,
        pass,
        format!("max relative error {:.1e} over {} groups incl. fusion logits (≤ 1e-4), {secs:.1}s", report_g.worst(), names.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_07_routing_statistics() {
    let logits = [0.9, -0.4, 0.2, 0.0, -1.1];
    let p = softmax(&logits, 1.0).unwrap();
    let mut counts = [0usize; 5];
    let mut rng = RngStream::new(707);
    let draws = 10_000;
    for _ in 0..draws {
        counts[argmax(&gumbel_softmax(&logits, 1.0, &mut rng, true).unwrap())] += 1;
    }
    let dev = (0..5).map(|i| (counts[i] as f64 / draws as f64 - p[i]).abs()).fold(0.0, f64::max);
    let cold = gumbel_softmax_with_noise(&logits, 1e-3, &[0.0; 5], false).unwrap();
    let near = |w: &[f64], hot: &[f64]| w.iter().zip(hot).all(|(a, b)| (a - b).abs() <= 1e-12);
    let cold_ok = near(&cold, &[1.0, 0.0, 0.0, 0.0, 0.0]);
    // Routing itself, through centroids, with zeroed noise.
    let c = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let r = route_with_noise(&[0.2, 0.9], &c, &c, 1e-3, &[0.0; 2], &[0.0; 2], false).unwrap();
    let route_ok = near(&r.domain_weights, &[0.0, 1.0]) && near(&r.slot_weights, &[0.0, 1.0]);
    let pass = dev <= 0.02 && cold_ok && route_ok;
    report(7, pass, format!("max frequency deviation {dev:.4} (≤ 0.02); cold argmax: {}", cold_ok && route_ok));
    assert!(pass);
}

fn line(xs: &[f64]) -> Matrix {
    Matrix::from_rows(&xs.iter().map(|x| [*x]).collect::<Vec<_>>()).unwrap()
}

/// Silhouette evaluated directly from its definition, point by point.
fn brute_silhouette(xs: &[f64], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..xs.len() {
        let mean_to = |l: usize| {
            let d: Vec<f64> = (0..xs.len()).filter(|&j| j != i && labels[j] == l).map(|j| (xs[i] - xs[j]).abs()).collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let a = mean_to(labels[i]);
        let b = labels.iter().filter(|&&l| l != labels[i]).map(|&l| mean_to(l)).fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / xs.len() as f64
}

const SILHOUETTE_FIXTURE: [f64; 4] = [0.0, 0.1, 10.0, 10.1];

#[test]
fn criterion_08_spectral_clustering_oracles() {
    let start = Instant::now();
    // Antipodal bundles have zero affinity across components.
    let u = normalize(&[0.3, -0.5, 0.8, 0.1]).unwrap();
    let mut rng = RngStream::new(808);
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..10 {
        let sign = if i % 3 == 0 { -1.0 } else { 1.0 };
        rows.push(u.iter().map(|x| sign * x).collect::<Vec<_>>());
        truth.push(usize::from(sign < 0.0));
    }
    let labels = spectral_cluster(&Matrix::from_rows(&rows).unwrap(), 2, &mut rng).unwrap();
    let two_ok = (0..10).all(|i| (0..10).all(|j| (labels[i] == labels[j]) == (truth[i] == truth[j])));

    let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut blob = Vec::new();
    for c in &centers {
        for _ in 0..6 {
            let v: Vec<f64> = c.iter().map(|x| x + 0.05 * rng.normal()).collect();
            blob.push(normalize(&v).unwrap());
        }
    }
    let sel = select_k(&Matrix::from_rows(&blob).unwrap(), 2, 6, &RngStream::new(809)).unwrap();

    let oracle = brute_silhouette(&SILHOUETTE_FIXTURE, &[0, 0, 1, 1]);
    let s = silhouette(&line(&SILHOUETTE_FIXTURE), &[0, 0, 1, 1]).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = two_ok && sel.k_best == 3 && (s - oracle).abs() <= 1e-12 && secs < 5.0;
    report(
        8,
        pass,
        format!(
            "2 components exact: {two_ok}; 3 blobs → k = {}; 4-point silhouette {s:.8} vs brute-force oracle {oracle:.8}; {secs:.2}s",
            sel.k_best
        ),
    );
    assert!(pass);
}

/// The literal value printed for the 4-point fixture disagrees with its own
/// brute-force evaluation (0.98999975); kept so the discrepancy stays visible.
#[test]
#[ignore = "fixture literal 0.9880 differs from the brute-force value 0.98999975"]
fn criterion_08_literal_silhouette_value() {
    let s = silhouette(&line(&SILHOUETTE_FIXTURE), &[0, 0, 1, 1]).unwrap();
    assert!((s - 0.9880).abs() <= 1e-3, "silhouette {s}");
}

fn t(d: &str, s: &str, v: &str) -> Triple {
    (d.into(), s.into(), v.into())
}

#[test]
fn criterion_09_metric_fixtures() {
    let st = |items: &[Triple]| items.iter().cloned().collect::<State>();
    let gold = vec![st(&[t("d", "a", "1"), t("d", "b", "2")])];
    let wrong_b = vec![st(&[t("d", "a", "1"), t("d", "b", "3")])];
    let g2 = vec![st(&[t("d", "a", "1")])];
    let p2 = vec![st(&[t("d", "b", "2"), t("d", "c", "3")])];
    let fixtures_ok = aga(&wrong_b, &gold, false).unwrap() == 0.0
        && aga(&gold, &gold, false).unwrap() == 1.0
        && aga(&p2, &g2, false).unwrap() == -2.0
        && jga(&[gold[0].clone(), wrong_b[0].clone()], &[gold[0].clone(), gold[0].clone()]).unwrap() == 0.5;

    let mut rng = RngStream::new(909);
    let mut implication_ok = true;
    for _ in 0..1000 {
        let turns = 1 + rng.index(4);
        let mut golds = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..turns {
            let g: BTreeSet<Triple> = (0..1 + rng.index(4))
                .map(|_| t("d", &format!("s{}", rng.index(5)), &format!("v{}", rng.index(3))))
                .collect();
            let p = if rng.uniform() < 0.5 {
                g.clone()
            } else {
                (0..rng.index(5)).map(|_| t("d", &format!("s{}", rng.index(5)), &format!("v{}", rng.index(3)))).collect()
            };
            golds.push(g);
            preds.push(p);
        }
        if jga(&preds, &golds).unwrap() == 1.0 {
            implication_ok &= aga(&preds, &golds, false).unwrap() == 1.0;
        }
    }
    let pass = fixtures_ok && implication_ok;
    report(9, pass, format!("hand fixtures exact: {fixtures_ok}; jga = 1 ⟹ aga = 1 on 1000 fuzzed sets: {implication_ok}"));
    assert!(pass);
}

/// Desk-scale zero-shot setting shared by criteria 10 and 11.
pub const ZS_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const ZS_DIALOGS_PER_DOMAIN: usize = 120;

fn zero_shot_experiment(seed: u64) -> Experiment {
    let schemas = builtin_schemas();
    let dim = 32;
    let table = synthetic_embeddings(&schemas, dim, seed).unwrap();
    Experiment {
        corpus: generate_corpus(&schemas, ZS_DIALOGS_PER_DOMAIN, 3, &mut RngStream::new(seed)).unwrap(),
        split: SplitSpec { train_domains: vec![], heldout_domain: "taxi".into(), dev_fraction: 0.1 },
        clusters: cluster_schemas(&schemas, &table, Default::default(), seed).unwrap(),
        table,
        encoder: EncoderConfig { num_layers: 2, hidden_dim: dim, heads: 4, ffn_dim: 2 * dim, ..Default::default() },
        train: TrainConfig {
            learning_rate: 3e-3,
            grad_accum_steps: 1,
            epochs: 20,
            early_stop_patience: 20,
            seed,
            ..Default::default()
        },
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Thirty training runs (about 40 min on one core). Run with `--ignored`.
#[test]
#[ignore = "slow 5-seed grid; last run: full 0.336 vs single LoRA 0.344, kaiming 0.339 > full (criteria 10 and 11 FAIL)"]
fn criteria_10_11_zero_shot_and_ablation_direction() {
    let start = Instant::now();
    let variants = [
        Variant::Full,
        Variant::SingleLora,
        Variant::SwapHier,
        Variant::StaticFusion,
        Variant::NoCluster,
        Variant::Kaiming,
    ];
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    let mut pair_secs = 0.0;
    for seed in ZS_SEEDS {
        let exp = zero_shot_experiment(seed);
        for (i, v) in variants.iter().enumerate() {
            let t = Instant::now();
            let out = exp.run(*v).unwrap();
            if i < 2 {
                pair_secs += t.elapsed().as_secs_f64();
            }
            scores[i].push(out.test.jga);
            println!("  seed {seed} {:<14} held-out jga {:.4}", v.name(), out.test.jga);
        }
    }
    let med: Vec<f64> = scores.iter().map(|s| median(s.clone())).collect();
    let gain = med[0] - med[1];
    let pass10 = gain >= 0.05 && pair_secs < 900.0;
    report(
        10,
        pass10,
        format!(
            "median held-out jga full {:.4} vs single LoRA {:.4}: gain {:+.4} (≥ +0.05); {pair_secs:.0}s for both (< 900s)",
            med[0], med[1], gain
        ),
    );
    let below: Vec<String> = variants[2..]
        .iter()
        .zip(&med[2..])
        .filter(|(_, m)| **m > med[0])
        .map(|(v, m)| format!("{}={m:.4}", v.name()))
        .collect();
    let pass11 = below.is_empty();
    report(
        11,
        pass11,
        format!(
            "full median {:.4} ≥ swap_hier {:.4}, static_fusion {:.4}, no_cluster {:.4}, kaiming {:.4}{}",
            med[0],
            med[2],
            med[3],
            med[4],
            med[5],
            if pass11 { String::new() } else { format!(" (exceeded by {})", below.join(", ")) }
        ),
    );
    println!("  total {:.0}s", start.elapsed().as_secs_f64());
    assert!(pass10 && pass11);
}

fn hicolora(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hicolora"))
        .args(args)
        .current_dir(dir)
        .env_remove("HICOLORA_SEED")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn criterion_12_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("cfg.json"),
            r#"{"encoder": {"num_layers": 2, "hidden_dim": 16, "heads": 2, "ffn_dim": 32},
                "train": {"epochs": 2, "learning_rate": 0.003, "grad_accum_steps": 1, "rank": 2}}"#,
        )
        .unwrap();
        let steps: [&[&str]; 5] = [
            &["gen-data", "--out", "corpus.json", "--dialogs", "5", "--turns", "2", "--embeddings-out", "emb.json", "--dim", "16"],
            &["cluster", "--embeddings", "emb.json", "--corpus", "corpus.json", "--out", "clusters.json"],
            &[
                "train", "--config", "cfg.json", "--corpus", "corpus.json", "--embeddings", "emb.json", "--clusters",
                "clusters.json", "--heldout", "taxi", "--out", "run",
            ],
            &["eval", "--checkpoint", "run/checkpoint"],
            &["merge", "--checkpoint", "run/checkpoint", "--out", "merged"],
        ];
        let mut stdout = String::new();
        for args in steps {
            let (code, text) = hicolora(&dir, args);
            assert_eq!(code, 0, "{args:?} failed");
            stdout.push_str(&text);
        }
        let files = [
            "corpus.json",
            "emb.json",
            "clusters.json",
            "run/config.json",
            "run/history.json",
            "run/checkpoint/manifest.json",
            "run/checkpoint/params.bin",
            "merged/manifest.json",
            "merged/params.bin",
        ];
        let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect();
        outputs.push((stdout, bytes));
    }
    let pass = outputs[0] == outputs[1];
    report(12, pass, "gen-data, cluster, train, eval and merge reruns are byte-identical");
    assert!(pass);
}

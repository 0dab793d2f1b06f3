//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::{Command, ExitCode};
use std::time::Instant;

use genhead::datasets::{generate, Split, SyntheticSpec};
use genhead::gradcheck::{standard_suite, SUITE_TOLERANCE};
use genhead::heads::{
    init_head, sigmoid_equivalence_params, AagmmHead, Head, HeadKind, KmeansHead,
};
use genhead::moments::{
    class_size, global_loss_value, mom_loss, monte_carlo_bound, standard_normal_sample,
    target_moment, Centering, MomentSpec, MomentTables, MAX_ORDER,
};
use genhead::outlier::{Aggregation, OutlierGate};
use genhead::pipeline::{evaluate_gate, run, GateConfig, RunConfig};
use genhead::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Report {
    failed: usize,
    total: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        self.total += 1;
        if !ok {
            self.failed += 1;
        }
        println!("{} [{id}] {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn fmt(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn gradient_suite(r: &mut Report) {
    let t = Instant::now();
    let rows = standard_suite(0).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = rows
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    let covers = [
        "aagmm",
        "kmeans",
        "mom_loss global p=4 D=6",
        "mom_loss per-cluster p=1 D=2",
    ]
    .iter()
    .all(|k| rows.iter().any(|c| c.name.contains(k)));
    r.line(
        "1",
        failing.is_empty() && worst < SUITE_TOLERANCE && secs < 60.0 && covers,
        format!(
            "gradient suite: {} checks, max rel err {worst:.2e} (< {SUITE_TOLERANCE:e}), {secs:.2}s (< 60s), failing {failing:?}",
            rows.len()
        ),
    );
}

fn head_identities(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_sum = 0.0f64;
    let mut worst_km = 0.0f64;
    let mut worst_ag = 0.0f64;
    for trial in 0..50 {
        let z = random_matrix(&mut rng, 20, 6, -8.0, 8.0);
        for kind in [HeadKind::Linear, HeadKind::Kmeans, HeadKind::Aagmm] {
            let p = init_head::<f64>(kind, 5, 6, trial)
                .unwrap()
                .conditional(&z)
                .unwrap();
            for i in 0..p.rows() {
                worst_sum = worst_sum.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let c = random_matrix(&mut rng, 5, 6, -3.0, 3.0);
        let km = Head::Kmeans(KmeansHead { centers: c.clone() })
            .conditional(&z)
            .unwrap();
        for i in 0..z.rows() {
            let s: Vec<f64> = (0..5)
                .map(|k| {
                    -0.5 * z
                        .row(i)
                        .iter()
                        .zip(c.row(k))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for (k, ek) in e.iter().enumerate() {
                worst_km = worst_km.max((km.get(&[i, k]) - ek / tot).abs());
            }
        }
        let ag = Head::Aagmm(AagmmHead {
            centers: c,
            log_var: Tensor::zeros(&[5, 6]),
        })
        .conditional(&z)
        .unwrap();
        for (a, b) in ag.data().iter().zip(km.data()) {
            worst_ag = worst_ag.max((a - b).abs());
        }
    }
    r.line(
        "2a",
        worst_sum < 1e-9,
        format!("conditional rows sum to 1: max deviation {worst_sum:.2e} (< 1e-9)"),
    );
    r.line(
        "2b",
        worst_km < 1e-9,
        format!("kmeans equals softmax(-|z-mu|^2/2): max deviation {worst_km:.2e} (< 1e-9)"),
    );
    r.line(
        "2c",
        worst_ag < 1e-12,
        format!("unit-variance aagmm equals kmeans: max deviation {worst_ag:.2e} (< 1e-12)"),
    );

    let (mu_a, mu_b, sigma) = (-0.8, 1.7, 0.9);
    let (m, b) = sigmoid_equivalence_params(mu_a, mu_b, sigma).unwrap();
    let head = Head::Aagmm(AagmmHead {
        centers: Tensor::from_rows(&[vec![mu_a], vec![mu_b]]),
        log_var: Tensor::full(&[2, 1], f64::ln(sigma * sigma)),
    });
    let grid: Vec<Vec<f64>> = (0..100)
        .map(|i| vec![-5.0 + 10.0 * i as f64 / 99.0])
        .collect();
    let p = head.conditional(&Tensor::from_rows(&grid)).unwrap();
    let worst = grid
        .iter()
        .enumerate()
        .map(|(i, x)| (p.get(&[i, 0]) - 1.0 / (1.0 + (-(m * x[0] + b)).exp())).abs())
        .fold(0.0, f64::max);
    r.line(
        "2d",
        worst < 1e-10,
        format!("sigmoid equivalence at 100 grid points: max deviation {worst:.2e} (< 1e-10)"),
    );
}

fn moment_correctness(r: &mut Report) {
    let mut sizes_ok = true;
    let mut targets_ok = true;
    for d in 1..=5 {
        for p in 1..=MAX_ORDER {
            let mut counts = vec![0u64; p];
            for t in common::all_tuples(p, d) {
                counts[p - common::distinct(&t)] += 1;
                targets_ok &= target_moment(&t) == common::quadrature_target(&t).round();
            }
            sizes_ok &= (0..p).all(|h| class_size(p, d, h) == counts[h]);
        }
    }
    let d8 = (class_size(2, 8, 0), class_size(2, 8, 1));
    let kurt = target_moment(&[5, 5, 5, 5]);
    r.line(
        "3a",
        sizes_ok && d8 == (56, 8),
        format!(
            "class sizes match enumeration for D<=5, p<=4; p=2 D=8 sizes {d8:?} (want (56, 8))"
        ),
    );
    r.line(
        "3b",
        targets_ok && kurt == 3.0,
        format!("targets match enumeration with quadrature moments; order-4 full diagonal {kurt} (want 3)"),
    );

    let mut weights_ok = true;
    for d in 1..=5 {
        let tables = MomentTables::<f64>::new(d, MAX_ORDER).unwrap();
        for table in &tables.orders {
            let p = table.order;
            let tuples = common::all_tuples(p, d);
            for h in 0..p {
                let ws: Vec<f64> = tuples
                    .iter()
                    .zip(table.weight.data())
                    .filter(|(t, _)| p - common::distinct(t) == h)
                    .map(|(_, &w)| w)
                    .collect();
                if !ws.is_empty() {
                    weights_ok &= ws.iter().all(|&w| w == ws[0]) && ws.len() as f64 * ws[0] == 1.0;
                }
            }
        }
    }
    r.line(
        "3c",
        weights_ok,
        "per-class weights are uniform and sum to exactly 1".into(),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for n in [1usize, 2, 7, 31, 64, 100] {
        for order in 1..=MAX_ORDER {
            let z = random_matrix(&mut rng, n, 3, -2.5, 2.5);
            let tables = MomentTables::new(3, order).unwrap();

            let spec = MomentSpec::new(order, Centering::Global);
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let loss = mom_loss(&mut g, zv, &spec, &tables, None).unwrap().total;
            let got = g.value(loss).data()[0];
            worst = worst.max((got - common::oracle_global(&z, &spec)).abs());

            let c = random_matrix(&mut rng, 4, 3, -1.5, 1.5);
            let lv = random_matrix(&mut rng, 4, 3, -0.5, 0.5);
            let head = Head::Aagmm(AagmmHead {
                centers: c.clone(),
                log_var: lv.clone(),
            });
            let spec = MomentSpec::new(order, Centering::PerCluster);
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let vars = head.bind_constant(&mut g);
            let loss = mom_loss(&mut g, zv, &spec, &tables, Some(&vars))
                .unwrap()
                .total;
            let got = g.value(loss).data()[0];
            worst = worst.max((got - common::oracle_per_cluster(&z, &c, &lv, &spec)).abs());
        }
    }
    r.line(
        "3d",
        worst < 1e-10,
        format!("vectorized mom_loss vs nested loops, n<=100: max deviation {worst:.2e} (< 1e-10)"),
    );
}

fn moment_statistics(r: &mut Report) {
    let (n, dim, order) = (50_000, 8, 2);
    let mc = monte_carlo_bound(dim, order, n, 20, 2024).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4048);
    let fresh = global_loss_value(&standard_normal_sample(n, dim, &mut rng), order).unwrap();
    r.line(
        "4a",
        fresh < mc.bound,
        format!(
            "standard-normal sample loss {fresh:.3e} < Monte-Carlo bound {:.3e}",
            mc.bound
        ),
    );
    let mut shifted = standard_normal_sample(n, dim, &mut rng);
    for row in shifted.data_mut().chunks_mut(dim) {
        row[0] += 1.0;
    }
    let loss = global_loss_value(&shifted, order).unwrap();
    let ratio = loss / mc.median();
    r.line(
        "4b",
        ratio >= 10.0,
        format!("mean-shifted sample loss is {ratio:.0}x the unshifted median (>= 10x)"),
    );
}

fn ssl_runs(r: &mut Report) {
    let mut sup = Vec::new();
    let mut mom = Vec::new();
    let mut plain = Vec::new();
    let mut mom_compact = Vec::new();
    let mut plain_compact = Vec::new();
    let mut slowest = 0.0f64;
    for seed in SEEDS {
        let data = generate(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(data.subset(Split::Labeled).1.len(), 32);
        let base = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let baseline = RunConfig {
            head: HeadKind::Linear,
            lambda_u: 0.0,
            ..base.clone()
        };
        let with_mom = RunConfig {
            mom: MomentSpec::new(1, Centering::PerCluster),
            ..base.clone()
        };
        let a = run(&baseline, &data).unwrap();
        let b = run(&with_mom, &data).unwrap();
        let c = run(&base, &data).unwrap();
        slowest = slowest.max(a.wall_secs).max(b.wall_secs).max(c.wall_secs);
        sup.push(a.final_eval.accuracy);
        mom.push(b.final_eval.accuracy);
        plain.push(c.final_eval.accuracy);
        mom_compact.push(b.final_eval.compactness);
        plain_compact.push(c.final_eval.compactness);
    }
    let gain = 100.0 * (median(&mom) - median(&sup));
    r.line(
        "5a",
        gain >= 10.0 && slowest < 600.0,
        format!(
            "aagmm + 1st-order MoM median accuracy {:.4} vs supervised-32 {:.4}: +{gain:.1}pp (>= 10pp); slowest run {slowest:.1}s (< 600s); mom [{}] sup [{}] aagmm-no-mom [{}]",
            median(&mom),
            median(&sup),
            fmt(&mom),
            fmt(&sup),
            fmt(&plain)
        ),
    );
    r.line(
        "5b",
        median(&mom_compact) < median(&plain_compact),
        format!(
            "median compactness with MoM {:.4} < without {:.4}; with [{}] without [{}]",
            median(&mom_compact),
            median(&plain_compact),
            fmt(&mom_compact),
            fmt(&plain_compact)
        ),
    );
}

fn outlier_gate(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst_rate = 0.0f64;
    for trial in 0..200 {
        let n = rng.random_range(1..80);
        let lab = random_matrix(&mut rng, n, 4, -5.0, 5.0);
        let head = init_head::<f64>(HeadKind::Aagmm, 3, 4, trial).unwrap();
        let geo = genhead::outlier::ClusterGeometry::from_head(&head).unwrap();
        for agg in [Aggregation::Max, Aggregation::Min] {
            let mut gate = OutlierGate::new(90.0, agg, 1).unwrap();
            gate.fit_threshold(&geo, &lab).unwrap();
            let flagged = gate
                .mask(&geo, &lab)
                .unwrap()
                .iter()
                .filter(|&&k| !k)
                .count();
            worst_rate = worst_rate.max(flagged as f64 / n as f64);
        }
    }

    let mut recall = Vec::new();
    let mut flag_rate = Vec::new();
    for seed in SEEDS {
        let data = generate(&SyntheticSpec {
            seed,
            outlier_frac: 0.05,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = RunConfig {
            seed,
            mom: MomentSpec::new(1, Centering::PerCluster),
            gate: GateConfig {
                enabled: true,
                aggregation: Aggregation::Min,
                ..GateConfig::default()
            },
            ..RunConfig::default()
        };
        let out = run(&cfg, &data).unwrap();
        let (lx, _) = data.subset(Split::Labeled);
        let (ux, _) = data.subset(Split::Unlabeled);
        let mut gate = OutlierGate::new(90.0, Aggregation::Min, 1).unwrap();
        let g = evaluate_gate(
            &out.state.eval_model(),
            &mut gate,
            &lx,
            &ux,
            &data.outlier_flags(Split::Unlabeled),
        )
        .unwrap();
        worst_rate = worst_rate.max(g.labeled_flag_rate);
        recall.push(g.recall);
        flag_rate.push(g.labeled_flag_rate);
    }
    r.line(
        "6a",
        worst_rate <= 0.1,
        format!("labeled flagged fraction at q=90: worst {worst_rate:.4} (<= 0.1)"),
    );
    r.line(
        "6b",
        median(&recall) >= 0.8 && median(&flag_rate) <= 0.1,
        format!(
            "min-mode gate with 5% outliers: median recall {:.4} (>= 0.8) at labeled flag rate {:.4} (<= 0.1); recall [{}]",
            median(&recall),
            median(&flag_rate),
            fmt(&recall)
        ),
    );
}

fn scaling(r: &mut Report) {
    let tables = MomentTables::<f64>::new(8, 4).unwrap();
    let n4 = tables.orders[3].target.len();
    let mut ok = n4 == 4096;
    for d in 1..=8usize {
        let t = MomentTables::<f64>::new(d, MAX_ORDER).unwrap();
        for table in &t.orders {
            let p = table.order;
            let by_class: u64 = (0..p).map(|h| class_size(p, d, h)).sum();
            ok &= table.target.len() == d.pow(p as u32) && by_class == d.pow(p as u32) as u64;
        }
    }
    r.line(
        "7",
        ok,
        format!("order-p tensor holds D^p entries for D<=8, p<=4; D=8 p=4: {n4} (want 4096)"),
    );
}

fn determinism(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        "run.seed=3\nrun.steps=300\nrun.eval_every=100\nmom.orders=1\ngate.mode=min\ndata.outlier_frac=0.05\n",
    )
    .unwrap();
    let mut csvs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("out{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_genhead"))
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        let run_dir = std::fs::read_dir(&out)
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        csvs.push(std::fs::read(run_dir.join("metrics.csv")).unwrap());
    }
    r.line(
        "8",
        csvs[0] == csvs[1] && !csvs[0].is_empty(),
        format!(
            "two invocations with the same config and seed: metrics CSV identical ({} bytes)",
            csvs[0].len()
        ),
    );
}

fn main() -> ExitCode {
    let mut r = Report {
        failed: 0,
        total: 0,
    };
    let t = Instant::now();
    gradient_suite(&mut r);
    head_identities(&mut r);
    moment_correctness(&mut r);
    moment_statistics(&mut r);
    scaling(&mut r);
    determinism(&mut r);
    ssl_runs(&mut r);
    outlier_gate(&mut r);
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        r.total - r.failed,
        r.total,
        t.elapsed().as_secs_f64()
    );
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

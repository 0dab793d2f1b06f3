use genhead::heads::{
    init_head, sigmoid_equivalence_params, AagmmHead, Head, HeadKind, KmeansHead,
};
use genhead::Tensor;
use proptest::prelude::*;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn softmax_row(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Diagonal Gaussian log density written out term by term.
fn log_density(z: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(var)
        .map(|((&x, &m), &v)| -0.5 * ((x - m) * (x - m) / v + v.ln() + LN_2PI))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conditionals_are_row_stochastic(z in matrix(6, 3, -20.0, 20.0), seed in 0u64..1000) {
        for kind in [HeadKind::Linear, HeadKind::Kmeans, HeadKind::Aagmm] {
            let head = init_head::<f64>(kind, 4, 3, seed).unwrap();
            let p = head.conditional(&z).unwrap();
            for i in 0..p.rows() {
                let s: f64 = p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9, "{kind}: row {i} sums to {s}");
                prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn kmeans_is_softmax_of_half_squared_distance(z in matrix(5, 4, -6.0, 6.0), c in matrix(3, 4, -3.0, 3.0)) {
        let head = Head::Kmeans(KmeansHead { centers: c.clone() });
        let p = head.conditional(&z).unwrap();
        for i in 0..z.rows() {
            let scores: Vec<f64> = (0..c.rows())
                .map(|k| -0.5 * z.row(i).iter().zip(c.row(k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            for (a, b) in p.row(i).iter().zip(softmax_row(&scores)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unit_variance_aagmm_equals_kmeans(z in matrix(5, 3, -6.0, 6.0), c in matrix(4, 3, -3.0, 3.0)) {
        let km = Head::Kmeans(KmeansHead { centers: c.clone() });
        let ag = Head::Aagmm(AagmmHead { centers: c.clone(), log_var: Tensor::zeros(&[4, 3]) });
        let a = km.conditional(&z).unwrap();
        let b = ag.conditional(&z).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let la = km.log_joint(&z).unwrap();
        let lb = ag.log_joint(&z).unwrap();
        for (x, y) in la.data().iter().zip(lb.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aagmm_densities_match_the_closed_form(z in matrix(4, 3, -5.0, 5.0), c in matrix(3, 3, -2.0, 2.0),
                                             lv in matrix(3, 3, -1.5, 1.5)) {
        let head = Head::Aagmm(AagmmHead { centers: c.clone(), log_var: lv.clone() });
        let joint = head.log_joint(&z).unwrap();
        let prior = head.log_prior(&z).unwrap();
        let var = lv.map(f64::exp);
        for i in 0..z.rows() {
            let dens: Vec<f64> = (0..3).map(|k| log_density(z.row(i), c.row(k), var.row(k))).collect();
            for (k, d) in dens.iter().enumerate() {
                prop_assert!((joint.get(&[i, k]) - d).abs() < 1e-10);
            }
            let mixture = (dens.iter().map(|d| d.exp()).sum::<f64>() / 3.0).ln();
            prop_assert!((prior.data()[i] - mixture).abs() < 1e-10);
        }
    }
}

#[test]
fn sigmoid_equivalence_on_a_grid() {
    for &(mu_a, mu_b, sigma) in &[(-1.0, 2.0, 0.7), (0.5, -0.25, 1.3), (3.0, 1.0, 2.0)] {
        let (m, b) = sigmoid_equivalence_params(mu_a, mu_b, sigma).unwrap();
        let head = Head::Aagmm(AagmmHead {
            centers: Tensor::from_rows(&[vec![mu_a], vec![mu_b]]),
            log_var: Tensor::full(&[2, 1], f64::ln(sigma * sigma)),
        });
        let grid: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![-6.0 + 12.0 * i as f64 / 99.0])
            .collect();
        let p = head.conditional(&Tensor::from_rows(&grid)).unwrap();
        for (i, x) in grid.iter().enumerate() {
            let s = 1.0 / (1.0 + (-(m * x[0] + b)).exp());
            assert!(
                (p.get(&[i, 0]) - s).abs() < 1e-10,
                "x={} head={} sigmoid={s}",
                x[0],
                p.get(&[i, 0])
            );
        }
    }
    assert!(sigmoid_equivalence_params(0.0, 1.0, 0.0).is_err());
}

#[test]
fn linear_head_has_no_density() {
    let head = init_head::<f64>(HeadKind::Linear, 3, 2, 0).unwrap();
    assert!(head.log_joint(&Tensor::zeros(&[1, 2])).is_err());
    assert!(head.centers().is_none());
}

#[test]
fn initial_variances_are_near_one() {
    let Head::Aagmm(h) = init_head::<f64>(HeadKind::Aagmm, 10, 8, 3).unwrap() else {
        panic!("wrong head kind");
    };
    assert!(h
        .log_var
        .map(f64::exp)
        .data()
        .iter()
        .all(|v| (0.9..=1.1).contains(v)));
}

#[test]
fn width_mismatch_is_reported() {
    let head = init_head::<f64>(HeadKind::Kmeans, 3, 4, 0).unwrap();
    assert!(head.conditional(&Tensor::zeros(&[2, 5])).is_err());
}

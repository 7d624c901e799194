use proptest::prelude::*;

use pseudoreplay::balancing::{allocate_quotas, TypeDistribution};
use pseudoreplay::generation::{sharpen, split_question_answer};
use pseudoreplay::kmeans::{kmeans, within_cluster_sse, DEFAULT_MAX_ITERS};
use pseudoreplay::metrics::{average_forgetting, average_performance, total_variation, AccuracyMatrix};
use pseudoreplay::Error;

fn text_without_qmark() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.!']{0,40}"
}

fn word_text() -> impl Strategy<Value = String> {
    "[a-z][a-z ,.']{0,30}[a-z]"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn split_round_trips_single_question_mark(q in word_text(), a in word_text()) {
        let text = format!("{q}? {a}");
        let (question, answer) = split_question_answer(&text).unwrap();
        prop_assert_eq!(question, format!("{}?", q.trim()));
        prop_assert_eq!(answer, a.trim());
    }

    #[test]
    fn split_without_question_mark_fails(text in text_without_qmark()) {
        let is_generation_failure = matches!(split_question_answer(&text), Err(Error::GenerationFailure(_)));
        prop_assert!(is_generation_failure);
    }

    #[test]
    fn split_cuts_at_first_question_mark(q in word_text(), rest in "[a-z?]{1,20}") {
        let text = format!("{q}? x{rest}");
        let (question, answer) = split_question_answer(&text).unwrap();
        prop_assert_eq!(question.matches('?').count(), 1);
        prop_assert_eq!(answer, format!("x{rest}"));
    }
}

fn distribution() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5000, 1..=16).prop_filter("positive total", |c| c.iter().sum::<usize>() > 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn quotas_round_up_each_share(counts in distribution(), m_hat in 100usize..=5000) {
        let dist = TypeDistribution::from_counts("t", counts.clone()).unwrap();
        let quotas = allocate_quotas(&dist, m_hat);
        let total: usize = counts.iter().sum();
        for (k, (&q, &c)) in quotas.iter().zip(&counts).enumerate() {
            // exact rational check: q - 1 < c*m/total <= q
            let num = (c * m_hat) as u128;
            prop_assert!(num <= q as u128 * total as u128);
            prop_assert!(q == 0 || (q as u128 - 1) * (total as u128) < num);
            prop_assert!((q as f64 - dist.probs[k] * m_hat as f64).abs() < 1.0);
        }
        let sum: usize = quotas.iter().sum();
        prop_assert!(sum >= m_hat && sum <= m_hat + counts.len());
    }

    #[test]
    fn sharpen_is_a_distribution(p in prop::collection::vec(0.01f64..1.0, 1..8), tau in 0.05f64..3.0) {
        let s: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|x| x / s).collect();
        let q = sharpen(&p, tau);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // order-preserving
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p[i] > p[j] {
                    prop_assert!(q[i] >= q[j]);
                }
            }
        }
    }

    #[test]
    fn total_variation_is_a_bounded_metric(
        a in prop::collection::vec(0.0f64..1.0, 4),
        b in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.iter().map(|x| (x + 1e-9 / 4.0) / s).collect::<Vec<f64>>()
        };
        let (p, q) = (norm(&a), norm(&b));
        let d = total_variation(&p, &q).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        prop_assert_eq!(d, total_variation(&q, &p).unwrap());
        prop_assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
    }
}

fn points(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kmeans_sse_never_increases(pts in (5usize..60, 1usize..6).prop_flat_map(|(n, d)| points(n, d)), k in 1usize..5) {
        let fit = kmeans(&pts, k, 7, DEFAULT_MAX_ITERS).unwrap();
        for w in fit.sse_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{:?}", fit.sse_history);
        }
        prop_assert!(fit.iterations <= DEFAULT_MAX_ITERS);
        let sse = within_cluster_sse(&pts, &fit.centroids, &fit.assignments);
        prop_assert!((sse - fit.sse()).abs() <= 1e-9 * sse.max(1.0));
    }

    #[test]
    fn kmeans_reruns_are_bit_identical(pts in points(40, 3), k in 1usize..6, seed in any::<u64>()) {
        let a = kmeans(&pts, k, seed, DEFAULT_MAX_ITERS).unwrap();
        let b = kmeans(&pts, k, seed, DEFAULT_MAX_ITERS).unwrap();
        let bits = |c: &Vec<Vec<f64>>| c.iter().flatten().map(|x| x.to_bits()).collect::<Vec<u64>>();
        prop_assert_eq!(bits(&a.centroids), bits(&b.centroids));
        prop_assert_eq!(a.assignments, b.assignments);
    }
}

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=8).prop_flat_map(|t| {
        (0..t)
            .map(|i| prop::collection::vec(0.0f64..=1.0, i + 1))
            .collect::<Vec<_>>()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_read_only_the_triangle(rows in matrix()) {
        let t = rows.len();
        let ids: Vec<String> = (0..t).map(|i| format!("t{i}")).collect();
        let m = AccuracyMatrix::from_rows(ids, &rows).unwrap();
        let ap = average_performance(&m).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        match average_forgetting(&m) {
            Ok(af) => {
                prop_assert!(t >= 2);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&af));
            }
            Err(Error::UndefinedForSingleTask) => prop_assert_eq!(t, 1),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
        let back = AccuracyMatrix::from_csv(&m.to_csv()).unwrap();
        prop_assert_eq!(back, m);
    }
}

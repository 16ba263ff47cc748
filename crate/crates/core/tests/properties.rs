use proptest::prelude::*;

use promptdrop_core::analysis::compare_complexity;
use promptdrop_core::dropout::{dropout_probabilities, keep_scale};
use promptdrop_core::gradcheck::finite_diff_check;
use promptdrop_core::importance::min_max;
use promptdrop_core::residual::{anneal_lambda, cosine_distribution, negative_entropy, residual, residual_entropy_loss, AnnealSchedule};
use promptdrop_core::train::hm;
use promptdrop_core::{Tape, Tensor};

fn unit_vectors(k: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), k).prop_filter("nonzero rows", |rows| {
        rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn probabilities_are_bounded_and_anti_monotone(
        i_hat in prop::collection::vec(0.0f64..=1.0, 1..48),
        p_min in 0.0f64..0.5,
        span in 1e-3f64..0.49,
    ) {
        let p_max = p_min + span;
        let n = i_hat.len();
        let targets: Vec<usize> = (0..n).collect();
        let p = dropout_probabilities(&i_hat, p_min, p_max, &targets, n).unwrap();
        for a in 0..n {
            prop_assert!(p[a] >= p_min && p[a] <= p_max);
            if i_hat[a] == 1.0 { prop_assert_eq!(p[a], p_min); }
            if i_hat[a] == 0.0 { prop_assert_eq!(p[a], p_max); }
            for b in 0..n {
                if i_hat[a] < i_hat[b] { prop_assert!(p[a] >= p[b]); }
            }
        }
    }

    #[test]
    fn globals_never_get_probability(len in 2usize..20, cut in 1usize..19) {
        let cut = cut.min(len - 1);
        let targets: Vec<usize> = (cut..len).collect();
        let i_hat = vec![0.5; targets.len()];
        let p = dropout_probabilities(&i_hat, 0.1, 0.5, &targets, len).unwrap();
        prop_assert!(p[..cut].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn importance_plans_never_retain_more_than_uniform(
        i_hat in prop::collection::vec(0.0f64..=1.0, 1..64),
        p_min in 0.0f64..0.4,
        span in 1e-3f64..0.5,
    ) {
        let n = i_hat.len();
        let targets: Vec<usize> = (0..n).collect();
        let p = dropout_probabilities(&i_hat, p_min, p_min + span, &targets, n).unwrap();
        let v = compare_complexity(&p, 1.0 - p_min);
        prop_assert!(v.holds);
        if i_hat.iter().any(|x| *x < 1.0) { prop_assert!(v.margin > 0.0); }
    }

    #[test]
    fn kept_tokens_are_rescaled(p in prop::collection::vec(0.0f64..0.95, 1..16), keep_bits in any::<u16>()) {
        let keep: Vec<bool> = (0..p.len()).map(|i| keep_bits >> i & 1 == 1).collect();
        let s = keep_scale(&p, &keep);
        for i in 0..p.len() {
            let expected = if keep[i] { 1.0 / (1.0 - p[i]) } else { 0.0 };
            prop_assert_eq!(s[i], expected);
        }
    }

    #[test]
    fn residual_inverts(
        pair in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..32),
        lambda in 0.0f64..=0.99,
    ) {
        let (z_d, z_o): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let z_r = residual(&z_d, &z_o, lambda).unwrap();
        for j in 0..z_d.len() {
            prop_assert!((lambda * z_o[j] + (1.0 - lambda) * z_r[j] - z_d[j]).abs() <= 1e-12);
        }
        prop_assert!(residual(&z_d, &z_d, lambda).unwrap().iter().zip(&z_d).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn residual_entropy_is_bounded(refs in unit_vectors(5, 6), z in prop::collection::vec(-1.0f64..1.0, 6), tau in 0.01f64..2.0) {
        prop_assume!(z.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let loss = residual_entropy_loss(&z, &refs, tau).unwrap();
        prop_assert!(loss <= 1e-15 && loss >= -(5f64).ln() - 1e-12);
        let p = cosine_distribution(&z, &refs, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((negative_entropy(&p) - loss).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_and_bounded(lambda0 in 0.001f64..0.99, total in 1usize..400, eps in 1e-3f64..0.2) {
        let sched = AnnealSchedule { lambda0, total_steps: total, epsilon: eps, literal: false };
        let mut last = anneal_lambda(&sched, 0).unwrap();
        prop_assert_eq!(last, 0.0);
        for t in 1..=total {
            let l = anneal_lambda(&sched, t).unwrap();
            prop_assert!(l >= last && l <= 1.0 - eps);
            last = l;
        }
        prop_assert!(anneal_lambda(&sched, total + 1).is_err());
    }

    #[test]
    fn harmonic_mean_identities(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        prop_assert_eq!(hm(a, a), a);
        prop_assert_eq!(hm(a, b), hm(b, a));
        if a > 0.0 && b > 0.0 {
            let h = hm(a, b);
            prop_assert!(h >= a.min(b) - 1e-15);
            prop_assert!(h <= (a * b).sqrt() + 1e-15);
            prop_assert!((a * b).sqrt() <= (a + b) / 2.0 + 1e-15);
        }
    }

    #[test]
    fn min_max_lands_in_unit_interval(xs in prop::collection::vec(-50.0f64..50.0, 1..32)) {
        let n = min_max(&xs);
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tape_matches_finite_differences(
        a in prop::collection::vec(-1.0f64..1.0, 12),
        b in prop::collection::vec(-1.0f64..1.0, 12),
        scale in 0.2f64..3.0,
    ) {
        let f = |ps: &[Tensor], tape: &mut Tape| -> (Vec<promptdrop_core::Var>, promptdrop_core::Var) {
            let x = tape.param(ps[0].clone());
            let w = tape.param(ps[1].clone());
            let h = tape.matmul_t(x, w).unwrap();
            let h = tape.gelu(h);
            let h = tape.scale(h, scale);
            let n = tape.layer_norm_rows(h);
            let s = tape.softmax_rows(n);
            let l = tape.log_softmax_rows(h);
            let m = tape.mul(s, l).unwrap();
            let loss = tape.sum(m);
            (vec![x, w], loss)
        };
        let params = vec![Tensor::matrix(3, 4, a).unwrap(), Tensor::matrix(3, 4, b).unwrap()];
        let mut tape = Tape::new();
        let (vars, loss) = f(&params, &mut tape);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
        let report = finite_diff_check(&params, &analytic, 1e-5, |ps| {
            let mut t = Tape::new();
            let (_, l) = f(ps, &mut t);
            Ok(t.value(l).data()[0])
        }).unwrap();
        let worst = report.entries.iter().map(|e| (e.analytic - e.numeric).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-7, "worst absolute gap {}", worst);
    }

    #[test]
    fn replay_without_changes_is_exact(xs in prop::collection::vec(-2.0f64..2.0, 6)) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 3, xs).unwrap());
        let y = tape.softmax_rows(x);
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z);
        let again = tape.replay(&[]).unwrap();
        prop_assert_eq!(again.value(s).data()[0].to_bits(), tape.value(s).data()[0].to_bits());
    }
}

use kfac_pipe::perfmodel::{
    analytic_costs, perf_report, project_training_time, refresh_ratio_from, speedup_from, step_overhead,
    throughput_at, ArchSpec, DeviceSpec,
};
use kfac_pipe::{CostTable, Method, PipelineConfig};
use proptest::prelude::*;

fn bert() -> ArchSpec {
    ArchSpec::preset("bert-base").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn refresh_period_is_the_ceiling(work in 0.0f64..100.0, bubble in 0.01f64..50.0) {
        let r = refresh_ratio_from(work, bubble).unwrap();
        prop_assert!(r.refresh_period >= 1);
        prop_assert!(r.refresh_period as f64 >= r.ratio - 1e-12);
        prop_assert!((r.refresh_period as f64) < r.ratio + 1.0 + 1e-12);
    }

    #[test]
    fn speedup_is_at_least_one(t_pipe in 0.1f64..100.0, t_prec in 0.0f64..10.0, work in 0.0f64..100.0, p in 1usize..10) {
        let s = speedup_from(t_pipe, t_prec, work, p);
        prop_assert!(s >= 1.0);
        prop_assert!(speedup_from(t_pipe, t_prec, work, p + 1) <= s);
    }

    #[test]
    fn projection_is_linear_in_steps(steps in 1u64..100_000, secs in 0.01f64..5.0) {
        let one = project_training_time(steps, secs);
        let two = project_training_time(2 * steps, secs);
        prop_assert!((two - 2.0 * one).abs() <= 1e-9 * two);
        prop_assert!((one - steps as f64 * secs / 60.0).abs() <= 1e-9 * one.max(1.0));
    }

    #[test]
    fn overhead_and_throughput_are_consistent(t_pipe in 1.0f64..1000.0, t_prec in 0.0f64..100.0, seqs in 1.0f64..1e4) {
        prop_assert!((step_overhead(t_pipe, t_prec) - t_prec / t_pipe).abs() < 1e-12);
        prop_assert!(throughput_at(seqs, t_pipe + t_prec) <= throughput_at(seqs, t_pipe));
    }

    #[test]
    fn reports_are_sane(
        method in prop::sample::select(Method::ALL.to_vec()),
        half in 2usize..=8,
        mult in 1usize..=3,
        b_exp in 0u32..=6,
        recompute in any::<bool>(),
    ) {
        let d = 2 * half;
        let b = 1usize << b_exp;
        let cfg = PipelineConfig::new(method, d, d * mult).with_micro_batch_size(b).with_recompute(recompute);
        let costs = analytic_costs(&bert(), b, &DeviceSpec::default(), 1);
        let r = perf_report(&cfg, &costs).unwrap();
        prop_assert!(r.t_bubble > 0.0 && r.t_bubble < r.t_pipe);
        prop_assert!(r.utilization > 0.0 && r.utilization < 1.0);
        prop_assert!(r.speedup_vs_skip >= 1.0);
        prop_assert!(r.refresh_period >= 1);
        prop_assert!(r.throughput > 0.0);
        prop_assert!(r.m_kfac_plus > 0 && r.m_pipe > 0);
    }

    #[test]
    fn analytic_costs_scale_with_micro_batch(b in 1usize..64) {
        let dev = DeviceSpec::default();
        let one = analytic_costs(&bert(), b, &dev, 1);
        let two = analytic_costs(&bert(), 2 * b, &dev, 1);
        prop_assert!(two.t_f > one.t_f && two.t_b > one.t_b && two.t_curv > one.t_curv);
        prop_assert_eq!(two.t_inv, one.t_inv);
        prop_assert_eq!(two.m_theta, one.m_theta);
    }

    #[test]
    fn recompute_never_speeds_up_the_pipeline(method in prop::sample::select(Method::ALL.to_vec()), half in 2usize..=8) {
        let d = 2 * half;
        let costs = CostTable::uniform(1.0, 2.0).with_kfac(0.5, 1.0, 0.1);
        let off = perf_report(&PipelineConfig::new(method, d, d), &costs).unwrap();
        let on = perf_report(&PipelineConfig::new(method, d, d).with_recompute(true), &costs).unwrap();
        prop_assert!(on.t_pipe > off.t_pipe);
    }
}

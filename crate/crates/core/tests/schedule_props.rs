use kfac_pipe::perfmodel::{critical_path_counts, pipe_timing};
use kfac_pipe::schedule::{build_schedule, extract_bubbles, schedule_metrics, validate_schedule};
use kfac_pipe::{CostTable, Method, PipelineConfig};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = (PipelineConfig, CostTable)> {
    (
        prop::sample::select(Method::ALL.to_vec()),
        prop::sample::select(vec![2usize, 4, 6, 8]),
        1usize..=3,
        0.5f64..2.0,
        0.5f64..3.0,
        any::<bool>(),
        1usize..=2,
    )
        .prop_map(|(method, d, mult, t_f, t_b, recompute, w)| {
            let w = w * method.stages_per_device();
            let cfg = PipelineConfig::new(method, d, d * mult)
                .with_recompute(recompute)
                .with_replicas(w);
            (cfg, CostTable::uniform(t_f, t_b))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn schedules_validate((cfg, costs) in config(), steps in 1usize..=3) {
        let s = build_schedule(&cfg, &costs, steps).unwrap();
        let v = validate_schedule(&s, &cfg);
        prop_assert!(v.is_empty(), "{:?}", v);
        prop_assert_eq!(s.horizon_steps, steps);
        prop_assert_eq!(s.devices(), cfg.devices);
        let m = schedule_metrics(&s);
        prop_assert!(m.utilization > 0.0 && m.utilization <= 1.0 + 1e-12);
        prop_assert_eq!(build_schedule(&cfg, &costs, steps).unwrap(), s);
    }

    #[test]
    fn busy_plus_idle_is_the_makespan((cfg, costs) in config()) {
        let s = build_schedule(&cfg, &costs, 1).unwrap();
        let m = schedule_metrics(&s);
        let b = extract_bubbles(&s);
        let busy: f64 = m.per_device_busy.iter().sum();
        let span = m.makespan * s.devices() as f64;
        prop_assert!((busy + b.total_idle.iter().sum::<f64>() - span).abs() <= 1e-9 * span);
    }

    #[test]
    fn synchronous_schedules_match_the_closed_form(
        method in prop::sample::select(vec![Method::GPipe, Method::OneF1B]),
        d in 1usize..=8,
        n in 1usize..=12,
        t_f in 0.5f64..2.0,
        t_b in 0.5f64..3.0,
    ) {
        let cfg = PipelineConfig::new(method, d, n);
        let costs = CostTable::uniform(t_f, t_b);
        let s = build_schedule(&cfg, &costs, 1).unwrap();
        let (cf, cb) = critical_path_counts(method, d, n).unwrap();
        let want = cf as f64 * t_f + cb as f64 * t_b;
        let got = schedule_metrics(&s).makespan;
        prop_assert!((got - want).abs() <= 1e-9 * want, "{} vs {}", got, want);
        prop_assert!((pipe_timing(&cfg, &costs).unwrap().t_pipe - got).abs() <= 1e-9 * want);
    }

    #[test]
    fn chimera_kernel_matches_the_closed_form(half in 1usize..=8, t_f in 0.5f64..1.5, extra in 0.0f64..2.0) {
        let d = 2 * half;
        let t_b = t_f + extra;
        let cfg = PipelineConfig::new(Method::Chimera, d, d);
        let costs = CostTable::uniform(t_f, t_b);
        let got = schedule_metrics(&build_schedule(&cfg, &costs, 1).unwrap()).makespan;
        let want = d as f64 * t_f + (2 * d - 2) as f64 * t_b;
        prop_assert!((got - want).abs() <= 1e-9 * want, "{} vs {}", got, want);
    }

    #[test]
    fn more_micro_batches_raise_utilization(
        method in prop::sample::select(Method::ALL.to_vec()),
        half in 1usize..=4,
    ) {
        let d = 2 * half;
        let costs = CostTable::uniform(1.0, 2.0);
        let u = |n: usize| {
            let cfg = PipelineConfig::new(method, d, n);
            schedule_metrics(&build_schedule(&cfg, &costs, 1).unwrap()).utilization
        };
        prop_assert!(u(2 * d) >= u(d) - 1e-12);
        prop_assert!(u(3 * d) >= u(2 * d) - 1e-12);
    }
}

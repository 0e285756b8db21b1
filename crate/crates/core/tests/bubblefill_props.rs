use kfac_pipe::bubblefill::{assign_works, check_filled, enumerate_kfac_works, AssignOptions};
use kfac_pipe::schedule::{build_schedule, schedule_metrics};
use kfac_pipe::{CostTable, Error, Method, PipelineConfig};
use proptest::prelude::*;

fn case() -> impl Strategy<Value = (PipelineConfig, CostTable, bool)> {
    (
        prop::sample::select(Method::ALL.to_vec()),
        prop::sample::select(vec![2usize, 4, 6]),
        1usize..=3,
        1usize..=3,
        1.0f64..2.0,
        (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0),
    )
        .prop_map(|(method, d, mult, layers, t_b, (c, i, p))| {
            let cfg = PipelineConfig::new(method, d, d * mult).with_layers(layers);
            let costs = CostTable::uniform(1.0, t_b).with_kfac(c, i, p);
            (cfg, costs, method == Method::Chimera)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn filled_schedules_are_sound((cfg, costs, inv_par) in case()) {
        let opts = AssignOptions { inversion_parallel: inv_par, ..AssignOptions::default() };
        let base = build_schedule(&cfg, &costs, 1).unwrap();
        let queue = enumerate_kfac_works(&cfg, &costs).unwrap();
        match assign_works(&cfg, &costs, &base, &queue, &opts) {
            Ok(filled) => {
                let v = check_filled(&filled, &base, &queue, &cfg, &opts);
                prop_assert!(v.is_empty(), "{:?}", v);
                prop_assert!(filled.refresh_period <= opts.horizon_cap);
                let delta = filled.schedule.period - base.period;
                prop_assert!((delta - costs.t_prec).abs() <= 1e-12 * filled.schedule.period.max(1.0));
                let u0 = schedule_metrics(&base).utilization;
                prop_assert!(filled.utilization() >= u0 - 1e-12);
                let again = assign_works(&cfg, &costs, &base, &queue, &opts).unwrap();
                prop_assert_eq!(again, filled);
            }
            Err(Error::Infeasible { unplaced, deficit, .. }) => {
                prop_assert!(!unplaced.is_empty());
                prop_assert!(deficit >= 0.0);
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn larger_bubbles_never_lengthen_the_cycle((cfg, costs, inv_par) in case(), scale in 1.0f64..4.0) {
        let opts = AssignOptions { inversion_parallel: inv_par, ..AssignOptions::default() };
        let run = |k: &CostTable| {
            let base = build_schedule(&cfg, k, 1).unwrap();
            let queue = enumerate_kfac_works(&cfg, k).unwrap();
            assign_works(&cfg, k, &base, &queue, &opts).map(|f| f.refresh_period)
        };
        let mut big = costs.clone();
        big.t_f *= scale;
        big.t_b *= scale;
        if let Ok(small) = run(&costs) {
            let large = run(&big);
            prop_assert!(matches!(large, Ok(p) if p <= small), "{:?} vs {}", large, small);
        }
    }
}

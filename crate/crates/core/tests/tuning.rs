mod common;

use common::median_best;
use pdetrace::solver::tune::{
    grid, parse_space, random_search, sample_configs, ArchSpace, DimSpec, TuneError, Value,
};
use proptest::prelude::*;

fn dim() -> impl Strategy<Value = DimSpec> {
    prop_oneof![
        prop::collection::vec(-50i64..50, 1..4).prop_map(|v| DimSpec::Unique(v.into_iter().map(Value::Int).collect())),
        (-10.0f64..10.0, 0.1f64..5.0, any::<bool>()).prop_map(|(lo, w, log)| {
            let lo = if log { lo.abs() + 0.01 } else { lo };
            DimSpec::FloatRange { lo, hi: lo + w, log }
        }),
        (-5i64..5, 1i64..7, 1i64..3).prop_map(|(lo, w, step)| DimSpec::IntRange { lo, hi: lo + w, step }),
    ]
}

fn space() -> impl Strategy<Value = ArchSpace> {
    prop::collection::btree_map("[a-e]", dim(), 1..4).prop_map(|m| {
        m.into_iter().fold(ArchSpace::new(), |s, (k, d)| {
            s.add(&k, d, pdetrace::solver::tune::Category::Architecture).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn grid_size_is_the_product_of_cardinalities(s in space(), n in 2usize..5) {
        let g = grid(&s, n).unwrap();
        let product: usize = s.dims().map(|(_, d, _)| d.grid_values(n).len()).product();
        prop_assert_eq!(g.len(), product);
        prop_assert_eq!(g.len(), s.cardinality(n));
    }

    #[test]
    fn samples_stay_inside_their_dimension(s in space(), seed in any::<u64>()) {
        for c in sample_configs(&s, 5, seed).unwrap() {
            for (name, d, _) in s.dims() {
                let v = &c[name];
                match d {
                    DimSpec::Unique(vals) => prop_assert!(vals.contains(v)),
                    DimSpec::FloatRange { lo, hi, .. } => {
                        let x = v.as_f64().unwrap();
                        prop_assert!(x >= *lo && x <= *hi);
                    }
                    DimSpec::IntRange { lo, hi, step } => {
                        let x = v.as_i64().unwrap();
                        prop_assert!(x >= *lo && x <= *hi && (x - lo) % step == 0);
                    }
                }
            }
        }
    }
}

#[test]
fn grid_examples() {
    let s = ArchSpace::new()
        .unique("act", vec![Value::Str("a".into()), Value::Str("b".into())])
        .unwrap()
        .int_range("depth", 1, 3, 1)
        .unwrap();
    let g = grid(&s, 2).unwrap();
    assert_eq!(g.len(), 6);
    assert_eq!(g[0]["act"], Value::Str("a".into()));
    assert_eq!(g[1]["depth"], Value::Int(2));
    assert_eq!(g[3]["act"], Value::Str("b".into()));
    let one = ArchSpace::new().unique("x", vec![Value::Int(7)]).unwrap();
    assert_eq!(grid(&one, 2).unwrap().len(), 1);
    assert!(matches!(grid(&ArchSpace::new(), 2), Err(TuneError::EmptySpace)));
    let f = ArchSpace::new().float_range("lr", 0.1, 0.2, false).unwrap();
    assert!(grid(&f, 1).is_err());
}

#[test]
fn invalid_dimensions_are_rejected() {
    assert!(ArchSpace::new().float_range("lr", 0.0, 1.0, true).is_err());
    assert!(ArchSpace::new().float_range("lr", 1.0, 1.0, false).is_err());
    assert!(ArchSpace::new().unique("u", vec![]).is_err());
    assert!(ArchSpace::new().int_range("i", 1, 3, 0).is_err());
}

#[test]
fn random_search_is_reproducible_and_records_failures() {
    let s = parse_space("lr = float_range(1e-4, 1e-1, log)\nwidth = unique(8, 16, 32)\n").unwrap();
    let obj = |c: &pdetrace::solver::tune::Assignment| {
        let lr = c["lr"].as_f64().unwrap();
        if c["width"] == Value::Int(8) {
            Err("too narrow".to_string())
        } else {
            Ok((lr.log10() + 2.0).abs())
        }
    };
    let a = random_search(&s, 12, 1, obj).unwrap();
    let b = random_search(&s, 12, 1, obj).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(&s), b.to_csv(&s));
    assert!(a.trials.iter().any(|t| t.error.is_some()));
    let best = a.best_trial().unwrap();
    let min = a.trials.iter().filter_map(|t| t.loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best.loss, Some(min));
    let one = random_search(&s, 1, 4, |_| Ok(1.0)).unwrap();
    assert_eq!(one.best, Some(0));
    assert!(a.to_csv(&s).starts_with("lr,width,loss\n"));
}

#[test]
fn best_error_shrinks_with_more_trials() {
    let m: Vec<f64> = [4, 16, 64, 256].iter().map(|&t| median_best(t)).collect();
    assert!(m.windows(2).all(|w| w[1] < w[0]), "{m:?}");
}

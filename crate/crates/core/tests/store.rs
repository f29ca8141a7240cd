use iterarray::store::{apply_delta, compute_delta, revert_delta};
use iterarray::*;
use proptest::prelude::*;
use proptest::strategy::Strategy as _;

fn schema() -> ArraySchema {
    ArraySchema::with_chunking(
        vec![Dimension::new("i", 0, 7), Dimension::new("j", 0, 5)],
        vec![Attribute::new("v", ScalarKind::Int64), Attribute::new("w", ScalarKind::Float64)],
        vec![3, 4],
        vec![0, 0],
    )
    .unwrap()
}

#[derive(Clone, Debug)]
enum Op {
    Store(Vec<(i64, i64, Option<(i64, i64)>)>),
    Annotated(Vec<(i64, i64, i64, i64)>, bool),
}

fn arb_op() -> impl proptest::strategy::Strategy<Value = Op> {
    prop_oneof![
        prop::collection::vec((0i64..8, 0i64..6, prop::option::of((-50i64..50, -50i64..50))), 0..30).prop_map(Op::Store),
        (prop::collection::vec((0i64..8, 0i64..6, -9i64..9, -9i64..9), 0..20), any::<bool>())
            .prop_map(|(c, add)| Op::Annotated(c, add)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn every_version_replays_from_deltas(ops in prop::collection::vec(arb_op(), 1..19)) {
        let mut store = VersionedStore::new();
        let mut cur = ChunkedArray::new(schema()).unwrap();
        store.store("A", cur.clone()).unwrap();
        for op in &ops {
            match op {
                Op::Store(cells) => {
                    for (i, j, v) in cells {
                        cur.set(&[*i, *j], v.map(|(a, b)| vec![Scalar::Int(a), Scalar::Float(b as f64)].into())).unwrap();
                    }
                    store.store("A", cur.clone()).unwrap();
                }
                Op::Annotated(cells, add) => {
                    let mut b = ChunkedArray::new(schema()).unwrap();
                    for (i, j, v, w) in cells {
                        b.set(&[*i, *j], Some(vec![Scalar::Int(*v), Scalar::Float(*w as f64)].into())).unwrap();
                    }
                    let mode = if *add { MergeMode::Add } else { MergeMode::Subtract };
                    store.store_annotated("A", &b, mode).unwrap();
                    cur = store.latest("A").unwrap().clone();
                }
            }
        }
        let n = store.latest_version("A").unwrap();
        prop_assert_eq!(n as usize, ops.len() + 1);
        let mut replay = ChunkedArray::new(schema()).unwrap();
        for v in 1..=n {
            replay = apply_delta(&replay, &store.delta("A", v).unwrap());
            let full = store.scan("A", Which::Full, Some(v)).unwrap();
            prop_assert_eq!(replay.dump(), full.dump());
        }
        for v in (2..=n).rev() {
            let back = revert_delta(store.scan("A", Which::Full, Some(v)).unwrap(), &store.delta("A", v).unwrap());
            prop_assert_eq!(back.dump(), store.scan("A", Which::Full, Some(v - 1)).unwrap().dump());
        }
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let loaded = VersionedStore::load(dir.path()).unwrap();
        for v in 1..=n {
            prop_assert_eq!(
                loaded.scan("A", Which::Full, Some(v)).unwrap().dump(),
                store.scan("A", Which::Full, Some(v)).unwrap().dump()
            );
        }
    }

    #[test]
    fn delta_round_trip(a in prop::collection::vec((0i64..8, 0i64..6, -5i64..5), 0..40),
                        b in prop::collection::vec((0i64..8, 0i64..6, -5i64..5), 0..40)) {
        let build = |cells: &[(i64, i64, i64)]| {
            let mut x = ChunkedArray::new(schema()).unwrap();
            for (i, j, v) in cells {
                x.set(&[*i, *j], Some(vec![Scalar::Int(*v), Scalar::Null].into())).unwrap();
            }
            x
        };
        let (x, y) = (build(&a), build(&b));
        let d = compute_delta(&x, &y);
        prop_assert_eq!(apply_delta(&x, &d).dump(), y.dump());
        prop_assert_eq!(revert_delta(&y, &d).dump(), x.dump());
    }
}

#[test]
fn unknown_names_and_versions() {
    let mut store = VersionedStore::new();
    assert!(matches!(store.latest("A"), Err(Error::UnknownArray(_))));
    store.store("A", ChunkedArray::new(schema()).unwrap()).unwrap();
    assert!(matches!(store.scan("A", Which::Full, Some(3)), Err(Error::UnknownVersion { .. })));
}

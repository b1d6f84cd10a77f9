mod common;

use irrvis::data::{build_design, read_csv, write_csv, CountingProcessRow, Dataset, ModelMatrixSpec, RowSubset, Schema};
use proptest::prelude::*;

proptest! {
    #[test]
    fn csv_round_trip(ds in common::dataset(6, 2)) {
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &Schema::default()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn rows_partition_follow_up(ds in common::dataset(6, 1)) {
        for p in 0..ds.n_patients() {
            let rows = ds.patient_rows(p);
            let mut t = 0.0;
            for r in rows {
                let iv = ds.interval(r);
                prop_assert_eq!(iv.start, t);
                prop_assert!(iv.end > iv.start);
                t = iv.end;
            }
        }
    }

    #[test]
    fn gaps_are_rejected(ds in common::dataset(4, 1), which in 0usize..100) {
        let mut rows: Vec<CountingProcessRow> = ds.rows().collect();
        let r = which % rows.len();
        rows[r].start += 0.5;
        if rows[r].start < rows[r].end {
            prop_assert!(Dataset::from_rows(ds.covariate_names().to_vec(), rows).is_err());
        }
    }

    #[test]
    fn design_is_pure(ds in common::dataset(5, 2)) {
        let spec = ModelMatrixSpec::parse(&["1", "std(z1)", "t:z2", "z1:z2"]).unwrap();
        let a = build_design(&ds, &spec, RowSubset::AllRows).unwrap();
        let b = build_design(&ds.clone(), &spec, RowSubset::AllRows).unwrap();
        prop_assert_eq!(&a, &b);
        let v = build_design(&ds, &spec, RowSubset::VisitRows).unwrap();
        for (i, &r) in v.rows.iter().enumerate() {
            let j = a.rows.iter().position(|&x| x == r).unwrap();
            prop_assert_eq!(v.row(i), a.row(j));
        }
    }
}

use auditlm::schema::{emit_constraint_schema, validate_payload, FieldKind, FieldSpec, Schema};
use proptest::prelude::*;
use serde_json::{json, Value as Json};

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,6}"
}

fn kind() -> impl Strategy<Value = FieldKind> {
    let leaf = prop_oneof![
        Just(FieldKind::Text),
        Just(FieldKind::Integer),
        (-50i64..50, 0i64..50).prop_map(|(lo, w)| FieldKind::BoundedInteger { lo, hi: lo + w }),
        prop::collection::btree_set(name(), 1..4).prop_map(FieldKind::enumeration),
    ];
    leaf.prop_recursive(2, 12, 3, |inner| {
        prop_oneof![
            (inner.clone(), 0usize..2).prop_map(|(item, min_items)| FieldKind::List {
                item: Box::new(item),
                min_items
            }),
            prop::collection::btree_map(name(), inner, 1..3).prop_map(|m| FieldKind::Record {
                fields: m.into_iter().map(|(n, k)| FieldSpec::new(n, k, "")).collect()
            }),
        ]
    })
}

fn schema() -> impl Strategy<Value = Schema> {
    prop::collection::btree_map(name(), kind(), 0..5).prop_map(|m| {
        Schema::new(m.into_iter().map(|(n, k)| FieldSpec::new(n, k, "doc")).collect()).unwrap()
    })
}

/// A conforming value for `kind`, varied by `seed`.
fn sample(kind: &FieldKind, seed: u64) -> Json {
    match kind {
        FieldKind::Text => json!(format!("t{seed}")),
        FieldKind::Integer => json!(seed as i64 - 7),
        FieldKind::BoundedInteger { lo, hi } => json!(lo + (seed as i64 % (hi - lo + 1))),
        FieldKind::Enumeration { values } => json!(values[seed as usize % values.len()]),
        FieldKind::List { item, min_items } => {
            let n = min_items + (seed as usize % 3);
            Json::Array((0..n).map(|i| sample(item, seed.wrapping_mul(31).wrapping_add(i as u64))).collect())
        }
        FieldKind::Record { fields } => Json::Object(
            fields
                .iter()
                .enumerate()
                .map(|(i, f)| (f.name.clone(), sample(&f.kind, seed ^ (i as u64 + 1))))
                .collect(),
        ),
    }
}

fn payload(schema: &Schema, seed: u64) -> Json {
    sample(
        &FieldKind::Record {
            fields: schema.fields().to_vec(),
        },
        seed,
    )
}

proptest! {
    #[test]
    fn validated_records_round_trip(s in schema(), seed in 0u64..1000) {
        let p = payload(&s, seed);
        let rec = validate_payload(&s, &p).unwrap();
        let again = validate_payload(&s, &rec.to_json()).unwrap();
        prop_assert_eq!(rec, again);
    }

    #[test]
    fn schema_serde_round_trip(s in schema()) {
        let text = serde_json::to_string(&s).unwrap();
        let back: Schema = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(s, back);
    }

    #[test]
    fn constraint_documents_are_stable(s in schema()) {
        prop_assert_eq!(emit_constraint_schema(&s), emit_constraint_schema(&s.clone()));
    }

    #[test]
    fn distinct_field_sets_give_distinct_documents(a in schema(), b in schema()) {
        let names = |s: &Schema| s.fields().iter().map(|f| f.name.clone()).collect::<std::collections::BTreeSet<_>>();
        if names(&a) != names(&b) {
            prop_assert_ne!(emit_constraint_schema(&a), emit_constraint_schema(&b));
        }
    }

    #[test]
    fn unknown_fields_always_rejected(s in schema(), seed in 0u64..100) {
        let mut p = payload(&s, seed);
        p.as_object_mut().unwrap().insert("zz_extra_field".into(), json!(1));
        prop_assert!(validate_payload(&s, &p).is_err());
    }
}

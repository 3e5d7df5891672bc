use proptest::prelude::*;
use serde_json::{json, Value};

use super::*;
use crate::datagen::Rng;
use crate::spec_model::student_spec;
use crate::testkit::{random_history, HistoryBuilder, RandomHistoryParams};

fn grayce() -> Value {
    json!({"id": "71D1083D76BD", "firstName": "Grayce", "lastName": "Brekke",
           "email": "marques.rodriguez@yahoo.com", "age": 40, "phone": "1-162-508-6862 x13530"})
}

fn grayce_body() -> Value {
    let mut body = grayce();
    body.as_object_mut().unwrap().remove("id");
    body
}

/// Prior create of the student, then the overlapping requests of the
/// nil-output PUT anomaly.
fn put_nil_history(spec: &ServiceSpec) -> History {
    let id = "71D1083D76BD";
    let put_body = json!({"firstName": "Sasha", "lastName": "Hyatt",
        "email": "claudine.prosacco@hotmail.com", "age": 93, "phone": "(165)479-5262 x15024"});
    HistoryBuilder::new(spec)
        .invoke(1, "createStudent", None, Some(grayce_body()))
        .ok(1, grayce())
        .invoke(2, "updateStudent", Some(id), Some(put_body))
        .invoke(3, "getAllStudents", None, None)
        .invoke(1, "getStudent", Some(id), None)
        .invoke(0, "deleteStudent", Some(id), None)
        .ok(1, grayce())
        .ok(3, json!([grayce()]))
        .ok(0, json!(id))
        .ok(2, Value::Null)
        .build()
}

fn nonlinearizable(v: &Verdict) -> &Counterexample {
    match &v.outcome {
        Outcome::NonLinearizable(cx) => cx,
        other => panic!("expected non-linearizable, got {other:?}"),
    }
}

#[test]
fn empty_history_is_linearizable() {
    let spec = student_spec();
    let v = check(&History::default(), &spec, Limits::default()).unwrap();
    assert!(v.is_linearizable());
    assert!(brute_force(&History::default(), &spec).unwrap().is_linearizable());
}

#[test]
fn nil_put_is_the_offender() {
    let spec = student_spec();
    let h = put_nil_history(&spec);
    let v = check(&h, &spec, Limits::default()).unwrap();
    let cx = nonlinearizable(&v);
    assert_eq!(cx.offender.op_id, "updateStudent");
    assert_eq!(cx.witness.len(), 4);
    assert!(replay(&spec, &cx.witness).is_ok());
    let b = brute_force(&h, &spec).unwrap();
    assert_eq!(nonlinearizable(&b).offender.op_id, "updateStudent");

    let text = explain(&v, &h);
    assert!(text.contains(":2 :ok, :put, :path \"71D1083D76BD\", :output nil"), "{text}");
    assert!(text.contains("no linearization point admits output nil"), "{text}");
}

#[test]
fn read_after_completed_delete_is_flagged() {
    let spec = student_spec();
    let obj = json!({"id": "498C98D9E8CB", "age": 129});
    let h = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 129})))
        .ok(0, obj.clone())
        .invoke(3, "deleteStudent", Some("498C98D9E8CB"), None)
        .ok(3, json!("498C98D9E8CB"))
        .invoke(2, "getStudent", Some("498C98D9E8CB"), None)
        .ok(2, obj)
        .build();
    let v = check(&h, &spec, Limits::default()).unwrap();
    let cx = nonlinearizable(&v);
    assert_eq!(cx.offender.op_id, "getStudent");
    let text = explain(&v, &h);
    assert!(text.contains("offending operation getStudent"), "{text}");
    assert!(text.contains(":2 :ok, :get, :path \"498C98D9E8CB\""), "{text}");
}

#[test]
fn overlapping_read_may_precede_delete() {
    let spec = student_spec();
    let obj = json!({"id": "K", "age": 1});
    let h = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 1})))
        .ok(0, obj.clone())
        .invoke(2, "getStudent", Some("K"), None)
        .invoke(3, "deleteStudent", Some("K"), None)
        .ok(3, json!("K"))
        .ok(2, obj)
        .build();
    assert!(check(&h, &spec, Limits::default()).unwrap().is_linearizable());
    assert!(brute_force(&h, &spec).unwrap().is_linearizable());
}

#[test]
fn brute_force_small_cases() {
    let spec = student_spec();
    let obj = json!({"id": "K", "age": 1});
    let single = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 1})))
        .ok(0, obj.clone())
        .build();
    assert!(brute_force(&single, &spec).unwrap().is_linearizable());

    let missing = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 1})))
        .ok(0, obj.clone())
        .invoke(0, "getStudent", Some("K"), None)
        .error(0, 404)
        .build();
    assert!(!brute_force(&missing, &spec).unwrap().is_linearizable());
    assert!(!check(&missing, &spec, Limits::default()).unwrap().is_linearizable());

    // both orders of the two reads reject the stale one
    let stale = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 1})))
        .ok(0, obj.clone())
        .invoke(1, "getStudent", Some("K"), None)
        .invoke(2, "getStudent", Some("K"), None)
        .ok(1, obj)
        .ok(2, json!({"id": "K", "age": 2}))
        .build();
    assert!(!brute_force(&stale, &spec).unwrap().is_linearizable());
    assert!(!check(&stale, &spec, Limits::default()).unwrap().is_linearizable());
}

#[test]
fn brute_force_refuses_large_histories() {
    let spec = student_spec();
    let mut b = HistoryBuilder::new(&spec);
    for _ in 0..11 {
        b.invoke(0, "getAllStudents", None, None).ok(0, json!([]));
    }
    assert!(matches!(
        brute_force(&b.build(), &spec),
        Err(CheckError::TooLarge { determinate: 11, .. })
    ));
}

#[test]
fn lost_create_can_explain_later_reads() {
    let spec = student_spec();
    let h = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 5})))
        .info(0)
        .invoke(1, "getAllStudents", None, None)
        .ok(1, json!([{"id": "N", "age": 5}]))
        .invoke(1, "getStudent", Some("N"), None)
        .ok(1, json!({"id": "N", "age": 5}))
        .build();
    assert!(check(&h, &spec, Limits::default()).unwrap().is_linearizable());
    assert!(brute_force(&h, &spec).unwrap().is_linearizable());

    // the lost create carried age 5, so age 6 is not explained by it
    let h = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 5})))
        .info(0)
        .invoke(1, "getStudent", Some("N"), None)
        .ok(1, json!({"id": "N", "age": 6}))
        .build();
    assert!(!check(&h, &spec, Limits::default()).unwrap().is_linearizable());
}

#[test]
fn lost_create_may_never_apply() {
    let spec = student_spec();
    let h = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 5})))
        .info(0)
        .invoke(1, "getAllStudents", None, None)
        .ok(1, json!([]))
        .build();
    assert!(check(&h, &spec, Limits::default()).unwrap().is_linearizable());
}

#[test]
fn lost_delete_may_apply_late() {
    let spec = student_spec();
    let obj = json!({"id": "K", "age": 1});
    let h = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 1})))
        .ok(0, obj.clone())
        .invoke(1, "deleteStudent", Some("K"), None)
        .info(1)
        .invoke(2, "getStudent", Some("K"), None)
        .ok(2, obj)
        .invoke(2, "getStudent", Some("K"), None)
        .error(2, 404)
        .build();
    assert!(check(&h, &spec, Limits::default()).unwrap().is_linearizable());
    assert!(brute_force(&h, &spec).unwrap().is_linearizable());
}

#[test]
fn server_error_on_write_is_indeterminate() {
    let spec = student_spec();
    let obj = json!({"id": "K", "age": 1});
    let h = HistoryBuilder::new(&spec)
        .invoke(0, "createStudent", None, Some(json!({"age": 1})))
        .ok(0, obj)
        .invoke(1, "deleteStudent", Some("K"), None)
        .error(1, 500)
        .invoke(2, "getStudent", Some("K"), None)
        .error(2, 404)
        .build();
    assert!(check(&h, &spec, Limits::default()).unwrap().is_linearizable());
}

#[test]
fn state_limit_gives_inconclusive() {
    let spec = student_spec();
    let h = put_nil_history(&spec);
    let limits = Limits { max_states: 1, ..Limits::default() };
    let v = check(&h, &spec, limits).unwrap();
    assert!(matches!(v.outcome, Outcome::Inconclusive(LimitHit::MaxStates(1))));
    assert_eq!(v.exit_code(), 2);
}

#[test]
fn unknown_operation_is_an_error() {
    let spec = student_spec();
    let mut h = put_nil_history(&spec);
    h.events[0].op_id = "enrolStudent".into();
    h.events[1].op_id = "enrolStudent".into();
    assert!(matches!(check(&h, &spec, Limits::default()), Err(CheckError::UnknownOperation(_))));
}

#[test]
fn agrees_with_brute_force_on_random_histories() {
    let spec = student_spec();
    let mut rng = Rng::new(2024);
    let mut counts = [0usize; 2];
    for i in 0..300 {
        let h = random_history(&spec, &mut rng, RandomHistoryParams::default());
        let fast = check(&h, &spec, Limits::default()).unwrap();
        let slow = brute_force(&h, &spec).unwrap();
        assert!(fast.outcome.same_class(&slow.outcome), "history {i} disagrees:\n{}", crate::history::render_log(&h));
        counts[fast.is_linearizable() as usize] += 1;
        if let Outcome::NonLinearizable(cx) = &fast.outcome {
            assert!(replay(&spec, &cx.witness).is_ok());
        }
    }
    // the generator produces both verdicts in useful numbers
    assert!(counts[0] > 30 && counts[1] > 30, "{counts:?}");
}

fn arb_history() -> impl Strategy<Value = History> {
    any::<u64>().prop_map(|seed| {
        random_history(&student_spec(), &mut Rng::new(seed), RandomHistoryParams::default())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn memoization_never_changes_outcome(h in arb_history()) {
        let spec = student_spec();
        let with = check(&h, &spec, Limits::default()).unwrap();
        let without = check(&h, &spec, Limits { memoize: false, ..Limits::default() }).unwrap();
        prop_assert_eq!(with.outcome, without.outcome);
    }

    #[test]
    fn verdicts_are_deterministic(h in arb_history()) {
        let spec = student_spec();
        let a = check(&h, &spec, Limits::default()).unwrap();
        let b = check(&h, &spec, Limits::default()).unwrap();
        prop_assert_eq!(a.outcome, b.outcome);
        prop_assert_eq!(a.stats.states_explored, b.stats.states_explored);
    }

    #[test]
    fn concurrent_unconstraining_read_preserves_linearizability(h in arb_history()) {
        let spec = student_spec();
        if check(&h, &spec, Limits::default()).unwrap().is_linearizable() {
            // a read spanning the whole history that observed a server error
            let mut events = h.events.clone();
            for e in &mut events {
                e.index += 1;
            }
            let mut b = HistoryBuilder::new(&spec);
            b.invoke(99, "getStudent", Some("A"), None);
            let mut wrapped = b.build().events;
            wrapped.extend(events);
            let last = wrapped.len() as u64;
            let mut done = wrapped[0].clone();
            done.kind = crate::history::EventKind::Error;
            done.status = Some(503);
            done.index = last;
            wrapped.push(done);
            let extended = History::new(wrapped);
            extended.validate().unwrap();
            prop_assert!(check(&extended, &spec, Limits::default()).unwrap().is_linearizable());
        }
    }
}

use std::collections::HashMap;

use proptest::prelude::*;
use schedkit::api::{TokenError, TokenRegistry, Verdict};
use schedkit::{CoreId, Schedulable, TaskId};

#[derive(Debug, Clone)]
enum Op {
    Issue(u64, u32),
    /// Present the n-th held token (modulo) on a core.
    Consume(usize, u32),
    Revoke(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..6u64, 0..3u32).prop_map(|(t, c)| Op::Issue(t, c)),
        (0..64usize, 0..3u32).prop_map(|(i, c)| Op::Consume(i, c)),
        (0..6u64).prop_map(Op::Revoke),
    ]
}

proptest! {
    #[test]
    fn registry_matches_a_model(ops in prop::collection::vec(op(), 1..200)) {
        let mut reg = TokenRegistry::new();
        // task -> (core, serial) of the live token
        let mut model: HashMap<u64, (u32, u64)> = HashMap::new();
        let mut held: Vec<Schedulable> = Vec::new();
        let mut last = 0;
        for op in ops {
            match op {
                Op::Issue(t, c) => match reg.issue_token(TaskId(t), CoreId(c)) {
                    Ok(tok) => {
                        prop_assert!(!model.contains_key(&t));
                        prop_assert!(tok.serial() > last);
                        last = tok.serial();
                        model.insert(t, (c, tok.serial()));
                        held.push(tok);
                    }
                    Err(TokenError::DuplicateToken { task, serial }) => {
                        prop_assert_eq!(model.get(&t).map(|m| m.1), Some(serial));
                        prop_assert_eq!(task, TaskId(t));
                    }
                },
                Op::Consume(i, c) if !held.is_empty() => {
                    let tok = held.swap_remove(i % held.len());
                    let (t, s) = (tok.task().0, tok.serial());
                    let live = model.get(&t).copied();
                    match reg.consume_token(tok, CoreId(c)) {
                        Verdict::Ok => {
                            prop_assert_eq!(live, Some((c, s)));
                            model.remove(&t);
                        }
                        Verdict::WrongCore(back) => {
                            prop_assert!(live.is_some_and(|(lc, ls)| ls == s && lc != c));
                            prop_assert_eq!(back.serial(), s);
                            held.push(back);
                        }
                        Verdict::Stale(back) => {
                            prop_assert!(live.is_none_or(|(_, ls)| ls != s));
                            prop_assert_eq!(back.serial(), s);
                        }
                    }
                }
                Op::Consume(..) => {}
                Op::Revoke(t) => {
                    prop_assert_eq!(reg.revoke(TaskId(t)).map(|(c, s)| (c.0, s)), model.remove(&t));
                }
            }
            prop_assert_eq!(reg.live_count(), model.len());
            prop_assert_eq!(reg.last_serial(), last);
        }
    }
}

#[test]
fn revoked_token_is_stale_even_on_its_core() {
    let mut reg = TokenRegistry::new();
    let old = reg.issue_token(TaskId(1), CoreId(0)).unwrap();
    assert_eq!(reg.revoke(TaskId(1)), Some((CoreId(0), 1)));
    let new = reg.issue_token(TaskId(1), CoreId(1)).unwrap();
    assert!(matches!(reg.consume_token(old, CoreId(0)), Verdict::Stale(_)));
    assert!(reg.consume_token(new, CoreId(1)).is_ok());
    assert_eq!(reg.live_count(), 0);
}

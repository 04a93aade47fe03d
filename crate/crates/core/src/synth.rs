//! Templated synthetic traces of a toy vault contract, for tests, benchmarks
//! and smoke runs where no archive node is available.

use rand::Rng;

use crate::trace_ingest::{AccessKind, CallKind, Label, RawCallFrame, RawLogEvent, RawStateAccess, RawTrace};

pub const VAULT: &str = "0x00000000000000000000000000000000000000c0";
pub const TOKEN: &str = "0x00000000000000000000000000000000000000d0";
const USERS: [&str; 2] = [
    "0x00000000000000000000000000000000000000a1",
    "0x00000000000000000000000000000000000000a2",
];
const ATTACKER: &str = "0x00000000000000000000000000000000000000ee";

const SEL_TRANSFER: &str = "a9059cbb";
const SEL_DEPOSIT: &str = "d0e30db0";
const SEL_WITHDRAW: &str = "2e1a7d4d";
const SEL_MINT: &str = "40c10f19";
const EV_TRANSFER: &str = "ddf252ad1be2c89b69c2b068fc378daa952ba7f163c4a11628f55a4df523b3ef";
const EV_DEPOSIT: &str = "e1fffcc4923d04b559f4d29a8bfc6cda04eb5b0d3c460751c2402c5c5cc9109c";
const EV_WITHDRAW: &str = "7fcf532c15f0a6db0bd6d0e038bea71d30d808c7d98cb3bf7268a95bf5081b65";

fn word(v: u128) -> String {
    format!("{v:064x}")
}

fn addr_word(a: &str) -> String {
    format!("{:0>64}", &a[2..])
}

fn slot(i: u128) -> String {
    format!("0x{}", word(i))
}

fn call(kind: CallKind, from: &str, to: &str, input: String, gas: u64, value: u128) -> RawCallFrame {
    RawCallFrame {
        input: format!("0x{input}"),
        gas,
        value,
        ..RawCallFrame::new(kind, from, to)
    }
}

fn access(kind: AccessKind, key: u128, val: u128, owner: usize) -> RawStateAccess {
    RawStateAccess {
        kind,
        key: slot(key),
        val: slot(val),
        owner_frame: owner,
        position: None,
    }
}

fn event(contract: &str, hash: &str, data: String, owner: usize) -> RawLogEvent {
    RawLogEvent {
        contract: contract.to_string(),
        event_hash: format!("0x{hash}"),
        data: format!("0x{data}"),
        owner_frame: owner,
        position: None,
    }
}

fn trace(index: usize, root: RawCallFrame, state: Vec<RawStateAccess>, logs: Vec<RawLogEvent>) -> RawTrace {
    RawTrace {
        tx_hash: format!("0x{index:064x}"),
        block_number: 1_000_000 + index as u64,
        root,
        state,
        logs,
        label: Some(Label::Benign),
        tags: Vec::new(),
    }
}

/// One benign vault interaction: a transfer, a deposit that mints receipt
/// tokens, or a withdrawal paying ether back. Roughly 40 to 60 tokens.
pub fn templated_trace(index: usize, rng: &mut impl Rng) -> RawTrace {
    let user = USERS[rng.random_range(0..USERS.len())];
    match rng.random_range(0..3) {
        0 => {
            let other = USERS.iter().find(|&&u| u != user).expect("two users");
            let mut root = call(
                CallKind::Call,
                user,
                VAULT,
                format!("{SEL_TRANSFER}{}{}", addr_word(other), word(1000)),
                60_000,
                0,
            );
            root.output = format!("0x{}", word(1));
            let state = vec![
                access(AccessKind::Read, 1, 5000, 0),
                access(AccessKind::Write, 1, 4000, 0),
            ];
            let logs = vec![event(VAULT, EV_TRANSFER, word(1000), 0)];
            trace(index, root, state, logs)
        }
        1 => {
            let mut root = call(CallKind::Call, user, VAULT, SEL_DEPOSIT.to_string(), 120_000, 10u128.pow(18));
            root.children.push(call(
                CallKind::Call,
                VAULT,
                TOKEN,
                format!("{SEL_MINT}{}{}", addr_word(user), word(10u128.pow(18))),
                80_000,
                0,
            ));
            let state = vec![access(AccessKind::Write, 2, 7, 0), access(AccessKind::Write, 3, 1, 1)];
            let logs = vec![event(VAULT, EV_DEPOSIT, word(10u128.pow(18)), 0)];
            trace(index, root, state, logs)
        }
        _ => {
            let mut root = call(CallKind::Call, user, VAULT, format!("{SEL_WITHDRAW}{}", word(500)), 90_000, 0);
            root.children.push(call(CallKind::Call, VAULT, user, String::new(), 2_300, 500));
            let state = vec![
                access(AccessKind::Read, 1, 5000, 0),
                access(AccessKind::Write, 1, 4500, 0),
            ];
            let logs = vec![event(VAULT, EV_WITHDRAW, word(500), 0)];
            trace(index, root, state, logs)
        }
    }
}

pub fn templated_corpus(n: usize, rng: &mut impl Rng) -> Vec<RawTrace> {
    (0..n).map(|i| templated_trace(i, rng)).collect()
}

/// A reentrant withdrawal: the payout call re-enters `withdraw` before the
/// balance is written, and a foreign caller drains the vault.
pub fn reentrancy_trace(index: usize) -> RawTrace {
    let mut root = call(CallKind::Call, ATTACKER, VAULT, format!("{SEL_WITHDRAW}{}", word(500)), 900_000, 0);
    let mut payout = call(CallKind::Call, VAULT, ATTACKER, String::new(), 800_000, 500);
    let mut reenter = call(CallKind::Call, ATTACKER, VAULT, format!("{SEL_WITHDRAW}{}", word(500)), 700_000, 0);
    reenter.children.push(call(CallKind::Call, VAULT, ATTACKER, String::new(), 600_000, 500));
    payout.children.push(reenter);
    root.children.push(payout);
    let state = vec![
        access(AccessKind::Read, 1, 500, 0),
        access(AccessKind::Read, 1, 500, 2),
        access(AccessKind::Write, 1, 0, 2),
        access(AccessKind::Write, 1, 0, 0),
    ];
    let logs = vec![event(VAULT, EV_WITHDRAW, word(500), 2), event(VAULT, EV_WITHDRAW, word(500), 0)];
    let mut t = trace(index, root, state, logs);
    t.label = Some(Label::Adversarial);
    t
}

/// A benign-looking batch transfer with `fanout` nested transfers; long
/// but built only from familiar pieces.
pub fn long_trace(index: usize, fanout: usize) -> RawTrace {
    let mut root = call(
        CallKind::Call,
        USERS[0],
        VAULT,
        format!("{SEL_TRANSFER}{}{}", addr_word(USERS[1]), word(1000)),
        60_000,
        0,
    );
    let mut state = Vec::new();
    let mut logs = Vec::new();
    for i in 0..fanout {
        root.children.push(call(
            CallKind::Call,
            VAULT,
            TOKEN,
            format!("{SEL_TRANSFER}{}{}", addr_word(USERS[1]), word(1000)),
            60_000,
            0,
        ));
        state.push(access(AccessKind::Write, 1, 4000, i + 1));
        logs.push(event(TOKEN, EV_TRANSFER, word(1000), i + 1));
    }
    let mut t = trace(index, root, state, logs);
    t.label = Some(Label::Adversarial);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::trace_token_count;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn templates_are_valid_and_short() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in templated_corpus(30, &mut rng) {
            t.validate_owners().unwrap();
            let n = trace_token_count(&t, None).unwrap();
            assert!((20..=80).contains(&n), "{n} tokens");
        }
        reentrancy_trace(0).validate_owners().unwrap();
        let long = long_trace(0, 24);
        long.validate_owners().unwrap();
        let n = trace_token_count(&long, None).unwrap();
        assert!(n > 10 * 60, "{n}");
    }

    #[test]
    fn generation_is_seeded() {
        let a = templated_corpus(10, &mut ChaCha8Rng::seed_from_u64(4));
        let b = templated_corpus(10, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }
}

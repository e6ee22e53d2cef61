use std::collections::BTreeMap;

use bytes::Bytes;
use iotcloud_core::store::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn command() -> impl Strategy<Value = Command> {
    let key = prop::collection::vec(b'a'..=b'h', 1..3).prop_map(Bytes::from);
    let value = prop::collection::vec(any::<u8>(), 0..16).prop_map(Bytes::from);
    prop_oneof![
        3 => (key.clone(), value).prop_map(|(key, value)| Command::Set { key, value }),
        1 => key.prop_map(|key| Command::Del { key }),
    ]
}

fn records(commands: Vec<Command>) -> Vec<LogRecord> {
    commands
        .into_iter()
        .enumerate()
        .map(|(i, command)| LogRecord { sequence: i as u64 + 1, command, timestamp_ms: 1000 + i as u64 })
        .collect()
}

fn oracle(commands: &[Command]) -> BTreeMap<Bytes, Bytes> {
    let mut map = BTreeMap::new();
    for c in commands {
        match c {
            Command::Set { key, value } => {
                map.insert(key.clone(), value.clone());
            }
            Command::Del { key } => {
                map.remove(key);
            }
        }
    }
    map
}

fn as_map(table: &Table) -> BTreeMap<Bytes, Bytes> {
    table.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

#[test]
fn thousand_command_stream_matches_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let commands: Vec<Command> = (0..1000)
        .map(|i| {
            let key = Bytes::from(format!("k{}", rng.gen_range(0..50)));
            if rng.gen_bool(0.2) {
                Command::Del { key }
            } else {
                Command::Set { key, value: Bytes::from(format!("v{i}")) }
            }
        })
        .collect();
    let log = records(commands.clone());
    let mut image = Vec::new();
    for r in &log {
        encode_record(r, &mut image);
    }
    let recovered = recover_log(&image).unwrap();
    assert!(!recovered.torn_tail);
    assert_eq!(recovered.records, log);
    assert_eq!(as_map(&replay_log(&recovered.records).unwrap()), oracle(&commands));
}

proptest! {
    #[test]
    fn replay_matches_map_oracle(commands in prop::collection::vec(command(), 0..200)) {
        let log = records(commands.clone());
        prop_assert_eq!(as_map(&replay_log(&log).unwrap()), oracle(&commands));
    }

    #[test]
    fn replay_is_idempotent_from_any_checkpoint(
        commands in prop::collection::vec(command(), 1..120),
        cut in any::<prop::sample::Index>(),
    ) {
        let log = records(commands.clone());
        let cut = cut.index(log.len() + 1);
        let mut first = Replayer::new();
        for r in &log[..cut] {
            prop_assert!(first.apply(r).unwrap());
        }
        let (table, applied) = first.into_parts();
        let mut resumed = Replayer::resume(table, applied);
        for r in &log {
            resumed.apply(r).unwrap();
        }
        prop_assert_eq!(resumed.applied(), log.len() as u64);
        prop_assert_eq!(as_map(resumed.table()), oracle(&commands));
    }

    #[test]
    fn torn_tail_is_truncated(
        commands in prop::collection::vec(command(), 1..40),
        chop in 1usize..20,
    ) {
        let log = records(commands);
        let mut image = Vec::new();
        let mut last_start = 0;
        for r in &log {
            last_start = image.len();
            encode_record(r, &mut image);
        }
        let last_len = image.len() - last_start;
        image.truncate(image.len() - chop.min(last_len));
        let rec = recover_log(&image).unwrap();
        prop_assert!(rec.torn_tail);
        prop_assert_eq!(rec.valid_len, last_start);
        prop_assert_eq!(&rec.records[..], &log[..log.len() - 1]);
    }

    #[test]
    fn sequence_gap_names_first_bad_record(
        commands in prop::collection::vec(command(), 2..40),
        at in any::<prop::sample::Index>(),
        skip in 1u64..5,
    ) {
        let mut log = records(commands);
        let at = 1 + at.index(log.len() - 1);
        for r in &mut log[at..] {
            r.sequence += skip;
        }
        let bad = log[at].sequence;
        prop_assert_eq!(
            replay_log(&log),
            Err(LogError::Sequence { sequence: bad, expected: at as u64 + 1 })
        );
    }
}

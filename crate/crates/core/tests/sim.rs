use eaid::codec::shard_len;
use eaid::protocol::PruneRule;
use eaid::sim::{run, LatencyModel, PartitionSpec, Protocol, RunOptions, ScenarioConfig, Summary};

const VERIFY: RunOptions = RunOptions {
    trace: true,
    verify: true,
};

fn partitioned(protocol: Protocol, nodes: Vec<usize>) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(5, 2, protocol);
    c.num_entries = 200;
    c.message_size_bytes = 300;
    c.seed = 3;
    c.partitions = vec![PartitionSpec {
        nodes,
        start_entry: 20,
        end_entry: 60,
    }];
    c
}

#[test]
fn on_time_acks_store_n_shards_of_b_over_f_plus_one() {
    for protocol in [
        Protocol::Eaid,
        Protocol::FullFallback,
        Protocol::Resharing,
        Protocol::Proactive,
    ] {
        let mut c = ScenarioConfig::new(5, 2, protocol);
        c.num_entries = 50;
        c.message_size_bytes = 3001;
        c.latency = LatencyModel {
            mean_ms: 0.8,
            stddev_ms: 0.0,
        };
        let out = run(&c, RunOptions::default()).unwrap();
        let per_entry = 5 * shard_len(3001, 3) as u64;
        assert_eq!(per_entry, 5005);
        for r in &out.records {
            assert_eq!(r.retransmission_rounds, 0, "{protocol}");
            assert_eq!(r.per_entry_final_storage_bytes, per_entry, "{protocol}");
        }
        assert_eq!(
            out.records.last().unwrap().total_storage_bytes,
            50 * per_entry
        );
    }
}

#[test]
fn eaid_survives_every_failure_pattern_under_partition() {
    for nodes in [vec![4], vec![3, 4]] {
        let out = run(&partitioned(Protocol::Eaid, nodes.clone()), VERIFY).unwrap();
        assert!(out.violation.is_none(), "{nodes:?}: {:?}", out.violation);
    }
}

#[test]
fn one_short_pruning_is_caught() {
    let mut c = partitioned(Protocol::Eaid, vec![3, 4]);
    c.prune_rule = PruneRule::OneShort;
    let v = run(&c, VERIFY)
        .unwrap()
        .violation
        .expect("unsafe rule detected");
    assert!(v.message.contains("not reconstructable"), "{}", v.message);
}

#[test]
fn resharing_loses_entries_when_copy_holders_fail() {
    let out = run(&partitioned(Protocol::Resharing, vec![4]), VERIFY).unwrap();
    let v = out
        .violation
        .expect("copies on F nodes do not survive F failures");
    assert!(v.entry >= 20, "{v:?}");
    assert!(!out.trace.is_empty());
}

#[test]
fn full_fallback_and_proactive_stay_reconstructable() {
    for protocol in [Protocol::FullFallback, Protocol::Proactive] {
        let out = run(&partitioned(protocol, vec![3, 4]), VERIFY).unwrap();
        assert!(out.violation.is_none(), "{protocol}: {:?}", out.violation);
    }
}

#[test]
fn seeds_change_latencies_but_not_record_count() {
    let mut a = ScenarioConfig::new(7, 3, Protocol::Eaid);
    a.num_entries = 300;
    let mut b = a.clone();
    b.seed = 1;
    let ra = run(&a, RunOptions::default()).unwrap().records;
    let rb = run(&b, RunOptions::default()).unwrap().records;
    assert_eq!(ra.len(), rb.len());
    assert_ne!(ra, rb);
    assert_eq!(ra, run(&a, RunOptions::default()).unwrap().records);
}

#[test]
fn summary_counts_retransmitted_entries() {
    let mut c = ScenarioConfig::new(5, 2, Protocol::FullFallback);
    c.num_entries = 400;
    let out = run(&c, RunOptions::default()).unwrap();
    let s = Summary::of(&out.records).unwrap();
    let retried = out
        .records
        .iter()
        .filter(|r| r.retransmission_rounds > 0)
        .count();
    assert_eq!(s.retransmission_fraction, retried as f64 / 400.0);
    assert!(s.retransmission_fraction > 0.0);
    assert!(s.multi_retransmission_fraction <= s.retransmission_fraction);
}

use std::sync::Arc;

use claa_core::bus::Bus;
use claa_core::registry::{load_builtin_matrix, ClaaFlags};
use claa_core::sctp::{Association, SackChunk, SctpConfig};
use claa_core::NodeId;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Step {
    Send,
    Timeout,
    Ack(f64),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Send),
        Just(Step::Timeout),
        (0.001f64..5.0).prop_map(Step::Ack),
    ]
}

proptest! {
    #[test]
    fn rto_stays_within_bounds(steps in prop::collection::vec(step(), 1..120)) {
        let cfg = SctpConfig::default();
        let (lo, hi) = (cfg.rto_min, cfg.rto_max);
        let m = Arc::new(load_builtin_matrix());
        let (a, b) = (NodeId(1), NodeId(2));
        let mut bus = Bus::new(a, m);
        let mut assoc = Association::new(a, &[b], cfg, ClaaFlags::all_off(), 0.0);
        let mut now = 0.0;
        let mut acked = 0u32;
        let mut sent = 0u32;
        for s in steps {
            match s {
                Step::Send => {
                    // refused once the sole path has been declared inactive
                    if assoc.send_message(&mut bus, 0, vec![1; 40], now).is_ok() {
                        sent += 1;
                    }
                }
                Step::Timeout => {
                    if let Some(t) = assoc.poll_timeout() {
                        now = now.max(t);
                        assoc.handle_timeout(&mut bus, now);
                    }
                }
                Step::Ack(rtt) => {
                    let target = now + rtt;
                    while let Some(t) = assoc.poll_timeout().filter(|t| *t <= target) {
                        now = now.max(t);
                        assoc.handle_timeout(&mut bus, now);
                    }
                    now = target;
                    if acked < sent {
                        acked += 1;
                        let sack = SackChunk { cumulative_tsn: acked, gap_reports: vec![] };
                        assoc.on_sack(&mut bus, b, &sack, now);
                    }
                }
            }
            let rto = assoc.paths()[0].rto;
            prop_assert!((lo..=hi).contains(&rto), "rto {}", rto);
            prop_assert!(assoc.poll_timeout().is_none_or(|t| t >= now - 1e-9));
        }
    }
}

#[test]
fn backoff_sequence_doubles_to_the_cap() {
    let m = Arc::new(load_builtin_matrix());
    let (a, b) = (NodeId(1), NodeId(2));
    let mut bus = Bus::new(a, m);
    let cfg = SctpConfig {
        path_max_retrans: 20,
        ..Default::default()
    };
    let mut assoc = Association::new(a, &[b], cfg, ClaaFlags::all_off(), 0.0);
    assoc.send_message(&mut bus, 0, vec![0; 10], 0.0).unwrap();
    let mut seen = Vec::new();
    for _ in 0..8 {
        let t3 = assoc.paths()[0].t3.expect("timer armed");
        assoc.on_rto_expiry(&mut bus, 0, t3);
        seen.push(assoc.paths()[0].rto);
    }
    assert_eq!(seen, [6.0, 12.0, 24.0, 48.0, 60.0, 60.0, 60.0, 60.0]);
    assert_eq!(assoc.paths()[0].error_count, 8);
}

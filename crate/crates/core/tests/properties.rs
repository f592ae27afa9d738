use aegisnet_core::aggregation::{decrypt_hop, encrypt_hop, open_incoming, send_hop, AggregatePayload, DataPacket};
use aegisnet_core::config::{dump_config, parse_config, ScenarioConfig};
use aegisnet_core::keys::{establish_edge_keys, LinkId, LinkKeyState};
use aegisnet_core::network::{ClusterId, NodeId};
use aegisnet_core::sim::Simulation;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn link() -> LinkId {
    LinkId::new(NodeId(0), NodeId(1))
}

proptest! {
    #[test]
    fn hop_cipher_round_trips(key in any::<[u8; 16]>(), value in any::<i64>(), at in any::<u64>(), ctr in any::<u64>()) {
        let state = LinkKeyState::new(link(), key, 8);
        let payload = AggregatePayload::reading(value, at);
        let pkt = encrypt_hop(&payload, &state, ClusterId(3), ctr);
        prop_assert_eq!(decrypt_hop(&pkt, &state.current).unwrap(), payload);
        let wire = pkt.to_wire();
        prop_assert_eq!(DataPacket::from_wire(&wire).unwrap(), pkt);
    }

    #[test]
    fn ratchet_epochs_compose(key in any::<[u8; 16]>(), e in 0u64..40) {
        let base = LinkKeyState::new(link(), key, 8);
        let stepwise = (0..e).fold(base.clone(), |s, _| s.ratchet());
        prop_assert_eq!(stepwise.send_epoch, e);
        let twin = (0..e).fold(base, |s, _| s.ratchet());
        prop_assert_eq!(stepwise.current, twin.current);
    }

    /// Any loss pattern with gaps ≤ window leaves the link usable.
    #[test]
    fn gaps_within_window_resync(seed in any::<u64>(), losses in prop::collection::vec(0u64..=8, 1..12)) {
        let mut rings = establish_edge_keys(&[link()], 8, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut sender = rings.clone();
        for (i, gap) in losses.iter().enumerate() {
            for _ in 0..*gap {
                send_hop(sender.get_mut(&NodeId(1)).unwrap(), link(), ClusterId(0), &AggregatePayload::reading(0, 0)).unwrap();
            }
            let p = send_hop(sender.get_mut(&NodeId(1)).unwrap(), link(), ClusterId(0), &AggregatePayload::reading(i as i64, 0)).unwrap();
            let got = open_incoming(rings.get_mut(&NodeId(0)).unwrap(), &p).unwrap();
            prop_assert_eq!(got.value, i as i64);
        }
        prop_assert!(!rings[&NodeId(0)].any_flagged());
    }

    #[test]
    fn config_dump_round_trips(nodes in 2u32..500, range in 1.0f64..200.0, frac in 0.01f64..1.0, window in 1u64..64, rounds in 1u64..10_000, baseline in any::<bool>()) {
        let mut cfg = ScenarioConfig::default();
        cfg.network.nodes = nodes;
        cfg.network.range = range;
        cfg.network.ch_fraction = frac;
        cfg.protocol.window = window;
        cfg.run.rounds = rounds;
        cfg.run.baseline = baseline;
        let text = dump_config(&cfg);
        let back = parse_config(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(dump_config(&back), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn runs_keep_their_invariants(seed in any::<u64>(), nodes in 5u32..60, baseline in any::<bool>()) {
        let mut cfg = ScenarioConfig::default();
        cfg.network.nodes = nodes;
        cfg.run.rounds = 30;
        cfg.run.baseline = baseline;
        cfg.energy.initial_energy = 0.02;
        let out = Simulation::new(&cfg, seed).unwrap().run_to_end();
        prop_assert!(out.monotonic);
        prop_assert!(out.ledger.reconciles());
        for w in out.metrics.windows(2) {
            prop_assert!(w[1].alive <= w[0].alive);
            prop_assert!(w[1].total_energy <= w[0].total_energy);
            prop_assert!(w[1].bytes_tx >= w[0].bytes_tx);
        }
        let mut prev_alive = nodes as u64 + 1;
        for m in &out.metrics {
            prop_assert!(m.delivered <= m.sent);
            // losses come only from isolation or a receiver dying mid-round
            if m.isolated == 0 && m.alive == prev_alive {
                prop_assert_eq!(m.delivered, m.sent);
            }
            prev_alive = m.alive;
        }
    }
}

use nanopipe::coro::EventLoop;
use nanopipe::cpx::{
    fragment, packet_decode, packet_encode, wire_bytes, CpxPacket, Payload, FN_APP_STREAM, MAX_PAYLOAD,
};
use nanopipe::pipeline::{Acquire, BufferPool, BufferState};
use nanopipe::trace::NodeId;
use nanopipe::Error;
use proptest::prelude::*;

fn unhex(s: &str) -> Vec<u8> {
    if s == "-" {
        return Vec::new();
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

#[test]
fn golden_frames() {
    let text = include_str!("fixtures/cpx_golden.txt");
    let mut checked = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let (fields, frame) = line.split_once("=>").unwrap();
        let f: Vec<&str> = fields.split_whitespace().collect();
        let pkt = CpxPacket {
            source: f[0].parse().unwrap(),
            destination: f[1].parse().unwrap(),
            last_fragment: f[2] == "1",
            function: f[3].parse().unwrap(),
            version: f[4].parse().unwrap(),
            payload: Payload::from_vec(unhex(f[5])),
            ingress_ts: None,
            copy_count: 0,
        };
        let frame = unhex(frame.trim());
        assert_eq!(packet_encode(&pkt).unwrap(), frame, "{line}");
        let back = packet_decode(&frame).unwrap();
        assert_eq!(back.header(), pkt.header(), "{line}");
        assert_eq!(back.payload.bytes(), pkt.payload.bytes(), "{line}");
        checked += 1;
    }
    assert_eq!(checked, 5);
}

#[test]
fn empty_stream_frame_from_gap8_to_host() {
    let pkt = CpxPacket::new(NodeId::Gap8, NodeId::Host, FN_APP_STREAM, Payload::default());
    assert_eq!(packet_encode(&pkt).unwrap(), [0x02, 0x00, 0x72, 0x05]);
}

#[test]
fn payload_size_limits() {
    let full = CpxPacket::new(NodeId::Gap8, NodeId::Host, 1, Payload::from_vec(vec![7; MAX_PAYLOAD]));
    let frame = packet_encode(&full).unwrap();
    assert_eq!(frame.len(), MAX_PAYLOAD + 4);
    assert_eq!(&frame[..2], &[0x00, 0x04]);
    let over = CpxPacket::new(NodeId::Gap8, NodeId::Host, 1, Payload::from_vec(vec![7; MAX_PAYLOAD + 1]));
    assert_eq!(
        packet_encode(&over),
        Err(Error::PayloadTooLarge { len: MAX_PAYLOAD + 1, max: MAX_PAYLOAD })
    );
}

#[test]
fn malformed_frames_are_rejected() {
    let bad: [&[u8]; 4] = [
        &[0x02, 0x00, 0x72],             // truncated header
        &[0x03, 0x00, 0x72, 0x05],       // length claims a payload byte that is missing
        &[0x02, 0x00, 0x73, 0x05],       // reserved route bit
        &[0x01, 0x00, 0x72, 0x05],       // length shorter than the header
    ];
    for frame in bad {
        assert!(matches!(packet_decode(frame), Err(Error::Decode(_))), "{frame:02x?}");
    }
    let mut huge = vec![0u8; MAX_PAYLOAD + 5];
    huge[..2].copy_from_slice(&((MAX_PAYLOAD + 3) as u16).to_le_bytes());
    huge[2] = 0x72;
    assert!(matches!(packet_decode(&huge), Err(Error::Decode(_))));
}

#[test]
fn a_160_by_160_frame_takes_26_fragments_without_copying() {
    let image = Payload::from_vec((0..160 * 160).map(|i| (i % 251) as u8).collect());
    let frags = fragment(NodeId::Gap8, NodeId::Host, FN_APP_STREAM, &image);
    assert_eq!(frags.len(), 26);
    assert_eq!(frags.iter().filter(|p| p.last_fragment).count(), 1);
    assert!(frags.last().unwrap().last_fragment);
    assert!(frags.iter().all(|p| p.payload.shares_region(&image) && p.copy_count == 0));
    assert!(frags[..25].iter().all(|p| p.payload.len() == MAX_PAYLOAD));
    let joined: Vec<u8> = frags.iter().flat_map(|p| p.payload.bytes().to_vec()).collect();
    assert_eq!(joined, image.bytes());
    let on_wire: usize = frags.iter().map(|p| packet_encode(p).unwrap().len()).sum();
    assert_eq!(on_wire, 25_600 + 26 * 4);
    assert_eq!(wire_bytes(25_600), on_wire);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_decode_round_trip(
        source in 0u8..8,
        destination in 0u8..8,
        last in any::<bool>(),
        function in 0u8..64,
        version in 0u8..4,
        payload in proptest::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD),
    ) {
        let pkt = CpxPacket {
            source,
            destination,
            last_fragment: last,
            function,
            version,
            payload: Payload::from_vec(payload),
            ingress_ts: None,
            copy_count: 0,
        };
        let frame = packet_encode(&pkt).unwrap();
        prop_assert_eq!(frame.len(), pkt.wire_len());
        let back = packet_decode(&frame).unwrap();
        prop_assert_eq!(back.header(), pkt.header());
        prop_assert_eq!(back.payload.bytes(), pkt.payload.bytes());
        prop_assert_eq!(packet_encode(&back).unwrap(), frame);
    }
}

// ---------------------------------------------------------------------------
// Buffer pool state machine under random schedules.

#[derive(Clone, Copy, Debug)]
enum Op {
    Acquire,
    Fill(usize),
    Ready(usize),
    Share(usize, u32),
    Release(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Acquire),
        (0usize..4).prop_map(Op::Fill),
        (0usize..4).prop_map(Op::Ready),
        (0usize..4, 0u32..4).prop_map(|(b, n)| Op::Share(b, n)),
        (0usize..4).prop_map(Op::Release),
    ]
}

fn legal(from: BufferState, to: BufferState) -> bool {
    use BufferState::*;
    match (from, to) {
        (a, b) if a == b => true,
        (Free, Filling) | (Filling, Ready) => true,
        (Ready, InUse(n)) => n > 0,
        (InUse(a), InUse(b)) => b + 1 == a,
        // The last reader hands the buffer straight to a waiting acquirer.
        (InUse(1), Free) | (InUse(1), Filling) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn pool_never_leaves_its_state_cycle(
        size in 1usize..4,
        ops in proptest::collection::vec(op(), 1..60),
    ) {
        let mut lp: EventLoop<()> = EventLoop::virtual_time();
        let mut pool = BufferPool::new(size, 8).unwrap();
        let mut tickets = Vec::new();
        for (i, op) in ops.into_iter().enumerate() {
            let before: Vec<BufferState> = (0..size).map(|b| pool.buffer(b).state).collect();
            let ok = match op {
                Op::Acquire => {
                    match pool.acquire(&mut lp) {
                        Acquire::Got(_) => {}
                        Acquire::Wait { ticket, .. } => tickets.push(ticket),
                    }
                    true
                }
                Op::Fill(b) if b < size => pool.fill(b, &[i as u8; 4]).is_ok(),
                Op::Ready(b) if b < size => pool.mark_ready(b, i as u64).is_ok(),
                Op::Share(b, n) if b < size => pool.share(b, n).is_ok(),
                Op::Release(b) if b < size => {
                    let r = pool.release(&mut lp, b);
                    if let Err(e) = &r {
                        if before[b] == BufferState::Free {
                            prop_assert_eq!(e, &Error::DoubleRelease(b));
                        }
                    }
                    r.is_ok()
                }
                _ => continue,
            };
            let after: Vec<BufferState> = (0..size).map(|b| pool.buffer(b).state).collect();
            let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
            if ok {
                prop_assert!(changed <= 1, "op {:?} changed {} buffers", op, changed);
            } else {
                prop_assert_eq!(&before, &after, "rejected {:?} changed state", op);
            }
            for (b, (&from, &to)) in before.iter().zip(&after).enumerate() {
                prop_assert!(legal(from, to), "buffer {} went {:?} -> {:?} on {:?}", b, from, to, op);
            }
            tickets.retain(|&t| match pool.claim(t) {
                Some(b) => {
                    assert_eq!(pool.buffer(b).state, BufferState::Filling);
                    false
                }
                None => true,
            });
            prop_assert_eq!(pool.waiting(), tickets.len());
            if pool.waiting() > 0 {
                prop_assert_eq!(pool.free_count(), 0);
            }
        }
    }
}

//! Offline learning and detection over recorded frames.

use std::net::Ipv4Addr;
use std::time::Duration;

use crate::engine::{Engine, IntrusionEvent};
use crate::packet::{parse_frame, Direction};
use crate::pcap::PcapRecord;
use crate::stats::{FlowFilter, InterarrivalSampler};
use crate::time::Timestamp;

/// Direction of a captured frame as seen from `local_ip`. Unparseable
/// frames count as received.
pub fn frame_direction(bytes: &[u8], at: Timestamp, local_ip: Ipv4Addr) -> Direction {
    match parse_frame(bytes, at, Direction::Rx) {
        Ok(meta) => Direction::infer(&meta, local_ip),
        Err(_) => Direction::Rx,
    }
}

/// Feed records into `engine` in order, running clock work due before each
/// one. Returns every event raised.
pub fn feed<'a>(engine: &mut Engine, records: impl IntoIterator<Item = &'a PcapRecord>) -> Vec<IntrusionEvent> {
    let local_ip = engine.config().local_ip;
    let mut events = Vec::new();
    for rec in records {
        while let Some(d) = engine.next_deadline().filter(|&d| d <= rec.timestamp) {
            let evs = engine.tick(d);
            let stuck = evs.is_empty() && engine.next_deadline() == Some(d);
            events.extend(evs);
            if stuck {
                break;
            }
        }
        let dir = frame_direction(&rec.data, rec.timestamp, local_ip);
        let (_, evs) = engine.ingest(dir, &rec.data, rec.timestamp);
        events.extend(evs);
    }
    events
}

/// Learn from every record and leave `engine` in active mode.
pub fn learn_all<'a>(engine: &mut Engine, records: impl IntoIterator<Item = &'a PcapRecord>) {
    let local_ip = engine.config().local_ip;
    for rec in records {
        let dir = frame_direction(&rec.data, rec.timestamp, local_ip);
        engine.ingest(dir, &rec.data, rec.timestamp);
    }
    engine.finish_learning();
}

/// Longest gap between ARP requests for `local_ip`.
pub fn longest_arp_gap<'a>(records: impl IntoIterator<Item = &'a PcapRecord>, local_ip: Ipv4Addr) -> Option<Duration> {
    let filter: FlowFilter = "arp-req/rx".parse().expect("valid filter");
    let mut sampler = InterarrivalSampler::new(local_ip, filter);
    records
        .into_iter()
        .filter_map(|rec| {
            let dir = frame_direction(&rec.data, rec.timestamp, local_ip);
            let meta = parse_frame(&rec.data, rec.timestamp, dir).ok()?;
            sampler.push(&meta)
        })
        .map(|s| Duration::from_micros(s.interarrival_us))
        .max()
}

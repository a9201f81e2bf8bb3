use std::io::{self, Write};

use super::{DeviceId, Topology};
use crate::packet::Direction;
use crate::pcap::PcapWriter;
use crate::time::Timestamp;

/// One frame on the wire. `receivers` is a bitmask over device ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimFrame {
    pub time: Timestamp,
    pub src: DeviceId,
    pub receivers: u64,
    pub bytes: Vec<u8>,
}

impl SimFrame {
    /// How `dev` sees this frame, if at all.
    pub fn direction_for(&self, dev: DeviceId) -> Option<Direction> {
        if self.src == dev {
            Some(Direction::Tx)
        } else if self.receivers & (1 << dev) != 0 {
            Some(Direction::Rx)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameTrace {
    topology: Topology,
    frames: Vec<SimFrame>,
}

impl FrameTrace {
    pub fn new(topology: Topology, frames: Vec<SimFrame>) -> Self {
        FrameTrace { topology, frames }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn frames(&self) -> &[SimFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames sent or received by `dev`, in time order.
    pub fn view(&self, dev: DeviceId) -> impl Iterator<Item = (Timestamp, Direction, &[u8])> + '_ {
        self.frames
            .iter()
            .filter_map(move |f| f.direction_for(dev).map(|d| (f.time, d, f.bytes.as_slice())))
    }

    /// Write every frame, or only those `dev` sees.
    pub fn write_pcap<W: Write>(&self, out: W, dev: Option<DeviceId>) -> io::Result<W> {
        let mut w = PcapWriter::new(out)?;
        for f in &self.frames {
            if dev.is_none_or(|d| f.direction_for(d).is_some()) {
                w.write_record(f.time, &f.bytes)?;
            }
        }
        w.into_inner()
    }
}

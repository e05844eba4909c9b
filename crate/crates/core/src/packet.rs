use std::fmt;
use std::net::{IpAddr, Ipv4Addr};

use serde::{Deserialize, Serialize};

use crate::kernel::SimTime;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// A transport 5-tuple. Flow-table keys are always expressed in the receive
/// direction; packet headers carry whichever direction they travel in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_addr: IpAddr,
    pub dst_addr: IpAddr,
    pub protocol: u8,
    pub src_port: u16,
    pub dst_port: u16,
}

impl FlowKey {
    pub fn new(src_addr: IpAddr, src_port: u16, dst_addr: IpAddr, dst_port: u16, protocol: u8) -> Self {
        FlowKey {
            src_addr,
            dst_addr,
            protocol,
            src_port,
            dst_port,
        }
    }

    pub fn tcp(src_addr: IpAddr, src_port: u16, dst_addr: IpAddr, dst_port: u16) -> Self {
        Self::new(src_addr, src_port, dst_addr, dst_port, PROTO_TCP)
    }

    /// Swaps addresses and ports; the protocol is unchanged. Maps the header
    /// of an outgoing packet onto the receive-direction key of its flow.
    pub fn reversed(&self) -> FlowKey {
        FlowKey {
            src_addr: self.dst_addr,
            dst_addr: self.src_addr,
            protocol: self.protocol,
            src_port: self.dst_port,
            dst_port: self.src_port,
        }
    }

    pub fn is_tcp(&self) -> bool {
        self.protocol == PROTO_TCP
    }

    pub fn is_ipv6(&self) -> bool {
        self.src_addr.is_ipv6() || self.dst_addr.is_ipv6()
    }
}

impl Default for FlowKey {
    fn default() -> Self {
        FlowKey::tcp(Ipv4Addr::UNSPECIFIED.into(), 0, Ipv4Addr::UNSPECIFIED.into(), 0)
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} proto {}",
            self.src_addr, self.src_port, self.dst_addr, self.dst_port, self.protocol
        )
    }
}

/// Receive-direction key of an outgoing packet header.
pub fn reverse_key(outgoing: &FlowKey) -> FlowKey {
    outgoing.reversed()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Rx,
    Tx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PacketKind {
    Syn,
    SynAck,
    Ack,
    Data,
    Fin,
}

/// A simulated frame. `key` is the header as it appears on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub id: u64,
    pub key: FlowKey,
    pub direction: Direction,
    pub kind: PacketKind,
    pub seq: u64,
    pub arrival: SimTime,
    pub size_bytes: u32,
}

impl Packet {
    /// Key of the flow this packet belongs to, in the receive direction.
    pub fn flow_key(&self) -> FlowKey {
        match self.direction {
            Direction::Rx => self.key,
            Direction::Tx => self.key.reversed(),
        }
    }

    pub fn is_data(&self) -> bool {
        self.kind == PacketKind::Data
    }
}

/// Metadata handed from the OS to the NIC with each outgoing packet. The
/// core ID is a single byte, enough for 256 cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransmitDescriptor {
    /// Header of the outgoing packet (transmit direction).
    pub key: FlowKey,
    pub core_id: u8,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv6Addr;

    #[test]
    fn reverse_swaps_addresses_and_ports() {
        let x: IpAddr = Ipv4Addr::new(10, 0, 0, 1).into();
        let y: IpAddr = Ipv4Addr::new(10, 0, 0, 2).into();
        let out = FlowKey::new(x, 1000, y, 2000, 6);
        let rx = reverse_key(&out);
        assert_eq!(rx, FlowKey::new(y, 2000, x, 1000, 6));
        assert_eq!(reverse_key(&rx), out);
    }

    #[test]
    fn symmetric_key_is_fixed_point() {
        let x: IpAddr = Ipv6Addr::LOCALHOST.into();
        let k = FlowKey::new(x, 7, x, 7, PROTO_UDP);
        assert_eq!(k.reversed(), k);
    }

    #[test]
    fn tx_packet_maps_to_receive_key() {
        let rx = FlowKey::tcp(Ipv4Addr::new(1, 1, 1, 1).into(), 40000, Ipv4Addr::new(2, 2, 2, 2).into(), 5001);
        let p = Packet {
            id: 0,
            key: rx.reversed(),
            direction: Direction::Tx,
            kind: PacketKind::Ack,
            seq: 0,
            arrival: SimTime::ZERO,
            size_bytes: 64,
        };
        assert_eq!(p.flow_key(), rx);
    }
}

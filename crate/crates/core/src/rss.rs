//! Receive Side Scaling classification: field selection, Toeplitz hash and
//! queue lookup (masked indirection table or direct modulo).

use std::net::IpAddr;

use bitflags::bitflags;
use thiserror::Error;

use crate::packet::FlowKey;

bitflags! {
    /// Header fields fed to the hash. Disabled fields contribute no bytes.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct HashType: u8 {
        const SRC_ADDR = 1 << 0;
        const DST_ADDR = 1 << 1;
        const SRC_PORT = 1 << 2;
        const DST_PORT = 1 << 3;
        const PROTOCOL = 1 << 4;
    }
}

impl HashType {
    pub const ADDRESSES: HashType = HashType::SRC_ADDR.union(HashType::DST_ADDR);
    /// Addresses plus ports, the usual TCP hash type.
    pub const FOUR_TUPLE: HashType = HashType::ADDRESSES
        .union(HashType::SRC_PORT)
        .union(HashType::DST_PORT);
}

/// The 40-byte key from the public RSS verification suite.
pub const DEFAULT_RSS_KEY: [u8; 40] = [
    0x6d, 0x5a, 0x56, 0xda, 0x25, 0x5b, 0x0e, 0xc2, 0x41, 0x67, 0x25, 0x3d, 0x43, 0xa3, 0x8f, 0xb0,
    0xd0, 0xca, 0x2b, 0xcb, 0xae, 0x7b, 0x30, 0xb4, 0x77, 0xcb, 0x2d, 0xa3, 0x80, 0x30, 0xf2, 0x0c,
    0x6a, 0x42, 0xb7, 0x3b, 0xbe, 0xac, 0x01, 0xfa,
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RssError {
    #[error("RSS key of {key_len} bytes is too short for a {input_len}-byte hash input (need {needed})")]
    KeyTooShort {
        key_len: usize,
        input_len: usize,
        needed: usize,
    },
    #[error("invalid RSS key hex: {0}")]
    BadKeyHex(String),
    #[error("hash type must enable at least one field")]
    EmptyHashType,
    #[error("indirection table length {0} is not a non-zero power of two")]
    TableNotPowerOfTwo(usize),
    #[error("indirection entry {index} names queue {queue}, but only {num_queues} queues exist")]
    QueueOutOfRange {
        index: usize,
        queue: u16,
        num_queues: usize,
    },
    #[error("at least one receive queue is required")]
    NoQueues,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RssKey(Vec<u8>);

impl RssKey {
    pub fn new(bytes: Vec<u8>) -> Self {
        RssKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, RssError> {
        let cleaned: String = s.chars().filter(|c| !c.is_whitespace() && *c != ':').collect();
        hex::decode(&cleaned)
            .map(RssKey)
            .map_err(|e| RssError::BadKeyHex(e.to_string()))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Longest hash input this key can cover without exhausting the window.
    pub fn max_input_len(&self) -> usize {
        self.0.len().saturating_sub(4)
    }
}

impl Default for RssKey {
    fn default() -> Self {
        RssKey(DEFAULT_RSS_KEY.to_vec())
    }
}

fn push_addr(out: &mut Vec<u8>, addr: &IpAddr) {
    match addr {
        IpAddr::V4(a) => out.extend_from_slice(&a.octets()),
        IpAddr::V6(a) => out.extend_from_slice(&a.octets()),
    }
}

/// Concatenates the enabled fields in canonical order (src addr, dst addr,
/// src port, dst port, protocol), network byte order.
pub fn select_fields(key: &FlowKey, hash_type: HashType) -> Vec<u8> {
    let mut out = Vec::with_capacity(37);
    if hash_type.contains(HashType::SRC_ADDR) {
        push_addr(&mut out, &key.src_addr);
    }
    if hash_type.contains(HashType::DST_ADDR) {
        push_addr(&mut out, &key.dst_addr);
    }
    if hash_type.contains(HashType::SRC_PORT) {
        out.extend_from_slice(&key.src_port.to_be_bytes());
    }
    if hash_type.contains(HashType::DST_PORT) {
        out.extend_from_slice(&key.dst_port.to_be_bytes());
    }
    if hash_type.contains(HashType::PROTOCOL) {
        out.push(key.protocol);
    }
    out
}

/// Toeplitz hash: for every set input bit `j` (MSB first), XOR in the 32-bit
/// key window starting at key bit `j`.
pub fn toeplitz_hash(key: &RssKey, input: &[u8]) -> Result<u32, RssError> {
    let k = key.as_bytes();
    if k.len() < input.len() + 4 {
        return Err(RssError::KeyTooShort {
            key_len: k.len(),
            input_len: input.len(),
            needed: input.len() + 4,
        });
    }
    let mut hash = 0u32;
    for (i, &byte) in input.iter().enumerate() {
        if byte == 0 {
            continue;
        }
        // Key bits [8i, 8i + 40) with bit 8i at position 39.
        let window = (u64::from(k[i]) << 32)
            | u64::from(u32::from_be_bytes([k[i + 1], k[i + 2], k[i + 3], k[i + 4]]));
        for b in 0..8 {
            if byte & (0x80 >> b) != 0 {
                hash ^= (window >> (8 - b)) as u32;
            }
        }
    }
    Ok(hash)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndirectionTable {
    entries: Vec<u16>,
    mask_bits: u32,
}

impl IndirectionTable {
    pub fn new(entries: Vec<u16>, num_queues: usize) -> Result<Self, RssError> {
        if entries.is_empty() || !entries.len().is_power_of_two() {
            return Err(RssError::TableNotPowerOfTwo(entries.len()));
        }
        if let Some((index, &queue)) = entries
            .iter()
            .enumerate()
            .find(|(_, &q)| usize::from(q) >= num_queues)
        {
            return Err(RssError::QueueOutOfRange {
                index,
                queue,
                num_queues,
            });
        }
        let mask_bits = entries.len().trailing_zeros();
        Ok(IndirectionTable { entries, mask_bits })
    }

    /// `size` entries assigned to `queues` round-robin.
    pub fn round_robin(queues: &[u16], size: usize, num_queues: usize) -> Result<Self, RssError> {
        if queues.is_empty() {
            return Err(RssError::NoQueues);
        }
        let entries = (0..size).map(|i| queues[i % queues.len()]).collect();
        Self::new(entries, num_queues)
    }

    pub fn entries(&self) -> &[u16] {
        &self.entries
    }

    pub fn mask_bits(&self) -> u32 {
        self.mask_bits
    }

    pub fn lookup(&self, hash: u32) -> u16 {
        let mask = (1u64 << self.mask_bits) - 1;
        self.entries[(u64::from(hash) & mask) as usize]
    }
}

pub fn indirection_lookup(hash: u32, table: &IndirectionTable) -> u16 {
    table.lookup(hash)
}

/// Direct hash-to-queue mapping used when no indirection table is configured.
pub fn direct_map_lookup(hash: u32, num_queues: usize) -> u16 {
    assert!(num_queues >= 1, "direct mapping needs at least one queue");
    (u64::from(hash) % num_queues as u64) as u16
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueueMapping {
    Indirection(IndirectionTable),
    DirectMap,
}

/// Immutable RSS configuration: key, hash type and queue mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RssEngine {
    key: RssKey,
    hash_type: HashType,
    mapping: QueueMapping,
    num_queues: usize,
}

impl RssEngine {
    pub fn new(
        key: RssKey,
        hash_type: HashType,
        mapping: QueueMapping,
        num_queues: usize,
    ) -> Result<Self, RssError> {
        if num_queues == 0 {
            return Err(RssError::NoQueues);
        }
        if hash_type.is_empty() {
            return Err(RssError::EmptyHashType);
        }
        // Widest input the hash type can produce (IPv6 addresses).
        let mut widest = 0;
        if hash_type.contains(HashType::SRC_ADDR) {
            widest += 16;
        }
        if hash_type.contains(HashType::DST_ADDR) {
            widest += 16;
        }
        if hash_type.contains(HashType::SRC_PORT) {
            widest += 2;
        }
        if hash_type.contains(HashType::DST_PORT) {
            widest += 2;
        }
        if hash_type.contains(HashType::PROTOCOL) {
            widest += 1;
        }
        if key.len() < widest + 4 {
            return Err(RssError::KeyTooShort {
                key_len: key.len(),
                input_len: widest,
                needed: widest + 4,
            });
        }
        if let QueueMapping::Indirection(table) = &mapping {
            // Re-validate against this engine's queue count.
            IndirectionTable::new(table.entries.clone(), num_queues)?;
        }
        Ok(RssEngine {
            key,
            hash_type,
            mapping,
            num_queues,
        })
    }

    pub fn hash(&self, key: &FlowKey) -> u32 {
        toeplitz_hash(&self.key, &select_fields(key, self.hash_type))
            .expect("key length validated at construction")
    }

    pub fn queue_for_hash(&self, hash: u32) -> u16 {
        match &self.mapping {
            QueueMapping::Indirection(table) => table.lookup(hash),
            QueueMapping::DirectMap => direct_map_lookup(hash, self.num_queues),
        }
    }

    pub fn classify(&self, key: &FlowKey) -> u16 {
        self.queue_for_hash(self.hash(key))
    }

    pub fn num_queues(&self) -> usize {
        self.num_queues
    }

    pub fn hash_type(&self) -> HashType {
        self.hash_type
    }
}

//! Fixed-width 100-byte sort records.
//!
//! Layout: a 10-byte key of printable ASCII, then a 90-byte payload made of
//! `00 11`, the row id as 32 upper-case hex digits, `88 99 AA BB`, 48 bytes
//! of filler and `CC DD EE FF`. Every byte is a pure function of the seed
//! and the row number.

pub const RECORD_LEN: usize = 100;
pub const KEY_LEN: usize = 10;

pub type Record = [u8; RECORD_LEN];
pub type Key = [u8; KEY_LEN];

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn key_for(seed: u64, row: u64) -> Key {
    let mut key = [0u8; KEY_LEN];
    for half in 0..2u64 {
        let mut v = splitmix64(seed ^ splitmix64(row.wrapping_mul(2).wrapping_add(half)));
        for b in &mut key[(half as usize) * 5..(half as usize + 1) * 5] {
            *b = b' ' + (v % 95) as u8;
            v /= 95;
        }
    }
    key
}

pub fn record_for(seed: u64, row: u64) -> Record {
    let mut rec = [0u8; RECORD_LEN];
    rec[..KEY_LEN].copy_from_slice(&key_for(seed, row));
    rec[10] = 0x00;
    rec[11] = 0x11;
    let hex = format!("{:032X}", row as u128);
    rec[12..44].copy_from_slice(hex.as_bytes());
    rec[44..48].copy_from_slice(&[0x88, 0x99, 0xAA, 0xBB]);
    for (j, b) in rec[48..96].iter_mut().enumerate() {
        *b = b'A' + ((row + j as u64 / 4) % 26) as u8;
    }
    rec[96..].copy_from_slice(&[0xCC, 0xDD, 0xEE, 0xFF]);
    rec
}

pub fn key_of(rec: &[u8]) -> &[u8] {
    &rec[..KEY_LEN]
}

/// Per-key hash feeding the order-independent dataset checksum.
pub fn key_hash(key: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// Rows `[start, end)` of shard `index` when `total` rows are cut into
/// `shards` pieces of `ceil(total / shards)` rows.
pub fn shard_range(total: u64, shards: u32, index: u32) -> (u64, u64) {
    let per = total.div_ceil(shards.max(1) as u64);
    let start = (index as u64 * per).min(total);
    let end = ((index as u64 + 1) * per).min(total);
    (start, end)
}

pub fn map_shard_name(index: u32) -> String {
    format!("part-m-{index:05}")
}

pub fn reduce_part_name(index: u32) -> String {
    format!("part-r-{index:05}")
}

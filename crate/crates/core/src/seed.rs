//! Deterministic seed derivation. Every random stream in a run comes from
//! one root seed combined with a path of labels, so results do not depend
//! on task scheduling.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed of `root` along `path`.
pub fn derive(root: u64, path: &[&str]) -> u64 {
    let mut state = splitmix64(root);
    for part in path {
        let mut h = FNV_OFFSET;
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        state = splitmix64(state ^ h);
    }
    state
}

//! Seed derivation for grid cells.
//!
//! `derive_seed(root, stream, a, b)` folds its inputs through the splitmix64
//! finalizer, so every (stream, draw, optimizer seed) gets an independent
//! 64-bit seed that depends only on the root seed.

/// Independent random streams of one grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    SourceData = 1,
    TargetData = 2,
    Optimizer = 3,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: Stream, draw: u64, opt_seed: u64) -> u64 {
    [stream as u64, draw, opt_seed]
        .into_iter()
        .fold(splitmix64(root), |h, x| splitmix64(h ^ splitmix64(x)))
}

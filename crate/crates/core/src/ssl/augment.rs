//! Orientation-only augmentation: the eight symmetries of the square.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::slide_io::PixelBlock;

/// One of the 8 flips/rotations. Bit 2 is a horizontal flip, bits 0-1 the
/// number of quarter turns applied after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn new(index: u8) -> Self {
        Dihedral(index % 8)
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Dihedral(rng.random_range(0..8))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// Source coordinate for output pixel `(y, x)` in an `s x s` image.
    #[inline]
    fn source(self, s: usize, y: usize, x: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        for _ in 0..(self.0 & 3) {
            (y, x) = (x, s - 1 - y);
        }
        if self.0 & 4 != 0 {
            x = s - 1 - x;
        }
        (y, x)
    }

    pub fn apply_block(self, block: &PixelBlock) -> PixelBlock {
        assert_eq!(block.width, block.height, "augmentation needs square patches");
        let s = block.width as usize;
        let mut out = PixelBlock::new(block.width, block.height);
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = self.source(s, y, x);
                let src = (sy * s + sx) * 3;
                let dst = (y * s + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&block.data[src..src + 3]);
            }
        }
        out
    }

    /// Applies the transform to a `[c, s, s]` planar image.
    pub fn apply_chw(self, data: &[f32], channels: usize, s: usize) -> Vec<f32> {
        assert_eq!(data.len(), channels * s * s);
        let mut out = vec![0.0; data.len()];
        for c in 0..channels {
            let plane = &data[c * s * s..(c + 1) * s * s];
            let dst = &mut out[c * s * s..(c + 1) * s * s];
            for y in 0..s {
                for x in 0..s {
                    let (sy, sx) = self.source(s, y, x);
                    dst[y * s + x] = plane[sy * s + sx];
                }
            }
        }
        out
    }
}

/// Random flip/rotation of a square patch, determined by `seed`.
pub fn augment(block: &PixelBlock, seed: u64) -> PixelBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dihedral::random(&mut rng).apply_block(block)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_block(s: u32) -> PixelBlock {
        let mut b = PixelBlock::new(s, s);
        for y in 0..s {
            for x in 0..s {
                b.set_pixel(x, y, [(x * 17) as u8, (y * 29) as u8, ((x * y) % 251) as u8]);
            }
        }
        b
    }

    fn histogram(b: &PixelBlock) -> Vec<[u8; 3]> {
        let mut v: Vec<_> = b.pixels().collect();
        v.sort();
        v
    }

    #[test]
    fn deterministic_for_seed() {
        let b = gradient_block(9);
        assert_eq!(augment(&b, 42), augment(&b, 42));
    }

    #[test]
    fn constant_patch_unchanged() {
        let b = PixelBlock::filled(7, 7, [200, 100, 150]);
        for seed in 0..16 {
            assert_eq!(augment(&b, seed), b);
        }
    }

    #[test]
    fn transforms_are_permutations() {
        let b = gradient_block(6);
        for t in Dihedral::all() {
            assert_eq!(histogram(&t.apply_block(&b)), histogram(&b));
        }
    }

    #[test]
    fn eight_distinct_transforms() {
        let b = gradient_block(5);
        let outs: std::collections::HashSet<Vec<u8>> = Dihedral::all().map(|t| t.apply_block(&b).data).collect();
        assert_eq!(outs.len(), 8);
        assert_eq!(Dihedral::IDENTITY.apply_block(&b), b);
    }

    #[test]
    fn chw_matches_block() {
        let b = gradient_block(6);
        let chw = crate::nn::block_to_chw(&b);
        for t in Dihedral::all() {
            assert_eq!(t.apply_chw(&chw, 3, 6), crate::nn::block_to_chw(&t.apply_block(&b)));
        }
    }
}

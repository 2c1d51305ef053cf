//! Loading example inputs and the optional image augmentations.

use rand::Rng;

use crate::error::Result;
use crate::protocol::DatasetManifest;
use crate::vision::InputLayout;

/// Loads every example's input once, aligned with manifest indices.
pub fn load_inputs(manifest: &DatasetManifest, layout: &InputLayout) -> Result<Vec<Vec<f64>>> {
    let (size, channels) = match *layout {
        InputLayout::Image {
            image_size,
            channels,
            ..
        } => (image_size, channels),
        InputLayout::Features { .. } => (0, 0),
    };
    manifest
        .examples()
        .iter()
        .map(|e| e.payload.load(size, channels))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub flip: bool,
    pub crop_pad: usize,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_pad == 0
    }

    /// Applies the enabled transforms to an HWC square image. Feature
    /// inputs pass through unchanged.
    pub fn apply<R: Rng>(&self, input: &[f64], layout: &InputLayout, rng: &mut R) -> Vec<f64> {
        let InputLayout::Image {
            image_size: n,
            channels: ch,
            ..
        } = *layout
        else {
            return input.to_vec();
        };
        if self.is_identity() {
            return input.to_vec();
        }
        let flip = self.flip && rng.random_bool(0.5);
        let (dy, dx) = if self.crop_pad > 0 {
            let span = 2 * self.crop_pad + 1;
            (rng.random_range(0..span), rng.random_range(0..span))
        } else {
            (self.crop_pad, self.crop_pad)
        };
        let pad = self.crop_pad as isize;
        let mut out = vec![0.0; input.len()];
        for y in 0..n {
            for x in 0..n {
                let sy = y as isize + dy as isize - pad;
                let mut sx = x as isize + dx as isize - pad;
                if sy < 0 || sx < 0 || sy >= n as isize || sx >= n as isize {
                    continue;
                }
                if flip {
                    sx = n as isize - 1 - sx;
                }
                let src = (sy as usize * n + sx as usize) * ch;
                let dst = (y * n + x) * ch;
                out[dst..dst + ch].copy_from_slice(&input[src..src + ch]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LAYOUT: InputLayout = InputLayout::Image {
        image_size: 4,
        channels: 1,
        patch_size: 2,
    };

    #[test]
    fn identity_augment_passes_through() {
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(Augment::default().apply(&img, &LAYOUT, &mut rng), img);
    }

    #[test]
    fn flip_mirrors_rows() {
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let aug = Augment { flip: true, crop_pad: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut flipped_seen = false;
        for _ in 0..16 {
            let out = aug.apply(&img, &LAYOUT, &mut rng);
            if out != img {
                assert_eq!(&out[..4], &[3.0, 2.0, 1.0, 0.0]);
                flipped_seen = true;
            }
        }
        assert!(flipped_seen);
    }

    #[test]
    fn crop_preserves_size() {
        let img = vec![1.0; 16];
        let aug = Augment { flip: false, crop_pad: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(aug.apply(&img, &LAYOUT, &mut rng).len(), 16);
    }
}

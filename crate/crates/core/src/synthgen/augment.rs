use image::{imageops, RgbaImage};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::AugmentConfig;

/// Clockwise right-angle rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u16 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    pub fn from_degrees(d: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.degrees() == d)
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self, Rotation::R90 | Rotation::R270)
    }
}

impl Serialize for Rotation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u16(self.degrees())
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let deg = u16::deserialize(d)?;
        Rotation::from_degrees(deg).ok_or_else(|| serde::de::Error::custom(format!("rotation {deg} is not a right angle")))
    }
}

/// Horizontal flip (applied first) followed by a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub rotation: Rotation,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { hflip: false, rotation: Rotation::R0 };

    pub fn sample<R: Rng>(config: &AugmentConfig, rng: &mut R) -> Self {
        let rotation = if config.rotations.is_empty() {
            Rotation::R0
        } else {
            config.rotations[rng.gen_range(0..config.rotations.len())]
        };
        let hflip = config.hflip && rng.gen_bool(0.5);
        Augmentation { hflip, rotation }
    }

    pub fn output_dims(self, w: u32, h: u32) -> (u32, u32) {
        if self.rotation.swaps_axes() {
            (h, w)
        } else {
            (w, h)
        }
    }

    pub fn apply(self, img: &RgbaImage) -> RgbaImage {
        let flipped;
        let src = if self.hflip {
            flipped = imageops::flip_horizontal(img);
            &flipped
        } else {
            img
        };
        match self.rotation {
            Rotation::R0 => src.clone(),
            Rotation::R90 => imageops::rotate90(src),
            Rotation::R180 => imageops::rotate180(src),
            Rotation::R270 => imageops::rotate270(src),
        }
    }
}

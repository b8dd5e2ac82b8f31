//! Two-modality video clips and datasets.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Visible, Modality::Infrared];

    pub fn index(self) -> usize {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Modality::Visible),
            1 => Some(Modality::Infrared),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visible => "vis",
            Modality::Infrared => "ir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// `T` single-channel frames of one person seen in one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// Position of the clip in its dataset.
    pub id: usize,
    pub identity: usize,
    pub modality: Modality,
    /// Index of the clip among those of the same identity and modality.
    pub index: usize,
    /// `T·H·W` pixel values in `[0, 1]`, frame-major then row-major.
    pub pixels: Vec<f32>,
}

impl VideoClip {
    pub fn frame(&self, t: usize, frame_len: usize) -> &[f32] {
        &self.pixels[t * frame_len..(t + 1) * frame_len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub identities: usize,
    pub clips_per_modality: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Ordered by (identity, modality, clip index).
    pub clips: Vec<VideoClip>,
}

/// Which clips of a dataset a stage sees. Training uses the first half of
/// every (identity, modality) clip list; evaluation ranks the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Dataset {
    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    /// Number of leading clips per (identity, modality) reserved for training.
    pub fn train_clips(&self) -> usize {
        self.clips_per_modality.div_ceil(2)
    }

    pub fn split(&self, split: Split) -> Vec<&VideoClip> {
        let cut = self.train_clips();
        self.clips
            .iter()
            .filter(|c| match split {
                Split::Train => c.index < cut,
                Split::Test => c.index >= cut,
                Split::All => true,
            })
            .collect()
    }

    /// Clips of one identity and modality within `split`, in clip order.
    pub fn clips_of(&self, identity: usize, modality: Modality, split: Split) -> Vec<&VideoClip> {
        self.split(split)
            .into_iter()
            .filter(|c| c.identity == identity && c.modality == modality)
            .collect()
    }
}

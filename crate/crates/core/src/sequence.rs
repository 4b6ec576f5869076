//! Prompt layout: interleaved text and image segments, and the toy image type.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder id occupying image positions in [`TokenSequence::ids`].
pub const IMAGE_PLACEHOLDER: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Index into the request's image list; `None` for text.
    pub image_index: Option<usize>,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
    segments: Vec<Segment>,
}

impl TokenSequence {
    pub fn builder(tokens_per_image: usize) -> SequenceBuilder {
        SequenceBuilder {
            tokens_per_image,
            ids: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn text_only(ids: &[u32]) -> Self {
        // tokens_per_image is irrelevant without image segments
        Self::builder(1).text(ids).build()
    }

    /// `<prefix><image_0>...<image_{n-1}><suffix>`, the layout used throughout the pipeline.
    pub fn prompt(prefix: &[u32], num_images: usize, suffix: &[u32], tokens_per_image: usize) -> Self {
        let mut b = Self::builder(tokens_per_image).text(prefix);
        for _ in 0..num_images {
            b = b.image();
        }
        b.text(suffix).build()
    }

    /// Rebuilds a sequence from raw parts, checking every layout invariant.
    pub fn from_parts(ids: Vec<u32>, segments: Vec<Segment>, tokens_per_image: usize) -> Result<Self> {
        let seq = Self { ids, segments };
        seq.validate(tokens_per_image)?;
        Ok(seq)
    }

    pub fn validate(&self, tokens_per_image: usize) -> Result<()> {
        let mut cursor = 0;
        let mut next_image = 0;
        for seg in &self.segments {
            if seg.start != cursor || seg.len == 0 {
                return Err(Error::Input(format!(
                    "segments must partition the sequence without gaps or overlap (at {})",
                    seg.start
                )));
            }
            match seg.kind {
                SegmentKind::Image => {
                    if seg.len != tokens_per_image {
                        return Err(Error::Input(format!(
                            "image segment at {} has {} tokens, expected {}",
                            seg.start, seg.len, tokens_per_image
                        )));
                    }
                    if seg.image_index != Some(next_image) {
                        return Err(Error::Input("image segments must be numbered in order".into()));
                    }
                    next_image += 1;
                }
                SegmentKind::Text => {
                    if seg.image_index.is_some() {
                        return Err(Error::Input("text segment carries an image index".into()));
                    }
                }
            }
            cursor += seg.len;
        }
        if cursor != self.ids.len() {
            return Err(Error::Input(format!(
                "segments cover {cursor} positions but the sequence has {}",
                self.ids.len()
            )));
        }
        Ok(())
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Image)
    }

    pub fn num_images(&self) -> usize {
        self.image_segments().count()
    }

    pub fn num_text_tokens(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Text)
            .map(|s| s.len)
            .sum()
    }

    /// Per-position image membership: `Some((image_index, offset_in_image))`.
    pub fn image_slots(&self) -> Vec<Option<(usize, usize)>> {
        let mut slots = vec![None; self.len()];
        for seg in self.image_segments() {
            let idx = seg.image_index.expect("image segment has an index");
            for (off, slot) in slots[seg.range()].iter_mut().enumerate() {
                *slot = Some((idx, off));
            }
        }
        slots
    }

    /// Appends text tokens, merging into a trailing text segment when there is one.
    pub fn extended(&self, tail: &[u32]) -> Self {
        let mut out = self.clone();
        if tail.is_empty() {
            return out;
        }
        let start = out.ids.len();
        out.ids.extend_from_slice(tail);
        match out.segments.last_mut() {
            Some(last) if last.kind == SegmentKind::Text => last.len += tail.len(),
            _ => out.segments.push(Segment {
                kind: SegmentKind::Text,
                image_index: None,
                start,
                len: tail.len(),
            }),
        }
        out
    }
}

pub struct SequenceBuilder {
    tokens_per_image: usize,
    ids: Vec<u32>,
    segments: Vec<Segment>,
}

impl SequenceBuilder {
    pub fn text(mut self, ids: &[u32]) -> Self {
        if ids.is_empty() {
            return self;
        }
        let start = self.ids.len();
        self.ids.extend_from_slice(ids);
        match self.segments.last_mut() {
            Some(last) if last.kind == SegmentKind::Text => last.len += ids.len(),
            _ => self.segments.push(Segment {
                kind: SegmentKind::Text,
                image_index: None,
                start,
                len: ids.len(),
            }),
        }
        self
    }

    pub fn image(mut self) -> Self {
        let start = self.ids.len();
        let index = self
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Image)
            .count();
        self.ids
            .extend(std::iter::repeat_n(IMAGE_PLACEHOLDER, self.tokens_per_image));
        self.segments.push(Segment {
            kind: SegmentKind::Image,
            image_index: Some(index),
            start,
            len: self.tokens_per_image,
        });
        self
    }

    pub fn build(self) -> TokenSequence {
        TokenSequence {
            ids: self.ids,
            segments: self.segments,
        }
    }
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "pixel buffer of {} bytes does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            width: side,
            height: side,
            pixels: vec![0; side * side],
        }
    }

    /// Deterministic blob-and-noise test pattern.
    pub fn synthetic(side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a2b_3c4d_5e6f_7788);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.0..side as f64),
                    rng.random_range(0.0..side as f64),
                    rng.random_range(1.0..(side as f64 / 2.0).max(1.5)),
                    rng.random_range(60.0..200.0),
                )
            })
            .collect();
        let mut pixels = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let mut v = 20.0;
                for &(cx, cy, r, amp) in &blobs {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    v += amp * (-d2 / (2.0 * r * r)).exp();
                }
                v += rng.random_range(-12.0..12.0);
                pixels.push(v.clamp(0.0, 255.0) as u8);
            }
        }
        Self {
            width: side,
            height: side,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_layout_partitions() {
        let seq = TokenSequence::prompt(&[5, 6, 7], 2, &[9], 16);
        assert_eq!(seq.len(), 3 + 32 + 1);
        seq.validate(16).unwrap();
        let imgs: Vec<_> = seq.image_segments().map(|s| (s.start, s.len)).collect();
        assert_eq!(imgs, vec![(3, 16), (19, 16)]);
        assert_eq!(seq.num_text_tokens(), 4);
    }

    #[test]
    fn from_parts_rejects_overlap() {
        let segs = vec![
            Segment { kind: SegmentKind::Text, image_index: None, start: 0, len: 2 },
            Segment { kind: SegmentKind::Text, image_index: None, start: 1, len: 2 },
        ];
        assert!(TokenSequence::from_parts(vec![1, 2, 3], segs, 4).is_err());
    }

    #[test]
    fn from_parts_rejects_short_image() {
        let segs = vec![Segment { kind: SegmentKind::Image, image_index: Some(0), start: 0, len: 3 }];
        assert!(TokenSequence::from_parts(vec![0; 3], segs, 4).is_err());
    }

    #[test]
    fn extend_merges_trailing_text() {
        let seq = TokenSequence::prompt(&[1], 1, &[2], 4).extended(&[3, 4]);
        assert_eq!(seq.segments().len(), 3);
        assert_eq!(seq.segments()[2].len, 3);
        seq.validate(4).unwrap();
    }

    #[test]
    fn synthetic_images_are_deterministic() {
        assert_eq!(Image::synthetic(16, 3), Image::synthetic(16, 3));
        assert_ne!(Image::synthetic(16, 3), Image::synthetic(16, 4));
    }
}

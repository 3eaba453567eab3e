//! Bit-plane embedding driven by an attention map.
//!
//! Attention is quantised into a per-pixel bit budget, the budget becomes an
//! ordered list of `(row, col, channel, plane)` slots, and framed payload
//! bits overwrite those slots one for one. Least significant masking (LSM)
//! keeps the lowest `lsm_k` planes untouched; permutative straddling (PS)
//! shuffles the slots with a seeded generator and keeps only a bpp budget.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BasnError, Result};
use crate::fusion::{fuse, FusionStrategy};
use crate::image::{AttentionMap, ImageTensor};
use crate::itc::ItcNetwork;
use crate::mfd::MfdNetwork;
use crate::scalar::Scalar;

/// Default number of payload-capable bit planes per channel.
pub const DEFAULT_B_MAX: u8 = 4;

pub const FRAME_MAGIC: [u8; 4] = [0x42, 0x41, 0x53, 0x4E];
pub const FRAME_VERSION: u8 = 0x01;
/// Magic, version and the 64-bit length field.
pub const FRAME_HEADER_BITS: usize = (4 + 1 + 8) * 8;

/// Bits each pixel-channel byte may carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapacityMap {
    height: usize,
    width: usize,
    channels: usize,
    b_max: u8,
    /// HWC order, matching [`ImageTensor`] bytes.
    bits: Vec<u8>,
}

impl CapacityMap {
    pub fn new(height: usize, width: usize, channels: usize, b_max: u8, bits: Vec<u8>) -> Result<Self> {
        check_b_max(b_max)?;
        if bits.len() != height * width * channels {
            return Err(BasnError::ShapeMismatch(format!(
                "{height}x{width}x{channels} capacity needs {} entries, got {}",
                height * width * channels,
                bits.len()
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| b > b_max) {
            return Err(invalid(format!("capacity {b} exceeds {b_max} planes")));
        }
        Ok(Self {
            height,
            width,
            channels,
            b_max,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn b_max(&self) -> u8 {
        self.b_max
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.bits[(row * self.width + col) * self.channels + channel]
    }

    pub fn total_bits(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / (self.height * self.width) as f64
    }

    /// Single-channel image of the per-pixel budget of channel 0, values
    /// `0..=b_max`. Lossless round trip through [`CapacityMap::from_image`].
    pub fn to_image(&self) -> Result<ImageTensor> {
        let bytes = (0..self.height * self.width)
            .map(|p| self.bits[p * self.channels])
            .collect();
        ImageTensor::new(self.height, self.width, 1, bytes)
    }

    pub fn from_image(img: &ImageTensor, channels: usize, b_max: u8) -> Result<Self> {
        if img.channels() != 1 {
            return Err(invalid("capacity image must be single-channel"));
        }
        let bits = img
            .bytes()
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, channels))
            .collect();
        Self::new(img.height(), img.width(), channels, b_max, bits)
    }
}

fn check_b_max(b: u8) -> Result<()> {
    if b == 0 || b > 8 {
        return Err(invalid(format!("plane budget {b} outside 1..=8")));
    }
    Ok(())
}

/// `n = clamp(floor(A * (b_max + 1)), 0, b_max)` per pixel, replicated over channels.
pub fn quantize_attention<T: Scalar>(a: &AttentionMap<T>, channels: usize, b_max: u8) -> Result<CapacityMap> {
    check_b_max(b_max)?;
    let levels = (b_max as f64) + 1.0;
    let bits = a
        .values()
        .iter()
        .flat_map(|v| {
            let n = (v.as_f64() * levels).floor().clamp(0.0, b_max as f64) as u8;
            std::iter::repeat_n(n, channels)
        })
        .collect();
    CapacityMap::new(a.height(), a.width(), channels, b_max, bits)
}

/// Masking and straddling knobs of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub lsm_k: u8,
    pub ps_seed: Option<u64>,
    pub ps_limit_bpp: Option<f64>,
}

impl PlanConfig {
    pub fn plain(lsm_k: u8) -> Self {
        Self {
            lsm_k,
            ps_seed: None,
            ps_limit_bpp: None,
        }
    }

    pub fn validate(&self, b_max: u8) -> Result<()> {
        if self.lsm_k >= b_max {
            return Err(invalid(format!(
                "lsm_k {} must be below the plane budget {b_max}",
                self.lsm_k
            )));
        }
        if let Some(l) = self.ps_limit_bpp {
            if !(l.is_finite() && l > 0.0) {
                return Err(invalid(format!("ps limit {l} must be positive")));
            }
            if self.ps_seed.is_none() {
                return Err(invalid("a ps limit requires a ps seed"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub row: u32,
    pub col: u32,
    pub channel: u8,
    pub plane: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPlan {
    height: usize,
    width: usize,
    channels: usize,
    config: PlanConfig,
    slots: Vec<Slot>,
    /// A PS limit was requested but the capacity was already below it.
    unlimited_by_ps: bool,
}

impl EmbeddingPlan {
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn config(&self) -> PlanConfig {
        self.config
    }

    pub fn unlimited_by_ps(&self) -> bool {
        self.unlimited_by_ps
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn bpp(&self) -> f64 {
        self.slots.len() as f64 / (self.height * self.width) as f64
    }

    /// Payload bits that fit after the frame header.
    pub fn payload_capacity(&self) -> usize {
        self.slots.len().saturating_sub(FRAME_HEADER_BITS)
    }
}

/// Uniform index in `0..bound` by Lemire's multiply-and-reject method.
fn bounded(rng: &mut Xoshiro256StarStar, bound: u64) -> u64 {
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let m = (rng.next_u64() as u128) * (bound as u128);
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Fisher-Yates from the last element down, driven by xoshiro256** seeded
/// through SplitMix64 (`seed_from_u64`).
pub fn seeded_shuffle<X>(items: &mut [X], seed: u64) {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = bounded(&mut rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Slots in row-major, channel-minor, plane-ascending order, planes below
/// `lsm_k` dropped; with PS the list is shuffled and cut to
/// `floor(limit * H * W)`.
pub fn build_plan(cap: &CapacityMap, cfg: PlanConfig) -> Result<EmbeddingPlan> {
    cfg.validate(cap.b_max)?;
    let mut slots = Vec::with_capacity(cap.total_bits());
    for row in 0..cap.height {
        for col in 0..cap.width {
            for ch in 0..cap.channels {
                for plane in cfg.lsm_k..cap.get(row, col, ch) {
                    slots.push(Slot {
                        row: row as u32,
                        col: col as u32,
                        channel: ch as u8,
                        plane,
                    });
                }
            }
        }
    }
    let mut unlimited_by_ps = false;
    if let Some(seed) = cfg.ps_seed {
        seeded_shuffle(&mut slots, seed);
        if let Some(limit) = cfg.ps_limit_bpp {
            let budget = (limit * (cap.height * cap.width) as f64).floor() as usize;
            if budget >= slots.len() {
                unlimited_by_ps = true;
            } else {
                slots.truncate(budget);
            }
        }
    }
    Ok(EmbeddingPlan {
        height: cap.height,
        width: cap.width,
        channels: cap.channels,
        config: cfg,
        slots,
        unlimited_by_ps,
    })
}

/// Framed payload: `BASN`, version, big-endian bit length, body bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadFrame {
    body: Vec<bool>,
}

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<bool> {
    bytes
        .iter()
        .flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
        .collect()
}

/// Packs MSB-first; a trailing partial byte is zero-padded.
pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i))))
        .collect()
}

impl PayloadFrame {
    pub fn from_bits(body: Vec<bool>) -> Self {
        Self { body }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            body: bytes_to_bits(bytes),
        }
    }

    pub fn body(&self) -> &[bool] {
        &self.body
    }

    pub fn into_body(self) -> Vec<bool> {
        self.body
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        bits_to_bytes(&self.body)
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_BITS + self.body.len()
    }

    pub fn encode(&self) -> Vec<bool> {
        let mut header = Vec::with_capacity(13);
        header.extend_from_slice(&FRAME_MAGIC);
        header.push(FRAME_VERSION);
        header.extend_from_slice(&(self.body.len() as u64).to_be_bytes());
        let mut out = bytes_to_bits(&header);
        out.extend_from_slice(&self.body);
        out
    }

    /// Decodes the header first, so the length field bounds the body read.
    pub fn decode(bits: &[bool]) -> Result<Self> {
        let bit_length = decode_header(bits)?;
        let available = bits.len() - FRAME_HEADER_BITS;
        if bit_length > available as u64 {
            return Err(BasnError::CorruptPayload {
                expected: bit_length,
                recovered: bits[FRAME_HEADER_BITS..].to_vec(),
            });
        }
        let end = FRAME_HEADER_BITS + bit_length as usize;
        Ok(Self {
            body: bits[FRAME_HEADER_BITS..end].to_vec(),
        })
    }
}

/// Validates magic and version, returning the announced body length.
pub fn decode_header(bits: &[bool]) -> Result<u64> {
    if bits.len() < FRAME_HEADER_BITS {
        return Err(BasnError::NotAStego(format!(
            "only {} bits available, header needs {FRAME_HEADER_BITS}",
            bits.len()
        )));
    }
    let header = bits_to_bytes(&bits[..FRAME_HEADER_BITS]);
    if header[..4] != FRAME_MAGIC {
        return Err(BasnError::NotAStego(
            "frame magic mismatch (wrong image, model or seed)".into(),
        ));
    }
    if header[4] != FRAME_VERSION {
        return Err(BasnError::NotAStego(format!(
            "unsupported frame version {}",
            header[4]
        )));
    }
    Ok(u64::from_be_bytes(header[5..13].try_into().unwrap()))
}

fn check_plan_image(img: &ImageTensor, plan: &EmbeddingPlan) -> Result<()> {
    if (img.height(), img.width(), img.channels()) != plan.dims() {
        return Err(BasnError::ShapeMismatch(format!(
            "plan for {:?} applied to {}x{}x{} image",
            plan.dims(),
            img.height(),
            img.width(),
            img.channels()
        )));
    }
    Ok(())
}

/// Writes raw bits into the first `bits.len()` slots.
pub fn embed_bits(cover: &ImageTensor, plan: &EmbeddingPlan, bits: &[bool]) -> Result<ImageTensor> {
    check_plan_image(cover, plan)?;
    if bits.len() > plan.len() {
        return Err(BasnError::CapacityExceeded {
            required: bits.len(),
            available: plan.len(),
            available_bpp: plan.bpp(),
        });
    }
    let mut stego = cover.clone();
    for (slot, &bit) in plan.slots.iter().zip(bits) {
        let (r, c, ch) = (slot.row as usize, slot.col as usize, slot.channel as usize);
        let mask = 1u8 << slot.plane;
        let v = stego.get(r, c, ch);
        stego.set(r, c, ch, if bit { v | mask } else { v & !mask });
    }
    Ok(stego)
}

pub fn embed(cover: &ImageTensor, plan: &EmbeddingPlan, frame: &PayloadFrame) -> Result<ImageTensor> {
    embed_bits(cover, plan, &frame.encode())
}

/// Reads up to `count` bits in slot order.
pub fn read_bits(stego: &ImageTensor, plan: &EmbeddingPlan, count: usize) -> Result<Vec<bool>> {
    check_plan_image(stego, plan)?;
    Ok(plan
        .slots
        .iter()
        .take(count)
        .map(|s| (stego.get(s.row as usize, s.col as usize, s.channel as usize) >> s.plane) & 1 == 1)
        .collect())
}

/// Extraction with a known plan.
pub fn extract_with_plan(stego: &ImageTensor, plan: &EmbeddingPlan) -> Result<PayloadFrame> {
    let header = read_bits(stego, plan, FRAME_HEADER_BITS)?;
    let len = decode_header(&header)?;
    let want = (FRAME_HEADER_BITS as u64).saturating_add(len).min(plan.len() as u64) as usize;
    PayloadFrame::decode(&read_bits(stego, plan, want)?)
}

/// Everything the receiver must share with the sender besides the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub strategy: FusionStrategy,
    pub plan: PlanConfig,
    pub b_max: u8,
}

/// Fused, quantised attention of an image under both networks.
pub fn attention_capacity<T: Scalar>(
    img: &ImageTensor,
    itc: &ItcNetwork<T>,
    mfd: &MfdNetwork<T>,
    cfg: &CodecConfig,
) -> Result<CapacityMap> {
    let f = img.to_float::<T>();
    let a = fuse(&itc.forward(&f)?, &mfd.forward(&f)?, cfg.strategy)?;
    quantize_attention(&a, img.channels(), cfg.b_max)
}

pub fn attention_plan<T: Scalar>(
    img: &ImageTensor,
    itc: &ItcNetwork<T>,
    mfd: &MfdNetwork<T>,
    cfg: &CodecConfig,
) -> Result<EmbeddingPlan> {
    build_plan(&attention_capacity(img, itc, mfd, cfg)?, cfg.plan)
}

/// Receiver path: attention is recomputed from the stego image itself.
pub fn extract<T: Scalar>(
    stego: &ImageTensor,
    itc: &ItcNetwork<T>,
    mfd: &MfdNetwork<T>,
    cfg: &CodecConfig,
) -> Result<PayloadFrame> {
    extract_with_plan(stego, &attention_plan(stego, itc, mfd, cfg)?)
}

/// Bits a receiver obtains for error measurement. A valid header yields
/// the announced body (or the recovered prefix of a truncated one). An
/// invalid header still yields the raw bits at the sent positions.
pub fn received_bits(stego: &ImageTensor, plan: &EmbeddingPlan, sent_len: usize) -> Result<Vec<bool>> {
    match extract_with_plan(stego, plan) {
        Ok(f) => Ok(f.into_body()),
        Err(BasnError::CorruptPayload { recovered, .. }) => Ok(recovered),
        Err(BasnError::NotAStego(_)) => {
            let raw = read_bits(stego, plan, FRAME_HEADER_BITS + sent_len)?;
            Ok(raw.get(FRAME_HEADER_BITS..).map(|s| s.to_vec()).unwrap_or_default())
        }
        Err(e) => Err(e),
    }
}

/// Bit stream error rate in percent: length difference plus Hamming
/// distance over the common prefix, relative to the sent length.
pub fn bser(sent: &[bool], received: &[bool]) -> Result<f64> {
    if sent.is_empty() {
        return Err(invalid("sent bit stream is empty"));
    }
    let common = sent.len().min(received.len());
    let flips = sent[..common]
        .iter()
        .zip(&received[..common])
        .filter(|(a, b)| a != b)
        .count();
    let len_diff = sent.len().abs_diff(received.len());
    Ok((flips + len_diff) as f64 / sent.len() as f64 * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_cap(h: usize, w: usize, bits: u8) -> CapacityMap {
        CapacityMap::new(h, w, 3, DEFAULT_B_MAX, vec![bits; h * w * 3]).unwrap()
    }

    #[test]
    fn quantizer_levels() {
        let q = |v: f64| {
            let a = AttentionMap::filled(8, 8, v).unwrap();
            quantize_attention(&a, 3, DEFAULT_B_MAX).unwrap()
        };
        assert_eq!(q(0.0).bpp(), 0.0);
        assert_eq!(q(1.0 - 1e-9).bpp(), 12.0);
        assert_eq!(q(1.0).bpp(), 12.0);
        assert_eq!(q(0.5).bpp(), 6.0);
        assert_eq!(q(0.19999).bpp(), 0.0);
        assert_eq!(q(0.2).bpp(), 3.0);
    }

    #[test]
    fn plan_counts() {
        let cap = uniform_cap(8, 8, 2);
        assert_eq!(build_plan(&cap, PlanConfig::plain(0)).unwrap().len(), cap.total_bits());
        assert_eq!(build_plan(&cap, PlanConfig::plain(1)).unwrap().len(), cap.total_bits() / 2);
        assert!(build_plan(&cap, PlanConfig::plain(4)).is_err());
        let cap = uniform_cap(64, 64, 4);
        let p = build_plan(
            &cap,
            PlanConfig {
                lsm_k: 0,
                ps_seed: Some(7),
                ps_limit_bpp: Some(1.2),
            },
        )
        .unwrap();
        assert_eq!(p.len(), 4915);
        assert!(!p.unlimited_by_ps());
        let p = build_plan(
            &uniform_cap(8, 8, 1),
            PlanConfig {
                lsm_k: 0,
                ps_seed: Some(7),
                ps_limit_bpp: Some(5.0),
            },
        )
        .unwrap();
        assert!(p.unlimited_by_ps());
        assert_eq!(p.len(), 192);
        let no_seed = PlanConfig {
            lsm_k: 0,
            ps_seed: None,
            ps_limit_bpp: Some(1.0),
        };
        assert!(build_plan(&cap, no_seed).is_err());
    }

    #[test]
    fn plan_order_is_row_major_channel_minor_plane_ascending() {
        let cap = CapacityMap::new(1, 2, 2, 4, vec![2, 0, 1, 3]).unwrap();
        let p = build_plan(&cap, PlanConfig::plain(0)).unwrap();
        let got: Vec<_> = p.slots().iter().map(|s| (s.col, s.channel, s.plane)).collect();
        assert_eq!(got, vec![(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 1, 2)]);
    }

    #[test]
    fn single_bit_example() {
        let mut cover = ImageTensor::filled(8, 8, 3, 0).unwrap();
        cover.set(0, 0, 0, 0b1011_0010);
        let plan = build_plan(&uniform_cap(8, 8, 1), PlanConfig::plain(0)).unwrap();
        let stego = embed_bits(&cover, &plan, &[true]).unwrap();
        assert_eq!(stego.get(0, 0, 0), 0b1011_0011);
        assert_eq!(embed_bits(&cover, &plan, &[]).unwrap(), cover);
    }

    #[test]
    fn frame_layout_and_round_trip() {
        let f = PayloadFrame::from_bytes(&[0xA5]);
        let bits = f.encode();
        let bytes = bits_to_bytes(&bits);
        assert_eq!(bytes, vec![0x42, 0x41, 0x53, 0x4E, 0x01, 0, 0, 0, 0, 0, 0, 0, 8, 0xA5]);
        assert_eq!(PayloadFrame::decode(&bits).unwrap(), f);
        let mut bad = bits.clone();
        bad[0] = !bad[0];
        assert!(matches!(PayloadFrame::decode(&bad), Err(BasnError::NotAStego(_))));
        assert!(matches!(
            PayloadFrame::decode(&bits[..bits.len() - 3]),
            Err(BasnError::CorruptPayload { expected: 8, .. })
        ));
    }

    #[test]
    fn overflow_reports_capacity() {
        let cover = ImageTensor::filled(8, 8, 3, 9).unwrap();
        let plan = build_plan(&uniform_cap(8, 8, 1), PlanConfig::plain(0)).unwrap();
        let frame = PayloadFrame::from_bits(vec![true; 200]);
        match embed(&cover, &plan, &frame) {
            Err(BasnError::CapacityExceeded { required, available, .. }) => {
                assert_eq!((required, available), (304, 192));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bser_examples() {
        let sent = vec![true; 1000];
        assert_eq!(bser(&sent, &sent).unwrap(), 0.0);
        assert!((bser(&sent, &sent[..990]).unwrap() - 1.0).abs() < 1e-12);
        let s500 = vec![false; 500];
        let mut r = s500.clone();
        r.extend([true; 5]);
        assert!((bser(&s500, &r).unwrap() - 1.0).abs() < 1e-12);
        assert!(bser(&[], &r).is_err());
    }

    #[test]
    fn capacity_image_round_trip() {
        let bits = (0..64u8).flat_map(|p| [p % 5; 3]).collect();
        let cap = CapacityMap::new(8, 8, 3, 4, bits).unwrap();
        assert_eq!(CapacityMap::from_image(&cap.to_image().unwrap(), 3, 4).unwrap(), cap);
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let mut a: Vec<u32> = (0..100).collect();
        let mut b = a.clone();
        seeded_shuffle(&mut a, 3);
        seeded_shuffle(&mut b, 3);
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
        let mut c: Vec<u32> = (0..100).collect();
        seeded_shuffle(&mut c, 4);
        assert_ne!(a, c);
    }
}

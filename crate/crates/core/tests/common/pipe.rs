//! Pipeline fixtures and counting checks.

use std::path::Path;

use axial_nowcast::data::{
    chunk, ingest, normalize, percentile, quality_filter, shuffle, split, synth_generate, Dataset, FrameSequence,
    Ingest, RawFolder, SplitSizes, SynthConfig, MAGIC,
};
use axial_nowcast::Tensor;
use image::{GrayImage, Luma};
use proptest::prelude::*;

pub fn write_gray_frames(dir: &Path, count: usize, size: u32) {
    for k in 0..count {
        let img = GrayImage::from_pixel(size, size, Luma([(k % 256) as u8]));
        img.save(dir.join(format!("frame_{k:04}.png"))).unwrap();
    }
}

pub fn accepted(r: Ingest) -> RawFolder {
    match r {
        Ingest::Accepted(raw) => raw,
        Ingest::Rejected { frames, .. } => panic!("rejected with {frames} frames"),
    }
}

pub fn ingest_clips_long_folders_in_filename_order() {
    let dir = tempfile::tempdir().unwrap();
    write_gray_frames(dir.path(), 250, 4);
    let raw = accepted(ingest(dir.path(), 4, 240).unwrap());
    assert_eq!(raw.frames.len(), 240);
    for (k, f) in raw.frames.iter().enumerate() {
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|&p| p as usize == k), "frame {k} out of order");
    }
}

pub fn ingest_rejects_short_folders() {
    let dir = tempfile::tempdir().unwrap();
    write_gray_frames(dir.path(), 239, 4);
    match ingest(dir.path(), 4, 240).unwrap() {
        Ingest::Rejected { frames, .. } => assert_eq!(frames, 239),
        Ingest::Accepted(_) => panic!("short folder accepted"),
    }
}

pub fn raw_with(frames: Vec<u8>, size: usize) -> RawFolder {
    RawFolder { path: "mem".into(), size, frames: frames.into_iter().map(|p| vec![p; size * size]).collect() }
}

pub fn chunk_cuts_non_overlapping_windows() {
    let raw = raw_with((0..240).map(|k| k as u8).collect(), 2);
    let seqs = chunk(&raw, 7, 20).unwrap();
    assert_eq!(seqs.len(), 12);
    for (i, s) in seqs.iter().enumerate() {
        assert_eq!((s.len(), s.source, s.start), (20, 7, 20 * i as u32));
        assert_eq!(s.frame(0).data()[0], (normalize((20 * i) as u8) as f32) as f64);
    }
    assert_eq!(chunk(&raw_with(vec![1; 20], 2), 0, 20).unwrap().len(), 1);
    let thirty = chunk(&raw_with((0..30).collect(), 2), 0, 20).unwrap();
    assert_eq!(thirty.len(), 1);
    assert_eq!(thirty[0].frame(19).data()[0], (normalize(19) as f32) as f64);
}

/// Sort-based percentile with linear interpolation, written independently.
pub fn percentile_oracle(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = (v.len() - 1) as f64 * p / 100.0;
    let below = pos.trunc();
    let frac = pos - below;
    let i = below as usize;
    if i + 1 >= v.len() {
        v[i]
    } else {
        (1.0 - frac) * v[i] + frac * v[i + 1]
    }
}

pub const GRAY: u8 = 128;

pub fn corpus(black_frames: usize) -> Vec<FrameSequence> {
    let mut seqs = Vec::new();
    for s in 0..5 {
        seqs.extend(chunk(&raw_with(vec![GRAY; 20], 3), s, 20).unwrap());
    }
    let mut odd = vec![GRAY; 20];
    odd[..black_frames].fill(0);
    seqs.extend(chunk(&raw_with(odd, 3), 99, 20).unwrap());
    seqs
}

pub fn eleven_black_frames_drop_the_sequence() {
    let seqs = corpus(11);
    let sums: Vec<f64> = seqs.iter().flat_map(|s| (0..20).map(|t| s.frame_sum(t)).collect::<Vec<_>>()).collect();
    let report = quality_filter(seqs, 10).unwrap();
    assert!((report.lower - percentile_oracle(&sums, 25.0)).abs() < 1e-12);
    assert!((report.upper - percentile_oracle(&sums, 75.0)).abs() < 1e-12);
    assert_eq!(report.dropped, 1);
    assert_eq!(report.bad_frames, 11);
    assert!(report.kept.iter().all(|s| s.source != 99));
}

pub fn exactly_ten_bad_frames_are_tolerated() {
    let report = quality_filter(corpus(10), 10).unwrap();
    assert_eq!(report.dropped, 0);
    assert_eq!(report.kept.len(), 6);
}

pub fn tagged(n: usize) -> Vec<FrameSequence> {
    (0..n).map(|i| FrameSequence::new(Tensor::zeros(&[1, 1, 1]), i as u32, 0).unwrap()).collect()
}

/// SplitMix64 from its published constants, independent of the crate.
pub struct Reference(u64);

impl Reference {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

pub fn shuffle_is_fisher_yates_over_splitmix64() {
    let mut items: Vec<usize> = (0..50).collect();
    shuffle(&mut items, 1234);
    let mut expect: Vec<usize> = (0..50).collect();
    let mut r = Reference(1234);
    for i in (1..50).rev() {
        expect.swap(i, (r.next() % (i as u64 + 1)) as usize);
    }
    assert_eq!(items, expect);
}

pub fn standard_split_of_full_corpus() {
    let sizes = SplitSizes::standard(2901);
    assert_eq!(sizes, SplitSizes { train: 2001, val: 500, test: 400 });
    let ds = split(tagged(2901), 5, sizes).unwrap();
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (2001, 500, 400));
    let mut ids: Vec<u32> = ds.all().map(|s| s.source).collect();
    ids.sort();
    assert_eq!(ids, (0..2901).collect::<Vec<_>>());
    assert_eq!(split(tagged(2901), 5, sizes).unwrap(), ds);
    assert_ne!(split(tagged(2901), 6, sizes).unwrap(), ds);
}

pub fn small_dataset() -> Dataset {
    let seqs = synth_generate(&SynthConfig::new(7, 5, 6, 11)).unwrap();
    split(seqs, 3, SplitSizes { train: 4, val: 2, test: 1 }).unwrap()
}

pub fn container_round_trip_is_bitwise() {
    let ds = small_dataset();
    let bytes = ds.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let back = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.axsq");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
}

/// Quartile ranks are exact, so agreement with the oracle is absolute.
pub fn quartiles_agree(values: &[f64]) -> Result<(), TestCaseError> {
    for p in [25.0, 75.0] {
        let (a, b) = (percentile(values, p), percentile_oracle(values, p));
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b} at p={p}");
    }
    Ok(())
}

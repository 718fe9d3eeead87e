//! Image folders to a split, filtered AXSQ dataset, plus the synthetic
//! generator that stands in for radar archives.

use axial_nowcast::data::{
    chunk, ingest, quality_filter, split, synth_generate, Dataset, Ingest, SplitSizes, SynthConfig,
};
use image::{GrayImage, Luma};

fn main() -> axial_nowcast::Result<()> {
    let root = tempfile::tempdir().expect("temp dir");
    // Three folders: one long enough, one with a dark spell, one too short.
    for (name, frames, dark) in [("day1", 250, 0..0), ("day2", 240, 40..55), ("day3", 200, 0..0)] {
        let dir = root.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for k in 0..frames {
            let level = if dark.contains(&k) { 0 } else { 90 };
            let img = GrayImage::from_fn(48, 48, |x, y| Luma([level + ((x + y) % 5) as u8]));
            img.save(dir.join(format!("{k:04}.png"))).unwrap();
        }
    }

    let mut seqs = Vec::new();
    for (source, name) in ["day1", "day2", "day3"].iter().enumerate() {
        match ingest(&root.path().join(name), 16, 240)? {
            Ingest::Accepted(raw) => {
                println!("{name}: {} frames kept", raw.frames.len());
                seqs.extend(chunk(&raw, source as u32, 20)?);
            }
            Ingest::Rejected { frames, .. } => println!("{name}: rejected with {frames} frames"),
        }
    }
    println!("{} sequences before filtering", seqs.len());
    let report = quality_filter(seqs, 10)?;
    println!(
        "frame-sum band [{:.1}, {:.1}], {} bad frames, {} sequences dropped, {} kept",
        report.lower,
        report.upper,
        report.bad_frames,
        report.dropped,
        report.kept.len()
    );
    let sizes = SplitSizes::standard(report.kept.len());
    let data = split(report.kept, 0, sizes)?;
    let path = root.path().join("radar.axsq");
    data.save(&path)?;
    let back = Dataset::load(&path)?;
    println!("saved {:?} split, reload identical: {}", sizes, back == data);

    let synth = synth_generate(&SynthConfig::new(6, 20, 32, 7))?;
    let first = &synth[0];
    println!(
        "synthetic sequence: {} frames, first frame mass {:.2}, last {:.2}",
        first.len(),
        first.frame(0).sum(),
        first.frame(19).sum()
    );
    Ok(())
}

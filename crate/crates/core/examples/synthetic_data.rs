//! Generate a synthetic shapes dataset, derive preference pairs and write
//! manifests plus content-addressed PNGs.
//!
//!     cargo run --example synthetic_data -- [out_dir] [n]

use std::path::PathBuf;

use longalign::datakit::{self, Corruption};

fn main() -> longalign::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("longalign-synthetic"));
    let n = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);

    let splits = datakit::generate_dataset(n, 3, (0.8, 0.1, 0.1))?;
    for r in splits.train.iter().take(3) {
        println!("long:  {}\nshort: {}", r.caption_long, r.caption_short);
        for s in r.caption_long.split_inclusive('.') {
            let s = s.trim();
            println!("  {s:36} satisfied by scene: {}", datakit::scene_satisfies(&r.scene, s));
        }
    }
    for corruption in [Corruption::SegmentDrop, Corruption::AttributeSwap, Corruption::Mixed] {
        let (pairs, skipped) = datakit::derive_preference_pairs(&splits.train, 4, corruption)?;
        let violated = pairs.iter().filter(|p| p.prompt.text.split_inclusive('.').any(|s| !datakit::scene_satisfies(&p.lose_scene, s.trim()))).count();
        println!("{corruption:?}: {} pairs, {skipped} skipped, losers violating a segment: {violated}", pairs.len());
    }

    std::fs::create_dir_all(&out)?;
    let (pairs, _) = datakit::derive_preference_pairs(&splits.train, 4, Corruption::Mixed)?;
    println!("wrote {}", datakit::write_manifest(&out, "train", &splits.train)?.display());
    println!("wrote {}", datakit::write_pairs(&out, "pairs_train", &pairs)?.display());
    let back = datakit::read_manifest(&out, "train")?;
    assert_eq!(back.len(), splits.train.len());
    assert!(back.iter().zip(&splits.train).all(|(a, b)| a.image == b.image));
    println!("manifest round trip: {} records, pixels identical", back.len());
    Ok(())
}

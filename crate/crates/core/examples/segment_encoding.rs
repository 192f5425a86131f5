//! Split a long caption into sentence segments, encode each one and merge
//! them into the fixed-length conditioning sequence.

use longalign::datakit;
use longalign::encoders::{merge_conditioning, CondTag, TextEncoder, TextEncoderConfig};
use longalign::segmentation::{segment_prompt, tokenize_truncated, RawPrompt};

fn main() -> longalign::Result<()> {
    let vocab = datakit::grammar_vocabulary();
    let cfg = TextEncoderConfig::toy(vocab.size());
    let enc = TextEncoder::new(cfg, 0);
    let prompt = RawPrompt::new("A red circle in the center. A blue square in the top left. A green triangle in the bottom right. A white circle in the top right.")?;

    let sp = segment_prompt(&prompt, &vocab, cfg.l_seg)?;
    for (text, seg) in sp.texts.iter().zip(&sp.segments) {
        let toks: Vec<&str> = seg.token_ids.iter().map(|&i| vocab.token(i)).collect();
        println!("{text:40} -> {}", toks.join(" "));
    }
    let single = tokenize_truncated(&prompt.text, &vocab, cfg.l_seg)?;
    println!("single pass keeps: {}", vocab.detokenize(single.content_ids()));

    let refs: Vec<_> = sp.segments.iter().collect();
    let embs = enc.encode_segments(&refs);
    let pairs: Vec<_> = sp.segments.iter().zip(&embs).collect();
    let n_cond = 4 * cfg.l_seg;
    let seq = merge_conditioning(&pairs, &enc.pad_star_embedding(&vocab), n_cond)?;
    let layout: String = seq
        .layout
        .iter()
        .map(|t| match t {
            CondTag::Sot => 'S',
            CondTag::Content => '.',
            CondTag::PadStar => '_',
        })
        .collect();
    println!("conditioning ({} rows, {} segments): {layout}", seq.len(), seq.sot_count());
    for (i, e) in embs.iter().enumerate() {
        let sims: Vec<String> = embs.iter().map(|o| format!("{:+.3}", e.pooled.dot(&o.pooled))).collect();
        println!("segment {i} pooled cosines {}", sims.join(" "));
    }
    Ok(())
}

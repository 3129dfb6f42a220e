//! Corrupts a referring expression the way the text encoder sees it during
//! training, then tallies branch frequencies over many draws.

use maskris::masking::{mask_tokens_detailed, TextMaskConfig, TokenAction};
use maskris::text::{tokenize, Vocabulary};
use maskris::RngStream;

fn main() -> maskris::Result<()> {
    let vocab = Vocabulary::standard();
    let cfg = TextMaskConfig::default();
    let tokens = tokenize("second circle from left", &vocab, 20);

    for draw in 0..5 {
        let mut rng = RngStream::with_counter(1, "example/text", draw);
        let (out, _) = mask_tokens_detailed(&tokens, &cfg, &vocab, &mut rng)?;
        let words: Vec<&str> = out.valid().iter().map(|&id| vocab.word(id).unwrap_or("?")).collect();
        println!("draw {draw}: {}", words.join(" "));
    }

    let mut counts = [0usize; 4];
    let draws = 20_000;
    for draw in 0..draws {
        let mut rng = RngStream::with_counter(2, "example/text", draw);
        let (_, actions) = mask_tokens_detailed(&tokens, &cfg, &vocab, &mut rng)?;
        for a in &actions[..tokens.valid_len()] {
            counts[match a {
                TokenAction::Kept => 0,
                TokenAction::Masked => 1,
                TokenAction::Randomized => 2,
                TokenAction::Unchanged => 3,
            }] += 1;
        }
    }
    let positions = (draws as usize * tokens.valid_len()) as f64;
    let selected = (counts[1] + counts[2] + counts[3]) as f64;
    println!("selected {:.4} (target {})", selected / positions, cfg.select_ratio);
    println!(
        "of selected: mask {:.3}  random {:.3}  unchanged {:.3}",
        counts[1] as f64 / selected,
        counts[2] as f64 / selected,
        counts[3] as f64 / selected
    );
    Ok(())
}

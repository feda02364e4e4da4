//! Colored-box images with template captions.
//!
//! Each image is a solid background with one rectangle of a different
//! color in one of five placements, so the caption is fully determined by
//! the pixels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;

pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [230, 210, 40]),
    ("white", [240, 240, 240]),
    ("black", [20, 20, 20]),
];

pub const PLACEMENTS: [&str; 5] = ["left", "right", "top", "bottom", "center"];

/// Prompt used for synthetic captioning samples.
pub const CAPTION_PROMPT: &str = "describe:";

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: Image,
    pub caption: String,
    pub foreground: usize,
    pub background: usize,
    pub placement: usize,
}

/// Caption text for a (foreground, placement, background) triple.
pub fn caption_for(foreground: usize, placement: usize, background: usize) -> String {
    format!(
        "{} box {} on {}",
        COLORS[foreground].0, PLACEMENTS[placement], COLORS[background].0
    )
}

/// Renders one sample. Pixels carry ±8 levels of uniform noise.
pub fn render<R: Rng + ?Sized>(
    size: usize,
    foreground: usize,
    placement: usize,
    background: usize,
    rng: &mut R,
) -> SyntheticSample {
    let mut image = Image::filled(size, size, COLORS[background].1);
    let (q, h) = (size / 4, size / 2);
    let (x0, y0, x1, y1) = match PLACEMENTS[placement] {
        "left" => (0, q, h, size - q),
        "right" => (h, q, size, size - q),
        "top" => (q, 0, size - q, h),
        "bottom" => (q, h, size - q, size),
        _ => (q, q, size - q, size - q),
    };
    for y in 0..size {
        for x in 0..size {
            let base = if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                COLORS[foreground].1
            } else {
                COLORS[background].1
            };
            let px = base.map(|c| (c as i32 + rng.gen_range(-8..=8)).clamp(0, 255) as u8);
            image.set_pixel(x, y, px);
        }
    }
    SyntheticSample {
        image,
        caption: caption_for(foreground, placement, background),
        foreground,
        background,
        placement,
    }
}

/// `n` samples with distinct foreground/background colors, deterministic
/// per seed. Attribute triples are drawn without replacement until the
/// 150 combinations are exhausted.
pub fn generate(n: usize, size: usize, seed: u64) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos = Vec::new();
    for fg in 0..COLORS.len() {
        for bg in 0..COLORS.len() {
            if fg == bg {
                continue;
            }
            for p in 0..PLACEMENTS.len() {
                combos.push((fg, p, bg));
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        combos.shuffle(&mut rng);
        for &(fg, p, bg) in combos.iter().take(n - out.len()) {
            out.push(render(size, fg, p, bg, &mut rng));
        }
    }
    out
}

/// A minimally edited wrong caption: the foreground color is swapped for
/// the next palette color that is neither the true foreground nor the
/// background.
pub fn corrupt_caption(sample: &SyntheticSample) -> String {
    let mut wrong = (sample.foreground + 1) % COLORS.len();
    if wrong == sample.background {
        wrong = (wrong + 1) % COLORS.len();
    }
    caption_for(wrong, sample.placement, sample.background)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(4, 24, 11);
        let b = generate(4, 24, 11);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.caption, y.caption);
        }
    }

    #[test]
    fn caption_matches_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = render(32, 0, 0, 2, &mut rng);
        assert_eq!(s.caption, "red box left on blue");
        let left = s.image.pixel(4, 16);
        let right = s.image.pixel(28, 16);
        assert!(left[0] > 200 && right[2] > 200);
    }

    #[test]
    fn corrupted_caption_differs_in_color_only() {
        for s in generate(30, 16, 5) {
            let bad = corrupt_caption(&s);
            assert_ne!(bad, s.caption);
            assert!(bad.ends_with(&format!("{} on {}", PLACEMENTS[s.placement], COLORS[s.background].0)));
        }
    }
}

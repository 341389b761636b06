//! Sixteen procedural image/caption pairs used by the toy encoder and the tests.
//!
//! Each image is two flat colors in a coarse layout, so its content survives
//! the heavy blur applied during dataset preparation.

use crate::imaging::Image;

pub const FIXTURE_SIZE: usize = 64;
pub const FIXTURE_COUNT: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub image: Image,
    pub caption: String,
}

#[derive(Clone, Copy, Debug)]
enum Layout {
    Disc,
    Square,
    Horizon,
    Split,
}

const RED: [f64; 3] = [0.85, 0.1, 0.1];
const GREEN: [f64; 3] = [0.1, 0.65, 0.2];
const BLUE: [f64; 3] = [0.1, 0.2, 0.85];
const YELLOW: [f64; 3] = [0.95, 0.85, 0.1];
const ORANGE: [f64; 3] = [0.95, 0.5, 0.05];
const PURPLE: [f64; 3] = [0.5, 0.1, 0.6];
const WHITE: [f64; 3] = [0.95, 0.95, 0.95];
const BLACK: [f64; 3] = [0.05, 0.05, 0.05];
const CYAN: [f64; 3] = [0.1, 0.8, 0.85];
const PINK: [f64; 3] = [0.95, 0.55, 0.7];
const BROWN: [f64; 3] = [0.5, 0.3, 0.1];
const GRAY: [f64; 3] = [0.5, 0.5, 0.5];

const TABLE: [(Layout, [f64; 3], [f64; 3], &str); FIXTURE_COUNT] = [
    (Layout::Disc, RED, BLUE, "a red disc on a blue background"),
    (Layout::Disc, YELLOW, BLACK, "a yellow disc on a black background"),
    (Layout::Disc, WHITE, GREEN, "a white disc on a green background"),
    (Layout::Disc, CYAN, PURPLE, "a cyan disc on a purple background"),
    (Layout::Square, BLUE, YELLOW, "a blue square on a yellow background"),
    (Layout::Square, BLACK, WHITE, "a black square on a white background"),
    (Layout::Square, ORANGE, CYAN, "an orange square on a cyan background"),
    (Layout::Square, GREEN, PINK, "a green square on a pink background"),
    (Layout::Horizon, BLUE, GREEN, "a blue sky over a green field"),
    (Layout::Horizon, ORANGE, BLACK, "an orange sunset over a dark sea"),
    (Layout::Horizon, WHITE, BROWN, "a white sky over a brown desert"),
    (Layout::Horizon, GRAY, YELLOW, "a gray sky over a yellow meadow"),
    (Layout::Split, RED, CYAN, "red on the left and cyan on the right"),
    (Layout::Split, PURPLE, YELLOW, "purple on the left and yellow on the right"),
    (Layout::Split, BLACK, RED, "black on the left and red on the right"),
    (Layout::Split, PINK, BLUE, "pink on the left and blue on the right"),
];

fn draw(layout: Layout, a: [f64; 3], b: [f64; 3], n: usize) -> Image {
    let c = (n as f64 - 1.0) / 2.0;
    let s = n as f64 / 64.0;
    Image::from_fn(n, n, |y, x| {
        let (fy, fx) = (y as f64 - c, x as f64 - c);
        let first = match layout {
            Layout::Disc => fy * fy + fx * fx <= (18.0 * s).powi(2),
            Layout::Square => fy.abs() <= 18.0 * s && fx.abs() <= 18.0 * s,
            Layout::Horizon => y < n / 2,
            Layout::Split => x < n / 2,
        };
        if first {
            a
        } else {
            b
        }
    })
}

/// The fixture set at `size × size` pixels.
pub fn fixtures_at(size: usize) -> Vec<Fixture> {
    TABLE
        .iter()
        .map(|&(layout, a, b, caption)| Fixture {
            image: draw(layout, a, b, size),
            caption: caption.to_string(),
        })
        .collect()
}

/// The fixture set at its native 64×64 resolution.
pub fn fixtures() -> Vec<Fixture> {
    fixtures_at(FIXTURE_SIZE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_distinct_pairs() {
        let f = fixtures();
        assert_eq!(f.len(), FIXTURE_COUNT);
        for i in 0..f.len() {
            assert_eq!(f[i].image.height(), FIXTURE_SIZE);
            for j in 0..i {
                assert_ne!(f[i].caption, f[j].caption);
                assert_ne!(f[i].image, f[j].image);
            }
        }
    }

    #[test]
    fn layouts_have_both_colors() {
        for f in fixtures() {
            let corner = [f.image.get(0, 0, 0), f.image.get(0, 0, 1), f.image.get(0, 0, 2)];
            let far = [f.image.get(40, 40, 0), f.image.get(40, 40, 1), f.image.get(40, 40, 2)];
            let center = [f.image.get(32, 32, 0), f.image.get(32, 32, 1), f.image.get(32, 32, 2)];
            assert!(corner != center || corner != far, "{}", f.caption);
        }
    }
}

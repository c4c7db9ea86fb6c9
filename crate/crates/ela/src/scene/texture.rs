//! Canonical 64x64 sign textures: white speed-limit disks with a red ring
//! and seven-segment digits, and a red octagon with a white band for the
//! stop sign.

use crate::img::Image;
use crate::percept::in_canonical_octagon;
use crate::scene::SignClass;

pub const TEXTURE_SIZE: usize = 64;

const WHITE: [f64; 3] = [0.95, 0.95, 0.95];
const RED: [f64; 3] = [0.75, 0.08, 0.08];
const BLACK: [f64; 3] = [0.08, 0.08, 0.08];
const BACKDROP: [f64; 3] = [0.5, 0.5, 0.5];

/// Segment layout: 0 top, 1 top-right, 2 bottom-right, 3 bottom, 4
/// bottom-left, 5 top-left, 6 middle.
const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, // 0
    0b0000110, // 1
    0b1011011, // 2
    0b1001111, // 3
    0b1100110, // 4
    0b1101101, // 5
    0b1111101, // 6
    0b0000111, // 7
    0b1111111, // 8
    0b1101111, // 9
];

fn seg_rects(x0: f64, y0: f64, w: f64, h: f64) -> [[f64; 4]; 7] {
    let t = w * 0.28; // stroke thickness in canonical units
    [
        [x0, y0, w, t],                          // top
        [x0 + w - t, y0, t, h / 2.0],            // top-right
        [x0 + w - t, y0 + h / 2.0, t, h / 2.0],  // bottom-right
        [x0, y0 + h - t, w, t],                  // bottom
        [x0, y0 + h / 2.0, t, h / 2.0],          // bottom-left
        [x0, y0, t, h / 2.0],                    // top-left
        [x0, y0 + h / 2.0 - t / 2.0, w, t],      // middle
    ]
}

fn in_rect(x: f64, y: f64, r: &[f64; 4]) -> bool {
    x >= r[0] && x < r[0] + r[2] && y >= r[1] && y < r[1] + r[3]
}

fn digit_hit(x: f64, y: f64, digit: usize, x0: f64, y0: f64, w: f64, h: f64) -> bool {
    let mask = DIGIT_SEGMENTS[digit];
    let rects = seg_rects(x0, y0, w, h);
    rects
        .iter()
        .enumerate()
        .any(|(i, r)| mask >> i & 1 == 1 && in_rect(x, y, r))
}

fn speed_digits(class: SignClass) -> &'static [usize] {
    match class {
        SignClass::Speed30 => &[3, 0],
        SignClass::Speed60 => &[6, 0],
        SignClass::Speed70 => &[7, 0],
        SignClass::Speed80 => &[8, 0],
        SignClass::Speed90 => &[9, 0],
        SignClass::Speed100 => &[1, 0, 0],
        SignClass::Stop => &[],
    }
}

/// Build the canonical texture for a class. Texture coordinates map the unit
/// circle/octagon onto the full 64x64 square.
pub fn canonical_texture(class: SignClass) -> Image {
    let n = TEXTURE_SIZE;
    let mut im = Image::new(n, n);
    let half = n as f64 / 2.0;
    for j in 0..n {
        for i in 0..n {
            // canonical coords in [-1, 1]
            let x = (i as f64 + 0.5 - half) / half;
            let y = (j as f64 + 0.5 - half) / half;
            let r = (x * x + y * y).sqrt();
            let color = match class {
                SignClass::Stop => {
                    if !in_canonical_octagon(x, y) {
                        BACKDROP
                    } else if y.abs() < 0.28 && x.abs() < 0.85 {
                        // white band standing in for the legend
                        if stop_glyph_hit(x, y) {
                            RED
                        } else {
                            WHITE
                        }
                    } else {
                        RED
                    }
                }
                _ => {
                    if r > 1.0 {
                        BACKDROP
                    } else if r > 0.78 {
                        RED
                    } else {
                        let digits = speed_digits(class);
                        let count = digits.len() as f64;
                        let dw = 0.34_f64.min(1.0 / count);
                        let gap = 0.06;
                        let total = count * dw + (count - 1.0) * gap;
                        let mut hit = false;
                        for (k, &d) in digits.iter().enumerate() {
                            let x0 = -total / 2.0 + k as f64 * (dw + gap);
                            if digit_hit(x, y, d, x0, -0.42, dw, 0.84) {
                                hit = true;
                                break;
                            }
                        }
                        if hit {
                            BLACK
                        } else {
                            WHITE
                        }
                    }
                }
            };
            im.set(i, j, color);
        }
    }
    im
}

/// Blocky "STOP" strokes inside the band, red on white.
fn stop_glyph_hit(x: f64, y: f64) -> bool {
    // four letter cells across the band
    let cell = ((x + 0.85) / 0.425).floor() as i64;
    let lx = ((x + 0.85) % 0.425) / 0.425; // 0..1 inside the cell
    let ly = (y + 0.28) / 0.56;
    if !(0.0..1.0).contains(&lx) || !(0.0..1.0).contains(&ly) {
        return false;
    }
    let (lx, ly) = (lx, ly);
    match cell {
        // S: three bars and two connectors
        0 => {
            (ly < 0.25 && lx > 0.1 && lx < 0.9)
                || (ly >= 0.375 && ly < 0.625 && lx > 0.1 && lx < 0.9)
                || (ly >= 0.75 && lx > 0.1 && lx < 0.9)
                || (ly < 0.5 && lx > 0.1 && lx < 0.3)
                || (ly >= 0.5 && lx > 0.7 && lx < 0.9)
        }
        // T
        1 => (ly < 0.25 && lx > 0.05 && lx < 0.95) || (lx > 0.4 && lx < 0.6),
        // O
        2 => {
            let inside = lx > 0.15 && lx < 0.85;
            let hollow = lx > 0.35 && lx < 0.65 && ly > 0.25 && ly < 0.75;
            inside && !hollow
        }
        // P
        3 => {
            (lx > 0.1 && lx < 0.3)
                || (ly < 0.25 && lx < 0.85)
                || (ly >= 0.45 && ly < 0.7 && lx < 0.85)
                || (lx > 0.65 && lx < 0.85 && ly < 0.7)
        }
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_differ_across_classes() {
        let t30 = canonical_texture(SignClass::Speed30);
        let t60 = canonical_texture(SignClass::Speed60);
        let tstop = canonical_texture(SignClass::Stop);
        assert_ne!(t30.data, t60.data);
        assert_ne!(t30.data, tstop.data);
    }

    #[test]
    fn speed_sign_center_region_is_lightish() {
        let t = canonical_texture(SignClass::Speed90);
        // the rim ring must be red
        let rim = t.get(32 + 26, 32);
        assert!(rim[0] > 0.5 && rim[1] < 0.3, "rim {rim:?}");
    }

    #[test]
    fn stop_sign_is_red_dominated() {
        let t = canonical_texture(SignClass::Stop);
        let mut red = 0;
        for j in 0..TEXTURE_SIZE {
            for i in 0..TEXTURE_SIZE {
                let p = t.get(i, j);
                if p[0] > 0.5 && p[1] < 0.3 {
                    red += 1;
                }
            }
        }
        assert!(red > TEXTURE_SIZE * TEXTURE_SIZE / 3, "red pixels {red}");
    }
}

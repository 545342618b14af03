//! Pixel-level oracles for tile enumeration and overlap.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use weedshift::tiling::{enumerate_tiles, BBoxAnnotation};

/// Origins from walking each pass with an explicit cursor.
pub fn origin_oracle(w: u32, h: u32, t: u32) -> BTreeSet<(u32, u32)> {
    let walk = |len: u32, reverse: bool| {
        let mut out = Vec::new();
        let mut pos: i64 = if reverse { (len - t) as i64 } else { 0 };
        loop {
            let clamped = pos.clamp(0, (len - t) as i64) as u32;
            out.push(clamped);
            let covered_to = if reverse { len - clamped } else { clamped + t };
            if covered_to >= len {
                break;
            }
            pos += if reverse { -(t as i64) } else { t as i64 };
        }
        out
    };
    let mut set = BTreeSet::new();
    for (rx, ry) in [(false, false), (true, false), (false, true), (true, true)] {
        for &y in &walk(h, ry) {
            for &x in &walk(w, rx) {
                set.insert((x, y));
            }
        }
    }
    set
}

pub fn coverage_holes(w: u32, h: u32, t: u32) -> usize {
    let mut count = vec![0u16; (w * h) as usize];
    for o in enumerate_tiles(w, h, t).unwrap() {
        for y in o.y..o.y + t {
            let row = (y * w) as usize;
            for c in &mut count[row + o.x as usize..row + (o.x + t) as usize] {
                *c += 1;
            }
        }
    }
    count.iter().filter(|&&c| c == 0).count()
}

/// Pixels of the tile covered by the best single box, and by any box.
pub fn mask_ratio(boxes: &[&BBoxAnnotation], x: u32, y: u32, t: u32) -> (u64, u64) {
    let mut single_max = 0u64;
    let mut union = 0u64;
    let mut counts = vec![0u64; boxes.len()];
    for py in y..y + t {
        for px in x..x + t {
            let mut any = false;
            for (k, b) in boxes.iter().enumerate() {
                if px >= b.x_min && px < b.x_max && py >= b.y_min && py < b.y_max {
                    counts[k] += 1;
                    any = true;
                }
            }
            union += u64::from(any);
        }
    }
    for c in counts {
        single_max = single_max.max(c);
    }
    (single_max, union)
}

pub fn random_box(rng: &mut ChaCha8Rng, limit: u32) -> BBoxAnnotation {
    let x0 = rng.random_range(0..limit - 1);
    let y0 = rng.random_range(0..limit - 1);
    let x1 = rng.random_range(x0 + 1..=limit);
    let y1 = rng.random_range(y0 + 1..=limit);
    BBoxAnnotation::new("img", x0, y0, x1, y1)
}

/// Label implied by exact pixel counts: `r ≤ 1/10` compared as
/// `10·count ≤ T²`.
pub fn label_from_count(count: u64, side: u32) -> u8 {
    let area = u64::from(side) * u64::from(side);
    if count == 0 {
        0
    } else if 10 * count <= area {
        2
    } else {
        1
    }
}

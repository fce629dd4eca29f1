//! Attribution map dumps: `row,col,value` CSV and a 16-bit greyscale PGM.

use std::fmt::Write as _;

use attrib_core::AttributionMap;

/// One line per cell in row-major order. Values use the shortest decimal
/// form that reads back to the same `f64`.
pub fn map_to_csv(map: &AttributionMap) -> String {
    let (_, w) = map.domain().dims();
    let mut out = String::from("row,col,value\n");
    for (i, v) in map.data().iter().enumerate() {
        writeln!(out, "{},{},{v}", i / w, i % w).expect("writing to a String cannot fail");
    }
    out
}

/// Binary PGM (`P5`, maxval 65535). Values are min-max scaled; a constant
/// map renders black.
pub fn map_to_pgm(map: &AttributionMap) -> Vec<u8> {
    let (h, w) = map.domain().dims();
    let data = map.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in data {
        let level = if range > 0.0 {
            ((v - lo) / range * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

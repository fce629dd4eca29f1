//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes (1024 red, 1024 green, 1024 blue, each row-major 32×32).

use std::fs;
use std::path::Path;

use attrib_core::reference::ImageSet;
use attrib_core::rng::{mix, Stream};
use attrib_core::Tensor;

use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const PIXEL_BYTES: usize = 3 * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + PIXEL_BYTES;

/// Decodes a batch held in memory; pixels are scaled by 1/255.
pub fn parse_cifar_batch(bytes: &[u8], source_id: &str) -> Result<ImageSet> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "CIFAR-10 batch length {} is not a positive multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Format(format!("record {i}: label byte {label} > 9")));
        }
        labels.push(label as usize);
        let data = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![3, SIDE, SIDE], data)?);
    }
    Ok(ImageSet::new([3, SIDE, SIDE], images, labels, source_id)?)
}

pub fn load_cifar_batch(path: &Path) -> Result<ImageSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_batch(&bytes, &path.display().to_string())
}

/// Encodes `(label, pixels)` records; pixels are channel-planar bytes.
pub fn encode_cifar_batch(records: &[(u8, Vec<u8>)]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for (i, (label, pixels)) in records.iter().enumerate() {
        if *label > 9 || pixels.len() != PIXEL_BYTES {
            return Err(Error::Format(format!(
                "record {i}: need a label <= 9 and {PIXEL_BYTES} pixel bytes"
            )));
        }
        out.push(*label);
        out.extend_from_slice(pixels);
    }
    Ok(out)
}

/// A CIFAR-format batch of `count` smooth synthetic scenes: a flat
/// background, a horizontal shading ramp, three soft colour blobs and a
/// little pixel noise. Same `(count, seed)` gives the same bytes.
pub fn synthetic_cifar_batch(count: usize, seed: u64) -> Vec<u8> {
    let records: Vec<(u8, Vec<u8>)> = (0..count)
        .map(|i| {
            let mut rng = Stream::new(mix(seed, i as u64));
            let label = rng.below(10) as u8;
            let background: Vec<f64> = (0..3).map(|_| 0.2 + 0.6 * rng.next_f64()).collect();
            let ramp = 0.3 * (rng.next_f64() - 0.5);
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
                .map(|_| {
                    let cy = rng.next_f64() * SIDE as f64;
                    let cx = rng.next_f64() * SIDE as f64;
                    let radius = 3.0 + 7.0 * rng.next_f64();
                    let colour = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
                    (cy, cx, radius, colour)
                })
                .collect();
            let mut pixels = vec![0u8; PIXEL_BYTES];
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let mut rgb = [0.0; 3];
                    for (c, v) in rgb.iter_mut().enumerate() {
                        *v = background[c] + ramp * (x as f64 / (SIDE - 1) as f64 - 0.5);
                    }
                    for (cy, cx, radius, colour) in &blobs {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let alpha = (-d2 / (2.0 * radius * radius)).exp();
                        for (v, col) in rgb.iter_mut().zip(colour) {
                            *v = (1.0 - alpha) * *v + alpha * col;
                        }
                    }
                    for (c, v) in rgb.iter().enumerate() {
                        let noisy = v + 0.03 * (rng.next_f64() - 0.5);
                        pixels[c * SIDE * SIDE + y * SIDE + x] = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
            (label, pixels)
        })
        .collect();
    encode_cifar_batch(&records).expect("synthetic records are well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_record() {
        let mut bytes = vec![255u8; RECORD_BYTES];
        bytes[0] = 7;
        let set = parse_cifar_batch(&bytes, "t").unwrap();
        assert_eq!(set.labels(), &[7]);
        assert!(set.images()[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn length_and_label_errors() {
        assert!(parse_cifar_batch(&vec![0u8; PIXEL_BYTES], "t").is_err());
        assert!(parse_cifar_batch(&[], "t").is_err());
        let mut bytes = vec![0u8; RECORD_BYTES];
        bytes[0] = 10;
        assert!(parse_cifar_batch(&bytes, "t").is_err());
    }

    #[test]
    fn planar_channel_layout() {
        let mut pixels = vec![0u8; PIXEL_BYTES];
        pixels[SIDE * SIDE + 33] = 51; // green, row 1, col 1
        let bytes = encode_cifar_batch(&[(2, pixels)]).unwrap();
        let set = parse_cifar_batch(&bytes, "t").unwrap();
        let img = &set.images()[0];
        assert_eq!(img.data()[SIDE * SIDE + SIDE + 1], 0.2);
    }

    #[test]
    fn synthetic_batches_are_reproducible() {
        let a = synthetic_cifar_batch(3, 11);
        assert_eq!(a, synthetic_cifar_batch(3, 11));
        assert_ne!(a, synthetic_cifar_batch(3, 12));
        assert_eq!(parse_cifar_batch(&a, "s").unwrap().len(), 3);
    }
}

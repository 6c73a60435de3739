//! Binary portable pixmaps with pruned patches shaded by stage.

use crate::error::{contract, Result};
use crate::selection::RetentionState;
use crate::vit::Image;

pub const DEFAULT_SHADES: [f64; 3] = [0.25, 0.5, 0.75];

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 bytes of `image`; one or three channels.
pub fn encode(image: &Image) -> Result<Vec<u8>> {
    overlay(image, 1, &RetentionState::default(), &[])
}

/// Renders `image` with every patch pruned at stage `k` multiplied by
/// `shades[k - 1]`. After the pixel is quantized to a byte the shading is
/// pure integer math, so the output is identical on every platform.
pub fn overlay(image: &Image, patch: usize, state: &RetentionState, shades: &[f64]) -> Result<Vec<u8>> {
    if image.channels != 1 && image.channels != 3 {
        return contract(format!("cannot render {} channels", image.channels));
    }
    if patch == 0 || !image.size.is_multiple_of(patch) {
        return contract(format!("patch {patch} does not tile a {}-pixel image", image.size));
    }
    let grid = image.size / patch;
    let pruned = state.pruned_at();
    if !pruned.is_empty() && pruned.len() != grid * grid + 1 {
        return contract(format!(
            "masks cover {} positions but the image has {} patches",
            pruned.len() - 1,
            grid * grid
        ));
    }
    if state.len() > shades.len() {
        return contract(format!("{} stages but only {} shade levels", state.len(), shades.len()));
    }
    if let Some(s) = shades.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return contract(format!("shade {s} outside [0, 1]"));
    }
    let factors: Vec<u32> = shades.iter().map(|s| (s * 256.0).round() as u32).collect();
    let mut out = format!("P6\n{} {}\n255\n", image.size, image.size).into_bytes();
    for y in 0..image.size {
        for x in 0..image.size {
            let q = match pruned.get(1 + (y / patch) * grid + x / patch) {
                Some(&k) if k > 0 => factors[k - 1],
                _ => 256,
            };
            for c in 0..3 {
                let p = u32::from(to_byte(image.at(y, x, if image.channels == 1 { 0 } else { c })));
                out.push(((p * q + 128) >> 8) as u8);
            }
        }
    }
    Ok(out)
}

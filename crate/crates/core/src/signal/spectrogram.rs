//! Log-magnitude spectrogram images.
//!
//! The image is a binary greyscale PGM (`P5`, maxval 255) with one column per
//! frame and one row per bin, highest frequency on top. Pixel values map
//! `[DB_FLOOR, 0] dB` linearly onto `[0, 255]`.

use std::io::Write;

use crate::error::Result;
use crate::signal::StftTile;

pub const DB_FLOOR: f64 = -80.0;

pub fn db_pixel(magnitude: f64) -> u8 {
    let db = if magnitude > 0.0 { 20.0 * magnitude.log10() } else { DB_FLOOR };
    let t = (db.clamp(DB_FLOOR, 0.0) - DB_FLOOR) / -DB_FLOOR;
    (255.0 * t).round() as u8
}

pub fn write_pgm<W: Write>(w: &mut W, tile: &StftTile) -> Result<()> {
    let (frames, bins) = (tile.frames(), tile.bins());
    write!(w, "P5\n{frames} {bins}\n255\n")?;
    let mut row = vec![0u8; frames];
    for k in (0..bins).rev() {
        for (f, px) in row.iter_mut().enumerate() {
            *px = db_pixel(tile.data[[f, k]].norm());
        }
        w.write_all(&row)?;
    }
    Ok(())
}

/// Axis metadata: `axis,index,value` with frame centres in seconds and bin
/// centres in hertz.
pub fn write_axes_csv<W: Write>(w: &mut W, tile: &StftTile, sample_rate: u32) -> Result<()> {
    let layout = tile.layout;
    let sr = f64::from(sample_rate);
    let pad = (layout.window_len - layout.hop) as f64;
    writeln!(w, "axis,index,value")?;
    for f in 0..tile.frames() {
        let centre = (f * layout.hop) as f64 + 0.5 * layout.window_len as f64 - pad;
        writeln!(w, "time_s,{f},{}", centre / sr)?;
    }
    for k in 0..tile.bins() {
        writeln!(w, "freq_hz,{k},{}", k as f64 * sr / layout.window_len as f64)?;
    }
    Ok(())
}

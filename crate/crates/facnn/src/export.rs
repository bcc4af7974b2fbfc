//! Heatmap and CSV emission.
//!
//! Heatmaps go out as binary PPM (P6) under a fixed jet-style colormap,
//! min-max normalized per map for display only; CSV exports always carry
//! the raw values (6 significant digits), so audits and diffs never
//! depend on the visualization scaling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::interpret::SaliencyMap;
use crate::saliency::RemovalCurve;

/// Jet-style colormap over `[0,1]`.
pub fn jet_rgb(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let chan = |c: f64| ((1.5 - c.abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [chan(4.0 * v - 3.0), chan(4.0 * v - 2.0), chan(4.0 * v - 1.0)]
}

/// Raw binary P6 writer.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

/// Renders a saliency map as a PPM heatmap, upscaled by an integer
/// factor with nearest-neighbor pixels. The map is min-max normalized
/// for rendering; a constant map renders as the colormap's zero color.
pub fn write_heatmap_ppm(map: &SaliencyMap, path: &Path, scale: usize) -> Result<()> {
    let scale = scale.max(1);
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    let (w, h) = (map.width * scale, map.height * scale);
    let mut rgb = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let v = map.values[(y / scale) * map.width + x / scale];
            let t = if range > 0.0 { (v - lo) / range } else { 0.0 };
            let px = jet_rgb(t);
            let at = (y * w + x) * 3;
            rgb[at..at + 3].copy_from_slice(&px);
        }
    }
    write_ppm(path, w, h, &rgb)
}

/// Six significant digits, locale-free.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v:.5e}")
}

/// Raw map values, row-major, comma-separated, one row per line.
pub fn write_map_csv(map: &SaliencyMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in map.values.chunks(map.width) {
        let line: Vec<String> = row.iter().map(|&v| fmt_sig6(v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Removal curves under the `method,layer,fraction,accuracy` header.
/// Methods without a producing layer leave the column empty.
pub fn write_curves_csv(curves: &[RemovalCurve], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "method,layer,fraction,accuracy")?;
    for curve in curves {
        let layer = curve.layer.map(|l| l.to_string()).unwrap_or_default();
        for &(fraction, accuracy) in &curve.points {
            writeln!(w, "{},{layer},{fraction},{accuracy:.6}", curve.method)?;
        }
    }
    w.flush()?;
    Ok(())
}

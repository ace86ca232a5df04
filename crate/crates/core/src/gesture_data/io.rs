//! Native text format.
//!
//! ```text
//! MDTA2G v1 <F> <J> <fps>
//! <J·9 floats>   (F lines)
//! ```
//!
//! Plain matrices (condition streams) reuse the header with `J = 0` and a
//! trailing `cols=<C>` field giving the row width.

use std::io::Write;
use std::sync::Arc;

use super::{FlatGesture, GestureSequence, SkeletonLayout};
use crate::error::{Error, Result};

pub const GESTURE_MAGIC: &str = "MDTA2G";
const VERSION: &str = "v1";

fn write_rows(w: &mut impl Write, cols: usize, values: &[f64]) -> Result<()> {
    let mut line = String::new();
    for row in values.chunks(cols.max(1)) {
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn write_gesture(w: &mut impl Write, seq: &GestureSequence) -> Result<()> {
    writeln!(w, "{GESTURE_MAGIC} {VERSION} {} {} {}", seq.frames(), seq.joints(), seq.fps())?;
    write_rows(w, seq.layout().flat_dim(), &seq.to_flat().values)
}

pub fn write_matrix(w: &mut impl Write, m: &FlatGesture, fps: f64) -> Result<()> {
    writeln!(w, "{GESTURE_MAGIC} {VERSION} {} 0 {fps} cols={}", m.frames, m.dim)?;
    if m.dim == 0 {
        for _ in 0..m.frames {
            writeln!(w)?;
        }
        return Ok(());
    }
    write_rows(w, m.dim, &m.values)
}

struct Header {
    frames: usize,
    joints: usize,
    fps: f64,
    cols: Option<usize>,
}

fn parse_header(line: &str) -> Result<Header> {
    let bad = |msg: &str| Error::Parse { line: 1, msg: msg.to_string() };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 5 || fields[0] != GESTURE_MAGIC {
        return Err(bad("expected header `MDTA2G v1 <F> <J> <fps>`"));
    }
    if fields[1] != VERSION {
        return Err(bad(&format!("unsupported version {:?}", fields[1])));
    }
    let frames = fields[2].parse().map_err(|_| bad("bad frame count"))?;
    let joints = fields[3].parse().map_err(|_| bad("bad joint count"))?;
    let fps: f64 = fields[4].parse().map_err(|_| bad("bad fps"))?;
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(bad("fps must be positive"));
    }
    let cols = match fields.get(5) {
        None => None,
        Some(f) => Some(
            f.strip_prefix("cols=")
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad(&format!("unexpected header field {f:?}")))?,
        ),
    };
    if fields.len() > 6 {
        return Err(bad("trailing header fields"));
    }
    Ok(Header { frames, joints, fps, cols })
}

fn parse_body(text: &str, frames: usize, cols: usize) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(frames * cols);
    let mut rows = 0;
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() && cols > 0 {
            continue;
        }
        rows += 1;
        let before = values.len();
        for v in line.split_whitespace() {
            values.push(v.parse::<f64>().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad value {v:?}") })?);
        }
        if values.len() - before != cols {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {cols} values, found {}", values.len() - before),
            });
        }
    }
    if rows != frames {
        return Err(Error::Parse { line: text.lines().count(), msg: format!("expected {frames} rows, found {rows}") });
    }
    Ok(values)
}

/// Reads a gesture file. With no layout a generic `J`-joint layout is used.
pub fn read_gesture(text: &str, layout: Option<Arc<SkeletonLayout>>) -> Result<GestureSequence> {
    let header = parse_header(text.lines().next().unwrap_or(""))?;
    if header.cols.is_some() {
        return Err(Error::Parse { line: 1, msg: "matrix file given where a gesture was expected".into() });
    }
    let layout = match layout {
        Some(l) if l.joint_count() == header.joints => l,
        Some(l) => return Err(Error::shape(format!("{} joints", l.joint_count()), format!("{} joints", header.joints))),
        None => Arc::new(SkeletonLayout::generic(header.joints)?),
    };
    let values = parse_body(text, header.frames, header.joints * 9)?;
    let flat = FlatGesture::new(header.frames, header.joints * 9, values)?;
    GestureSequence::from_flat(&flat, layout, header.fps)
}

/// Reads a matrix file, returning the matrix and its frame rate.
pub fn read_matrix(text: &str) -> Result<(FlatGesture, f64)> {
    let header = parse_header(text.lines().next().unwrap_or(""))?;
    let cols = header.cols.unwrap_or(header.joints * 9);
    let values = parse_body(text, header.frames, cols)?;
    Ok((FlatGesture::new(header.frames, cols, values)?, header.fps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gesture_data::{axis_rotation, IDENTITY};

    #[test]
    fn gesture_round_trip_is_exact() {
        let layout = Arc::new(SkeletonLayout::generic(2).unwrap());
        let rotations = vec![IDENTITY, axis_rotation(0, 0.1), axis_rotation(1, 1.0 / 3.0), axis_rotation(2, -2.5)];
        let seq = GestureSequence::new(layout.clone(), 30.0, rotations).unwrap();
        let mut buf = Vec::new();
        write_gesture(&mut buf, &seq).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("MDTA2G v1 2 2 30\n"));
        assert_eq!(text.lines().nth(1).unwrap().split_whitespace().count(), 18);
        assert_eq!(read_gesture(&text, Some(layout)).unwrap(), seq);
        assert_eq!(read_gesture(&text, None).unwrap().to_flat(), seq.to_flat());
    }

    #[test]
    fn matrix_round_trip() {
        let m = FlatGesture::new(3, 2, vec![0.5, -1.0, 1e-7, 2.0, 3.25, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m, 30.0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("MDTA2G v1 3 0 30 cols=2\n"));
        assert_eq!(read_matrix(&text).unwrap(), (m, 30.0));
        assert!(read_gesture(&text, None).is_err());
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(read_matrix("MDTA2G v2 1 0 30 cols=1\n1\n").is_err());
        assert!(read_matrix("BVH v1 1 0 30\n").is_err());
        assert!(matches!(read_matrix("MDTA2G v1 2 0 30 cols=1\n1\n"), Err(Error::Parse { .. })));
        assert!(matches!(read_matrix("MDTA2G v1 1 0 30 cols=2\n1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_matrix("MDTA2G v1 1 0 30 cols=1\nx\n"), Err(Error::Parse { line: 2, .. })));
    }
}

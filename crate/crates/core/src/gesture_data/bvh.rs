//! Minimal BVH reader/writer.
//!
//! Only joint rotations are kept; root translation channels are read and
//! carried in the document but dropped when converting to a gesture.

use std::fmt::Write as _;
use std::sync::Arc;

use super::rotation::{euler_to_rotmat, rotmat_to_euler, EulerOrder, Mat3, IDENTITY};
use super::{GestureSequence, SkeletonLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BvhJoint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
    pub channels: Vec<String>,
    pub end_site: Option<[f64; 3]>,
    /// Rotation channel order and the column of its first rotation value.
    rotation: Option<(EulerOrder, [usize; 3])>,
}

/// Parsed BVH file: skeleton plus raw per-frame channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct BvhDocument {
    pub joints: Vec<BvhJoint>,
    pub frame_time: f64,
    pub motion: Vec<Vec<f64>>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(lines: &[(usize, &'a str)]) -> Self {
        let items = lines
            .iter()
            .flat_map(|&(n, l)| l.split_whitespace().map(move |t| (n, t)))
            .collect();
        Self { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos)
            .or_else(|| self.items.last())
            .map_or(1, |t| t.0)
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        let tok = self
            .items
            .get(self.pos)
            .copied()
            .ok_or_else(|| parse_err(self.line(), "unexpected end of hierarchy"))?;
        self.pos += 1;
        Ok(tok)
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).map(|t| t.1)
    }

    fn expect(&mut self, word: &str) -> Result<usize> {
        let (line, tok) = self.next()?;
        if tok != word {
            return Err(parse_err(line, format!("expected {word:?}, found {tok:?}")));
        }
        Ok(line)
    }

    fn number(&mut self) -> Result<f64> {
        let (line, tok) = self.next()?;
        tok.parse().map_err(|_| parse_err(line, format!("expected a number, found {tok:?}")))
    }

    fn offset(&mut self) -> Result<[f64; 3]> {
        self.expect("OFFSET")?;
        Ok([self.number()?, self.number()?, self.number()?])
    }
}

fn rotation_layout(line: usize, channels: &[String], first_col: usize) -> Result<Option<(EulerOrder, [usize; 3])>> {
    let mut axes = Vec::new();
    let mut cols = Vec::new();
    for (i, ch) in channels.iter().enumerate() {
        let lower = ch.to_ascii_lowercase();
        if let Some(axis) = lower.strip_suffix("rotation") {
            let a = match axis {
                "x" => 0,
                "y" => 1,
                "z" => 2,
                _ => return Err(parse_err(line, format!("unknown channel {ch:?}"))),
            };
            axes.push(a);
            cols.push(first_col + i);
        } else if !lower.ends_with("position") {
            return Err(parse_err(line, format!("unknown channel {ch:?}")));
        }
    }
    match axes.len() {
        0 => Ok(None),
        3 => {
            let order = EulerOrder::from_axes([axes[0], axes[1], axes[2]])
                .map_err(|e| parse_err(line, e.to_string()))?;
            Ok(Some((order, [cols[0], cols[1], cols[2]])))
        }
        n => Err(parse_err(line, format!("expected 0 or 3 rotation channels, found {n}"))),
    }
}

fn parse_joint(
    toks: &mut Tokens<'_>,
    name: String,
    parent: Option<usize>,
    joints: &mut Vec<BvhJoint>,
    columns: &mut usize,
) -> Result<()> {
    toks.expect("{")?;
    let offset = toks.offset()?;
    let (line, tok) = toks.next()?;
    if tok != "CHANNELS" {
        return Err(parse_err(line, format!("expected \"CHANNELS\", found {tok:?}")));
    }
    let (nline, n) = toks.next()?;
    let n: usize = n.parse().map_err(|_| parse_err(nline, format!("bad channel count {n:?}")))?;
    let mut channels = Vec::with_capacity(n);
    for _ in 0..n {
        let (cline, ch) = toks.next()?;
        if matches!(ch, "JOINT" | "End" | "}" | "{") {
            return Err(parse_err(cline, format!("CHANNELS declares {n} channels but found {ch:?}")));
        }
        channels.push(ch.to_string());
    }
    let rotation = rotation_layout(line, &channels, *columns)?;
    *columns += n;
    let index = joints.len();
    joints.push(BvhJoint { name, parent, offset, channels, end_site: None, rotation });
    loop {
        let (line, tok) = toks.next()?;
        match tok {
            "JOINT" => {
                let (_, child) = toks.next()?;
                parse_joint(toks, child.to_string(), Some(index), joints, columns)?;
            }
            "End" => {
                toks.expect("Site")?;
                toks.expect("{")?;
                joints[index].end_site = Some(toks.offset()?);
                toks.expect("}")?;
            }
            "}" => return Ok(()),
            other => return Err(parse_err(line, format!("unexpected token {other:?} in joint block"))),
        }
    }
}

/// Parses BVH text into a skeleton plus raw channel data.
pub fn parse_bvh_document(text: &str) -> Result<BvhDocument> {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    let motion_at = lines
        .iter()
        .position(|(_, l)| l.trim() == "MOTION")
        .ok_or_else(|| parse_err(lines.len().max(1), "missing MOTION section"))?;

    let mut toks = Tokens::new(&lines[..motion_at]);
    toks.expect("HIERARCHY")?;
    let root_line = toks.expect("ROOT")?;
    let (_, root) = toks.next().map_err(|_| parse_err(root_line, "missing root name"))?;
    let mut joints = Vec::new();
    let mut columns = 0;
    parse_joint(&mut toks, root.to_string(), None, &mut joints, &mut columns)?;
    if let Some(extra) = toks.peek() {
        return Err(parse_err(toks.line(), format!("unexpected {extra:?} after hierarchy")));
    }

    let mut rest = lines[motion_at + 1..].iter().filter(|(_, l)| !l.trim().is_empty());
    let header = |entry: Option<&(usize, &str)>, key: &str| -> Result<(usize, String)> {
        let &(n, l) = entry.ok_or_else(|| parse_err(motion_at + 1, format!("missing {key:?} header")))?;
        let value = l
            .trim()
            .strip_prefix(key)
            .ok_or_else(|| parse_err(n, format!("expected {key:?}")))?;
        Ok((n, value.trim().to_string()))
    };
    let (fline, frames) = header(rest.next(), "Frames:")?;
    let frames: usize = frames.parse().map_err(|_| parse_err(fline, format!("bad frame count {frames:?}")))?;
    let (tline, ft) = header(rest.next(), "Frame Time:")?;
    let frame_time: f64 = ft.parse().map_err(|_| parse_err(tline, format!("bad frame time {ft:?}")))?;
    if !(frame_time > 0.0 && frame_time.is_finite()) {
        return Err(parse_err(tline, "frame time must be positive"));
    }

    let mut motion = Vec::with_capacity(frames);
    let mut last_line = tline;
    for &(n, l) in rest {
        last_line = n;
        let row: Vec<f64> = l
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| parse_err(n, format!("bad value {v:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != columns {
            return Err(parse_err(n, format!("expected {columns} channel values, found {}", row.len())));
        }
        motion.push(row);
    }
    if motion.len() != frames {
        return Err(parse_err(last_line, format!("header declares {frames} frames, found {}", motion.len())));
    }
    Ok(BvhDocument { joints, frame_time, motion })
}

/// Parses BVH text into a layout and a rotation-matrix gesture sequence.
pub fn parse_bvh(text: &str) -> Result<(SkeletonLayout, GestureSequence)> {
    let doc = parse_bvh_document(text)?;
    let seq = doc.to_gesture()?;
    Ok(((**seq.layout()).clone(), seq))
}

impl BvhDocument {
    pub fn layout(&self) -> Result<SkeletonLayout> {
        SkeletonLayout::new(
            self.joints.iter().map(|j| j.name.clone()).collect(),
            (0..self.joints.len()).collect(),
        )
    }

    /// Frame rate from the frame time, snapped to an integer when within 0.01.
    pub fn fps(&self) -> f64 {
        let fps = 1.0 / self.frame_time;
        if (fps - fps.round()).abs() < 1e-2 {
            fps.round()
        } else {
            fps
        }
    }

    pub fn to_gesture(&self) -> Result<GestureSequence> {
        if self.motion.is_empty() {
            return Err(Error::arg("BVH has no frames"));
        }
        let layout = Arc::new(self.layout()?);
        let mut rotations: Vec<Mat3> = Vec::with_capacity(self.motion.len() * self.joints.len());
        for row in &self.motion {
            for joint in &self.joints {
                rotations.push(match joint.rotation {
                    Some((order, cols)) => euler_to_rotmat([row[cols[0]], row[cols[1]], row[cols[2]]], order),
                    None => IDENTITY,
                });
            }
        }
        GestureSequence::new(layout, self.fps(), rotations)
    }

    /// Returns a copy whose rotation channels encode `seq`; other channels are
    /// kept from the first frame (or zero when there are more frames).
    pub fn with_rotations(&self, seq: &GestureSequence) -> Result<Self> {
        if seq.joints() != self.joints.len() {
            return Err(Error::shape(self.joints.len(), seq.joints()));
        }
        let width = self.motion.first().map_or(0, Vec::len);
        let template: Vec<f64> = self.motion.first().cloned().unwrap_or_else(|| vec![0.0; width]);
        let motion = (0..seq.frames())
            .map(|f| {
                let mut row = self.motion.get(f).cloned().unwrap_or_else(|| template.clone());
                for (j, joint) in self.joints.iter().enumerate() {
                    if let Some((order, cols)) = joint.rotation {
                        let angles = rotmat_to_euler(seq.rotation(f, j), order);
                        for k in 0..3 {
                            row[cols[k]] = angles[k];
                        }
                    }
                }
                row
            })
            .collect();
        Ok(Self { joints: self.joints.clone(), frame_time: 1.0 / seq.fps(), motion })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("HIERARCHY\n");
        self.write_joint(&mut out, 0, 0);
        out.push_str("MOTION\n");
        let _ = writeln!(out, "Frames: {}", self.motion.len());
        let _ = writeln!(out, "Frame Time: {}", self.frame_time);
        for row in &self.motion {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    fn write_joint(&self, out: &mut String, index: usize, depth: usize) {
        let pad = "  ".repeat(depth);
        let joint = &self.joints[index];
        let kind = if joint.parent.is_none() { "ROOT" } else { "JOINT" };
        let [x, y, z] = joint.offset;
        let _ = writeln!(out, "{pad}{kind} {}\n{pad}{{", joint.name);
        let _ = writeln!(out, "{pad}  OFFSET {x} {y} {z}");
        let _ = writeln!(out, "{pad}  CHANNELS {} {}", joint.channels.len(), joint.channels.join(" "));
        for (child, j) in self.joints.iter().enumerate() {
            if j.parent == Some(index) {
                self.write_joint(out, child, depth + 1);
            }
        }
        if let Some([x, y, z]) = joint.end_site {
            let _ = writeln!(out, "{pad}  End Site\n{pad}  {{\n{pad}    OFFSET {x} {y} {z}\n{pad}  }}");
        }
        let _ = writeln!(out, "{pad}}}");
    }
}

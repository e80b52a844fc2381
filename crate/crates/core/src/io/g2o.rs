//! Rotation-only reading and writing of g2o pose-graph files.
//!
//! Translations are parsed for validation and then dropped. Supported tags are
//! `VERTEX_SE3:QUAT`, `VERTEX_SE2`, `EDGE_SE3:QUAT`, `EDGE_SE2` and `FIX`;
//! any other tag is skipped and counted.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, Matrix3, Quaternion, Rotation3, UnitQuaternion};

use crate::error::{invalid, Result, ShonanError};
use crate::manifold::Rotation;
use crate::problem::{Measurement, MeasurementGraph, RotationAssignment};

/// How `κ_ij` is derived from an edge's information matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KappaPolicy {
    /// Every edge gets `κ = 1`.
    #[default]
    Unit,
    /// Mean of the rotational diagonal of the information matrix.
    Info,
}

impl std::str::FromStr for KappaPolicy {
    type Err = ShonanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Self::Unit),
            "info" => Ok(Self::Info),
            other => Err(invalid(format!("unknown kappa policy '{other}'"))),
        }
    }
}

/// Allowed deviation of a quaternion's norm from 1 before it is rejected.
pub const QUATERNION_NORM_TOL: f64 = 1e-3;

/// `[qx, qy, qz, qw]` → rotation matrix, after normalization.
pub fn rotation_from_quaternion(q: [f64; 4]) -> Rotation {
    let unit = UnitQuaternion::new_normalize(Quaternion::new(q[3], q[0], q[1], q[2]));
    let m = unit.to_rotation_matrix().into_inner();
    Rotation::from_matrix_unchecked(DMatrix::from_column_slice(3, 3, m.as_slice()))
}

/// Rotation matrix → `[qx, qy, qz, qw]`.
pub fn quaternion_from_rotation(r: &Rotation) -> [f64; 4] {
    let m = Matrix3::from_column_slice(r.matrix().as_slice());
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    let q = q.quaternion();
    [q.i, q.j, q.k, q.w]
}

pub fn rotation2(theta: f64) -> Rotation {
    let (s, c) = theta.sin_cos();
    Rotation::from_matrix_unchecked(DMatrix::from_row_slice(2, 2, &[c, -s, s, c]))
}

fn angle2(r: &Rotation) -> f64 {
    r.matrix()[(1, 0)].atan2(r.matrix()[(0, 0)])
}

/// Writing then parsing `r` reproduces it bit for bit.
pub(crate) fn quaternion_roundtrips(r: &Rotation) -> bool {
    rotation_from_quaternion(quaternion_from_rotation(r)) == *r
}

pub(crate) fn angle_roundtrips(theta: f64) -> bool {
    let r = rotation2(theta);
    rotation2(angle2(&r)) == r
}

/// Parsed file: the graph plus bookkeeping.
#[derive(Debug, Clone)]
pub struct G2oFile {
    pub graph: MeasurementGraph,
    /// Original id of each compacted node.
    pub node_ids: Vec<i64>,
    /// Unsupported tags and how often they were skipped.
    pub skipped: BTreeMap<String, usize>,
}

impl G2oFile {
    pub fn skipped_lines(&self) -> usize {
        self.skipped.values().sum()
    }
}

pub fn parse_g2o(path: &Path, policy: KappaPolicy) -> Result<G2oFile> {
    let text = std::fs::read_to_string(path).map_err(|source| ShonanError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_g2o_str(&text, policy)
}

struct Line<'a> {
    number: usize,
    fields: Vec<&'a str>,
}

impl Line<'_> {
    fn parse_error(&self, message: impl Into<String>) -> ShonanError {
        ShonanError::Parse {
            line: self.number,
            message: message.into(),
        }
    }

    fn expect_len(&self, tag: &str, count: usize) -> Result<()> {
        let found = self.fields.len() - 1;
        if found != count {
            return Err(self.parse_error(format!("{tag} expects {count} fields, found {found}")));
        }
        Ok(())
    }

    fn field(&self, k: usize) -> Result<&str> {
        self.fields
            .get(k)
            .copied()
            .ok_or_else(|| self.parse_error(format!("missing field {k}")))
    }

    fn id(&self, k: usize) -> Result<i64> {
        let f = self.field(k)?;
        f.parse()
            .map_err(|_| self.parse_error(format!("expected integer node id, got '{f}'")))
    }

    fn number(&self, k: usize) -> Result<f64> {
        let f = self.field(k)?;
        let v: f64 = f
            .parse()
            .map_err(|_| self.parse_error(format!("expected number, got '{f}'")))?;
        if !v.is_finite() {
            return Err(self.parse_error(format!("non-finite value '{f}'")));
        }
        Ok(v)
    }

    fn numbers(&self, from: usize, count: usize) -> Result<Vec<f64>> {
        (from..from + count).map(|k| self.number(k)).collect()
    }
}

#[derive(Default)]
struct Ids {
    map: HashMap<i64, usize>,
    order: Vec<i64>,
}

impl Ids {
    fn get(&mut self, id: i64) -> usize {
        *self.map.entry(id).or_insert_with(|| {
            self.order.push(id);
            self.order.len() - 1
        })
    }
}

pub fn parse_g2o_str(text: &str, policy: KappaPolicy) -> Result<G2oFile> {
    let mut ids = Ids::default();
    let mut edges = Vec::new();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    let mut dim: Option<(usize, usize)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let line = Line {
            number: idx + 1,
            fields,
        };
        let tag = line.fields[0];
        match tag {
            "VERTEX_SE3:QUAT" => {
                line.expect_len(tag, 8)?;
                let id = line.id(1)?;
                line.numbers(2, 7)?;
                ids.get(id);
            }
            "VERTEX_SE2" => {
                line.expect_len(tag, 4)?;
                let id = line.id(1)?;
                line.numbers(2, 3)?;
                ids.get(id);
            }
            "EDGE_SE3:QUAT" | "EDGE_SE2" => {
                let d = if tag == "EDGE_SE2" { 2 } else { 3 };
                line.expect_len(tag, if d == 3 { 30 } else { 11 })?;
                match dim {
                    Some((d0, _)) if d0 != d => {
                        return Err(ShonanError::Data {
                            line: line.number,
                            message: format!("{tag} mixed with SO({d0}) edges"),
                        });
                    }
                    None => dim = Some((d, line.number)),
                    _ => {}
                }
                let (a, b) = (line.id(1)?, line.id(2)?);
                let (rotation, kappa) = if d == 3 {
                    line.numbers(3, 3)?;
                    let q = line.numbers(6, 4)?;
                    let info = line.numbers(10, 21)?;
                    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
                        return Err(ShonanError::Data {
                            line: line.number,
                            message: format!(
                                "quaternion norm {norm} deviates from 1 by more than {QUATERNION_NORM_TOL}"
                            ),
                        });
                    }
                    let kappa = (info[15] + info[18] + info[20]) / 3.0;
                    (rotation_from_quaternion([q[0], q[1], q[2], q[3]]), kappa)
                } else {
                    let pose = line.numbers(3, 3)?;
                    let info = line.numbers(6, 6)?;
                    (rotation2(pose[2]), info[5])
                };
                let kappa = match policy {
                    KappaPolicy::Unit => 1.0,
                    KappaPolicy::Info => {
                        if !(kappa >= 0.0) {
                            return Err(ShonanError::Data {
                                line: line.number,
                                message: format!("rotational information {kappa} is negative"),
                            });
                        }
                        kappa
                    }
                };
                if a == b {
                    return Err(ShonanError::Data {
                        line: line.number,
                        message: format!("self loop on node {a}"),
                    });
                }
                let (i, j) = (ids.get(a), ids.get(b));
                edges.push((line.number, Measurement { i, j, rotation, kappa }));
            }
            "FIX" => {
                line.id(1)?;
                *skipped.entry(tag.to_string()).or_default() += 1;
            }
            other => {
                *skipped.entry(other.to_string()).or_default() += 1;
            }
        }
    }

    for (tag, count) in &skipped {
        warn!("skipped {count} line(s) tagged {tag}");
    }
    let (d, _) = dim.ok_or_else(|| invalid("file contains no supported edges"))?;
    let n = ids.order.len();
    let mut seen = HashMap::new();
    for (line, e) in &edges {
        if let Some(first) = seen.insert((e.i.min(e.j), e.i.max(e.j)), *line) {
            return Err(ShonanError::Data {
                line: *line,
                message: format!("duplicate measurement (first seen on line {first})"),
            });
        }
    }
    let graph = MeasurementGraph::new(n, d, edges.into_iter().map(|(_, e)| e).collect())?;
    Ok(G2oFile {
        graph,
        node_ids: ids.order,
        skipped,
    })
}

/// Renders the graph as g2o text. Vertices carry `truth` orientations when
/// given (identity otherwise) and zero translations; information matrices
/// are `κ·I`.
pub fn format_g2o(g: &MeasurementGraph, truth: Option<&RotationAssignment>) -> Result<String> {
    if let Some(t) = truth {
        if t.n() != g.n() || t.d() != g.d() {
            return Err(invalid("ground truth does not match the graph"));
        }
    }
    let mut out = String::new();
    let vertex = |i: usize| truth.map_or_else(|| Rotation::identity(g.d()), |t| t.blocks()[i].clone());
    for i in 0..g.n() {
        let r = vertex(i);
        if g.d() == 3 {
            let q = quaternion_from_rotation(&r);
            writeln!(out, "VERTEX_SE3:QUAT {i} 0 0 0 {} {} {} {}", q[0], q[1], q[2], q[3]).unwrap();
        } else {
            writeln!(out, "VERTEX_SE2 {i} 0 0 {}", angle2(&r)).unwrap();
        }
    }
    for e in g.edges() {
        let k = e.kappa;
        if g.d() == 3 {
            let q = quaternion_from_rotation(&e.rotation);
            write!(
                out,
                "EDGE_SE3:QUAT {} {} 0 0 0 {} {} {} {}",
                e.i, e.j, q[0], q[1], q[2], q[3]
            )
            .unwrap();
            for r in 0..6 {
                for c in r..6 {
                    let v = if r == c { k } else { 0.0 };
                    write!(out, " {v}").unwrap();
                }
            }
            out.push('\n');
        } else {
            writeln!(
                out,
                "EDGE_SE2 {} {} 0 0 {} {k} 0 0 {k} 0 {k}",
                e.i,
                e.j,
                angle2(&e.rotation)
            )
            .unwrap();
        }
    }
    Ok(out)
}

pub fn write_g2o(path: &Path, g: &MeasurementGraph, truth: Option<&RotationAssignment>) -> Result<()> {
    let text = format_g2o(g, truth)?;
    std::fs::write(path, text).map_err(|source| ShonanError::Io {
        path: path.to_path_buf(),
        source,
    })
}

//! OBJ subset: `v`, `vt`, `vn` and triangular `f` records. Each distinct
//! `(v, vt)` pair becomes one mesh vertex. Normals in the file are ignored on
//! read (they are derived) and written normalized.
//!
//! Skinning weights live in a sidecar text file: one line per vertex with
//! `bone_count` whitespace-separated weights.

use std::collections::BTreeMap;
use std::path::Path;

use super::{SkinWeights, TriangleMesh};
use crate::error::{Error, Result};
use crate::{Vec2, Vec3};

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "OBJ",
        offset,
        msg: msg.into(),
    }
}

pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut v = Vec::new();
    let mut vt = Vec::new();
    let mut corner_faces: Vec<[(usize, Option<usize>); 3]> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tok = body.split_whitespace();
        let tag = tok.next().unwrap_or("");
        let nums = |tok: std::str::SplitWhitespace, n: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = tok
                .map(|t| t.parse::<f64>().map_err(|_| format_err(here, format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() < n {
                return Err(format_err(here, format!("{tag} needs {n} values")));
            }
            Ok(vals)
        };
        match tag {
            "v" => {
                let x = nums(tok, 3)?;
                v.push(Vec3::new(x[0], x[1], x[2]));
            }
            "vt" => {
                let x = nums(tok, 2)?;
                vt.push(Vec2::new(x[0], x[1]));
            }
            "vn" => {
                nums(tok, 3)?;
            }
            "f" => {
                let refs: Vec<&str> = tok.collect();
                if refs.len() != 3 {
                    return Err(format_err(
                        here,
                        format!("face with {} vertices; only triangles are supported", refs.len()),
                    ));
                }
                let mut face = [(0, None); 3];
                for (k, r) in refs.iter().enumerate() {
                    let mut parts = r.split('/');
                    let resolve = |s: Option<&str>, len: usize| -> Result<Option<usize>> {
                        match s {
                            None | Some("") => Ok(None),
                            Some(s) => {
                                let i: i64 = s.parse().map_err(|_| format_err(here, format!("bad index {s:?}")))?;
                                let idx = if i > 0 { i - 1 } else { len as i64 + i };
                                if idx < 0 || idx as usize >= len {
                                    return Err(format_err(here, format!("index {i} out of range")));
                                }
                                Ok(Some(idx as usize))
                            }
                        }
                    };
                    let vi = resolve(parts.next(), v.len())?.ok_or_else(|| format_err(here, "face without vertex index"))?;
                    let ti = resolve(parts.next(), vt.len())?;
                    face[k] = (vi, ti);
                }
                corner_faces.push(face);
            }
            "o" | "g" | "s" | "usemtl" | "mtllib" => {}
            other => return Err(format_err(here, format!("unsupported record {other:?}"))),
        }
    }
    // Number distinct (v, vt) pairs in sorted order so files written by
    // `format_obj` keep their vertex order.
    // Unreferenced `v` records are kept, paired with the `vt` of equal index.
    let mut ids: BTreeMap<(usize, Option<usize>), u32> = corner_faces.iter().flatten().map(|c| (*c, 0)).collect();
    let mut used = vec![false; v.len()];
    for &(vi, _) in ids.keys() {
        used[vi] = true;
    }
    for (vi, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
        ids.insert((vi, (vi < vt.len()).then_some(vi)), 0);
    }
    let mut positions = Vec::with_capacity(ids.len());
    let mut uvs = Vec::with_capacity(ids.len());
    for (k, (&(vi, ti), id)) in ids.iter_mut().enumerate() {
        *id = k as u32;
        positions.push(v[vi]);
        uvs.push(ti.map_or(Vec2::zeros(), |t| vt[t]));
    }
    let faces = corner_faces.iter().map(|f| f.map(|c| ids[&c])).collect();
    TriangleMesh::new(positions, uvs, faces).map_err(|e| format_err(offset, e.to_string()))
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

pub fn format_obj(mesh: &TriangleMesh) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    for p in &mesh.positions {
        let _ = writeln!(s, "v {:?} {:?} {:?}", p.x, p.y, p.z);
    }
    for t in &mesh.uvs {
        let _ = writeln!(s, "vt {:?} {:?}", t.x, t.y);
    }
    for n in &mesh.normals {
        let n = n.normalize();
        let _ = writeln!(s, "vn {:?} {:?} {:?}", n.x, n.y, n.z);
    }
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| i + 1);
        let _ = writeln!(s, "f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}");
    }
    s
}

pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    std::fs::write(path, format_obj(mesh)).map_err(|e| Error::io(path, e))
}

pub fn parse_skin(text: &str, vertex_count: usize) -> Result<SkinWeights> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Format {
                    what: "skin weights",
                    offset: here,
                    msg: format!("bad number {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push((here, row));
    }
    if rows.len() != vertex_count {
        return Err(Error::Format {
            what: "skin weights",
            offset,
            msg: format!("{} rows for {vertex_count} vertices", rows.len()),
        });
    }
    let j = rows.first().map_or(0, |r| r.1.len());
    if let Some((at, _)) = rows.iter().find(|r| r.1.len() != j) {
        return Err(Error::Format {
            what: "skin weights",
            offset: *at,
            msg: "ragged row".into(),
        });
    }
    SkinWeights::new(j, rows.into_iter().flat_map(|r| r.1).collect(), vertex_count)
}

pub fn format_skin(skin: &SkinWeights) -> String {
    skin.weights
        .chunks(skin.bone_count.max(1))
        .map(|row| row.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::primitives::uv_sphere;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let s = uv_sphere(5, 7, 0.8, Vec3::new(0.1, 0.2, 0.3), [0.0, 0.0, 1.0, 1.0]);
        let back = parse_obj(&format_obj(&s)).unwrap();
        assert_eq!(back.positions, s.positions);
        assert_eq!(back.uvs, s.uvs);
        assert_eq!(back.faces, s.faces);
    }

    #[test]
    fn quads_are_rejected() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        let err = parse_obj(text).unwrap_err().to_string();
        assert!(err.contains("only triangles"), "{err}");
        assert!(err.contains("byte 32"), "{err}");
    }

    #[test]
    fn shared_positions_split_by_uv() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvt 0.5 0.5\n\
                    f 1/1 2/2 3/3\nf 3/4 2/2 1/1\n";
        let m = parse_obj(text).unwrap();
        assert_eq!(m.vertex_count(), 4);
    }

    #[test]
    fn skin_sidecar() {
        let skin = SkinWeights::new(2, vec![0.25, 0.75, 1.0, 0.0], 2).unwrap();
        assert_eq!(parse_skin(&format_skin(&skin), 2).unwrap(), skin);
        assert!(parse_skin("0.5 0.5\n1\n", 2).is_err());
        assert!(parse_skin("0.5 0.6\n", 1).is_err());
    }
}

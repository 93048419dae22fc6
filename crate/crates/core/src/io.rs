//! File export: VTK legacy ASCII structured-points fields, CSV tables, and
//! a small JSON emitter that prints every float with 17 significant digits
//! so repeated runs produce byte-identical artifacts.

use crate::scalar::Scalar;
use std::fmt::Write as FmtWrite;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// 17-significant-digit scientific form, enough to round-trip any f64.
pub fn fmt_float<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.to_f64().unwrap_or(f64::NAN))
}

/// Write a cell-centered square field as VTK legacy ASCII structured points.
/// `fields` are full-grid row-major values (solid cells pre-filled by the
/// caller).
pub fn write_vtk_cell_fields<T: Scalar>(
    path: &Path,
    title: &str,
    m: usize,
    spacing: T,
    origin: [T; 2],
    fields: &[(&str, &[T])],
) -> std::io::Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{title}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} 1", m + 1, m + 1)?;
    writeln!(
        w,
        "ORIGIN {} {} 0",
        fmt_float(origin[0]),
        fmt_float(origin[1])
    )?;
    writeln!(
        w,
        "SPACING {} {} 1",
        fmt_float(spacing),
        fmt_float(spacing)
    )?;
    writeln!(w, "CELL_DATA {}", m * m)?;
    for (name, values) in fields {
        assert_eq!(values.len(), m * m, "field {name} has wrong size");
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in values.iter() {
            writeln!(w, "{}", fmt_float(*v))?;
        }
    }
    Ok(())
}

/// Write a CSV table with a header row; every float printed with 17
/// significant digits.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> std::io::Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Minimal JSON value with deterministic float formatting.
#[derive(Clone, Debug)]
pub enum Json {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Array(Vec<Json>),
    /// Insertion-ordered object.
    Object(Vec<(String, Json)>),
}

impl Json {
    pub fn object() -> Self {
        Json::Object(Vec::new())
    }

    pub fn push(&mut self, key: &str, value: Json) -> &mut Self {
        if let Json::Object(entries) = self {
            entries.push((key.to_string(), value));
        } else {
            panic!("push on non-object Json");
        }
        self
    }

    pub fn floats(values: &[f64]) -> Json {
        Json::Array(values.iter().map(|&v| Json::Float(v)).collect())
    }

    pub fn matrix2(m: &[[f64; 2]; 2]) -> Json {
        Json::Array(vec![Json::floats(&m[0]), Json::floats(&m[1])])
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        self.write_into(&mut s, 0);
        s
    }

    fn write_into(&self, out: &mut String, indent: usize) {
        match self {
            Json::Null => out.push_str("null"),
            Json::Bool(b) => {
                let _ = write!(out, "{b}");
            }
            Json::Int(v) => {
                let _ = write!(out, "{v}");
            }
            Json::Float(v) => {
                if v.is_finite() {
                    let _ = write!(out, "{v:.16e}");
                } else {
                    let _ = write!(out, "\"{v}\"");
                }
            }
            Json::Str(s) => {
                let _ = write!(out, "\"{}\"", escape(s));
            }
            Json::Array(items) => {
                out.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    item.write_into(out, indent);
                }
                out.push(']');
            }
            Json::Object(entries) => {
                if entries.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push_str("{\n");
                let pad = "  ".repeat(indent + 1);
                for (k, (key, value)) in entries.iter().enumerate() {
                    if k > 0 {
                        out.push_str(",\n");
                    }
                    let _ = write!(out, "{pad}\"{}\": ", escape(key));
                    value.write_into(out, indent + 1);
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent));
                out.push('}');
            }
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn write_json(path: &Path, value: &Json) -> std::io::Result<()> {
    let mut file = File::create(path)?;
    file.write_all(value.render().as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;

    #[test]
    fn float_formatting_has_17_digits() {
        let s = fmt_float(1.0 / 3.0f64);
        assert_eq!(s, "3.3333333333333331e-1");
    }

    #[test]
    fn json_rendering_is_deterministic() {
        let mut j = Json::object();
        j.push("name", Json::Str("run".into()));
        j.push("value", Json::Float(0.1));
        j.push("list", Json::floats(&[1.0, 2.5]));
        let a = j.render();
        let b = j.render();
        assert_eq!(a, b);
        assert!(a.contains("1.0000000000000001e-1"));
    }

    #[test]
    fn vtk_file_shape() {
        let dir = std::env::temp_dir().join("driftscale_vtk_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.vtk");
        let field = vec![0.25f64; 9];
        write_vtk_cell_fields(&path, "test", 3, 0.5, [0.0, 0.0], &[("u", &field)]).unwrap();
        let mut content = String::new();
        File::open(&path)
            .unwrap()
            .read_to_string(&mut content)
            .unwrap();
        assert!(content.starts_with("# vtk DataFile Version 3.0"));
        assert!(content.contains("DIMENSIONS 4 4 1"));
        assert!(content.contains("CELL_DATA 9"));
        assert!(content.contains("SCALARS u double 1"));
        std::fs::remove_dir_all(&dir).ok();
    }
}

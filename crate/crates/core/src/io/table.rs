use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// One CSV cell: integers verbatim, reals in scientific notation with 17 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Column-headed table written as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, c) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                match c {
                    Cell::Int(v) => write!(out, "{v}").unwrap(),
                    Cell::Real(v) => out.push_str(&format_real(*v)),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip_exactly() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0] {
            assert_eq!(format_real(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(format_real(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn header_then_rows() {
        let mut t = Table::new(&["level", "value"]);
        t.push(vec![3usize.into(), 0.5.into()]);
        assert_eq!(t.to_csv(), "level,value\n3,5.0000000000000000e-1\n");
    }
}

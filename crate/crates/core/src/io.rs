//! JSON and CSV encodings.
//!
//! Matrices travel as `{"rows": r, "cols": c, "data": [[re, im], ...]}` in
//! row-major order. Every float written by this module, in JSON or CSV, uses
//! 17 significant digits in exponent form, which round-trips exactly.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::Purification;
use crate::error::{Error, Result};
use crate::evolution::{HamiltonianPath, StateTrajectory};
use crate::linalg::{c, ComplexMatrix, Spectrum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<[f64; 2]>,
}

impl MatrixJson {
    pub fn from_matrix(m: &ComplexMatrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let z = m[(i, j)];
                data.push([z.re, z.im]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn from_real(m: &nalgebra::DMatrix<f64>) -> Self {
        Self::from_matrix(&m.map(|x| c(x, 0.0)))
    }

    pub fn to_matrix(&self) -> Result<ComplexMatrix> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidInput(
                "matrix must have at least one row and column".into(),
            ));
        }
        if self.data.len() != self.rows * self.cols {
            return Err(Error::InvalidInput(format!(
                "data has {} entries, expected rows*cols = {}",
                self.data.len(),
                self.rows * self.cols
            )));
        }
        if self.data.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        Ok(ComplexMatrix::from_fn(self.rows, self.cols, |i, j| {
            let [re, im] = self.data[i * self.cols + j];
            c(re, im)
        }))
    }

    /// Real matrix; any non-zero imaginary part is an error.
    pub fn to_real(&self) -> Result<nalgebra::DMatrix<f64>> {
        let m = self.to_matrix()?;
        if m.iter().any(|z| z.im != 0.0) {
            return Err(Error::InvalidInput(
                "expected a real matrix, found imaginary parts".into(),
            ));
        }
        Ok(m.map(|z| z.re))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurificationJson {
    pub sigma: Vec<f64>,
    pub psi: MatrixJson,
}

impl PurificationJson {
    pub fn from_purification(p: &Purification) -> Self {
        Self {
            sigma: p.sigma().values().to_vec(),
            psi: MatrixJson::from_matrix(p.psi()),
        }
    }

    pub fn to_purification(&self, grouping_tol: f64) -> Result<Purification> {
        let sigma = Spectrum::new(self.sigma.clone(), grouping_tol)?;
        Purification::new(self.psi.to_matrix()?, sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentJson {
    pub duration: f64,
    pub generator: MatrixJson,
}

pub fn path_to_json(path: &HamiltonianPath) -> Vec<SegmentJson> {
    path.segments()
        .iter()
        .map(|s| SegmentJson {
            duration: s.duration,
            generator: MatrixJson::from_matrix(s.generator.matrix()),
        })
        .collect()
}

/// Writes floats as `{:.16e}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedDigits;

impl serde_json::ser::Formatter for FixedDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", format_float(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Compact JSON with 17-digit floats and a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedDigits);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::InvalidInput(format!("cannot serialize result: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

fn entry_header(rows: usize, cols: usize) -> Vec<String> {
    let wide = rows > 10 || cols > 10;
    let mut header = vec!["t".to_string()];
    for i in 0..rows {
        for j in 0..cols {
            let idx = if wide { format!("{i}_{j}") } else { format!("{i}{j}") };
            header.push(format!("re_{idx}"));
            header.push(format!("im_{idx}"));
        }
    }
    header
}

/// Time series of `rows x cols` matrices, one row per sample:
/// `t, re_00, im_00, re_01, ...` in row-major entry order.
pub fn write_matrix_series_csv<W: Write>(
    out: W,
    rows: usize,
    cols: usize,
    times: &[f64],
    matrices: &[&ComplexMatrix],
) -> Result<()> {
    if times.len() != matrices.len() {
        return Err(Error::InvalidInput("times and matrices differ in length".into()));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io_err = |e: csv::Error| Error::InvalidInput(format!("csv write failed: {e}"));
    w.write_record(entry_header(rows, cols)).map_err(io_err)?;
    for (t, m) in times.iter().zip(matrices) {
        if m.nrows() != rows || m.ncols() != cols {
            return Err(Error::InvalidInput("matrix shape changes within the series".into()));
        }
        let mut record = Vec::with_capacity(1 + 2 * rows * cols);
        record.push(format_float(*t));
        for i in 0..rows {
            for j in 0..cols {
                record.push(format_float(m[(i, j)].re));
                record.push(format_float(m[(i, j)].im));
            }
        }
        w.write_record(&record).map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidInput(format!("csv write failed: {e}")))?;
    Ok(())
}

pub fn write_trajectory_csv<W: Write>(out: W, traj: &StateTrajectory, dim: usize) -> Result<()> {
    let matrices: Vec<&ComplexMatrix> = traj.states().iter().map(|s| s.matrix()).collect();
    write_matrix_series_csv(out, dim, dim, traj.times(), &matrices)
}

pub fn write_lift_csv<W: Write>(out: W, times: &[f64], lift: &[Purification], dim: usize, k: usize) -> Result<()> {
    let matrices: Vec<&ComplexMatrix> = lift.iter().map(|p| p.psi()).collect();
    write_matrix_series_csv(out, dim, k, times, &matrices)
}

/// Inverse of [`write_matrix_series_csv`]; the header must match the shape.
pub fn read_matrix_series_csv<R: Read>(input: R, rows: usize, cols: usize) -> Result<(Vec<f64>, Vec<ComplexMatrix>)> {
    let mut r = csv::ReaderBuilder::new().from_reader(input);
    let bad = |e: csv::Error| Error::InvalidInput(format!("csv read failed: {e}"));
    let header: Vec<String> = r.headers().map_err(bad)?.iter().map(String::from).collect();
    if header != entry_header(rows, cols) {
        return Err(Error::InvalidInput(format!(
            "unexpected csv header for a {rows}x{cols} series"
        )));
    }
    let mut times = Vec::new();
    let mut matrices = Vec::new();
    for record in r.records() {
        let record = record.map_err(bad)?;
        let values = record
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidInput(format!("bad number in csv: {e}")))?;
        times.push(values[0]);
        matrices.push(ComplexMatrix::from_fn(rows, cols, |i, j| {
            let k = 1 + 2 * (i * cols + j);
            c(values[k], values[k + 1])
        }));
    }
    Ok((times, matrices))
}

pub fn create_file(path: &Path) -> io::Result<File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    File::create(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{evolve_von_neumann, HamiltonianPath};
    use crate::linalg::{pauli_x, random_density, random_hermitian, HermitianOperator};

    #[test]
    fn matrix_json_round_trip() {
        let m = random_hermitian(3, 4).matrix().clone();
        let bytes = to_json_bytes(&MatrixJson::from_matrix(&m)).unwrap();
        let back: MatrixJson = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back.to_matrix().unwrap(), m);
    }

    #[test]
    fn floats_have_seventeen_digits() {
        let bytes = to_json_bytes(&[0.1f64, 1.0, -2.5e-300]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(
            text,
            "[1.0000000000000001e-1,1.0000000000000000e0,-2.5000000000000000e-300]\n"
        );
    }

    #[test]
    fn matrix_json_rejects_bad_shapes() {
        let j = MatrixJson {
            rows: 2,
            cols: 2,
            data: vec![[1.0, 0.0]; 3],
        };
        assert!(j.to_matrix().is_err());
        let j = MatrixJson {
            rows: 1,
            cols: 1,
            data: vec![[1.0, 0.5]],
        };
        assert!(j.to_real().is_err());
        assert!(serde_json::from_str::<MatrixJson>(r#"{"rows":1,"cols":1,"data":[[1,0]],"x":1}"#).is_err());
    }

    #[test]
    fn constant_trajectory_csv_has_two_rows() {
        let rho = random_density(2, 1);
        let path = HamiltonianPath::constant(HermitianOperator::zero(2), 1.0).unwrap();
        let traj = evolve_von_neumann(&rho, &path, 2).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "t,re_00,im_00,re_01,im_01,re_10,im_10,re_11,im_11");
        assert!(!text.contains('\r'));
        let t: Vec<f64> = lines[1..]
            .iter()
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert!(t[0] < t[1]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rho = random_density(3, 2);
        let h = HermitianOperator::new(pauli_x().resize(3, 3, c(0.0, 0.0))).unwrap();
        let path = HamiltonianPath::constant(h, 0.7).unwrap();
        let traj = evolve_von_neumann(&rho, &path, 5).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj, 3).unwrap();
        let (times, mats) = read_matrix_series_csv(buf.as_slice(), 3, 3).unwrap();
        assert_eq!(times, traj.times());
        for (m, s) in mats.iter().zip(traj.states()) {
            assert_eq!(m, s.matrix());
        }
    }

    #[test]
    fn empty_series_is_header_only() {
        let mut buf = Vec::new();
        write_matrix_series_csv(&mut buf, 2, 1, &[], &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,re_00,im_00,re_10,im_10\n");
    }
}

//! Output files. Every file is written to a temporary sibling and renamed
//! into place, so a failed command never leaves a partial file behind.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use tempfile::NamedTempFile;

use scc_core::simulation::Trace;

use crate::error::CliError;

pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Io(e.error))?;
    Ok(())
}

/// Nine significant digits in scientific notation; NaN prints as `nan`.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.8e}")
    }
}

pub fn trace_header(n: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|j| format!("v{j}")));
    cols.extend((1..=n).map(|j| format!("it{j}")));
    cols.push("vL".into());
    cols.extend((1..=n).map(|j| format!("u{j}")));
    cols.extend(["V_eta", "min_b", "flags"].map(String::from));
    cols.join(",")
}

pub fn trace_csv(trace: &Trace) -> String {
    let n = trace.n;
    let mut out = String::with_capacity(trace.records.len() * (3 * n + 5) * 16);
    out.push_str(&trace_header(n));
    out.push('\n');
    for r in &trace.records {
        let mut fields = Vec::with_capacity(3 * n + 6);
        fields.push(fmt_float(r.t));
        fields.extend((0..n).map(|j| fmt_float(r.x[2 * j])));
        fields.extend((0..n).map(|j| fmt_float(r.x[2 * j + 1])));
        fields.push(fmt_float(r.x[2 * n]));
        fields.extend(r.u.iter().map(|u| fmt_float(*u)));
        fields.push(fmt_float(r.v_eta));
        fields.push(fmt_float(r.min_b));
        fields.push(r.flags.to_string());
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_nine_significant_digits() {
        assert_eq!(fmt_float(24.0), "2.40000000e1");
        assert_eq!(fmt_float(-0.000123456789123), "-1.23456789e-4");
        assert_eq!(fmt_float(f64::NAN), "nan");
        let back: f64 = fmt_float(1.0 / 3.0).parse().unwrap();
        assert!((back - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn header_groups_voltages_then_currents() {
        assert_eq!(trace_header(2), "t,v1,v2,it1,it2,vL,u1,u2,V_eta,min_b,flags");
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("f.txt");
        write_atomic(&path, "one").unwrap();
        write_atomic(&path, "two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}

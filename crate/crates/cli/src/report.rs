//! Plain-text tables for standard output and the mesh-study CSV.

use std::fmt::Write;

use trrisk::tr_engine::IterationRecord;

use crate::runner::{MeshRow, Summary};

fn sci(v: f64) -> String {
    format!("{v:.4e}")
}

/// Iteration history, one row per `k`, `---` where a column has no value.
pub fn iteration_table(records: &[IterationRecord]) -> String {
    let mut out = format!(
        "{:>4} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>5}\n",
        "k", "J", "h", "delta", "step", "val tol", "grad tol", "itsp"
    );
    for r in records {
        let step = r.step_norm.map(sci).unwrap_or_else(|| "---".into());
        let itsp = r.itsp.map(|v| v.to_string()).unwrap_or_else(|| "---".into());
        let _ = writeln!(
            out,
            "{:>4} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>5}",
            r.k,
            sci(r.j),
            sci(r.h),
            sci(r.delta),
            step,
            sci(r.val_tol),
            sci(r.grad_tol),
            itsp
        );
    }
    out
}

pub fn summary_line(s: &Summary) -> String {
    format!(
        "{}: {} after {} iterations, J = {}, h = {}, nfval {} ngrad {} nhess {} npsi {} nprox {} aprox {:.2}\n",
        s.problem,
        if s.converged { "converged" } else { "NOT converged" },
        s.iter,
        sci(s.j),
        sci(s.h),
        s.nfval,
        s.ngrad,
        s.nhess,
        s.npsi,
        s.nprox,
        s.aprox
    )
}

const MESH_HEADER: [&str; 10] = ["mesh", "iter", "nfval", "ngrad", "nhess", "npsi", "nprox", "aprox", "J", "h"];

fn mesh_fields(r: &MeshRow) -> [String; 10] {
    let s = &r.summary;
    [
        r.mesh.clone(),
        s.iter.to_string(),
        s.nfval.to_string(),
        s.ngrad.to_string(),
        s.nhess.to_string(),
        s.npsi.to_string(),
        s.nprox.to_string(),
        format!("{:.2}", s.aprox),
        sci(s.j),
        sci(s.h),
    ]
}

pub fn mesh_table(rows: &[MeshRow]) -> String {
    let mut out = String::new();
    let line = |f: &[String]| {
        let mut l = format!("{:>9}", f[0]);
        for v in &f[1..] {
            let _ = write!(l, " {v:>10}");
        }
        l.push('\n');
        l
    };
    out.push_str(&line(&MESH_HEADER.map(String::from)));
    for r in rows {
        out.push_str(&line(&mesh_fields(r)));
    }
    out
}

pub fn mesh_csv(rows: &[MeshRow]) -> String {
    let mut out = MESH_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&mesh_fields(r).join(","));
        out.push('\n');
    }
    out
}

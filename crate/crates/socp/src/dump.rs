//! Plain-text dump of a [`ConeProgram`] for cross-checking with other solvers.
//!
//! ```text
//! ddpc-cone-program 1
//! n <n>
//! P <n> <n>
//! <row-major rows, one per line>
//! f <n>
//! <values>
//! Aeq <me> <n>
//! ...
//! beq <me>
//! G <mi> <n>
//! h <mi>
//! cones <count>
//! cone <k>          (repeated per cone: C k×n, d k, a n, b scalar)
//! C <k> <n>
//! d <k>
//! a <n>
//! b <value>
//! ```
//!
//! Floats use C's `%.17g` formatting so every value round-trips exactly.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::program::{ConeProgram, ProgramError, SocConstraint};

const HEADER: &str = "ddpc-cone-program 1";

/// Formats like C's `printf("%.17g", x)`.
pub fn format_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    const P: i32 = 17;
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= P {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (P - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn write_row(out: &mut String, vals: impl Iterator<Item = f64>) {
    let row: Vec<String> = vals.map(format_g17).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
}

fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        write_row(out, m.row(r).iter().copied());
    }
}

fn write_vector(out: &mut String, name: &str, v: &DVector<f64>) {
    let _ = writeln!(out, "{name} {}", v.len());
    if !v.is_empty() {
        write_row(out, v.iter().copied());
    }
}

pub fn write_text(prog: &ConeProgram) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    let _ = writeln!(out, "n {}", prog.num_vars());
    write_matrix(&mut out, "P", &prog.p);
    write_vector(&mut out, "f", &prog.f);
    write_matrix(&mut out, "Aeq", &prog.aeq);
    write_vector(&mut out, "beq", &prog.beq);
    write_matrix(&mut out, "G", &prog.g);
    write_vector(&mut out, "h", &prog.h);
    let _ = writeln!(out, "cones {}", prog.socs.len());
    for soc in &prog.socs {
        let _ = writeln!(out, "cone {}", soc.c.nrows());
        write_matrix(&mut out, "C", &soc.c);
        write_vector(&mut out, "d", &soc.d);
        write_vector(&mut out, "a", &soc.a);
        let _ = writeln!(out, "b {}", format_g17(soc.b));
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, msg: impl Into<String>) -> ProgramError {
        ProgramError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next(&mut self) -> Result<&'a str, ProgramError> {
        loop {
            match self.inner.next() {
                Some((i, l)) => {
                    self.line = i + 1;
                    let l = l.trim();
                    if !l.is_empty() && !l.starts_with('#') {
                        return Ok(l);
                    }
                }
                None => return Err(self.err("unexpected end of input")),
            }
        }
    }

    fn header(&mut self, name: &str, arity: usize) -> Result<Vec<usize>, ProgramError> {
        let l = self.next()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(name) {
            return Err(self.err(format!("expected `{name}`")));
        }
        let dims: Vec<usize> = parts
            .map(|p| p.parse::<usize>().map_err(|_| self.err(format!("bad dimension `{p}`"))))
            .collect::<Result<_, _>>()?;
        if dims.len() != arity {
            return Err(self.err(format!("`{name}` expects {arity} dimension(s)")));
        }
        Ok(dims)
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>, ProgramError> {
        let l = self.next()?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|p| p.parse::<f64>().map_err(|_| self.err(format!("bad number `{p}`"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != count {
            return Err(self.err(format!("expected {count} values, found {}", vals.len())));
        }
        Ok(vals)
    }

    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>, ProgramError> {
        let d = self.header(name, 2)?;
        let mut data = Vec::with_capacity(d[0] * d[1]);
        for _ in 0..d[0] {
            data.extend(self.floats(d[1])?);
        }
        Ok(DMatrix::from_row_slice(d[0], d[1], &data))
    }

    fn vector(&mut self, name: &str) -> Result<DVector<f64>, ProgramError> {
        let d = self.header(name, 1)?;
        if d[0] == 0 {
            return Ok(DVector::zeros(0));
        }
        Ok(DVector::from_vec(self.floats(d[0])?))
    }
}

pub fn read_text(text: &str) -> Result<ConeProgram, ProgramError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    if lines.next()? != HEADER {
        return Err(lines.err(format!("expected header `{HEADER}`")));
    }
    let n = lines.header("n", 1)?[0];
    let p = lines.matrix("P")?;
    let f = lines.vector("f")?;
    let aeq = lines.matrix("Aeq")?;
    let beq = lines.vector("beq")?;
    let g = lines.matrix("G")?;
    let h = lines.vector("h")?;
    let count = lines.header("cones", 1)?[0];
    let mut socs = Vec::with_capacity(count);
    for _ in 0..count {
        lines.header("cone", 1)?;
        let c = lines.matrix("C")?;
        let d = lines.vector("d")?;
        let a = lines.vector("a")?;
        let l = lines.next()?;
        let b = l
            .strip_prefix("b ")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| lines.err("expected `b <value>`"))?;
        socs.push(SocConstraint::new(c, d, a, b));
    }
    // Empty matrices lose their column count in the row-major body.
    let fix = |m: DMatrix<f64>| if m.nrows() == 0 { DMatrix::zeros(0, n) } else { m };
    let prog = ConeProgram {
        p,
        f,
        aeq: fix(aeq),
        beq,
        g: fix(g),
        h,
        socs,
    };
    prog.validate()?;
    Ok(prog)
}

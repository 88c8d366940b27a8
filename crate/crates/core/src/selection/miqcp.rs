//! Plain-text export of the weight-selection problem as a mixed integer
//! quadratically constrained program.
//!
//! ```text
//! # g2t miqcp v1
//! VARS
//! a_1 continuous
//! ...
//! b_1 binary
//! ...
//! V_G continuous
//! V_T continuous
//! OBJ
//! minimize V_G * V_T
//! QCON
//! u <u>
//! r <r_1> ... <r_J>
//! Q <i> <j> <Q_ij>          one line per non-zero entry, 1-based
//! LCON
//! t0 <t0>
//! t <t_1> ... <t_J>
//! IND
//! b_1 <-> a_1
//! ...
//! END
//! ```
//!
//! The quadratic constraint reads `V_G >= ½ aᵀQa + rᵀa + u`, the linear one
//! `V_T = t0 + tᵀb`, and each indicator line `b_i <-> a_i` means
//! `b_i = 1[a_i ≠ 0]`. Numbers use the shortest round-trip decimal form.

use std::fmt::Write as _;

use super::{CostProfile, SelectionError, SquaredNormStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarType {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiqcpProblem {
    pub variables: Vec<(String, VarType)>,
    /// Names of the two factors of the product objective.
    pub objective: (String, String),
    pub stats: SquaredNormStats,
    pub profile: CostProfile,
    /// `(binary, continuous)` pairs.
    pub indicators: Vec<(String, String)>,
}

/// Feasibility slack used by [`MiqcpProblem::objective_at`].
const FEAS_TOL: f64 = 1e-9;

impl MiqcpProblem {
    pub fn j(&self) -> usize {
        self.stats.j()
    }

    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn n_quadratic_constraints(&self) -> usize {
        1
    }

    pub fn n_linear_constraints(&self) -> usize {
        1
    }

    pub fn n_indicators(&self) -> usize {
        self.indicators.len()
    }

    /// Objective `V_G · V_T` at a point, or an error naming the violated constraint.
    pub fn objective_at(
        &self,
        a: &[f64],
        b: &[bool],
        vg: f64,
        vt: f64,
    ) -> Result<f64, SelectionError> {
        let j = self.j();
        if a.len() != j || b.len() != j {
            return Err(SelectionError::LengthMismatch {
                expected: j,
                got: a.len().min(b.len()),
            });
        }
        let g2 = super::g2_of_weights(&self.stats, a)?;
        if vg < g2 - FEAS_TOL * g2.abs().max(1.0) {
            return Err(SelectionError::Domain(format!(
                "quadratic constraint violated: V_G = {vg} < {g2}"
            )));
        }
        let t = self.profile.t0
            + self
                .profile
                .t
                .iter()
                .zip(b)
                .filter(|(_, on)| **on)
                .map(|(t, _)| t)
                .sum::<f64>();
        if (vt - t).abs() > FEAS_TOL * t.abs().max(1.0) {
            return Err(SelectionError::Domain(format!(
                "linear constraint violated: V_T = {vt} != {t}"
            )));
        }
        for (i, (&ai, &bi)) in a.iter().zip(b).enumerate() {
            if !bi && ai != 0.0 {
                return Err(SelectionError::Domain(format!(
                    "indicator violated: b_{} = 0 but a_{} = {ai}",
                    i + 1,
                    i + 1
                )));
            }
        }
        Ok(vg * vt)
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn export_miqcp(
    stats: &SquaredNormStats,
    profile: &CostProfile,
) -> Result<String, SelectionError> {
    let j = stats.j();
    if profile.t.len() != j {
        return Err(SelectionError::LengthMismatch {
            expected: j,
            got: profile.t.len(),
        });
    }
    if !stats.is_finite() {
        return Err(SelectionError::Domain(
            "squared-norm statistics contain non-finite entries".into(),
        ));
    }
    let mut s = String::from("# g2t miqcp v1\nVARS\n");
    for i in 1..=j {
        writeln!(s, "a_{i} continuous").unwrap();
    }
    for i in 1..=j {
        writeln!(s, "b_{i} binary").unwrap();
    }
    s.push_str("V_G continuous\nV_T continuous\nOBJ\nminimize V_G * V_T\nQCON\n");
    writeln!(s, "u {}", stats.u).unwrap();
    writeln!(s, "r {}", join(&stats.r)).unwrap();
    for (i, row) in stats.q.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            if *v != 0.0 {
                writeln!(s, "Q {} {} {v}", i + 1, k + 1).unwrap();
            }
        }
    }
    writeln!(s, "LCON\nt0 {}", profile.t0).unwrap();
    writeln!(s, "t {}", join(&profile.t)).unwrap();
    s.push_str("IND\n");
    for i in 1..=j {
        writeln!(s, "b_{i} <-> a_{i}").unwrap();
    }
    s.push_str("END\n");
    Ok(s)
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Vars,
    Obj,
    Qcon,
    Lcon,
    Ind,
    End,
}

pub fn parse_miqcp(text: &str) -> Result<MiqcpProblem, SelectionError> {
    let mut section = Section::None;
    let mut variables = Vec::new();
    let mut objective = None;
    let mut u = None;
    let mut r: Option<Vec<f64>> = None;
    let mut q_entries = Vec::new();
    let mut t0 = None;
    let mut t: Option<Vec<f64>> = None;
    let mut indicators = Vec::new();

    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let err = |message: String| SelectionError::Parse {
            line: line_no,
            message,
        };
        let num = |tok: &str| {
            tok.parse::<f64>()
                .map_err(|_| err(format!("bad number '{tok}'")))
        };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let next = match line {
            "VARS" => Some(Section::Vars),
            "OBJ" => Some(Section::Obj),
            "QCON" => Some(Section::Qcon),
            "LCON" => Some(Section::Lcon),
            "IND" => Some(Section::Ind),
            "END" => Some(Section::End),
            _ => None,
        };
        if let Some(next) = next {
            section = next;
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match section {
            Section::Vars => {
                let ty = match toks.as_slice() {
                    [_, "continuous"] => VarType::Continuous,
                    [_, "binary"] => VarType::Binary,
                    _ => return Err(err(format!("bad variable declaration '{line}'"))),
                };
                variables.push((toks[0].to_string(), ty));
            }
            Section::Obj => match toks.as_slice() {
                ["minimize", x, "*", y] => objective = Some((x.to_string(), y.to_string())),
                _ => return Err(err(format!("unsupported objective '{line}'"))),
            },
            Section::Qcon => match toks.as_slice() {
                ["u", v] => u = Some(num(v)?),
                ["r", rest @ ..] => {
                    r = Some(rest.iter().map(|v| num(v)).collect::<Result<_, _>>()?)
                }
                ["Q", i, j, v] => {
                    let idx = |s: &str| {
                        s.parse::<usize>()
                            .ok()
                            .filter(|&x| x >= 1)
                            .ok_or_else(|| err(format!("bad index '{s}'")))
                    };
                    q_entries.push((idx(i)? - 1, idx(j)? - 1, num(v)?));
                }
                _ => return Err(err(format!("unexpected QCON line '{line}'"))),
            },
            Section::Lcon => match toks.as_slice() {
                ["t0", v] => t0 = Some(num(v)?),
                ["t", rest @ ..] => {
                    t = Some(rest.iter().map(|v| num(v)).collect::<Result<_, _>>()?)
                }
                _ => return Err(err(format!("unexpected LCON line '{line}'"))),
            },
            Section::Ind => match toks.as_slice() {
                [b, "<->", a] => indicators.push((b.to_string(), a.to_string())),
                _ => return Err(err(format!("bad indicator '{line}'"))),
            },
            Section::None | Section::End => {
                return Err(err(format!("content outside a section: '{line}'")))
            }
        }
    }

    let missing = |what: &str| SelectionError::Parse {
        line: 0,
        message: format!("missing {what}"),
    };
    let r = r.ok_or_else(|| missing("r"))?;
    let j = r.len();
    let mut q = vec![vec![0.0; j]; j];
    for (a, b, v) in q_entries {
        if a >= j || b >= j {
            return Err(missing(&format!(
                "Q entry ({}, {}) within J = {j}",
                a + 1,
                b + 1
            )));
        }
        q[a][b] = v;
    }
    let t = t.ok_or_else(|| missing("t"))?;
    if t.len() != j {
        return Err(SelectionError::LengthMismatch {
            expected: j,
            got: t.len(),
        });
    }
    Ok(MiqcpProblem {
        variables,
        objective: objective.ok_or_else(|| missing("objective"))?,
        stats: SquaredNormStats {
            u: u.ok_or_else(|| missing("u"))?,
            r,
            q,
            m: 0,
        },
        profile: CostProfile {
            t0: t0.ok_or_else(|| missing("t0"))?,
            t,
        },
        indicators,
    })
}

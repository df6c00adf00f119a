//! Versioned plain-text file formats.
//!
//! Every artifact is a line-oriented UTF-8 file: `#` starts a comment line,
//! blank lines are ignored, tokens are whitespace-separated, and the file
//! opens with `format_version 1` / `kind <what>` and closes with `end`.
//! Floats are written in Rust's shortest round-trip form, so writing and
//! re-parsing reproduces values bit-exactly. `inf`/`-inf` are accepted only
//! for the `θ` box bounds; `NaN` is rejected everywhere.
//!
//! Formats:
//! - **form**: header scalars (`game`, `agents`, `vars_per_agent`,
//!   `theta_dim`, `ctx_dim`, `rows`), `eq_rows` indices, `θ` bounds, then
//!   named `matrix`/`vector` blocks (`r0`, `r_theta_<i>`, `c0`, `c0_mu`,
//!   `c_theta`, `a`, `b`, `b_mu`) and optional `mu_term <name> <k>` blocks
//!   for context-proportional matrix terms.
//! - **dataset**: header plus `points <K>` records of
//!   `point train|test` / `mu …` / `x …`.
//! - **graph**: node count, per-edge `edge <u> <v> <L row…>` lines, nominal
//!   `commodity <s> <t> <d>` lines, and the generating `theta_true`.
//! - **summary**: training config echo, counters, and the final `θ`.
//! - **problem** (write-only): diagnostic dump of one assembled QP.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::games::{Commodity, CongestionSpec, Datapoint, Dataset, DatasetMeta};
use crate::learner::{RunLog, StepSchedule, ThetaInit, TrainConfig};
use crate::model::{
    AffineGameForm, ContextVector, CtxMatrix, CtxVector, QuadraticPotentialProblem,
};
use crate::rules::RuleKind;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

// Allocation guards for untrusted input.
const MAX_DIM: usize = 65_536;
const MAX_CELLS: usize = 16_777_216;
const MAX_POINTS: usize = 1_000_000;

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
        }
    }

    /// Next non-blank, non-comment line as (1-based line number, tokens).
    fn next_content(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (idx, raw) in self.lines.by_ref() {
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Some((idx + 1, trimmed.split_whitespace().collect()));
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        self.next_content()
            .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
    }
}

fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| err(line, format!("invalid {what}: {tok:?}")))
}

fn parse_u64(tok: &str, line: usize, what: &str) -> Result<u64> {
    tok.parse::<u64>()
        .map_err(|_| err(line, format!("invalid {what}: {tok:?}")))
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v = tok
        .parse::<f64>()
        .map_err(|_| err(line, format!("invalid {what}: {tok:?}")))?;
    if v.is_nan() {
        return Err(err(line, format!("{what} must not be NaN")));
    }
    Ok(v)
}

fn parse_finite(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v = parse_f64(tok, line, what)?;
    if !v.is_finite() {
        return Err(err(line, format!("{what} must be finite, got {tok:?}")));
    }
    Ok(v)
}

fn check_dim(value: usize, line: usize, what: &str) -> Result<usize> {
    if value > MAX_DIM {
        return Err(err(line, format!("{what} {value} exceeds limit {MAX_DIM}")));
    }
    Ok(value)
}

fn parse_vector_line(tokens: &[&str], line: usize, what: &str) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        out[i] = parse_finite(tok, line, what)?;
    }
    Ok(out)
}

fn read_matrix(reader: &mut Reader, nr: usize, nc: usize, what: &str) -> Result<DMatrix<f64>> {
    if nr.saturating_mul(nc) > MAX_CELLS {
        return Err(err(0, format!("{what}: {nr}x{nc} exceeds the size limit")));
    }
    let mut m = DMatrix::zeros(nr, nc);
    for r in 0..nr {
        let (line, tokens) = reader.expect(&format!("row {r} of {what}"))?;
        if tokens.len() != nc {
            return Err(err(
                line,
                format!("{what} row {r}: expected {nc} values, got {}", tokens.len()),
            ));
        }
        for (c, tok) in tokens.iter().enumerate() {
            m[(r, c)] = parse_finite(tok, line, what)?;
        }
    }
    Ok(m)
}

fn read_preamble(reader: &mut Reader, kind: &str) -> Result<()> {
    let (line, tokens) = reader.expect("format_version")?;
    if tokens.len() != 2 || tokens[0] != "format_version" {
        return Err(err(line, "expected `format_version <n>` as the first line"));
    }
    let version = parse_usize(tokens[1], line, "format version")?;
    if version != FORMAT_VERSION as usize {
        return Err(err(line, format!("unsupported format version {version}")));
    }
    let (line, tokens) = reader.expect("kind")?;
    if tokens.len() != 2 || tokens[0] != "kind" {
        return Err(err(line, "expected `kind <what>`"));
    }
    if tokens[1] != kind {
        return Err(err(
            line,
            format!("expected kind {kind:?}, got {:?}", tokens[1]),
        ));
    }
    Ok(())
}

fn expect_end(reader: &mut Reader) -> Result<()> {
    match reader.next_content() {
        Some((_, tokens)) if tokens == ["end"] => match reader.next_content() {
            None => Ok(()),
            Some((extra, _)) => Err(err(extra, "content after `end`")),
        },
        Some((line, _)) => Err(err(line, "expected `end`")),
        None => Err(err(0, "missing `end`")),
    }
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_matrix_block(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

// ---------------------------------------------------------------------------
// Form files
// ---------------------------------------------------------------------------

pub fn write_form(form: &AffineGameForm) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format_version {FORMAT_VERSION}");
    let _ = writeln!(out, "kind form");
    let _ = writeln!(out, "game {}", form.game);
    let _ = writeln!(out, "agents {}", form.agents);
    let _ = writeln!(out, "vars_per_agent {}", form.vars_per_agent);
    let _ = writeln!(out, "theta_dim {}", form.theta_dim());
    let _ = writeln!(out, "ctx_dim {}", form.ctx_dim);
    let _ = writeln!(out, "rows {}", form.num_rows());
    let eq: Vec<String> = form.eq_rows.iter().map(|r| r.to_string()).collect();
    let _ = writeln!(out, "eq_rows {}", eq.join(" "));
    let _ = writeln!(out, "theta_lower {}", fmt_vec(&form.theta_lower));
    let _ = writeln!(out, "theta_upper {}", fmt_vec(&form.theta_upper));
    write_matrix_block(&mut out, "r0", &form.r0.base);
    for (i, ri) in form.r_theta.iter().enumerate() {
        write_matrix_block(&mut out, &format!("r_theta_{i}"), &ri.base);
    }
    let _ = writeln!(out, "vector c0 {}", form.c0.base.len());
    let _ = writeln!(out, "{}", fmt_vec(&form.c0.base));
    if let Some(coeff) = &form.c0.coeff {
        write_matrix_block(&mut out, "c0_mu", coeff);
    }
    write_matrix_block(&mut out, "c_theta", &form.c_theta.base);
    write_matrix_block(&mut out, "a", &form.a.base);
    let _ = writeln!(out, "vector b {}", form.b.base.len());
    let _ = writeln!(out, "{}", fmt_vec(&form.b.base));
    if let Some(coeff) = &form.b.coeff {
        write_matrix_block(&mut out, "b_mu", coeff);
    }
    for (name, ctx) in [("r0", &form.r0), ("c_theta", &form.c_theta), ("a", &form.a)] {
        for (k, term) in &ctx.terms {
            let _ = writeln!(out, "mu_term {name} {k} {} {}", term.nrows(), term.ncols());
            for r in 0..term.nrows() {
                let row: Vec<String> = (0..term.ncols())
                    .map(|c| term[(r, c)].to_string())
                    .collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
    }
    for (i, ri) in form.r_theta.iter().enumerate() {
        for (k, term) in &ri.terms {
            let _ = writeln!(
                out,
                "mu_term r_theta_{i} {k} {} {}",
                term.nrows(),
                term.ncols()
            );
            for r in 0..term.nrows() {
                let row: Vec<String> = (0..term.ncols())
                    .map(|c| term[(r, c)].to_string())
                    .collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
    }
    out.push_str("end\n");
    out
}

pub fn parse_form(text: &str) -> Result<AffineGameForm> {
    let mut reader = Reader::new(text);
    read_preamble(&mut reader, "form")?;

    let mut game = None;
    let mut agents = None;
    let mut vars_per_agent = None;
    let mut theta_dim = None;
    let mut ctx_dim = None;
    let mut rows = None;
    let mut eq_rows: Option<BTreeSet<usize>> = None;
    let mut theta_lower = None;
    let mut theta_upper = None;
    let mut matrices: std::collections::BTreeMap<String, DMatrix<f64>> = Default::default();
    let mut vectors: std::collections::BTreeMap<String, DVector<f64>> = Default::default();
    let mut mu_terms: Vec<(String, usize, DMatrix<f64>)> = Vec::new();

    loop {
        let (line, tokens) = reader.expect("form body")?;
        match tokens[0] {
            "end" => {
                if reader.next_content().is_some() {
                    return Err(err(line + 1, "content after `end`"));
                }
                break;
            }
            "game" => {
                if tokens.len() != 2 {
                    return Err(err(line, "expected `game <tag>`"));
                }
                game = Some(tokens[1].to_string());
            }
            "agents" => {
                agents = Some(check_dim(
                    parse_usize(tokens.get(1).copied().unwrap_or(""), line, "agents")?,
                    line,
                    "agents",
                )?)
            }
            "vars_per_agent" => {
                vars_per_agent = Some(check_dim(
                    parse_usize(tokens.get(1).copied().unwrap_or(""), line, "vars_per_agent")?,
                    line,
                    "vars_per_agent",
                )?)
            }
            "theta_dim" => {
                theta_dim = Some(check_dim(
                    parse_usize(tokens.get(1).copied().unwrap_or(""), line, "theta_dim")?,
                    line,
                    "theta_dim",
                )?)
            }
            "ctx_dim" => {
                ctx_dim = Some(check_dim(
                    parse_usize(tokens.get(1).copied().unwrap_or(""), line, "ctx_dim")?,
                    line,
                    "ctx_dim",
                )?)
            }
            "rows" => {
                rows = Some(check_dim(
                    parse_usize(tokens.get(1).copied().unwrap_or(""), line, "rows")?,
                    line,
                    "rows",
                )?)
            }
            "eq_rows" => {
                let mut set = BTreeSet::new();
                for tok in &tokens[1..] {
                    set.insert(parse_usize(tok, line, "eq_rows index")?);
                }
                eq_rows = Some(set);
            }
            "theta_lower" => {
                let mut v = DVector::zeros(tokens.len() - 1);
                for (i, tok) in tokens[1..].iter().enumerate() {
                    v[i] = parse_f64(tok, line, "theta_lower")?;
                }
                theta_lower = Some(v);
            }
            "theta_upper" => {
                let mut v = DVector::zeros(tokens.len() - 1);
                for (i, tok) in tokens[1..].iter().enumerate() {
                    v[i] = parse_f64(tok, line, "theta_upper")?;
                }
                theta_upper = Some(v);
            }
            "matrix" => {
                if tokens.len() != 4 {
                    return Err(err(line, "expected `matrix <name> <rows> <cols>`"));
                }
                let name = tokens[1].to_string();
                let nr = check_dim(parse_usize(tokens[2], line, "matrix rows")?, line, "rows")?;
                let nc = check_dim(parse_usize(tokens[3], line, "matrix cols")?, line, "cols")?;
                let m = read_matrix(&mut reader, nr, nc, &name)?;
                if matrices.insert(name.clone(), m).is_some() {
                    return Err(err(line, format!("duplicate matrix {name:?}")));
                }
            }
            "vector" => {
                if tokens.len() != 3 {
                    return Err(err(line, "expected `vector <name> <len>`"));
                }
                let name = tokens[1].to_string();
                let len = check_dim(parse_usize(tokens[2], line, "vector length")?, line, "len")?;
                let (vline, vtokens) = reader.expect(&format!("values of {name}"))?;
                if vtokens.len() != len {
                    return Err(err(
                        vline,
                        format!("{name}: expected {len} values, got {}", vtokens.len()),
                    ));
                }
                let v = parse_vector_line(&vtokens, vline, &name)?;
                if vectors.insert(name.clone(), v).is_some() {
                    return Err(err(line, format!("duplicate vector {name:?}")));
                }
            }
            "mu_term" => {
                if tokens.len() != 5 {
                    return Err(err(line, "expected `mu_term <name> <k> <rows> <cols>`"));
                }
                let name = tokens[1].to_string();
                let k = parse_usize(tokens[2], line, "context index")?;
                let nr = check_dim(parse_usize(tokens[3], line, "mu_term rows")?, line, "rows")?;
                let nc = check_dim(parse_usize(tokens[4], line, "mu_term cols")?, line, "cols")?;
                let m = read_matrix(&mut reader, nr, nc, &name)?;
                mu_terms.push((name, k, m));
            }
            other => return Err(err(line, format!("unknown directive {other:?}"))),
        }
    }

    let game = game.ok_or_else(|| err(0, "missing `game`"))?;
    let agents = agents.ok_or_else(|| err(0, "missing `agents`"))?;
    let vars_per_agent = vars_per_agent.ok_or_else(|| err(0, "missing `vars_per_agent`"))?;
    let theta_dim = theta_dim.ok_or_else(|| err(0, "missing `theta_dim`"))?;
    let ctx_dim = ctx_dim.ok_or_else(|| err(0, "missing `ctx_dim`"))?;
    let rows = rows.ok_or_else(|| err(0, "missing `rows`"))?;
    let eq_rows = eq_rows.unwrap_or_default();
    if agents
        .checked_mul(vars_per_agent)
        .is_none_or(|v| v > MAX_DIM)
    {
        return Err(err(0, "agents * vars_per_agent too large"));
    }

    let mut take_mat = |name: &str| -> Result<DMatrix<f64>> {
        matrices
            .remove(name)
            .ok_or_else(|| err(0, format!("missing matrix {name:?}")))
    };
    let r0_base = take_mat("r0")?;
    let mut r_theta: Vec<CtxMatrix> = Vec::with_capacity(theta_dim);
    for i in 0..theta_dim {
        r_theta.push(CtxMatrix::constant(take_mat(&format!("r_theta_{i}"))?));
    }
    let c_theta_base = take_mat("c_theta")?;
    let a_base = take_mat("a")?;
    let c0_mu = matrices.remove("c0_mu");
    let b_mu = matrices.remove("b_mu");
    if let Some(name) = matrices.keys().next() {
        return Err(err(0, format!("unexpected matrix {name:?}")));
    }
    let c0_base = vectors
        .remove("c0")
        .ok_or_else(|| err(0, "missing vector \"c0\""))?;
    let b_base = vectors
        .remove("b")
        .ok_or_else(|| err(0, "missing vector \"b\""))?;
    if let Some(name) = vectors.keys().next() {
        return Err(err(0, format!("unexpected vector {name:?}")));
    }

    let mut r0 = CtxMatrix::constant(r0_base);
    let mut c_theta = CtxMatrix::constant(c_theta_base);
    let mut a = CtxMatrix::constant(a_base);
    for (name, k, m) in mu_terms {
        let target = match name.as_str() {
            "r0" => &mut r0,
            "c_theta" => &mut c_theta,
            "a" => &mut a,
            other => {
                let Some(rest) = other.strip_prefix("r_theta_") else {
                    return Err(err(0, format!("mu_term for unknown block {other:?}")));
                };
                let i = rest
                    .parse::<usize>()
                    .map_err(|_| err(0, format!("mu_term for unknown block {other:?}")))?;
                r_theta
                    .get_mut(i)
                    .ok_or_else(|| err(0, format!("mu_term index {i} out of range")))?
            }
        };
        target.terms.push((k, m));
    }

    let form = AffineGameForm {
        game,
        agents,
        vars_per_agent,
        ctx_dim,
        r0,
        r_theta,
        c0: CtxVector {
            base: c0_base,
            coeff: c0_mu,
        },
        c_theta,
        a,
        b: CtxVector {
            base: b_base,
            coeff: b_mu,
        },
        eq_rows,
        theta_lower: theta_lower.ok_or_else(|| err(0, "missing `theta_lower`"))?,
        theta_upper: theta_upper.ok_or_else(|| err(0, "missing `theta_upper`"))?,
    };
    if form.num_rows() != rows {
        return Err(err(
            0,
            format!(
                "declared rows {rows} disagree with constraint matrix ({})",
                form.num_rows()
            ),
        ));
    }
    form.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(form)
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

pub fn write_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format_version {FORMAT_VERSION}");
    let _ = writeln!(out, "kind dataset");
    let _ = writeln!(out, "game {}", ds.meta.game);
    let _ = writeln!(out, "agents {}", ds.meta.agents);
    let _ = writeln!(out, "vars_per_agent {}", ds.meta.vars_per_agent);
    let _ = writeln!(out, "theta_dim {}", ds.meta.theta_dim);
    let _ = writeln!(out, "ctx_dim {}", ds.meta.ctx_dim);
    let _ = writeln!(out, "sigma {}", ds.meta.sigma);
    let _ = writeln!(out, "seed {}", ds.meta.seed);
    if let Some(theta) = &ds.theta_true {
        let _ = writeln!(out, "theta_true {}", fmt_vec(theta));
    }
    let _ = writeln!(out, "points {}", ds.points.len());
    for (i, point) in ds.points.iter().enumerate() {
        let tag = if ds.test_idx.contains(&i) {
            "test"
        } else {
            "train"
        };
        let _ = writeln!(out, "point {tag}");
        let _ = writeln!(out, "mu {}", fmt_vec(&point.mu.mu));
        let _ = writeln!(out, "x {}", fmt_vec(&point.x_obs));
    }
    out.push_str("end\n");
    out
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut reader = Reader::new(text);
    read_preamble(&mut reader, "dataset")?;

    let mut game = None;
    let mut agents = None;
    let mut vars_per_agent = None;
    let mut theta_dim = None;
    let mut ctx_dim = None;
    let mut sigma = None;
    let mut seed = None;
    let mut theta_true = None;

    let count;
    loop {
        let (line, tokens) = reader.expect("dataset header")?;
        match tokens[0] {
            "game" => game = Some(tokens.get(1).unwrap_or(&"").to_string()),
            "agents" => {
                agents = Some(check_dim(
                    parse_usize(tokens.get(1).copied().unwrap_or(""), line, "agents")?,
                    line,
                    "agents",
                )?)
            }
            "vars_per_agent" => {
                vars_per_agent = Some(check_dim(
                    parse_usize(tokens.get(1).copied().unwrap_or(""), line, "vars_per_agent")?,
                    line,
                    "vars_per_agent",
                )?)
            }
            "theta_dim" => {
                theta_dim = Some(check_dim(
                    parse_usize(tokens.get(1).copied().unwrap_or(""), line, "theta_dim")?,
                    line,
                    "theta_dim",
                )?)
            }
            "ctx_dim" => {
                ctx_dim = Some(check_dim(
                    parse_usize(tokens.get(1).copied().unwrap_or(""), line, "ctx_dim")?,
                    line,
                    "ctx_dim",
                )?)
            }
            "sigma" => {
                sigma = Some(parse_finite(
                    tokens.get(1).copied().unwrap_or(""),
                    line,
                    "sigma",
                )?)
            }
            "seed" => {
                seed = Some(parse_u64(
                    tokens.get(1).copied().unwrap_or(""),
                    line,
                    "seed",
                )?)
            }
            "theta_true" => theta_true = Some(parse_vector_line(&tokens[1..], line, "theta_true")?),
            "points" => {
                count = parse_usize(tokens.get(1).copied().unwrap_or(""), line, "points")?;
                if count > MAX_POINTS {
                    return Err(err(line, format!("point count {count} exceeds limit")));
                }
                break;
            }
            other => return Err(err(line, format!("unknown directive {other:?}"))),
        }
    }

    let game = game.ok_or_else(|| err(0, "missing `game`"))?;
    let agents = agents.ok_or_else(|| err(0, "missing `agents`"))?;
    let vars_per_agent = vars_per_agent.ok_or_else(|| err(0, "missing `vars_per_agent`"))?;
    let theta_dim = theta_dim.ok_or_else(|| err(0, "missing `theta_dim`"))?;
    let ctx_dim = ctx_dim.ok_or_else(|| err(0, "missing `ctx_dim`"))?;
    let nm = agents
        .checked_mul(vars_per_agent)
        .filter(|v| *v <= MAX_DIM)
        .ok_or_else(|| err(0, "agents * vars_per_agent too large"))?;
    if let Some(t) = &theta_true {
        if t.len() != theta_dim {
            return Err(err(0, "theta_true length disagrees with theta_dim"));
        }
    }

    let mut points = Vec::with_capacity(count.min(4096));
    let mut test_idx = BTreeSet::new();
    for i in 0..count {
        let (line, tokens) = reader.expect("point record")?;
        if tokens.len() != 2 || tokens[0] != "point" {
            return Err(err(line, "expected `point train|test`"));
        }
        match tokens[1] {
            "train" => {}
            "test" => {
                test_idx.insert(i);
            }
            other => return Err(err(line, format!("unknown split tag {other:?}"))),
        }
        let (mline, mtokens) = reader.expect("mu line")?;
        if mtokens.first() != Some(&"mu") || mtokens.len() != ctx_dim + 1 {
            return Err(err(mline, format!("expected `mu` with {ctx_dim} values")));
        }
        let mu = parse_vector_line(&mtokens[1..], mline, "mu")?;
        let (xline, xtokens) = reader.expect("x line")?;
        if xtokens.first() != Some(&"x") || xtokens.len() != nm + 1 {
            return Err(err(xline, format!("expected `x` with {nm} values")));
        }
        let x_obs = parse_vector_line(&xtokens[1..], xline, "x")?;
        points.push(Datapoint {
            mu: ContextVector::new(mu),
            x_obs,
        });
    }
    expect_end(&mut reader)?;

    Ok(Dataset {
        meta: DatasetMeta {
            game,
            agents,
            vars_per_agent,
            theta_dim,
            ctx_dim,
            sigma: sigma.ok_or_else(|| err(0, "missing `sigma`"))?,
            seed: seed.ok_or_else(|| err(0, "missing `seed`"))?,
        },
        points,
        test_idx,
        theta_true,
    })
}

// ---------------------------------------------------------------------------
// Graph files
// ---------------------------------------------------------------------------

pub fn write_graph(spec: &CongestionSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format_version {FORMAT_VERSION}");
    let _ = writeln!(out, "kind graph");
    let _ = writeln!(out, "nodes {}", spec.nodes);
    let _ = writeln!(out, "theta_dim {}", spec.theta_dim());
    let _ = writeln!(out, "edges {}", spec.edges.len());
    for (e, (u, v)) in spec.edges.iter().enumerate() {
        let l_row: Vec<String> = (0..spec.theta_dim())
            .map(|j| spec.l_factors[(e, j)].to_string())
            .collect();
        let _ = writeln!(out, "edge {u} {v} {}", l_row.join(" "));
    }
    for c in &spec.commodities {
        let _ = writeln!(out, "commodity {} {} {}", c.source, c.target, c.demand);
    }
    let _ = writeln!(out, "theta_true {}", fmt_vec(&spec.theta_true));
    out.push_str("end\n");
    out
}

pub fn parse_graph(text: &str) -> Result<CongestionSpec> {
    let mut reader = Reader::new(text);
    read_preamble(&mut reader, "graph")?;

    let (line, tokens) = reader.expect("nodes")?;
    if tokens.len() != 2 || tokens[0] != "nodes" {
        return Err(err(line, "expected `nodes <n>`"));
    }
    let nodes = check_dim(parse_usize(tokens[1], line, "nodes")?, line, "nodes")?;
    let (line, tokens) = reader.expect("theta_dim")?;
    if tokens.len() != 2 || tokens[0] != "theta_dim" {
        return Err(err(line, "expected `theta_dim <p>`"));
    }
    let theta_dim = check_dim(
        parse_usize(tokens[1], line, "theta_dim")?,
        line,
        "theta_dim",
    )?;
    let (line, tokens) = reader.expect("edges")?;
    if tokens.len() != 2 || tokens[0] != "edges" {
        return Err(err(line, "expected `edges <count>`"));
    }
    let edge_count = check_dim(parse_usize(tokens[1], line, "edges")?, line, "edges")?;
    if edge_count.saturating_mul(theta_dim) > MAX_CELLS {
        return Err(err(line, "edge factor table exceeds the size limit"));
    }

    let mut edges = Vec::with_capacity(edge_count.min(4096));
    let mut l = DMatrix::zeros(edge_count, theta_dim);
    for e in 0..edge_count {
        let (line, tokens) = reader.expect("edge line")?;
        if tokens.first() != Some(&"edge") || tokens.len() != 3 + theta_dim {
            return Err(err(
                line,
                format!("expected `edge <u> <v>` with {theta_dim} factors"),
            ));
        }
        let u = parse_usize(tokens[1], line, "edge tail")?;
        let v = parse_usize(tokens[2], line, "edge head")?;
        if u >= nodes || v >= nodes {
            return Err(err(line, format!("edge ({u}, {v}) out of range")));
        }
        edges.push((u, v));
        for j in 0..theta_dim {
            l[(e, j)] = parse_finite(tokens[3 + j], line, "edge factor")?;
        }
    }

    let mut commodities = Vec::new();
    let mut theta_true = None;
    loop {
        let (line, tokens) = reader.expect("graph trailer")?;
        match tokens[0] {
            "commodity" => {
                if tokens.len() != 4 {
                    return Err(err(line, "expected `commodity <s> <t> <d>`"));
                }
                let source = parse_usize(tokens[1], line, "commodity source")?;
                let target = parse_usize(tokens[2], line, "commodity target")?;
                if source >= nodes || target >= nodes {
                    return Err(err(line, "commodity endpoint out of range"));
                }
                commodities.push(Commodity {
                    source,
                    target,
                    demand: parse_finite(tokens[3], line, "commodity demand")?,
                });
                if commodities.len() > MAX_DIM {
                    return Err(err(line, "too many commodities"));
                }
            }
            "theta_true" => {
                if tokens.len() != theta_dim + 1 {
                    return Err(err(line, format!("theta_true needs {theta_dim} values")));
                }
                theta_true = Some(parse_vector_line(&tokens[1..], line, "theta_true")?);
            }
            "end" => {
                if reader.next_content().is_some() {
                    return Err(err(line + 1, "content after `end`"));
                }
                break;
            }
            other => return Err(err(line, format!("unknown directive {other:?}"))),
        }
    }

    Ok(CongestionSpec {
        nodes,
        edges,
        l_factors: l,
        commodities,
        theta_true: theta_true.ok_or_else(|| err(0, "missing `theta_true`"))?,
    })
}

// ---------------------------------------------------------------------------
// Summary files
// ---------------------------------------------------------------------------

fn schedule_tag(s: StepSchedule) -> &'static str {
    match s {
        StepSchedule::Constant => "constant",
        StepSchedule::InvSqrt => "sqrt",
        StepSchedule::Inv => "linear",
    }
}

fn rule_tag(r: RuleKind) -> &'static str {
    match r {
        RuleKind::Rule1 => "rule1",
        RuleKind::Rule2 => "rule2",
    }
}

pub fn write_summary(log: &RunLog, config: &TrainConfig, game: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format_version {FORMAT_VERSION}");
    let _ = writeln!(out, "kind summary");
    let _ = writeln!(out, "game {game}");
    let _ = writeln!(out, "seed {}", log.seed);
    let _ = writeln!(out, "iterations {}", config.iterations);
    let _ = writeln!(out, "eta0 {}", config.eta0);
    let _ = writeln!(out, "schedule {}", schedule_tag(config.schedule));
    let _ = writeln!(out, "rule {}", rule_tag(config.rule));
    let _ = writeln!(out, "epsilon {}", config.epsilon_scale);
    let _ = writeln!(out, "batch_size {}", config.batch_size);
    let _ = writeln!(out, "eval_every {}", config.eval_every);
    let _ = writeln!(out, "kkt_tol {}", config.kkt_tol);
    let _ = writeln!(out, "act_tol {}", config.act_tol);
    let _ = writeln!(out, "grad_clip {}", config.grad_clip);
    match &config.theta_init {
        ThetaInit::Random => {
            let _ = writeln!(out, "theta_init random");
        }
        ThetaInit::Given(v) => {
            let _ = writeln!(out, "theta_init given {}", fmt_vec(v));
        }
    }
    let _ = writeln!(out, "theta_final {}", fmt_vec(&log.final_theta));
    if let Some(last) = log.records.last() {
        let _ = writeln!(out, "last_train_loss {}", last.train_loss);
        let _ = writeln!(out, "last_test_error {}", last.test_error);
    }
    let _ = writeln!(out, "grad_clips {}", log.grad_clips);
    let _ = writeln!(out, "projection_clips {}", log.projection_clips);
    let _ = writeln!(out, "degeneracy_events {}", log.events.len());
    let _ = writeln!(out, "total_wall_ms {}", log.total_wall_ms);
    out.push_str("end\n");
    out
}

/// The subset of a summary file other commands consume.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryFile {
    pub game: String,
    pub seed: u64,
    pub theta_final: DVector<f64>,
}

pub fn parse_summary(text: &str) -> Result<SummaryFile> {
    let mut reader = Reader::new(text);
    read_preamble(&mut reader, "summary")?;
    let mut game = None;
    let mut seed = None;
    let mut theta_final = None;
    loop {
        let Some((line, tokens)) = reader.next_content() else {
            return Err(err(0, "missing `end`"));
        };
        match tokens[0] {
            "end" => break,
            "game" => game = Some(tokens.get(1).unwrap_or(&"").to_string()),
            "seed" => {
                seed = Some(parse_u64(
                    tokens.get(1).copied().unwrap_or(""),
                    line,
                    "seed",
                )?)
            }
            "theta_final" => {
                if tokens.len() > MAX_DIM {
                    return Err(err(line, "theta_final too long"));
                }
                theta_final = Some(parse_vector_line(&tokens[1..], line, "theta_final")?);
            }
            // Config echo lines are informational for this consumer.
            _ => continue,
        }
    }
    Ok(SummaryFile {
        game: game.ok_or_else(|| err(0, "missing `game`"))?,
        seed: seed.ok_or_else(|| err(0, "missing `seed`"))?,
        theta_final: theta_final.ok_or_else(|| err(0, "missing `theta_final`"))?,
    })
}

// ---------------------------------------------------------------------------
// Diagnostic problem dumps
// ---------------------------------------------------------------------------

/// One-shot diagnostic dump of an assembled problem, written next to the run
/// artifacts when a solve fails.
pub fn write_problem_dump(problem: &QuadraticPotentialProblem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format_version {FORMAT_VERSION}");
    let _ = writeln!(out, "kind problem");
    let _ = writeln!(out, "agents {}", problem.agents);
    let _ = writeln!(out, "vars_per_agent {}", problem.vars_per_agent);
    let _ = writeln!(out, "rows {}", problem.num_rows());
    let eq: Vec<String> = problem.eq_rows.iter().map(|r| r.to_string()).collect();
    let _ = writeln!(out, "eq_rows {}", eq.join(" "));
    write_matrix_block(&mut out, "r", &problem.r);
    let _ = writeln!(out, "vector c {}", problem.c.len());
    let _ = writeln!(out, "{}", fmt_vec(&problem.c));
    write_matrix_block(&mut out, "a", &problem.a);
    let _ = writeln!(out, "vector b {}", problem.b.len());
    let _ = writeln!(out, "{}", fmt_vec(&problem.b));
    out.push_str("end\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::congestion_form;
    use crate::games::{cournot_form, generate_dataset, sample_congestion_spec, CournotSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cournot_form_round_trips() {
        let form = cournot_form(3);
        let text = write_form(&form);
        let parsed = parse_form(&text).unwrap();
        assert_eq!(form, parsed);
        // Bit-exact rewrite.
        assert_eq!(text, write_form(&parsed));
    }

    #[test]
    fn congestion_form_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = sample_congestion_spec(5, 0.5, 2, 2, &mut rng).unwrap();
        let form = congestion_form(&spec).unwrap();
        let text = write_form(&form);
        let parsed = parse_form(&text).unwrap();
        assert_eq!(form, parsed);
    }

    #[test]
    fn dataset_round_trips_with_split_and_theta_true() {
        let spec = CournotSpec::new(3, 1.1, 0.7);
        let form = spec.form();
        let theta = form.rationality(spec.theta_true.clone());
        let ds = generate_dataset(&form, &theta, spec.context_sampler(), 20, 0.1, 5).unwrap();
        let text = write_dataset(&ds);
        let parsed = parse_dataset(&text).unwrap();
        assert_eq!(ds, parsed);
    }

    #[test]
    fn graph_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let spec = sample_congestion_spec(6, 0.4, 3, 2, &mut rng).unwrap();
        let text = write_graph(&spec);
        let parsed = parse_graph(&text).unwrap();
        assert_eq!(spec, parsed);
    }

    #[test]
    fn summary_round_trips_theta_final() {
        let config = TrainConfig::default();
        let log = RunLog {
            records: Vec::new(),
            events: Vec::new(),
            trajectory: Vec::new(),
            final_theta: DVector::from_row_slice(&[1.25, 0.875]),
            grad_clips: 1,
            projection_clips: 2,
            total_wall_ms: 12.5,
            seed: 9,
        };
        let text = write_summary(&log, &config, "cournot");
        let parsed = parse_summary(&text).unwrap();
        assert_eq!(parsed.game, "cournot");
        assert_eq!(parsed.seed, 9);
        assert_eq!(parsed.theta_final, log.final_theta);
    }

    #[test]
    fn malformed_inputs_are_rejected_with_line_numbers() {
        // Wrong version.
        let e = parse_form("format_version 99\nkind form\nend\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        // Wrong kind.
        let e = parse_form("format_version 1\nkind dataset\nend\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        // NaN rejected.
        let text =
            write_form(&cournot_form(2)).replace("theta_upper inf inf", "theta_upper NaN inf");
        let e = parse_form(&text).unwrap_err();
        assert!(e.to_string().contains("NaN"), "{e}");
        // Non-finite matrix entry rejected.
        let text = "format_version 1\nkind form\ngame g\nagents 1\nvars_per_agent 1\n\
                    theta_dim 1\nctx_dim 1\nrows 0\neq_rows\ntheta_lower 0\ntheta_upper 1\n\
                    matrix r0 1 1\ninf\nend\n";
        let e = parse_form(text).unwrap_err();
        assert!(e.to_string().contains("finite"), "{e}");
        // Truncated matrix.
        let full = write_form(&cournot_form(2));
        let cut = &full[..full.find("matrix c_theta").unwrap()];
        assert!(parse_form(cut).is_err());
        // Oversized dimensions rejected before allocation.
        let bomb = "format_version 1\nkind dataset\ngame g\nagents 999999999\n";
        let e = parse_dataset(bomb).unwrap_err();
        assert!(
            e.to_string().contains("limit") || e.to_string().contains("large"),
            "{e}"
        );
        // Content after end.
        let trailing = format!("{}junk\n", write_form(&cournot_form(2)));
        assert!(parse_form(&trailing).is_err());
    }

    #[test]
    fn problem_dump_is_well_formed_text() {
        let form = cournot_form(2);
        let theta = form.rationality(DVector::from_row_slice(&[1.0, 1.0]));
        let mu = ContextVector::new(DVector::zeros(2));
        let problem = form.assemble(&theta, &mu).unwrap();
        let dump = write_problem_dump(&problem);
        assert!(dump.starts_with("format_version 1\nkind problem\n"));
        assert!(dump.ends_with("end\n"));
        assert!(dump.contains("matrix r 2 2"));
    }

    proptest! {
        /// Random small Cournot-shaped forms survive a write/parse round trip.
        #[test]
        fn random_forms_round_trip(
            n in 2usize..5,
            scale in 0.1f64..3.0,
            seed in 0u64..50,
        ) {
            let mut form = cournot_form(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            form.r0 = CtxMatrix::constant(
                DMatrix::from_fn(n, n, |i, j| if i == j { scale } else { 0.0 }));
            use rand::Rng;
            form.c0.base = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let text = write_form(&form);
            let parsed = parse_form(&text).unwrap();
            prop_assert_eq!(form, parsed);
        }

        /// Random datasets survive a write/parse round trip.
        #[test]
        fn random_datasets_round_trip(count in 1usize..12, sigma in 0.0f64..0.3, seed in 0u64..20) {
            let spec = CournotSpec::new(2, 1.0, 1.0);
            let form = spec.form();
            let theta = form.rationality(spec.theta_true.clone());
            let ds = generate_dataset(&form, &theta, spec.context_sampler(), count, sigma, seed).unwrap();
            let parsed = parse_dataset(&write_dataset(&ds)).unwrap();
            prop_assert_eq!(ds, parsed);
        }
    }
}

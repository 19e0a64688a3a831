use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::spline::{default_knots, spline_basis};
use crate::error::{DtrError, Result};

/// Named numeric columns of equal length. Categorical variables are stored as
/// integer codes.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    n: usize,
    cols: BTreeMap<String, Vec<f64>>,
}

impl Frame {
    pub fn new(n: usize) -> Frame {
        Frame { n, cols: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) {
        assert_eq!(values.len(), self.n, "column length mismatch");
        self.cols.insert(name.into(), values);
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.cols
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| DtrError::Config(format!("unknown covariate `{name}`")))
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.cols.keys()
    }

    /// Frame restricted to the given row indices.
    pub fn select(&self, rows: &[usize]) -> Frame {
        Frame {
            n: rows.len(),
            cols: self.cols.iter().map(|(k, v)| (k.clone(), rows.iter().map(|&i| v[i]).collect())).collect(),
        }
    }
}

/// One covariate constructor in a design. Serialized in its text form, e.g.
/// `bins(marker; 0,28; 36,inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Term {
    Intercept,
    Numeric(String),
    /// Indicators for every level except the reference (the first level unless given).
    Categorical { var: String, levels: Option<Vec<i64>>, reference: Option<i64> },
    /// Indicators for every level, no reference (used without an intercept).
    Indicators { var: String, levels: Option<Vec<i64>> },
    /// Indicators for `lo < x <= hi`.
    Bins { var: String, edges: Vec<(f64, f64)> },
    /// Natural cubic spline; knots default to data quantiles.
    Spline { var: String, knots: Option<Vec<f64>> },
    Interaction(Box<Term>, Box<Term>),
}

fn fmt_f(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x}")
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join_i = |v: &[i64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match self {
            Term::Intercept => write!(f, "1"),
            Term::Numeric(v) => write!(f, "{v}"),
            Term::Categorical { var, levels, reference } => {
                write!(f, "cat({var}")?;
                if let Some(l) = levels {
                    write!(f, "; levels={}", join_i(l))?;
                }
                if let Some(r) = reference {
                    write!(f, "; ref={r}")?;
                }
                write!(f, ")")
            }
            Term::Indicators { var, levels } => match levels {
                Some(l) => write!(f, "ind({var}; levels={})", join_i(l)),
                None => write!(f, "ind({var})"),
            },
            Term::Bins { var, edges } => {
                write!(f, "bins({var}")?;
                for (lo, hi) in edges {
                    write!(f, "; {},{}", fmt_f(*lo), fmt_f(*hi))?;
                }
                write!(f, ")")
            }
            Term::Spline { var, knots } => match knots {
                Some(k) => write!(f, "ns({var}; {})", k.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(",")),
                None => write!(f, "ns({var})"),
            },
            Term::Interaction(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

fn parse_num(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t.parse().map_err(|_| DtrError::Config(format!("bad number `{t}` in term"))),
    }
}

fn parse_ints(s: &str) -> Result<Vec<i64>> {
    s.split(',')
        .map(|x| x.trim().parse::<i64>().map_err(|_| DtrError::Config(format!("bad level `{x}`"))))
        .collect()
}

impl From<Term> for String {
    fn from(t: Term) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Term {
    type Error = DtrError;
    fn try_from(s: String) -> Result<Term> {
        s.parse()
    }
}

impl std::str::FromStr for Term {
    type Err = DtrError;

    /// Grammar: `1`, `name`, `cat(name[; levels=a,b][; ref=r])`, `ind(name[; levels=..])`,
    /// `bins(name; lo,hi; lo,hi ...)`, `ns(name[; k1,k2,...])`, and `a:b` for products.
    fn from_str(s: &str) -> Result<Term> {
        let s = s.trim();
        let mut depth = 0;
        for (i, c) in s.char_indices() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                ':' if depth == 0 => {
                    return Ok(Term::Interaction(Box::new(s[..i].parse()?), Box::new(s[i + 1..].parse()?)));
                }
                _ => {}
            }
        }
        if s == "1" {
            return Ok(Term::Intercept);
        }
        let Some(open) = s.find('(') else {
            if s.is_empty() || !s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') {
                return Err(DtrError::Config(format!("bad term `{s}`")));
            }
            return Ok(Term::Numeric(s.to_string()));
        };
        if !s.ends_with(')') {
            return Err(DtrError::Config(format!("unbalanced term `{s}`")));
        }
        let func = &s[..open];
        let mut parts = s[open + 1..s.len() - 1].split(';').map(str::trim);
        let var = parts.next().unwrap_or("").to_string();
        if var.is_empty() {
            return Err(DtrError::Config(format!("term `{s}` names no variable")));
        }
        let rest: Vec<&str> = parts.collect();
        match func {
            "cat" => {
                let mut levels = None;
                let mut reference = None;
                for p in rest {
                    if let Some(l) = p.strip_prefix("levels=") {
                        levels = Some(parse_ints(l)?);
                    } else if let Some(r) = p.strip_prefix("ref=") {
                        reference = Some(parse_ints(r)?[0]);
                    } else {
                        return Err(DtrError::Config(format!("unknown option `{p}` in `{s}`")));
                    }
                }
                Ok(Term::Categorical { var, levels, reference })
            }
            "ind" => {
                let levels = match rest.first() {
                    Some(p) => Some(parse_ints(p.strip_prefix("levels=").unwrap_or(p))?),
                    None => None,
                };
                Ok(Term::Indicators { var, levels })
            }
            "bins" => {
                let edges = rest
                    .iter()
                    .map(|p| {
                        let (a, b) = p.split_once(',').ok_or_else(|| DtrError::Config(format!("bin `{p}` needs lo,hi")))?;
                        Ok((parse_num(a)?, parse_num(b)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if edges.is_empty() {
                    return Err(DtrError::Config(format!("`{s}` declares no bins")));
                }
                Ok(Term::Bins { var, edges })
            }
            "ns" => {
                let knots = match rest.first() {
                    Some(p) => Some(p.split(',').map(parse_num).collect::<Result<Vec<_>>>()?),
                    None => None,
                };
                Ok(Term::Spline { var, knots })
            }
            _ => Err(DtrError::Config(format!("unknown term function `{func}`"))),
        }
    }
}

fn levels_of(values: &[f64]) -> Vec<i64> {
    let mut l: Vec<i64> = values.iter().map(|v| v.round() as i64).collect();
    l.sort_unstable();
    l.dedup();
    l
}

impl Term {
    /// Covariate names the term reads.
    pub fn variables(&self) -> Vec<String> {
        match self {
            Term::Intercept => Vec::new(),
            Term::Numeric(v) => vec![v.clone()],
            Term::Categorical { var, .. } | Term::Indicators { var, .. } | Term::Bins { var, .. } | Term::Spline { var, .. } => {
                vec![var.clone()]
            }
            Term::Interaction(a, b) => {
                let mut v = a.variables();
                v.extend(b.variables());
                v
            }
        }
    }

    /// Fill data-dependent choices (levels, knots) from the frame.
    pub fn resolve(&self, frame: &Frame) -> Result<Term> {
        Ok(match self {
            Term::Categorical { var, levels, reference } => {
                let levels = match levels {
                    Some(l) => l.clone(),
                    None => levels_of(frame.get(var)?),
                };
                let reference = reference.unwrap_or(*levels.first().unwrap_or(&0));
                if !levels.contains(&reference) {
                    return Err(DtrError::Config(format!("reference level {reference} absent for `{var}`")));
                }
                Term::Categorical { var: var.clone(), levels: Some(levels), reference: Some(reference) }
            }
            Term::Indicators { var, levels } => Term::Indicators {
                var: var.clone(),
                levels: Some(match levels {
                    Some(l) => l.clone(),
                    None => levels_of(frame.get(var)?),
                }),
            },
            Term::Spline { var, knots } => {
                let knots = match knots {
                    Some(k) => k.clone(),
                    None => default_knots(frame.get(var)?),
                };
                spline_basis(0.0, &knots)?;
                Term::Spline { var: var.clone(), knots: Some(knots) }
            }
            Term::Interaction(a, b) => Term::Interaction(Box::new(a.resolve(frame)?), Box::new(b.resolve(frame)?)),
            Term::Numeric(v) => {
                frame.get(v)?;
                self.clone()
            }
            // Empty bins would give all-zero columns.
            Term::Bins { var, edges } => {
                let x = frame.get(var)?;
                let edges = edges.iter().copied().filter(|&(lo, hi)| x.iter().any(|&v| lo < v && v <= hi)).collect();
                Term::Bins { var: var.clone(), edges }
            }
            Term::Intercept => Term::Intercept,
        })
    }

    /// Column names and values (column-major, one Vec per column) for a resolved term.
    fn columns(&self, frame: &Frame) -> Result<Vec<(String, Vec<f64>)>> {
        let unresolved = || DtrError::Config(format!("term `{self}` used before resolution"));
        let n = frame.nrows();
        Ok(match self {
            Term::Intercept => vec![("(intercept)".into(), vec![1.0; n])],
            Term::Numeric(v) => vec![(v.clone(), frame.get(v)?.to_vec())],
            Term::Categorical { var, levels, reference } => {
                let (levels, reference) = (levels.as_ref().ok_or_else(unresolved)?, reference.ok_or_else(unresolved)?);
                let x = frame.get(var)?;
                levels
                    .iter()
                    .filter(|&&l| l != reference)
                    .map(|&l| (format!("{var}[{l}]"), x.iter().map(|v| (v.round() as i64 == l) as u8 as f64).collect()))
                    .collect()
            }
            Term::Indicators { var, levels } => {
                let x = frame.get(var)?;
                levels
                    .as_ref()
                    .ok_or_else(unresolved)?
                    .iter()
                    .map(|&l| (format!("{var}=={l}"), x.iter().map(|v| (v.round() as i64 == l) as u8 as f64).collect()))
                    .collect()
            }
            Term::Bins { var, edges } => {
                let x = frame.get(var)?;
                edges
                    .iter()
                    .map(|&(lo, hi)| {
                        (
                            format!("{var}({},{}]", fmt_f(lo), fmt_f(hi)),
                            x.iter().map(|&v| (v > lo && v <= hi) as u8 as f64).collect(),
                        )
                    })
                    .collect()
            }
            Term::Spline { var, knots } => {
                let knots = knots.as_ref().ok_or_else(unresolved)?;
                let x = frame.get(var)?;
                let dim = knots.len() - 1;
                let mut cols = vec![Vec::with_capacity(n); dim];
                for &v in x {
                    for (c, b) in cols.iter_mut().zip(spline_basis(v, knots)?) {
                        c.push(b);
                    }
                }
                cols.into_iter().enumerate().map(|(j, c)| (format!("ns({var})[{j}]"), c)).collect()
            }
            Term::Interaction(a, b) => {
                let (ca, cb) = (a.columns(frame)?, b.columns(frame)?);
                let mut out = Vec::new();
                for (na, va) in &ca {
                    for (nb, vb) in &cb {
                        out.push((format!("{na}:{nb}"), va.iter().zip(vb).map(|(x, y)| x * y).collect()));
                    }
                }
                out
            }
        })
    }
}

/// Ordered list of terms. Resolve once on fitting data, then build matrices for
/// any frame with the same covariates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DesignSpec {
    pub terms: Vec<Term>,
}

impl DesignSpec {
    pub fn new(terms: Vec<Term>) -> DesignSpec {
        DesignSpec { terms }
    }

    pub fn parse(terms: &[impl AsRef<str>]) -> Result<DesignSpec> {
        Ok(DesignSpec { terms: terms.iter().map(|t| t.as_ref().parse()).collect::<Result<_>>()? })
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }

    pub fn resolve(&self, frame: &Frame) -> Result<DesignSpec> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.terms {
            if !seen.insert(t.to_string()) {
                return Err(DtrError::Config(format!("duplicate term `{t}`")));
            }
        }
        Ok(DesignSpec { terms: self.terms.iter().map(|t| t.resolve(frame)).collect::<Result<_>>()? })
    }

    /// Design matrix and column names. Every covariate value must be finite.
    pub fn build(&self, frame: &Frame) -> Result<(DMatrix<f64>, Vec<String>)> {
        let mut names = Vec::new();
        let mut cols = Vec::new();
        for t in &self.terms {
            for (name, col) in t.columns(frame)? {
                if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                    return Err(DtrError::Data(format!("non-finite value in column `{name}` at row {i}")));
                }
                names.push(name);
                cols.push(col);
            }
        }
        let n = frame.nrows();
        let mut data = Vec::with_capacity(n * cols.len());
        for c in &cols {
            data.extend_from_slice(c);
        }
        Ok((DMatrix::from_vec(n, cols.len(), data), names))
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for s in ["1", "age", "cat(race)", "cat(g; levels=1,2,3; ref=2)", "ind(t)", "bins(m; 0,28; 40,inf)", "ns(t; 1,4,8)", "cat(g):logt"] {
            let t: Term = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        assert!("foo(x)".parse::<Term>().is_err());
        assert!("a b".parse::<Term>().is_err());
    }

    #[test]
    fn build_categorical_and_bins() {
        let mut f = Frame::new(4);
        f.insert("g", vec![1.0, 2.0, 3.0, 2.0]);
        f.insert("m", vec![27.0, 28.0, 33.0, 41.0]);
        let spec = DesignSpec::parse(&["1", "cat(g)", "bins(m; 0,28; 40,inf)"]).unwrap().resolve(&f).unwrap();
        let (x, names) = spec.build(&f).unwrap();
        assert_eq!(names, ["(intercept)", "g[2]", "g[3]", "m(0,28]", "m(40,inf]"]);
        assert_eq!(x.column(1).as_slice(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(x.column(3).as_slice(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(x.column(4).as_slice(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn duplicate_terms_rejected() {
        let mut f = Frame::new(1);
        f.insert("a", vec![1.0]);
        assert!(DesignSpec::parse(&["a", "a"]).unwrap().resolve(&f).is_err());
    }
}

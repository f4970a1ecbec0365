//! Column tables, the model-formula language and design matrices.
//!
//! Formulas follow `term ('+' term)*` where a term is `name ('*' name)*`.
//! A leading `1 +` or `0 +` switches the intercept on or off (on by
//! default). `a*b` is the elementwise product of the two columns and
//! nothing else: no main effects are added implicitly.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Named numeric columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    n_rows: usize,
}

impl DataTable {
    pub fn new<S: Into<String>>(columns: Vec<(S, Vec<f64>)>) -> Result<Self> {
        let mut table: Option<DataTable> = None;
        for (name, values) in columns {
            match table.as_mut() {
                None => {
                    if values.is_empty() {
                        return Err(Error::EmptyTable);
                    }
                    let name = name.into();
                    let n_rows = values.len();
                    let mut index = HashMap::new();
                    index.insert(name.clone(), 0);
                    table = Some(DataTable {
                        names: vec![name],
                        columns: vec![values],
                        index,
                        n_rows,
                    });
                }
                Some(t) => t.push_column(name, values)?,
            }
        }
        table.ok_or(Error::EmptyTable)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_columns(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.index
            .get(name)
            .map(|&i| self.columns[i].as_slice())
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Column that must be a 0/1 indicator.
    pub fn binary_column(&self, name: &str) -> Result<&[f64]> {
        let col = self.column(name)?;
        if col.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NotBinary(name.to_string()));
        }
        Ok(col)
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateColumn(name));
        }
        if values.len() != self.n_rows {
            return Err(Error::ColumnLength {
                name,
                expected: self.n_rows,
                found: values.len(),
            });
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    /// Inserts a column, replacing any existing column of the same name.
    pub fn set_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => {
                if values.len() != self.n_rows {
                    return Err(Error::ColumnLength {
                        name,
                        expected: self.n_rows,
                        found: values.len(),
                    });
                }
                self.columns[i] = values;
                Ok(())
            }
            None => self.push_column(name, values),
        }
    }

    /// New table holding the given rows, in the given order (repeats allowed).
    pub fn take_rows(&self, rows: &[usize]) -> Result<DataTable> {
        if rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_rows) {
            return Err(Error::Invalid(format!(
                "row index {bad} out of range for {} rows",
                self.n_rows
            )));
        }
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&r| c[r]).collect())
            .collect();
        Ok(DataTable {
            names: self.names.clone(),
            columns,
            index: self.index.clone(),
            n_rows: rows.len(),
        })
    }

    /// Rows where `mask` is nonzero.
    pub fn filter_rows(&self, mask: &[f64]) -> Result<DataTable> {
        if mask.len() != self.n_rows {
            return Err(Error::Dimension(format!(
                "mask has {} entries for {} rows",
                mask.len(),
                self.n_rows
            )));
        }
        let rows: Vec<usize> = (0..self.n_rows).filter(|&i| mask[i] != 0.0).collect();
        self.take_rows(&rows)
    }

    /// Reads comma-separated text whose first record is the header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<DataTable> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .flexible(false)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Csv {
                row: 1,
                column: String::new(),
                message: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for (r, record) in rdr.records().enumerate() {
            // header is line 1
            let line = r + 2;
            let record = record.map_err(|e| Error::Csv {
                row: line,
                column: String::new(),
                message: e.to_string(),
            })?;
            for (c, field) in record.iter().enumerate() {
                if field.is_empty() {
                    return Err(Error::Csv {
                        row: line,
                        column: headers[c].clone(),
                        message: "missing value".into(),
                    });
                }
                let v: f64 = field.parse().map_err(|_| Error::Csv {
                    row: line,
                    column: headers[c].clone(),
                    message: format!("cannot parse `{field}` as a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv {
                        row: line,
                        column: headers[c].clone(),
                        message: format!("non-finite value `{field}`"),
                    });
                }
                columns[c].push(v);
            }
        }
        DataTable::new(headers.into_iter().zip(columns).collect())
    }

    pub fn from_csv_path(path: impl AsRef<std::path::Path>) -> Result<DataTable> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::Csv {
            row: 0,
            column: String::new(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }
}

/// One additive term: the product of its factor columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub factors: Vec<String>,
}

impl Term {
    pub fn new<S: Into<String>>(factors: impl IntoIterator<Item = S>) -> Self {
        Term {
            factors: factors.into_iter().map(Into::into).collect(),
        }
    }

    pub fn label(&self) -> String {
        self.factors.join("*")
    }

    fn canonical(&self) -> Vec<&str> {
        let mut f: Vec<&str> = self.factors.iter().map(String::as_str).collect();
        f.sort_unstable();
        f
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub intercept: bool,
    pub terms: Vec<Term>,
}

pub const INTERCEPT_LABEL: &str = "(Intercept)";

impl Formula {
    pub fn new(intercept: bool, terms: Vec<Term>) -> Result<Self> {
        if !intercept && terms.is_empty() {
            return Err(Error::EmptyFormula);
        }
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].iter().any(|u| u.canonical() == t.canonical()) {
                return Err(Error::DuplicateTerm(t.label()));
            }
        }
        Ok(Formula { intercept, terms })
    }

    pub fn n_columns(&self) -> usize {
        self.terms.len() + usize::from(self.intercept)
    }

    pub fn labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.n_columns());
        if self.intercept {
            labels.push(INTERCEPT_LABEL.to_string());
        }
        labels.extend(self.terms.iter().map(Term::label));
        labels
    }

    /// Every column referenced by any term.
    pub fn columns(&self) -> impl Iterator<Item = &str> {
        self.terms
            .iter()
            .flat_map(|t| t.factors.iter().map(String::as_str))
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lead = if self.intercept { "1" } else { "0" };
        f.write_str(lead)?;
        for t in &self.terms {
            write!(f, " + {}", t.label())?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Formula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_formula(s)
    }
}

struct Lexer<'a> {
    text: &'a str,
    pos: usize,
}

#[derive(Debug, PartialEq)]
enum Token<'a> {
    Name(&'a str),
    Number(&'a str),
    Plus,
    Star,
    End,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&mut self) -> Result<(usize, Token<'a>)> {
        let save = self.pos;
        let tok = self.next();
        let out = tok.map(|t| (self.pos, t));
        self.pos = save;
        out
    }

    fn next(&mut self) -> Result<Token<'a>> {
        self.skip_ws();
        let rest = &self.text[self.pos..];
        let Some(c) = rest.chars().next() else {
            return Ok(Token::End);
        };
        match c {
            '+' => {
                self.pos += 1;
                Ok(Token::Plus)
            }
            '*' => {
                self.pos += 1;
                Ok(Token::Star)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let len = rest
                    .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_' || ch == '.'))
                    .unwrap_or(rest.len());
                self.pos += len;
                Ok(Token::Name(&rest[..len]))
            }
            c if c.is_ascii_digit() => {
                let len = rest
                    .find(|ch: char| !ch.is_ascii_digit())
                    .unwrap_or(rest.len());
                self.pos += len;
                Ok(Token::Number(&rest[..len]))
            }
            other => Err(Error::FormulaSyntax {
                offset: self.pos,
                message: format!("unexpected character `{other}`"),
            }),
        }
    }
}

/// Parses formula text such as `"1 + Q1 + S1 + P1"` or `"0 + A*X"`.
pub fn parse_formula(text: &str) -> Result<Formula> {
    let mut lx = Lexer { text, pos: 0 };
    lx.skip_ws();
    if lx.pos == text.len() {
        return Err(Error::EmptyFormula);
    }

    let mut intercept = true;
    let mut terms = Vec::new();

    let start = lx.pos;
    if let Token::Number(num) = lx.next()? {
        intercept = match num {
            "1" => true,
            "0" => false,
            _ => {
                return Err(Error::FormulaSyntax {
                    offset: start,
                    message: format!(
                        "only 0 or 1 may appear as an intercept marker, found `{num}`"
                    ),
                })
            }
        };
        match lx.next()? {
            Token::End => {
                return Formula::new(intercept, terms);
            }
            Token::Plus => {}
            _ => {
                return Err(Error::FormulaSyntax {
                    offset: lx.pos,
                    message: "expected `+` after intercept marker".into(),
                })
            }
        }
    } else {
        lx.pos = start;
    }

    loop {
        let mut factors = Vec::new();
        loop {
            let at = {
                lx.skip_ws();
                lx.pos
            };
            match lx.next()? {
                Token::Name(name) => factors.push(name.to_string()),
                Token::End => {
                    return Err(Error::FormulaSyntax {
                        offset: at,
                        message: "expected a column name, found end of input".into(),
                    })
                }
                _ => {
                    return Err(Error::FormulaSyntax {
                        offset: at,
                        message: "expected a column name".into(),
                    })
                }
            }
            match lx.peek()? {
                (_, Token::Star) => {
                    lx.next()?;
                }
                _ => break,
            }
        }
        terms.push(Term { factors });
        let at = {
            lx.skip_ws();
            lx.pos
        };
        match lx.next()? {
            Token::Plus => continue,
            Token::End => break,
            _ => {
                return Err(Error::FormulaSyntax {
                    offset: at,
                    message: "expected `+` or end of formula".into(),
                })
            }
        }
    }
    Formula::new(intercept, terms)
}

/// Model matrix with one column per formula term.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub term_labels: Vec<String>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Columns of `self` followed by the columns of `other`.
    pub fn hconcat(&self, other: &DesignMatrix) -> Result<DesignMatrix> {
        if self.n_rows() != other.n_rows() {
            return Err(Error::Dimension(format!(
                "cannot join designs with {} and {} rows",
                self.n_rows(),
                other.n_rows()
            )));
        }
        let n = self.n_rows();
        let p = self.n_cols() + other.n_cols();
        let values = DMatrix::from_fn(n, p, |i, j| {
            if j < self.n_cols() {
                self.values[(i, j)]
            } else {
                other.values[(i, j - self.n_cols())]
            }
        });
        let mut term_labels = self.term_labels.clone();
        term_labels.extend(other.term_labels.iter().cloned());
        Ok(DesignMatrix {
            values,
            term_labels,
        })
    }
}

pub fn build_design(table: &DataTable, formula: &Formula) -> Result<DesignMatrix> {
    let n = table.n_rows();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(formula.n_columns());
    if formula.intercept {
        cols.push(vec![1.0; n]);
    }
    for term in &formula.terms {
        let mut acc = vec![1.0; n];
        for factor in &term.factors {
            let col = table.column(factor)?;
            acc.iter_mut().zip(col).for_each(|(a, &v)| *a *= v);
        }
        cols.push(acc);
    }
    let values = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok(DesignMatrix {
        values,
        term_labels: formula.labels(),
    })
}

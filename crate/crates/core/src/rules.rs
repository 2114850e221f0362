//! Intervention rules and the small boolean expression language behind them.
//!
//! Grammar, lowest precedence first:
//!
//! ```text
//! expr   := or
//! or     := and ('|' and)*
//! and    := not ('&' not)*
//! not    := '!'* atom
//! atom   := '(' expr ')' | name op literal | name 'in' '{' literal (',' literal)* '}'
//! op     := '<' | '<=' | '>' | '>=' | '==' | '!='      ('≤' and '≥' also accepted)
//! ```
//!
//! Literals are numbers, bare words or double-quoted strings. Numeric
//! covariates take all six comparators; categorical covariates take `==`,
//! `!=` and `in`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CovariateKind, CovariateSpec, PanelRecord, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleError {
    /// `offset` is the 1-based position in the rule text.
    #[error("parse error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown covariate '{name}' at offset {offset}")]
    UnknownCovariate { name: String, offset: usize },
    #[error("type mismatch at offset {offset}: {message}")]
    TypeMismatch { offset: usize, message: String },
    #[error("covariate '{0}' missing from record")]
    MissingValue(String),
    #[error("invalid rule '{0}': expected 'static:0', 'static:1' or 'dynamic: <expr>'")]
    BadRule(String),
}

/// What a name in an expression reads from a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Covariate(usize),
    Time,
    Treatment,
    Censored,
    PrevTreatment,
    PrevCensored,
}

impl Field {
    fn builtin(name: &str) -> Option<Field> {
        Some(match name {
            "time" => Field::Time,
            "treatment" => Field::Treatment,
            "censored" => Field::Censored,
            "prev_treatment" => Field::PrevTreatment,
            "prev_censored" => Field::PrevCensored,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operand {
    pub name: String,
    pub field: Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    fn apply(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Literal {
    Number(f64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleExpr {
    Compare {
        operand: Operand,
        op: CmpOp,
        value: Literal,
    },
    Member {
        operand: Operand,
        labels: Vec<String>,
    },
    Not(Box<RuleExpr>),
    And(Box<RuleExpr>, Box<RuleExpr>),
    Or(Box<RuleExpr>, Box<RuleExpr>),
}

impl RuleExpr {
    pub fn eval(&self, rec: &PanelRecord) -> Result<bool, RuleError> {
        Ok(match self {
            RuleExpr::Compare { operand, op, value } => match (read(operand, rec)?, value) {
                (Value::Num(x), Literal::Number(c)) => op.apply(x, *c),
                (Value::Cat(s), Literal::Label(l)) => match op {
                    CmpOp::Eq => s == *l,
                    CmpOp::Ne => s != *l,
                    _ => unreachable!("ordering on categorical rejected by the parser"),
                },
                _ => return Err(RuleError::MissingValue(operand.name.clone())),
            },
            RuleExpr::Member { operand, labels } => match read(operand, rec)? {
                Value::Cat(s) => labels.contains(&s),
                Value::Num(_) => return Err(RuleError::MissingValue(operand.name.clone())),
            },
            RuleExpr::Not(e) => !e.eval(rec)?,
            RuleExpr::And(a, b) => a.eval(rec)? && b.eval(rec)?,
            RuleExpr::Or(a, b) => a.eval(rec)? || b.eval(rec)?,
        })
    }

    /// Covariate names referenced, in order of first appearance.
    pub fn covariates(&self) -> Vec<&str> {
        fn walk<'a>(e: &'a RuleExpr, out: &mut Vec<&'a str>) {
            match e {
                RuleExpr::Compare { operand, .. } | RuleExpr::Member { operand, .. } => {
                    if matches!(operand.field, Field::Covariate(_))
                        && !out.contains(&operand.name.as_str())
                    {
                        out.push(&operand.name);
                    }
                }
                RuleExpr::Not(e) => walk(e, out),
                RuleExpr::And(a, b) | RuleExpr::Or(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    fn precedence(&self) -> u8 {
        match self {
            RuleExpr::Or(..) => 1,
            RuleExpr::And(..) => 2,
            RuleExpr::Not(_) => 3,
            _ => 4,
        }
    }
}

fn read(operand: &Operand, rec: &PanelRecord) -> Result<Value, RuleError> {
    Ok(match operand.field {
        Field::Covariate(i) => rec
            .values
            .get(i)
            .cloned()
            .ok_or_else(|| RuleError::MissingValue(operand.name.clone()))?,
        Field::Time => Value::Num(rec.time as f64),
        Field::Treatment => Value::Num(rec.treatment as f64),
        Field::Censored => Value::Num(rec.censored as f64),
        Field::PrevTreatment => Value::Num(rec.prev_treatment() as f64),
        Field::PrevCensored => Value::Num(rec.prev_censored() as f64),
    })
}

fn is_bare(label: &str) -> bool {
    let mut chars = label.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && label.chars().all(is_ident_char)
        && label != "in"
}

fn write_label(f: &mut fmt::Formatter<'_>, label: &str) -> fmt::Result {
    if is_bare(label) || label.parse::<f64>().is_ok() {
        f.write_str(label)
    } else {
        write!(f, "\"{}\"", label.replace('\\', "\\\\").replace('"', "\\\""))
    }
}

impl fmt::Display for RuleExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let child = |f: &mut fmt::Formatter<'_>, e: &RuleExpr, min: u8| {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            RuleExpr::Compare { operand, op, value } => {
                write!(f, "{} {} ", operand.name, op.symbol())?;
                match value {
                    Literal::Number(x) => write!(f, "{x}"),
                    Literal::Label(l) => write_label(f, l),
                }
            }
            RuleExpr::Member { operand, labels } => {
                write!(f, "{} in {{", operand.name)?;
                for (i, l) in labels.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write_label(f, l)?;
                }
                f.write_str("}")
            }
            RuleExpr::Not(e) => {
                f.write_str("!")?;
                child(f, e, 3)
            }
            // left-associative: the right operand needs parentheses at equal precedence
            RuleExpr::And(a, b) => {
                child(f, a, 2)?;
                f.write_str(" & ")?;
                child(f, b, 3)
            }
            RuleExpr::Or(a, b) => {
                child(f, a, 1)?;
                f.write_str(" | ")?;
                child(f, b, 2)
            }
        }
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '.' | '%')
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Str(String),
    Op(CmpOp),
    In,
    And,
    Or,
    Not,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    End,
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Ident(s) | Tok::Number(s) => format!("'{s}'"),
        Tok::Str(s) => format!("\"{s}\""),
        Tok::Op(op) => format!("'{}'", op.symbol()),
        Tok::In => "'in'".into(),
        Tok::And => "'&'".into(),
        Tok::Or => "'|'".into(),
        Tok::Not => "'!'".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::LBrace => "'{'".into(),
        Tok::RBrace => "'}'".into(),
        Tok::Comma => "','".into(),
        Tok::End => "end of input".into(),
    }
}

/// Tokens paired with their 1-based byte position.
fn lex(text: &str) -> Result<Vec<(Tok, usize)>, RuleError> {
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let syntax = |offset: usize, message: String| RuleError::Syntax {
        offset: offset + 1,
        message,
    };
    while i < bytes.len() {
        let (pos, c) = bytes[i];
        let peek = bytes.get(i + 1).map(|&(_, c)| c);
        let (tok, width) = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '(' => (Tok::LParen, 1),
            ')' => (Tok::RParen, 1),
            '{' => (Tok::LBrace, 1),
            '}' => (Tok::RBrace, 1),
            ',' => (Tok::Comma, 1),
            '&' => (Tok::And, 1),
            '|' => (Tok::Or, 1),
            '≤' => (Tok::Op(CmpOp::Le), 1),
            '≥' => (Tok::Op(CmpOp::Ge), 1),
            '<' if peek == Some('=') => (Tok::Op(CmpOp::Le), 2),
            '<' => (Tok::Op(CmpOp::Lt), 1),
            '>' if peek == Some('=') => (Tok::Op(CmpOp::Ge), 2),
            '>' => (Tok::Op(CmpOp::Gt), 1),
            '=' if peek == Some('=') => (Tok::Op(CmpOp::Eq), 2),
            '!' if peek == Some('=') => (Tok::Op(CmpOp::Ne), 2),
            '!' => (Tok::Not, 1),
            '"' => {
                let mut s = String::new();
                let mut j = i + 1;
                loop {
                    match bytes.get(j) {
                        None => return Err(syntax(pos, "unterminated string".into())),
                        Some(&(_, '"')) => break,
                        Some(&(_, '\\')) if j + 1 < bytes.len() => {
                            s.push(bytes[j + 1].1);
                            j += 2;
                        }
                        Some(&(_, ch)) => {
                            s.push(ch);
                            j += 1;
                        }
                    }
                }
                out.push((Tok::Str(s), pos + 1));
                i = j + 1;
                continue;
            }
            c if c.is_ascii_digit() || c == '-' || (c == '.' && peek.is_some_and(|d| d.is_ascii_digit())) => {
                let mut j = i + 1;
                while j < bytes.len() {
                    let d = bytes[j].1;
                    let prev = bytes[j - 1].1;
                    if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || ((d == '-' || d == '+') && (prev == 'e' || prev == 'E')) {
                        j += 1;
                    } else {
                        break;
                    }
                }
                let s: String = bytes[i..j].iter().map(|&(_, c)| c).collect();
                if s.parse::<f64>().is_err() {
                    return Err(syntax(pos, format!("malformed number '{s}'")));
                }
                out.push((Tok::Number(s), pos + 1));
                i = j;
                continue;
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut j = i + 1;
                while j < bytes.len() && is_ident_char(bytes[j].1) {
                    j += 1;
                }
                let s: String = bytes[i..j].iter().map(|&(_, c)| c).collect();
                let tok = if s == "in" { Tok::In } else { Tok::Ident(s) };
                out.push((tok, pos + 1));
                i = j;
                continue;
            }
            other => return Err(syntax(pos, format!("unexpected character '{other}'"))),
        };
        out.push((tok, pos + 1));
        i += width;
    }
    out.push((Tok::End, text.len() + 1));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    at: usize,
    schema: &'a [CovariateSpec],
    builtins: bool,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn offset(&self) -> usize {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &str) -> Result<T, RuleError> {
        Err(RuleError::Syntax {
            offset: self.offset(),
            message: format!("expected {expected}, found {}", describe(self.peek())),
        })
    }

    fn or(&mut self) -> Result<RuleExpr, RuleError> {
        let mut lhs = self.and()?;
        while *self.peek() == Tok::Or {
            self.bump();
            lhs = RuleExpr::Or(Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<RuleExpr, RuleError> {
        let mut lhs = self.not()?;
        while *self.peek() == Tok::And {
            self.bump();
            lhs = RuleExpr::And(Box::new(lhs), Box::new(self.not()?));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<RuleExpr, RuleError> {
        if *self.peek() == Tok::Not {
            self.bump();
            return Ok(RuleExpr::Not(Box::new(self.not()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<RuleExpr, RuleError> {
        match self.peek().clone() {
            Tok::LParen => {
                self.bump();
                let e = self.or()?;
                if *self.peek() != Tok::RParen {
                    return self.fail("')'");
                }
                self.bump();
                Ok(e)
            }
            Tok::Ident(name) => {
                let (_, name_at) = self.bump();
                let (operand, kind, levels) = self.resolve(&name, name_at)?;
                match self.peek().clone() {
                    Tok::Op(op) => {
                        self.bump();
                        self.comparison(operand, kind, levels, op, name_at)
                    }
                    Tok::In => {
                        self.bump();
                        self.membership(operand, kind, levels, name_at)
                    }
                    _ => self.fail("comparison operator or 'in'"),
                }
            }
            _ => self.fail("covariate name or '('"),
        }
    }

    fn resolve(
        &self,
        name: &str,
        offset: usize,
    ) -> Result<(Operand, CovariateKind, Vec<String>), RuleError> {
        if let Some(i) = self.schema.iter().position(|s| s.name == name) {
            let spec = &self.schema[i];
            return Ok((
                Operand {
                    name: name.to_string(),
                    field: Field::Covariate(i),
                },
                spec.kind,
                spec.levels().to_vec(),
            ));
        }
        if self.builtins {
            if let Some(field) = Field::builtin(name) {
                return Ok((
                    Operand {
                        name: name.to_string(),
                        field,
                    },
                    CovariateKind::Numeric,
                    Vec::new(),
                ));
            }
        }
        Err(RuleError::UnknownCovariate {
            name: name.to_string(),
            offset,
        })
    }

    fn literal(&mut self) -> Result<(String, bool, usize), RuleError> {
        let at = self.offset();
        match self.peek().clone() {
            Tok::Number(s) => {
                self.bump();
                Ok((s, true, at))
            }
            Tok::Ident(s) | Tok::Str(s) => {
                self.bump();
                Ok((s, false, at))
            }
            _ => self.fail("a value"),
        }
    }

    fn label(&self, levels: &[String], text: String, name: &str, at: usize) -> Result<String, RuleError> {
        if levels.contains(&text) {
            Ok(text)
        } else {
            Err(RuleError::TypeMismatch {
                offset: at,
                message: format!("'{text}' is not a level of '{name}'"),
            })
        }
    }

    fn comparison(
        &mut self,
        operand: Operand,
        kind: CovariateKind,
        levels: Vec<String>,
        op: CmpOp,
        name_at: usize,
    ) -> Result<RuleExpr, RuleError> {
        let (text, numeric, at) = self.literal()?;
        let value = match kind {
            CovariateKind::Numeric if numeric => Literal::Number(text.parse().expect("lexed number")),
            CovariateKind::Numeric => {
                return Err(RuleError::TypeMismatch {
                    offset: at,
                    message: format!("numeric covariate '{}' compared with label '{text}'", operand.name),
                })
            }
            CovariateKind::Categorical => {
                if !matches!(op, CmpOp::Eq | CmpOp::Ne) {
                    return Err(RuleError::TypeMismatch {
                        offset: name_at,
                        message: format!(
                            "ordering comparison '{}' on categorical covariate '{}'",
                            op.symbol(),
                            operand.name
                        ),
                    });
                }
                Literal::Label(self.label(&levels, text, &operand.name, at)?)
            }
        };
        Ok(RuleExpr::Compare { operand, op, value })
    }

    fn membership(
        &mut self,
        operand: Operand,
        kind: CovariateKind,
        levels: Vec<String>,
        name_at: usize,
    ) -> Result<RuleExpr, RuleError> {
        if kind != CovariateKind::Categorical {
            return Err(RuleError::TypeMismatch {
                offset: name_at,
                message: format!("'in' on numeric covariate '{}'", operand.name),
            });
        }
        if *self.peek() != Tok::LBrace {
            return self.fail("'{'");
        }
        self.bump();
        let mut labels = Vec::new();
        loop {
            let (text, _, at) = self.literal()?;
            let label = self.label(&levels, text, &operand.name, at)?;
            if !labels.contains(&label) {
                labels.push(label);
            }
            match self.peek() {
                Tok::Comma => {
                    self.bump();
                }
                Tok::RBrace => {
                    self.bump();
                    break;
                }
                _ => return self.fail("',' or '}'"),
            }
        }
        Ok(RuleExpr::Member { operand, labels })
    }
}

fn parse_with(text: &str, schema: &[CovariateSpec], builtins: bool) -> Result<RuleExpr, RuleError> {
    let mut p = Parser {
        toks: lex(text)?,
        at: 0,
        schema,
        builtins,
    };
    let e = p.or()?;
    if *p.peek() != Tok::End {
        return p.fail("'&', '|' or end of input");
    }
    Ok(e)
}

/// Parses a rule over schema covariates only.
pub fn parse_rule(text: &str, schema: &[CovariateSpec]) -> Result<RuleExpr, RuleError> {
    parse_with(text, schema, false)
}

/// Parses a row predicate; besides covariates it may use `time`, `treatment`,
/// `censored`, `prev_treatment` and `prev_censored`.
pub fn parse_predicate(text: &str, schema: &[CovariateSpec]) -> Result<RuleExpr, RuleError> {
    parse_with(text, schema, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionRule {
    Static { value: u8 },
    Dynamic { expr: RuleExpr },
}

impl InterventionRule {
    /// Parses `static:0`, `static:1` or `dynamic: <expr>`.
    pub fn parse(text: &str, schema: &[CovariateSpec]) -> Result<Self, RuleError> {
        let (kind, body) = text
            .split_once(':')
            .ok_or_else(|| RuleError::BadRule(text.to_string()))?;
        match kind.trim() {
            "static" => match body.trim() {
                "0" => Ok(InterventionRule::Static { value: 0 }),
                "1" => Ok(InterventionRule::Static { value: 1 }),
                _ => Err(RuleError::BadRule(text.to_string())),
            },
            "dynamic" => Ok(InterventionRule::Dynamic {
                expr: parse_rule(body, schema)?,
            }),
            _ => Err(RuleError::BadRule(text.to_string())),
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, InterventionRule::Static { .. })
    }

    pub fn label(&self) -> String {
        match self {
            InterventionRule::Static { value } => format!("static:{value}"),
            InterventionRule::Dynamic { expr } => format!("dynamic: {expr}"),
        }
    }

    /// Whether the rule recommends treatment for this row. In monotone mode a
    /// subject already treated stays recommended.
    pub fn indicated(&self, rec: &PanelRecord, prev_treatment: u8, monotone: bool) -> Result<u8, RuleError> {
        if monotone && prev_treatment == 1 {
            return Ok(1);
        }
        match self {
            InterventionRule::Static { value } => Ok(*value),
            InterventionRule::Dynamic { expr } => Ok(u8::from(expr.eval(rec)?)),
        }
    }
}

impl fmt::Display for InterventionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

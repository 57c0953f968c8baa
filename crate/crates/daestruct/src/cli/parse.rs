//! Reader for `.dae` files.
//!
//! ```text
//! # comment
//! var x, y
//! param lambda = 1
//! indep t in [0, 1]
//! 2*y*x' - x*y' - x + sin(t) + 2 = 0
//! y = x^2
//! factor y1 - y2
//! init { x = 0.8, y = 0.64 }
//! ```
//!
//! Derivatives are written `x'`, `x''` or `diff(x, t, k)`. Parameters are
//! folded to constants. An equation `lhs = rhs` becomes `lhs - rhs`.

use std::collections::HashMap;

use thiserror::Error;

use crate::dae::DaeSystem;
use crate::expr::{Binding, Expr, Func, JetVar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: undeclared identifier '{name}'")]
    UndeclaredIdentifier { line: usize, col: usize, name: String },
    #[error("check the number of equations and dependent variables: {equations} equations, {variables} variables")]
    CountMismatch { equations: usize, variables: usize },
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Prime,
    Op(char),
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax { line, col, msg: msg.into() }
}

fn lex(text: &str, line: usize, col0: usize) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        let col = col0 + i;
        if ch.is_whitespace() {
            i += 1;
        } else if ch.is_ascii_digit() || (ch == '.' && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| syntax(line, col, format!("bad number '{s}'")))?;
            out.push(Token { tok: Tok::Num(v), line, col });
        } else if ch.is_alphabetic() || ch == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), line, col });
        } else if ch == '\'' {
            out.push(Token { tok: Tok::Prime, line, col });
            i += 1;
        } else if "+-*/^(),=[]{};".contains(ch) {
            out.push(Token { tok: Tok::Op(ch), line, col });
            i += 1;
        } else {
            return Err(syntax(line, col, format!("unexpected character '{ch}'")));
        }
    }
    Ok(out)
}

/// Identifier scope used while parsing expressions.
#[derive(Default)]
struct Scope {
    vars: HashMap<String, usize>,
    params: HashMap<String, f64>,
    indep: String,
}

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
    scope: &'a Scope,
    /// Position reported for errors at end of input.
    end: (usize, usize),
}

impl<'a> Parser<'a> {
    fn new(toks: &'a [Token], scope: &'a Scope, end: (usize, usize)) -> Self {
        Parser { toks, pos: 0, scope, end }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map_or(self.end, |t| (t.line, t.col))
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        let (l, c) = self.here();
        syntax(l, c, msg)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, op: char) -> Result<(), ParseError> {
        if self.eat(op) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{op}'")))
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn ident(&mut self) -> Result<(String, usize, usize), ParseError> {
        let (l, c) = self.here();
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok((s, l, c))
            }
            _ => Err(self.err("expected identifier")),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            if self.eat('+') {
                acc = acc.add(&self.term()?);
            } else if self.eat('-') {
                acc = acc.sub(&self.term()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            if self.eat('*') {
                acc = acc.mul(&self.unary()?);
            } else if self.eat('/') {
                acc = acc.div(&self.unary()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            Ok(self.unary()?.neg())
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if !self.eat('^') {
            return Ok(base);
        }
        let (l, c) = self.here();
        let exp = self.unary()?;
        match exp.as_const() {
            Some(k) if k.fract() == 0.0 && k.abs() <= i32::MAX as f64 => Ok(base.powi(k as i32)),
            Some(k) if k == 0.5 => Ok(base.sqrt()),
            Some(_) | None => match base.as_const() {
                Some(b) if b > 0.0 => Ok(exp.mul(&Expr::constant(b.ln())).exp()),
                _ => Err(syntax(l, c, "exponent must be an integer constant")),
            },
        }
    }

    fn primes(&mut self) -> u32 {
        let mut k = 0;
        while self.peek() == Some(&Tok::Prime) {
            self.pos += 1;
            k += 1;
        }
        k
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let (l, c) = self.here();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::constant(v))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::Op('(')) {
                    return self.call(&name, l, c);
                }
                let k = self.primes();
                if let Some(&j) = self.scope.vars.get(&name) {
                    return Ok(Expr::var(j, k));
                }
                if k > 0 {
                    return Err(syntax(l, c, format!("'{name}' is not a dependent variable")));
                }
                if let Some(&v) = self.scope.params.get(&name) {
                    Ok(Expr::constant(v))
                } else if name == self.scope.indep {
                    Ok(Expr::time())
                } else if name == "pi" {
                    Ok(Expr::constant(std::f64::consts::PI))
                } else {
                    Err(ParseError::UndeclaredIdentifier { line: l, col: c, name })
                }
            }
            Some(_) => Err(self.err("expected expression")),
            None => Err(self.err("unexpected end of expression")),
        }
    }

    fn call(&mut self, name: &str, l: usize, c: usize) -> Result<Expr, ParseError> {
        self.expect('(')?;
        if name == "diff" {
            let (v, vl, vc) = self.ident()?;
            let j = *self
                .scope
                .vars
                .get(&v)
                .ok_or(ParseError::UndeclaredIdentifier { line: vl, col: vc, name: v.clone() })?;
            self.expect(',')?;
            let (t, tl, tc) = self.ident()?;
            if t != self.scope.indep {
                return Err(syntax(tl, tc, format!("'{t}' is not the independent variable")));
            }
            let k = if self.eat(',') {
                match self.peek().cloned() {
                    Some(Tok::Num(k)) if k.fract() == 0.0 && k >= 0.0 => {
                        self.pos += 1;
                        k as u32
                    }
                    _ => return Err(self.err("derivative order must be a nonnegative integer")),
                }
            } else {
                1
            };
            self.expect(')')?;
            return Ok(Expr::var(j, k));
        }
        let f = Func::from_name(name).ok_or(ParseError::UndeclaredIdentifier { line: l, col: c, name: name.to_string() })?;
        let arg = self.expr()?;
        self.expect(')')?;
        Ok(Expr::apply(f, &arg))
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        let (l, c) = self.here();
        let e = self.expr()?;
        const_value(&e).ok_or_else(|| syntax(l, c, "expected a constant"))
    }
}

fn const_value(e: &Expr) -> Option<f64> {
    if !e.vars().is_empty() || e.has_time() || e.has_params() {
        return None;
    }
    e.eval(&Binding::new(0.0f64)).ok().filter(|v| v.is_finite())
}

/// Strips a `#` comment.
fn strip(line: &str) -> &str {
    line.split('#').next().unwrap_or("")
}

fn keyword<'a>(line: &'a str, kw: &str) -> Option<&'a str> {
    let t = line.trim_start();
    let rest = t.strip_prefix(kw)?;
    if rest.is_empty() || rest.starts_with(char::is_whitespace) || rest.starts_with('{') {
        Some(rest)
    } else {
        None
    }
}

/// Column (1-based) where `rest` begins inside `line`.
fn col_of(line: &str, rest: &str) -> usize {
    line[..line.len() - rest.len()].chars().count() + 1
}

struct PendingEq {
    toks: Vec<Token>,
    end: (usize, usize),
}

pub fn parse(text: &str) -> Result<DaeSystem, ParseError> {
    let mut scope = Scope { indep: "t".into(), ..Default::default() };
    let mut var_names: Vec<String> = Vec::new();
    let mut interval = (0.0, 1.0);
    let mut eqs: Vec<PendingEq> = Vec::new();
    let mut factors: Vec<PendingEq> = Vec::new();
    let mut inits: Vec<Vec<Token>> = Vec::new();
    let mut open_init: Option<Vec<Token>> = None;
    let mut indep_seen = false;

    for (li, raw) in text.lines().enumerate() {
        let line_no = li + 1;
        let line = strip(raw);
        if let Some(buf) = open_init.as_mut() {
            let toks = lex(line, line_no, 1)?;
            let close = toks.iter().position(|t| t.tok == Tok::Op('}'));
            match close {
                Some(p) => {
                    if p + 1 != toks.len() {
                        return Err(syntax(line_no, toks[p + 1].col, "unexpected text after '}'"));
                    }
                    buf.extend(toks.into_iter().take(p));
                    inits.push(open_init.take().unwrap());
                }
                None => {
                    buf.extend(toks);
                    buf.push(Token { tok: Tok::Op(','), line: line_no, col: line.chars().count() + 1 });
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = keyword(line, "var") {
            let toks = lex(rest, line_no, col_of(line, rest))?;
            let empty = Scope::default();
            let mut p = Parser::new(&toks, &empty, (line_no, line.len() + 1));
            loop {
                let (name, l, c) = p.ident()?;
                if scope.vars.contains_key(&name) || scope.params.contains_key(&name) {
                    return Err(syntax(l, c, format!("'{name}' declared twice")));
                }
                scope.vars.insert(name.clone(), var_names.len());
                var_names.push(name);
                if !p.eat(',') {
                    break;
                }
            }
            if !p.at_end() {
                return Err(p.err("expected ',' or end of line"));
            }
        } else if let Some(rest) = keyword(line, "param") {
            let toks = lex(rest, line_no, col_of(line, rest))?;
            let mut p = Parser::new(&toks, &scope, (line_no, line.len() + 1));
            let (name, l, c) = p.ident()?;
            p.expect('=')?;
            let v = p.number()?;
            if !p.at_end() {
                return Err(p.err("unexpected text after parameter value"));
            }
            if scope.vars.contains_key(&name) || scope.params.contains_key(&name) {
                return Err(syntax(l, c, format!("'{name}' declared twice")));
            }
            scope.params.insert(name, v);
        } else if let Some(rest) = keyword(line, "indep") {
            if indep_seen {
                return Err(syntax(line_no, 1, "independent variable declared twice"));
            }
            indep_seen = true;
            let toks = lex(rest, line_no, col_of(line, rest))?;
            let mut p = Parser::new(&toks, &scope, (line_no, line.len() + 1));
            let (name, _, _) = p.ident()?;
            match p.ident()? {
                (kw, _, _) if kw == "in" => {}
                (_, l, c) => return Err(syntax(l, c, "expected 'in'")),
            }
            p.expect('[')?;
            let t0 = p.number()?;
            p.expect(',')?;
            let t1 = p.number()?;
            p.expect(']')?;
            if !p.at_end() {
                return Err(p.err("unexpected text after interval"));
            }
            if t1 < t0 {
                return Err(syntax(line_no, 1, "interval end precedes start"));
            }
            scope.indep = name;
            interval = (t0, t1);
        } else if let Some(rest) = keyword(line, "factor") {
            let toks = lex(rest, line_no, col_of(line, rest))?;
            factors.push(PendingEq { toks, end: (line_no, line.len() + 1) });
        } else if let Some(rest) = keyword(line, "init") {
            let toks = lex(rest, line_no, col_of(line, rest))?;
            if toks.first().map(|t| &t.tok) == Some(&Tok::Op('{')) {
                match toks.iter().position(|t| t.tok == Tok::Op('}')) {
                    Some(p) => {
                        if p + 1 != toks.len() {
                            return Err(syntax(line_no, toks[p + 1].col, "unexpected text after '}'"));
                        }
                        inits.push(toks[1..p].to_vec());
                    }
                    None => {
                        let mut buf = toks[1..].to_vec();
                        buf.push(Token { tok: Tok::Op(','), line: line_no, col: line.len() + 1 });
                        open_init = Some(buf);
                    }
                }
            } else {
                inits.push(toks);
            }
        } else {
            eqs.push(PendingEq { toks: lex(line, line_no, 1)?, end: (line_no, line.len() + 1) });
        }
    }
    if open_init.is_some() {
        return Err(syntax(text.lines().count().max(1), 1, "unterminated init block"));
    }

    let equations = eqs.iter().map(|pe| parse_equation(pe, &scope)).collect::<Result<Vec<_>, _>>()?;
    let factors = factors
        .iter()
        .map(|pe| {
            let mut p = Parser::new(&pe.toks, &scope, pe.end);
            let e = p.expr()?;
            if !p.at_end() {
                return Err(p.err("unexpected text after factor"));
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let inits = inits.iter().map(|toks| parse_init(toks, &scope)).collect::<Result<Vec<_>, _>>()?;

    if equations.len() != var_names.len() {
        return Err(ParseError::CountMismatch { equations: equations.len(), variables: var_names.len() });
    }
    let mut sys = DaeSystem::new(equations, var_names);
    sys.indep = scope.indep;
    sys.t0 = interval.0;
    sys.t_end = interval.1;
    sys.factors = factors;
    sys.inits = inits;
    Ok(sys)
}

fn parse_equation(pe: &PendingEq, scope: &Scope) -> Result<Expr, ParseError> {
    let mut p = Parser::new(&pe.toks, scope, pe.end);
    let lhs = p.expr()?;
    p.expect('=')?;
    let rhs = p.expr()?;
    if !p.at_end() {
        return Err(p.err("unexpected text after equation"));
    }
    Ok(if rhs.is_zero() { lhs } else { lhs.sub(&rhs) })
}

fn parse_init(toks: &[Token], scope: &Scope) -> Result<HashMap<JetVar, f64>, ParseError> {
    let end = toks.last().map_or((0, 0), |t| (t.line, t.col + 1));
    let mut p = Parser::new(toks, scope, end);
    let mut out = HashMap::new();
    while !p.at_end() {
        if p.eat(',') || p.eat(';') {
            continue;
        }
        let (l, c) = p.here();
        let target = p.primary()?;
        let v = match target.vars() {
            [v] if target == Expr::jet(*v) => *v,
            _ => return Err(syntax(l, c, "init entries assign a variable or one of its derivatives")),
        };
        p.expect('=')?;
        out.insert(v, p.number()?);
    }
    Ok(out)
}

/// Writes a system back in the input grammar; `parse(print(s))` gives the
/// same equations.
pub fn print(sys: &DaeSystem) -> String {
    let names = sys.names();
    let mut s = String::new();
    s.push_str(&format!("var {}\n", sys.var_names.join(", ")));
    s.push_str(&format!("indep {} in [{:?}, {:?}]\n", sys.indep, sys.t0, sys.t_end));
    for e in &sys.equations {
        s.push_str(&format!("{} = 0\n", e.display(&names)));
    }
    for f in &sys.factors {
        s.push_str(&format!("factor {}\n", f.display(&names)));
    }
    for init in &sys.inits {
        let mut entries: Vec<_> = init.iter().collect();
        entries.sort_by_key(|(v, _)| **v);
        let body: Vec<String> = entries.iter().map(|(v, x)| format!("{} = {:?}", sys.jet_name(**v), x)).collect();
        s.push_str(&format!("init {{ {} }}\n", body.join(", ")));
    }
    s
}

//! Scalar expressions over the cells of two bound arrays.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr    := or ( "?" expr ":" expr )?
//! or      := and ( ("||" | "or") and )*
//! and     := not ( ("&&" | "and") not )*
//! not     := ("!" | "not") not | cmp
//! cmp     := sum ( ("<" | "<=" | ">" | ">=" | "==" | "!=") sum )*
//! sum     := product ( ("+" | "-") product )*
//! product := unary ( ("*" | "/") unary )*
//! unary   := "-" unary | primary
//! primary := number | "null" | "true" | "false" | "(" expr ")"
//!          | ("src" | "ext") "." name | name | func "(" expr ("," expr)* ")"
//! func    := sqrt | abs | min | max | is_null
//! ```
//!
//! Comparisons chain: `a <= d <= b` means `a <= d && d <= b`. The symbols
//! `≤ ≥ ≠ − ×` are accepted as aliases. A bare name resolves against the
//! source attributes, then the source dimensions, then the extrusion side.
//! Null propagates through arithmetic and comparisons and counts as false
//! wherever a condition is expected.

use std::fmt;

use crate::array::{ArraySchema, CellTuple, Scalar, ScalarKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Src,
    Ext,
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    And,
    Or,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sqrt,
    Abs,
    Min,
    Max,
    IsNull,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::IsNull => "is_null",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "is_null" => Func::IsNull,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Ref(Side, String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// `first op1 e1 op2 e2 ...`
    Compare(Box<Expr>, Vec<(CmpOp, Expr)>),
    Cond(Box<Expr>, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr> {
        let tokens = lex(text)?;
        let mut p = Parser { tokens, pos: 0, len: text.len() };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn name(n: &str) -> Expr {
        Expr::Ref(Side::Any, n.to_string())
    }

    pub fn src(n: &str) -> Expr {
        Expr::Ref(Side::Src, n.to_string())
    }

    pub fn ext(n: &str) -> Expr {
        Expr::Ref(Side::Ext, n.to_string())
    }

    /// Negation that folds numeric literals, matching what the parser builds.
    pub fn neg(e: Expr) -> Expr {
        match e {
            Expr::Int(v) if v != i64::MIN => Expr::Int(-v),
            Expr::Float(v) => Expr::Float(-v),
            other => Expr::Unary(UnaryOp::Neg, Box::new(other)),
        }
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn cmp(a: Expr, op: CmpOp, b: Expr) -> Expr {
        Expr::Compare(Box::new(a), vec![(op, b)])
    }

    pub fn cond(c: Expr, a: Expr, b: Expr) -> Expr {
        Expr::Cond(Box::new(c), Box::new(a), Box::new(b))
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Cond(..) => 1,
            Expr::Binary(BinaryOp::Or, ..) => 2,
            Expr::Binary(BinaryOp::And, ..) => 3,
            Expr::Unary(UnaryOp::Not, _) => 4,
            Expr::Compare(..) => 5,
            Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 6,
            Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 7,
            Expr::Unary(UnaryOp::Neg, _) => 8,
            Expr::Int(v) if *v < 0 => 8,
            Expr::Float(v) if v.is_sign_negative() => 8,
            _ => 9,
        }
    }

    /// Resolves references and type-checks. `ext` is the schema bound to
    /// the `ext.` side, if any.
    pub fn compile(&self, src: &ArraySchema, ext: Option<&ArraySchema>) -> Result<Compiled> {
        let root = compile_node(self, src, ext)?;
        Ok(Compiled { root })
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if e.precedence() < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Null => f.write_str("null"),
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Int(v) => write!(f, "{v}"),
            Expr::Float(v) => write!(f, "{v:?}"),
            Expr::Ref(Side::Any, n) => f.write_str(n),
            Expr::Ref(Side::Src, n) => write!(f, "src.{n}"),
            Expr::Ref(Side::Ext, n) => write!(f, "ext.{n}"),
            Expr::Unary(UnaryOp::Neg, e) => {
                f.write_str("-")?;
                write_child(f, e, 8)
            }
            Expr::Unary(UnaryOp::Not, e) => {
                f.write_str("!")?;
                write_child(f, e, 4)
            }
            Expr::Binary(op, a, b) => {
                let (sym, p) = match op {
                    BinaryOp::Add => ("+", 6),
                    BinaryOp::Sub => ("-", 6),
                    BinaryOp::Mul => ("*", 7),
                    BinaryOp::Div => ("/", 7),
                    BinaryOp::And => ("&&", 3),
                    BinaryOp::Or => ("||", 2),
                };
                write_child(f, a, p)?;
                write!(f, " {sym} ")?;
                write_child(f, b, p + 1)
            }
            Expr::Compare(first, rest) => {
                write_child(f, first, 6)?;
                for (op, e) in rest {
                    let sym = match op {
                        CmpOp::Lt => "<",
                        CmpOp::Le => "<=",
                        CmpOp::Gt => ">",
                        CmpOp::Ge => ">=",
                        CmpOp::Eq => "==",
                        CmpOp::Ne => "!=",
                    };
                    write!(f, " {sym} ")?;
                    write_child(f, e, 6)?;
                }
                Ok(())
            }
            Expr::Cond(c, a, b) => {
                write_child(f, c, 2)?;
                write!(f, " ? {a} : {b}")
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Int(i64),
    Float(f64),
    Ident(String),
    Dot,
    LParen,
    RParen,
    Comma,
    Question,
    Colon,
    Plus,
    Minus,
    Star,
    Slash,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
    AndAnd,
    OrOr,
    Bang,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |offset: usize, m: &str| Error::ExpressionSyntax { offset, message: m.to_string() };
    while i < chars.len() {
        let (off, c) = chars[i];
        let next = chars.get(i + 1).map(|x| x.1);
        let two = |t: Tok| (t, 2usize);
        let one = |t: Tok| (t, 1usize);
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            let mut is_float = false;
            while i < chars.len() {
                let ch = chars[i].1;
                if ch.is_ascii_digit() {
                    i += 1;
                } else if ch == '.' && !is_float {
                    is_float = true;
                    i += 1;
                } else if (ch == 'e' || ch == 'E')
                    && chars.get(i + 1).is_some_and(|n| n.1.is_ascii_digit() || n.1 == '-' || n.1 == '+')
                {
                    is_float = true;
                    i += 2;
                } else {
                    break;
                }
            }
            let end = chars.get(i).map_or(text.len(), |x| x.0);
            let s = &text[off..end];
            let tok = if is_float {
                Tok::Float(s.parse().map_err(|_| err(chars[start].0, "bad number"))?)
            } else {
                Tok::Int(s.parse().map_err(|_| err(chars[start].0, "integer out of range"))?)
            };
            out.push((off, tok));
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = off;
            while i < chars.len() && (chars[i].1.is_alphanumeric() || chars[i].1 == '_') {
                i += 1;
            }
            let end = chars.get(i).map_or(text.len(), |x| x.0);
            let word = &text[start..end];
            let tok = match word {
                "and" => Tok::AndAnd,
                "or" => Tok::OrOr,
                "not" => Tok::Bang,
                _ => Tok::Ident(word.to_string()),
            };
            out.push((start, tok));
            continue;
        }
        let (tok, n) = match (c, next) {
            ('<', Some('=')) => two(Tok::Le),
            ('>', Some('=')) => two(Tok::Ge),
            ('=', Some('=')) => two(Tok::EqEq),
            ('!', Some('=')) => two(Tok::Ne),
            ('&', Some('&')) => two(Tok::AndAnd),
            ('|', Some('|')) => two(Tok::OrOr),
            ('<', _) => one(Tok::Lt),
            ('>', _) => one(Tok::Gt),
            ('!', _) => one(Tok::Bang),
            ('≤', _) => one(Tok::Le),
            ('≥', _) => one(Tok::Ge),
            ('≠', _) => one(Tok::Ne),
            ('(', _) => one(Tok::LParen),
            (')', _) => one(Tok::RParen),
            (',', _) => one(Tok::Comma),
            ('.', _) => one(Tok::Dot),
            ('?', _) => one(Tok::Question),
            (':', _) => one(Tok::Colon),
            ('+', _) => one(Tok::Plus),
            ('-' | '−', _) => one(Tok::Minus),
            ('*' | '×', _) => one(Tok::Star),
            ('/', _) => one(Tok::Slash),
            _ => return Err(err(off, &format!("unexpected character `{c}`"))),
        };
        out.push((off, tok));
        i += n;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.1)
    }

    fn error(&self, m: &str) -> Error {
        let offset = self.tokens.get(self.pos).map_or(self.len, |t| t.0);
        Error::ExpressionSyntax { offset, message: m.to_string() }
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: &Tok, what: &str) -> Result<()> {
        if self.eat(t) {
            Ok(())
        } else {
            Err(self.error(&format!("expected {what}")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let c = self.or()?;
        if self.eat(&Tok::Question) {
            let a = self.expr()?;
            self.expect(&Tok::Colon, "`:`")?;
            let b = self.expr()?;
            return Ok(Expr::cond(c, a, b));
        }
        Ok(c)
    }

    fn or(&mut self) -> Result<Expr> {
        let mut e = self.and()?;
        while self.eat(&Tok::OrOr) {
            e = Expr::binary(BinaryOp::Or, e, self.and()?);
        }
        Ok(e)
    }

    fn and(&mut self) -> Result<Expr> {
        let mut e = self.not()?;
        while self.eat(&Tok::AndAnd) {
            e = Expr::binary(BinaryOp::And, e, self.not()?);
        }
        Ok(e)
    }

    fn not(&mut self) -> Result<Expr> {
        if self.eat(&Tok::Bang) {
            return Ok(Expr::Unary(UnaryOp::Not, Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr> {
        let first = self.sum()?;
        let mut rest = Vec::new();
        loop {
            let op = match self.peek() {
                Some(Tok::Lt) => CmpOp::Lt,
                Some(Tok::Le) => CmpOp::Le,
                Some(Tok::Gt) => CmpOp::Gt,
                Some(Tok::Ge) => CmpOp::Ge,
                Some(Tok::EqEq) => CmpOp::Eq,
                Some(Tok::Ne) => CmpOp::Ne,
                _ => break,
            };
            self.pos += 1;
            rest.push((op, self.sum()?));
        }
        if rest.is_empty() {
            Ok(first)
        } else {
            Ok(Expr::Compare(Box::new(first), rest))
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut e = self.product()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinaryOp::Add,
                Some(Tok::Minus) => BinaryOp::Sub,
                _ => return Ok(e),
            };
            self.pos += 1;
            e = Expr::binary(op, e, self.product()?);
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut e = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => BinaryOp::Mul,
                Some(Tok::Slash) => BinaryOp::Div,
                _ => return Ok(e),
            };
            self.pos += 1;
            e = Expr::binary(op, e, self.unary()?);
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(&Tok::Minus) {
            return Ok(Expr::neg(self.unary()?));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        let tok = self.peek().cloned().ok_or_else(|| self.error("unexpected end of expression"))?;
        self.pos += 1;
        match tok {
            Tok::Int(v) => Ok(Expr::Int(v)),
            Tok::Float(v) => Ok(Expr::Float(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(word) => match word.as_str() {
                "null" => Ok(Expr::Null),
                "true" => Ok(Expr::Bool(true)),
                "false" => Ok(Expr::Bool(false)),
                "src" | "ext" if self.peek() == Some(&Tok::Dot) => {
                    self.pos += 1;
                    let side = if word == "src" { Side::Src } else { Side::Ext };
                    match self.peek().cloned() {
                        Some(Tok::Ident(n)) => {
                            self.pos += 1;
                            Ok(Expr::Ref(side, n))
                        }
                        _ => Err(self.error("expected a name after `.`")),
                    }
                }
                _ if self.peek() == Some(&Tok::LParen) => {
                    let func = Func::from_name(&word).ok_or_else(|| {
                        self.pos -= 1;
                        self.error(&format!("unknown function `{word}`"))
                    })?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.eat(&Tok::Comma) {
                        args.push(self.expr()?);
                    }
                    self.expect(&Tok::RParen, "`)`")?;
                    if args.len() != func.arity() {
                        return Err(self.error(&format!("`{word}` takes {} argument(s)", func.arity())));
                    }
                    Ok(Expr::Call(func, args))
                }
                _ => Ok(Expr::Ref(Side::Any, word)),
            },
            _ => {
                self.pos -= 1;
                Err(self.error("expected a value"))
            }
        }
    }
}

/// Static type of an expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ty {
    Null,
    Bool,
    Int,
    Float,
}

impl Ty {
    fn numeric(self) -> bool {
        matches!(self, Ty::Null | Ty::Int | Ty::Float)
    }

    fn unify(a: Ty, b: Ty) -> Option<Ty> {
        match (a, b) {
            (x, y) if x == y => Some(x),
            (Ty::Null, x) | (x, Ty::Null) => Some(x),
            (Ty::Int, Ty::Float) | (Ty::Float, Ty::Int) => Some(Ty::Float),
            _ => None,
        }
    }

    fn of_kind(k: ScalarKind) -> Ty {
        match k {
            ScalarKind::Int64 => Ty::Int,
            ScalarKind::Float64 => Ty::Float,
        }
    }
}

/// Runtime value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
}

impl Value {
    fn from_scalar(s: Scalar) -> Value {
        match s {
            Scalar::Null => Value::Null,
            Scalar::Int(v) => Value::Int(v),
            Scalar::Float(v) => Value::Float(v),
        }
    }

    fn as_f64(self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(v as f64),
            Value::Float(v) => Some(v),
            _ => None,
        }
    }

    pub fn truthy(self) -> bool {
        matches!(self, Value::Bool(true))
    }

    fn coerce(self, ty: Ty) -> Value {
        match (self, ty) {
            (Value::Int(v), Ty::Float) => Value::Float(v as f64),
            (v, _) => v,
        }
    }

    /// Converts to a stored scalar of the given kind.
    pub fn to_scalar(self, kind: ScalarKind) -> Scalar {
        match (self, kind) {
            (Value::Int(v), ScalarKind::Int64) => Scalar::Int(v),
            (Value::Int(v), ScalarKind::Float64) => Scalar::Float(v as f64),
            (Value::Float(v), ScalarKind::Float64) => Scalar::Float(v),
            _ => Scalar::Null,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    SrcAttr(usize),
    SrcDim(usize),
    ExtAttr(usize),
    ExtDim(usize),
}

#[derive(Clone, Debug)]
enum Node {
    Const(Value),
    Load(Slot),
    Neg(Box<Node>),
    Not(Box<Node>),
    Arith(BinaryOp, Box<Node>, Box<Node>),
    Logic(BinaryOp, Box<Node>, Box<Node>),
    Compare(Box<Node>, Vec<(CmpOp, Node)>),
    Cond(Box<Node>, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Clone, Debug)]
struct Typed {
    node: Node,
    ty: Ty,
}

fn type_err<T>(m: String) -> Result<T> {
    Err(Error::ExpressionType(m))
}

fn resolve(side: Side, name: &str, src: &ArraySchema, ext: Option<&ArraySchema>) -> Result<(Slot, Ty)> {
    let in_src = || {
        src.attr_index(name)
            .map(|i| (Slot::SrcAttr(i), Ty::of_kind(src.attrs()[i].kind)))
            .or_else(|| src.dim_index(name).map(|i| (Slot::SrcDim(i), Ty::Int)))
    };
    let in_ext = || {
        ext.and_then(|e| {
            e.attr_index(name)
                .map(|i| (Slot::ExtAttr(i), Ty::of_kind(e.attrs()[i].kind)))
                .or_else(|| e.dim_index(name).map(|i| (Slot::ExtDim(i), Ty::Int)))
        })
    };
    let found = match side {
        Side::Src => in_src(),
        Side::Ext => {
            if ext.is_none() {
                return type_err(format!("`ext.{name}` used but no extrusion array is bound"));
            }
            in_ext()
        }
        Side::Any => {
            let s = in_src();
            let e = in_ext();
            if let (Some((Slot::SrcAttr(_), _)), Some((Slot::ExtAttr(_), _))) = (&s, &e) {
                return type_err(format!("`{name}` is an attribute of both arrays; qualify it with src. or ext."));
            }
            s.or(e)
        }
    };
    found.ok_or_else(|| Error::ExpressionType(format!("unknown name `{name}`")))
}

fn compile_typed(e: &Expr, src: &ArraySchema, ext: Option<&ArraySchema>) -> Result<Typed> {
    let t = |node, ty| Ok(Typed { node, ty });
    match e {
        Expr::Null => t(Node::Const(Value::Null), Ty::Null),
        Expr::Bool(b) => t(Node::Const(Value::Bool(*b)), Ty::Bool),
        Expr::Int(v) => t(Node::Const(Value::Int(*v)), Ty::Int),
        Expr::Float(v) => t(Node::Const(Value::Float(*v)), Ty::Float),
        Expr::Ref(side, name) => {
            let (slot, ty) = resolve(*side, name, src, ext)?;
            t(Node::Load(slot), ty)
        }
        Expr::Unary(UnaryOp::Neg, a) => {
            let a = compile_typed(a, src, ext)?;
            if !a.ty.numeric() {
                return type_err(format!("cannot negate a {:?}", a.ty));
            }
            t(Node::Neg(Box::new(a.node)), a.ty)
        }
        Expr::Unary(UnaryOp::Not, a) => {
            let a = compile_typed(a, src, ext)?;
            if !matches!(a.ty, Ty::Bool | Ty::Null) {
                return type_err(format!("`!` needs a condition, got {:?}", a.ty));
            }
            t(Node::Not(Box::new(a.node)), Ty::Bool)
        }
        Expr::Binary(op, a, b) => {
            let a = compile_typed(a, src, ext)?;
            let b = compile_typed(b, src, ext)?;
            match op {
                BinaryOp::And | BinaryOp::Or => {
                    for x in [&a, &b] {
                        if !matches!(x.ty, Ty::Bool | Ty::Null) {
                            return type_err(format!("logical operator needs conditions, got {:?}", x.ty));
                        }
                    }
                    t(Node::Logic(*op, Box::new(a.node), Box::new(b.node)), Ty::Bool)
                }
                _ => {
                    if !a.ty.numeric() || !b.ty.numeric() {
                        return type_err(format!("arithmetic on {:?} and {:?}", a.ty, b.ty));
                    }
                    let ty = Ty::unify(a.ty, b.ty).unwrap_or(Ty::Float);
                    t(Node::Arith(*op, Box::new(a.node), Box::new(b.node)), ty)
                }
            }
        }
        Expr::Compare(first, rest) => {
            let f = compile_typed(first, src, ext)?;
            let mut prev = f.ty;
            let mut nodes = Vec::with_capacity(rest.len());
            for (op, e) in rest {
                let x = compile_typed(e, src, ext)?;
                let ok = (prev.numeric() && x.ty.numeric())
                    || (matches!(op, CmpOp::Eq | CmpOp::Ne) && Ty::unify(prev, x.ty).is_some());
                if !ok {
                    return type_err(format!("cannot compare {prev:?} with {:?}", x.ty));
                }
                prev = x.ty;
                nodes.push((*op, x.node));
            }
            t(Node::Compare(Box::new(f.node), nodes), Ty::Bool)
        }
        Expr::Cond(c, a, b) => {
            let c = compile_typed(c, src, ext)?;
            if !matches!(c.ty, Ty::Bool | Ty::Null) {
                return type_err(format!("condition must be boolean, got {:?}", c.ty));
            }
            let a = compile_typed(a, src, ext)?;
            let b = compile_typed(b, src, ext)?;
            let ty = Ty::unify(a.ty, b.ty)
                .ok_or_else(|| Error::ExpressionType(format!("branches disagree: {:?} vs {:?}", a.ty, b.ty)))?;
            t(Node::Cond(Box::new(c.node), Box::new(a.node), Box::new(b.node)), ty)
        }
        Expr::Call(func, args) => {
            let args: Vec<Typed> = args.iter().map(|a| compile_typed(a, src, ext)).collect::<Result<_>>()?;
            let ty = match func {
                Func::IsNull => Ty::Bool,
                Func::Sqrt | Func::Abs | Func::Min | Func::Max => {
                    if let Some(bad) = args.iter().find(|a| !a.ty.numeric()) {
                        return type_err(format!("{}() needs numbers, got {:?}", func.name(), bad.ty));
                    }
                    match func {
                        Func::Sqrt => Ty::Float,
                        Func::Abs => args[0].ty,
                        _ => Ty::unify(args[0].ty, args[1].ty).unwrap_or(Ty::Float),
                    }
                }
            };
            t(Node::Call(*func, args.into_iter().map(|a| a.node).collect()), ty)
        }
    }
}

fn compile_node(e: &Expr, src: &ArraySchema, ext: Option<&ArraySchema>) -> Result<Typed> {
    compile_typed(e, src, ext)
}

/// A cell as seen by an expression: its coordinate and tuple.
#[derive(Clone, Copy, Debug)]
pub struct Row<'a> {
    pub coord: &'a [i64],
    pub tuple: &'a [Scalar],
}

impl<'a> Row<'a> {
    pub fn new(coord: &'a [i64], tuple: &'a [Scalar]) -> Self {
        Row { coord, tuple }
    }
}

/// A type-checked expression with resolved references.
#[derive(Clone, Debug)]
pub struct Compiled {
    root: Typed,
}

impl Compiled {
    pub fn ty(&self) -> Ty {
        self.root.ty
    }

    pub fn eval(&self, src: Row<'_>, ext: Option<Row<'_>>) -> Value {
        eval(&self.root.node, src, ext).coerce(self.root.ty)
    }

    /// Evaluates as a condition; null counts as false.
    pub fn test(&self, src: Row<'_>, ext: Option<Row<'_>>) -> bool {
        self.eval(src, ext).truthy()
    }
}

fn arith(op: BinaryOp, a: Value, b: Value) -> Value {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => {
            let r = match op {
                BinaryOp::Add => x.checked_add(y),
                BinaryOp::Sub => x.checked_sub(y),
                BinaryOp::Mul => x.checked_mul(y),
                BinaryOp::Div => x.checked_div(y),
                _ => None,
            };
            r.map_or(Value::Null, Value::Int)
        }
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => Value::Float(match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
                _ => return Value::Null,
            }),
            _ => Value::Null,
        },
    }
}

fn compare(op: CmpOp, a: Value, b: Value) -> Option<bool> {
    let ord = match (a, b) {
        (Value::Null, _) | (_, Value::Null) => return None,
        (Value::Int(x), Value::Int(y)) => x.partial_cmp(&y),
        (Value::Bool(x), Value::Bool(y)) => x.partial_cmp(&y),
        _ => a.as_f64()?.partial_cmp(&b.as_f64()?),
    };
    use std::cmp::Ordering::*;
    let Some(ord) = ord else {
        // NaN compares unequal to everything.
        return Some(op == CmpOp::Ne);
    };
    Some(match op {
        CmpOp::Lt => ord == Less,
        CmpOp::Le => ord != Greater,
        CmpOp::Gt => ord == Greater,
        CmpOp::Ge => ord != Less,
        CmpOp::Eq => ord == Equal,
        CmpOp::Ne => ord != Equal,
    })
}

fn eval(node: &Node, src: Row<'_>, ext: Option<Row<'_>>) -> Value {
    match node {
        Node::Const(v) => *v,
        Node::Load(slot) => match *slot {
            Slot::SrcAttr(i) => Value::from_scalar(src.tuple[i]),
            Slot::SrcDim(i) => Value::Int(src.coord[i]),
            Slot::ExtAttr(i) => ext.map_or(Value::Null, |r| Value::from_scalar(r.tuple[i])),
            Slot::ExtDim(i) => ext.map_or(Value::Null, |r| Value::Int(r.coord[i])),
        },
        Node::Neg(a) => match eval(a, src, ext) {
            Value::Int(v) => v.checked_neg().map_or(Value::Null, Value::Int),
            Value::Float(v) => Value::Float(-v),
            _ => Value::Null,
        },
        Node::Not(a) => match eval(a, src, ext) {
            Value::Bool(b) => Value::Bool(!b),
            _ => Value::Null,
        },
        Node::Arith(op, a, b) => arith(*op, eval(a, src, ext), eval(b, src, ext)),
        Node::Logic(op, a, b) => {
            let x = eval(a, src, ext).truthy();
            let r = match op {
                BinaryOp::And => x && eval(b, src, ext).truthy(),
                _ => x || eval(b, src, ext).truthy(),
            };
            Value::Bool(r)
        }
        Node::Compare(first, rest) => {
            let mut prev = eval(first, src, ext);
            for (op, n) in rest {
                let cur = eval(n, src, ext);
                match compare(*op, prev, cur) {
                    None => return Value::Null,
                    Some(false) => return Value::Bool(false),
                    Some(true) => {}
                }
                prev = cur;
            }
            Value::Bool(true)
        }
        Node::Cond(c, a, b) => {
            if eval(c, src, ext).truthy() {
                eval(a, src, ext)
            } else {
                eval(b, src, ext)
            }
        }
        Node::Call(func, args) => {
            let v: Vec<Value> = args.iter().map(|a| eval(a, src, ext)).collect();
            match func {
                Func::IsNull => Value::Bool(matches!(v[0], Value::Null)),
                Func::Sqrt => v[0].as_f64().map_or(Value::Null, |x| Value::Float(x.sqrt())),
                Func::Abs => match v[0] {
                    Value::Int(x) => x.checked_abs().map_or(Value::Null, Value::Int),
                    Value::Float(x) => Value::Float(x.abs()),
                    _ => Value::Null,
                },
                Func::Min | Func::Max => match (v[0], v[1]) {
                    (Value::Int(x), Value::Int(y)) => Value::Int(if *func == Func::Min { x.min(y) } else { x.max(y) }),
                    (a, b) => match (a.as_f64(), b.as_f64()) {
                        (Some(x), Some(y)) => Value::Float(if *func == Func::Min { x.min(y) } else { x.max(y) }),
                        _ => Value::Null,
                    },
                },
            }
        }
    }
}

/// One expression per output attribute. A result whose every value is null
/// deletes the cell.
#[derive(Clone, Debug)]
pub struct CellUpdate {
    exprs: Vec<Compiled>,
    kinds: Vec<ScalarKind>,
}

impl CellUpdate {
    pub fn compile(exprs: &[Expr], src: &ArraySchema, ext: Option<&ArraySchema>, out: &ArraySchema) -> Result<Self> {
        if exprs.len() != out.arity() {
            return Err(Error::ExpressionType(format!(
                "{} update expression(s) for {} attribute(s)",
                exprs.len(),
                out.arity()
            )));
        }
        let mut compiled = Vec::with_capacity(exprs.len());
        for (e, attr) in exprs.iter().zip(out.attrs()) {
            let c = e.compile(src, ext)?;
            let ok = match (c.ty(), attr.kind) {
                (Ty::Null, _) | (Ty::Int, _) => true,
                (Ty::Float, ScalarKind::Float64) => true,
                _ => false,
            };
            if !ok {
                return type_err(format!("`{e}` has type {:?} but `{}` is {}", c.ty(), attr.name, attr.kind));
            }
            compiled.push(c);
        }
        Ok(CellUpdate { exprs: compiled, kinds: out.attrs().iter().map(|a| a.kind).collect() })
    }

    /// `None` means the cell becomes empty.
    pub fn apply(&self, src: Row<'_>, ext: Option<Row<'_>>) -> Option<CellTuple> {
        let t: CellTuple = self.exprs.iter().zip(&self.kinds).map(|(e, &k)| e.eval(src, ext).to_scalar(k)).collect();
        if t.iter().all(Scalar::is_null) {
            None
        } else {
            Some(t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{Attribute, Dimension};
    use proptest::prelude::*;

    fn src_schema() -> ArraySchema {
        ArraySchema::new(
            vec![Dimension::new("x", 0, 3), Dimension::new("y", 0, 3), Dimension::new("t", 0, 3)],
            vec![Attribute::new("d", ScalarKind::Float64)],
        )
        .unwrap()
    }

    fn ext_schema() -> ArraySchema {
        ArraySchema::new(
            vec![Dimension::new("x", 0, 3), Dimension::new("y", 0, 3)],
            vec![Attribute::new("μ", ScalarKind::Float64), Attribute::new("σ", ScalarKind::Float64)],
        )
        .unwrap()
    }

    fn eval_with(text: &str, d: f64, mu: f64, sigma: f64) -> Value {
        let e = Expr::parse(text).unwrap();
        let c = e.compile(&src_schema(), Some(&ext_schema())).unwrap();
        let st = [Scalar::Float(d)];
        let et = [Scalar::Float(mu), Scalar::Float(sigma)];
        c.eval(Row::new(&[0, 0, 0], &st), Some(Row::new(&[0, 0], &et)))
    }

    #[test]
    fn clip_expression() {
        let text = "μ − 3×σ ≤ d ≤ μ + 3×σ ? d : null";
        assert_eq!(eval_with(text, 1.0, 2.0, 1.0), Value::Float(1.0));
        assert_eq!(eval_with(text, 9.0, 2.0, 1.0), Value::Null);
        assert_eq!(eval_with(text, 5.0, 2.0, 1.0), Value::Float(5.0));
    }

    #[test]
    fn precedence_and_printing() {
        let e = Expr::parse("1 + 2 * 3 - -4").unwrap();
        assert_eq!(e.to_string(), "1 + 2 * 3 - -4");
        let e = Expr::parse("(1 + 2) * 3").unwrap();
        assert_eq!(e.to_string(), "(1 + 2) * 3");
        let e = Expr::parse("a - (b - c)").unwrap();
        assert_eq!(e.to_string(), "a - (b - c)");
        let e = Expr::parse("a and not b or c").unwrap();
        assert_eq!(e.to_string(), "a && !b || c");
        let e = Expr::parse("x ? y : z ? 1 : 2").unwrap();
        assert_eq!(Expr::parse(&e.to_string()).unwrap(), e);
    }

    #[test]
    fn type_errors() {
        let s = src_schema();
        let err = Expr::parse("nope > 2").unwrap().compile(&s, None).unwrap_err();
        assert!(matches!(err, Error::ExpressionType(_)));
        let err = Expr::parse("d > 1 ? true : 2.0").unwrap().compile(&s, None).unwrap_err();
        assert!(matches!(err, Error::ExpressionType(_)));
        let err = Expr::parse("ext.μ").unwrap().compile(&s, None).unwrap_err();
        assert!(matches!(err, Error::ExpressionType(_)));
        assert!(matches!(Expr::parse("1 +"), Err(Error::ExpressionSyntax { .. })));
        assert!(matches!(Expr::parse("foo(1)"), Err(Error::ExpressionSyntax { .. })));
    }

    #[test]
    fn ambiguous_attribute_needs_side() {
        let s = src_schema();
        let err = Expr::parse("d").unwrap().compile(&s, Some(&s)).unwrap_err();
        assert!(matches!(err, Error::ExpressionType(_)));
        assert!(Expr::parse("src.d - ext.d").unwrap().compile(&s, Some(&s)).is_ok());
    }

    #[test]
    fn null_and_integer_semantics() {
        let s = src_schema();
        let c = Expr::parse("7 / 2").unwrap().compile(&s, None).unwrap();
        let row = Row::new(&[0, 0, 0], &[Scalar::Null]);
        assert_eq!(c.eval(row, None), Value::Int(3));
        let c = Expr::parse("1 / 0").unwrap().compile(&s, None).unwrap();
        assert_eq!(c.eval(row, None), Value::Null);
        let c = Expr::parse("d + 1").unwrap().compile(&s, None).unwrap();
        assert_eq!(c.eval(row, None), Value::Null);
        let c = Expr::parse("d > 1").unwrap().compile(&s, None).unwrap();
        assert!(!c.test(row, None));
        let c = Expr::parse("is_null(d) ? t : x").unwrap().compile(&s, None).unwrap();
        assert_eq!(c.eval(Row::new(&[1, 2, 3], &[Scalar::Null]), None), Value::Int(3));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            Just(Expr::Null),
            any::<bool>().prop_map(Expr::Bool),
            (-1000i64..1000).prop_map(Expr::Int),
            (-1.0e6f64..1.0e6).prop_map(Expr::Float),
            prop_oneof![Just("d"), Just("x"), Just("μ")].prop_map(Expr::name),
            prop_oneof![Just("a"), Just("b")].prop_map(Expr::src),
            prop_oneof![Just("a"), Just("σ")].prop_map(Expr::ext),
        ];
        leaf.prop_recursive(5, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(Expr::neg),
                inner.clone().prop_map(|e| Expr::Unary(UnaryOp::Not, Box::new(e))),
                (
                    prop_oneof![
                        Just(BinaryOp::Add),
                        Just(BinaryOp::Sub),
                        Just(BinaryOp::Mul),
                        Just(BinaryOp::Div),
                        Just(BinaryOp::And),
                        Just(BinaryOp::Or)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::binary(op, a, b)),
                (inner.clone(), prop::collection::vec((prop_oneof![Just(CmpOp::Lt), Just(CmpOp::Le), Just(CmpOp::Eq), Just(CmpOp::Ne), Just(CmpOp::Gt), Just(CmpOp::Ge)], inner.clone()), 1..3))
                    .prop_map(|(f, rest)| Expr::Compare(Box::new(f), rest)),
                (inner.clone(), inner.clone(), inner.clone()).prop_map(|(c, a, b)| Expr::cond(c, a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Call(Func::Max, vec![a, b])),
                inner.prop_map(|a| Expr::Call(Func::Sqrt, vec![a])),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let text = e.to_string();
            let back = Expr::parse(&text).unwrap();
            prop_assert_eq!(back, e, "text was {}", text);
        }
    }
}

//! Text network descriptors.
//!
//! ```text
//! net toy {
//!   input c=3 s=24 ;
//!   conv k=3 out=16 pad=1 alg=auto ; bn ; relu ;
//!   module m1 {
//!     branch { conv k=1 out=8 }
//!     branch { pool max k=3 stride=1 pad=1 ; conv k=1 out=8 }
//!   }
//!   pool avg k=24 stride=1 ;
//!   fc out=128 ; l2norm
//! }
//! ```
//!
//! Whitespace is insignificant, `;` separators are optional and `#` starts a
//! comment. Layer ids used for weights and plans are `s<i>` for top-level
//! layers (counted over the whole body), `<module>.b<j>.<i>` inside modules,
//! and `fc` for the embedding layer.

use std::collections::HashSet;

use crate::costmodel::Algorithm;
use crate::error::{Error, Result};
use crate::reference::{ConvShape, PoolSpec};

/// Width of the embedding every network ends with.
pub const EMBEDDING_WIDTH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        shape: ConvShape,
        /// `None` lets the planner decide.
        algorithm: Option<Algorithm>,
    },
    Pool {
        kind: PoolKind,
        spec: PoolSpec,
    },
    BatchNorm,
    Relu,
}

/// A layer with its dimensions resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    /// (channels, spatial size) entering the layer.
    pub input: (usize, usize),
    pub output: (usize, usize),
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpec {
    pub layers: Vec<Layer>,
}

impl BranchSpec {
    pub fn output(&self, module_input: (usize, usize)) -> (usize, usize) {
        self.layers.last().map_or(module_input, |l| l.output)
    }
}

/// Concurrent branches over a shared input, merged by channel concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleSpec {
    pub name: String,
    pub branches: Vec<BranchSpec>,
    pub input: (usize, usize),
    pub output: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Layer(Layer),
    Module(ModuleSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    pub input_size: usize,
    pub body: Vec<Node>,
    /// Flattened features entering the embedding layer.
    pub fc_inputs: usize,
    pub embedding: usize,
}

impl NetworkSpec {
    /// Every layer in execution order, module branches in declaration order.
    pub fn layers(&self) -> Vec<&Layer> {
        let mut out = Vec::new();
        for node in &self.body {
            match node {
                Node::Layer(l) => out.push(l),
                Node::Module(m) => out.extend(m.branches.iter().flat_map(|b| b.layers.iter())),
            }
        }
        out
    }

    pub fn module(&self, name: &str) -> Option<&ModuleSpec> {
        self.body.iter().find_map(|n| match n {
            Node::Module(m) if m.name == name => Some(m),
            _ => None,
        })
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Open,
    Close,
    Semi,
    Eq,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let code = raw.split('#').next().unwrap_or("");
        let mut chars = code.chars().peekable();
        while let Some(&c) = chars.peek() {
            match c {
                c if c.is_whitespace() => {
                    chars.next();
                }
                '{' | '}' | ';' | '=' => {
                    chars.next();
                    out.push((
                        match c {
                            '{' => Tok::Open,
                            '}' => Tok::Close,
                            ';' => Tok::Semi,
                            _ => Tok::Eq,
                        },
                        line,
                    ));
                }
                c if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' => {
                    let mut word = String::new();
                    while let Some(&c) = chars.peek() {
                        if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' {
                            word.push(c);
                            chars.next();
                        } else {
                            break;
                        }
                    }
                    out.push((Tok::Word(word), line));
                }
                other => return Err(Error::Syntax { line, msg: format!("unexpected character {other:?}") }),
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

enum RawStmt {
    Conv { k: usize, out: usize, stride: usize, pad: usize, alg: Option<Algorithm> },
    Pool { kind: PoolKind, k: usize, stride: usize, pad: usize },
    Bn,
    Relu,
    Module { name: String, branches: Vec<Vec<(RawStmt, usize)>> },
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn line(&self) -> usize {
        self.toks.get(self.pos).or(self.toks.last()).map_or(1, |t| t.1)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Syntax { line: self.line(), msg: msg.into() })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.0.clone());
        self.pos += 1;
        t
    }

    fn skip_semis(&mut self) {
        while self.peek() == Some(&Tok::Semi) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn word(&mut self, what: &str) -> Result<String> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        match self.peek() {
            Some(Tok::Word(w)) if w == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{kw}`")),
        }
    }

    /// `key=value` pairs restricted to `allowed`.
    fn args(&mut self, allowed: &[&str]) -> Result<Vec<(String, String, usize)>> {
        let mut out: Vec<(String, String, usize)> = Vec::new();
        while let (Some(Tok::Word(key)), Some((Tok::Eq, _))) = (self.peek().cloned(), self.toks.get(self.pos + 1)) {
            let line = self.line();
            self.pos += 2;
            let value = self.word(&format!("value for `{key}`"))?;
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Syntax { line, msg: format!("unknown argument `{key}`") });
            }
            if out.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Syntax { line, msg: format!("duplicate argument `{key}`") });
            }
            out.push((key, value, line));
        }
        Ok(out)
    }

    fn stmt(&mut self, allow_module: bool) -> Result<(RawStmt, usize)> {
        let line = self.line();
        let kw = self.word("a statement")?;
        let stmt = match kw.as_str() {
            "conv" => {
                let args = self.args(&["k", "out", "stride", "pad", "alg"])?;
                let alg = match lookup(&args, "alg") {
                    None | Some("auto") => None,
                    Some(name) => Some(name.parse::<Algorithm>().map_err(|_| Error::Syntax {
                        line,
                        msg: format!("unknown algorithm `{name}` (expected direct|winograd2|winograd4|fft|auto)"),
                    })?),
                };
                RawStmt::Conv {
                    k: number(&args, "k", None, line)?,
                    out: number(&args, "out", None, line)?,
                    stride: number(&args, "stride", Some(1), line)?,
                    pad: number(&args, "pad", Some(0), line)?,
                    alg,
                }
            }
            "pool" => {
                let kind = match self.word("max or avg")?.as_str() {
                    "max" => PoolKind::Max,
                    "avg" => PoolKind::Avg,
                    other => return Err(Error::Syntax { line, msg: format!("unknown pool kind `{other}`") }),
                };
                let args = self.args(&["k", "stride", "pad"])?;
                RawStmt::Pool {
                    kind,
                    k: number(&args, "k", None, line)?,
                    stride: number(&args, "stride", None, line)?,
                    pad: number(&args, "pad", Some(0), line)?,
                }
            }
            "bn" => RawStmt::Bn,
            "relu" => RawStmt::Relu,
            "module" if allow_module => {
                let name = self.word("module name")?;
                self.expect(Tok::Open, "`{`")?;
                let mut branches = Vec::new();
                loop {
                    self.skip_semis();
                    match self.peek() {
                        Some(Tok::Close) => {
                            self.pos += 1;
                            break;
                        }
                        Some(Tok::Word(w)) if w == "branch" => {
                            self.pos += 1;
                            self.expect(Tok::Open, "`{`")?;
                            let mut stmts = Vec::new();
                            loop {
                                self.skip_semis();
                                if self.peek() == Some(&Tok::Close) {
                                    self.pos += 1;
                                    break;
                                }
                                stmts.push(self.stmt(false)?);
                            }
                            if stmts.is_empty() {
                                return Err(Error::Syntax { line, msg: format!("module `{name}` has an empty branch") });
                            }
                            branches.push(stmts);
                        }
                        _ => return self.err("expected `branch` or `}`"),
                    }
                }
                if branches.is_empty() {
                    return Err(Error::Syntax { line, msg: format!("module `{name}` has no branches") });
                }
                RawStmt::Module { name, branches }
            }
            "module" => return Err(Error::Syntax { line, msg: "modules cannot be nested".into() }),
            other => return Err(Error::Syntax { line, msg: format!("unknown statement `{other}`") }),
        };
        Ok((stmt, line))
    }
}

fn lookup<'a>(args: &'a [(String, String, usize)], key: &str) -> Option<&'a str> {
    args.iter().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
}

fn number(args: &[(String, String, usize)], key: &str, default: Option<usize>, line: usize) -> Result<usize> {
    match lookup(args, key) {
        Some(v) => v.parse::<usize>().map_err(|_| Error::Syntax { line, msg: format!("`{key}` must be a non-negative integer, got `{v}`") }),
        None => default.ok_or_else(|| Error::Syntax { line, msg: format!("missing required argument `{key}`") }),
    }
}

fn invalid(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("line {line}: {msg}"))
}

/// Resolve one statement's dimensions.
fn resolve(stmt: &RawStmt, id: String, input: (usize, usize), line: usize) -> Result<Layer> {
    let (c, s) = input;
    let (kind, output) = match *stmt {
        RawStmt::Conv { k, out, stride, pad, alg } => {
            if out == 0 {
                return Err(invalid(line, "conv needs at least one output channel"));
            }
            let shape = ConvShape { in_channels: c, out_channels: out, input_size: s, kernel: k, stride, pad };
            shape.validate().map_err(|e| invalid(line, e))?;
            if let Some(a) = alg {
                a.check(&shape).map_err(|e| invalid(line, e))?;
            }
            (LayerKind::Conv { shape, algorithm: alg }, (out, shape.output_size()))
        }
        RawStmt::Pool { kind, k, stride, pad } => {
            let spec = PoolSpec::new(k, stride, pad);
            let o = spec.output_size(s).map_err(|e| invalid(line, e))?;
            (LayerKind::Pool { kind, spec }, (c, o))
        }
        RawStmt::Bn => (LayerKind::BatchNorm, input),
        RawStmt::Relu => (LayerKind::Relu, input),
        RawStmt::Module { .. } => unreachable!("modules are resolved by the caller"),
    };
    Ok(Layer { id, kind, input, output, line })
}

pub fn parse_network(text: &str) -> Result<NetworkSpec> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    p.keyword("net")?;
    let name = p.word("network name")?;
    p.expect(Tok::Open, "`{`")?;
    p.skip_semis();
    p.keyword("input")?;
    let input_line = p.line();
    let args = p.args(&["c", "s"])?;
    let input_channels = number(&args, "c", None, input_line)?;
    let input_size = number(&args, "s", None, input_line)?;
    if input_channels == 0 || input_size == 0 {
        return Err(invalid(input_line, "input dimensions must be positive"));
    }

    let mut dims = (input_channels, input_size);
    let mut body = Vec::new();
    let mut module_names = HashSet::new();
    let mut top_index = 0;
    loop {
        p.skip_semis();
        match p.peek() {
            Some(Tok::Word(w)) if w == "fc" => break,
            None | Some(Tok::Close) => return p.err("expected `fc out=128 ; l2norm` before the end of the network"),
            _ => {}
        }
        let (stmt, line) = p.stmt(true)?;
        match &stmt {
            RawStmt::Module { name, branches } => {
                if !module_names.insert(name.clone()) {
                    return Err(invalid(line, format!("duplicate module name `{name}`")));
                }
                let mut specs = Vec::with_capacity(branches.len());
                let mut out_channels = 0;
                let mut out_size = None;
                for (j, stmts) in branches.iter().enumerate() {
                    let mut d = dims;
                    let mut layers = Vec::with_capacity(stmts.len());
                    for (i, (s, l)) in stmts.iter().enumerate() {
                        let layer = resolve(s, format!("{name}.b{j}.{i}"), d, *l)?;
                        d = layer.output;
                        layers.push(layer);
                    }
                    match out_size {
                        None => out_size = Some(d.1),
                        Some(sz) if sz != d.1 => {
                            return Err(invalid(
                                line,
                                format!("module `{name}`: branch {j} ends at {}x{} but branch 0 ends at {sz}x{sz}", d.1, d.1),
                            ))
                        }
                        _ => {}
                    }
                    out_channels += d.0;
                    specs.push(BranchSpec { layers });
                }
                let output = (out_channels, out_size.unwrap_or(dims.1));
                body.push(Node::Module(ModuleSpec { name: name.clone(), branches: specs, input: dims, output }));
                dims = output;
            }
            other => {
                let layer = resolve(other, format!("s{top_index}"), dims, line)?;
                top_index += 1;
                dims = layer.output;
                body.push(Node::Layer(layer));
            }
        }
    }

    p.keyword("fc")?;
    let fc_line = p.line();
    let args = p.args(&["out"])?;
    let embedding = number(&args, "out", None, fc_line)?;
    if embedding != EMBEDDING_WIDTH {
        return Err(invalid(fc_line, format!("embedding width must be {EMBEDDING_WIDTH}, got {embedding}")));
    }
    p.skip_semis();
    p.keyword("l2norm")?;
    p.skip_semis();
    p.expect(Tok::Close, "`}` closing the network")?;
    if p.peek().is_some() {
        return p.err("unexpected input after the network");
    }
    let _ = p.next();
    Ok(NetworkSpec { name, input_channels, input_size, body, fc_inputs: dims.0 * dims.1 * dims.1, embedding })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_network() {
        let net = parse_network("net t { input c=1 s=4 ; conv k=3 out=2 pad=1 ; fc out=128 ; l2norm }").unwrap();
        assert_eq!(net.layers().len(), 1);
        assert_eq!(net.fc_inputs, 2 * 16);
        assert_eq!(net.layers()[0].id, "s0");
    }

    #[test]
    fn whitespace_and_separators_are_free_form() {
        let text = "net t{input c = 2 s=8\nconv k=3 out=4 pad=1 alg=winograd2 relu bn\npool max k=2 stride=2 # halve\nfc out = 128 l2norm}";
        let net = parse_network(text).unwrap();
        assert_eq!(net.layers().len(), 4);
        assert_eq!(net.fc_inputs, 4 * 16);
    }

    #[test]
    fn module_dims_and_ids() {
        let text = "net t { input c=4 s=8 ;
            module a { branch { conv k=1 out=3 } branch { conv k=3 out=5 pad=1 } }
            fc out=128 ; l2norm }";
        let net = parse_network(text).unwrap();
        let m = net.module("a").unwrap();
        assert_eq!(m.output, (8, 8));
        assert_eq!(m.branches[1].layers[0].id, "a.b1.0");
    }

    #[test]
    fn mismatched_branch_sizes() {
        let text = "net t { input c=4 s=8 ;
            module a { branch { conv k=1 out=3 } branch { conv k=3 out=5 } }
            fc out=128 ; l2norm }";
        let err = parse_network(text).unwrap_err();
        assert!(err.to_string().contains("branch 1"), "{err}");
    }

    #[test]
    fn fast_algorithm_on_stride_two() {
        let text = "net t { input c=4 s=8 ; conv k=3 out=4 stride=2 pad=1 alg=fft ; fc out=128 ; l2norm }";
        let err = parse_network(text).unwrap_err();
        assert!(err.to_string().contains("stride 1"), "{err}");
        assert!(err.to_string().starts_with("invalid argument: line 1"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let text = "net t {\n input c=1 s=4\n conv k=3 out=2 pad=1 alg=magic\n fc out=128 l2norm }";
        assert!(matches!(parse_network(text), Err(Error::Syntax { line: 3, .. })));
        let text = "net t {\n input c=1 s=4\n conv k=3\n fc out=128 l2norm }";
        assert!(matches!(parse_network(text), Err(Error::Syntax { line: 3, .. })));
        let text = "net t {\n input c=1 s=4\n frobnicate\n fc out=128 l2norm }";
        assert!(matches!(parse_network(text), Err(Error::Syntax { line: 3, .. })));
        assert!(matches!(parse_network("net t { input c=1 s=4 ; conv k=1 out=1 }"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn duplicate_modules_and_widths() {
        let text = "net t { input c=1 s=4 ;
            module a { branch { relu } } module a { branch { relu } } fc out=128 ; l2norm }";
        assert!(parse_network(text).unwrap_err().to_string().contains("duplicate module"));
        assert!(parse_network("net t { input c=1 s=4 ; fc out=64 ; l2norm }").is_err());
        assert!(parse_network("net t { input c=1 s=2 ; conv k=5 out=1 ; fc out=128 ; l2norm }").is_err());
    }
}

//! Tokenizer and statement grammar for type-enforcement sources.
//!
//! The grammar covers the statements the linter models (`allow`,
//! `neverallow`, `type_transition`, declarations, access-vector
//! definitions), rule-block macro usages and conditional wrapper macros such
//! as `` userdebug_or_eng(`...') ``. Every other statement is returned as
//! [`StatementKind::Ignored`] so callers can count it.

use std::ops::Range;

use thiserror::Error;

use crate::model::{is_identifier_char, AvKind, Identifier};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub message: String,
}

impl SyntaxError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Tok {
    Word(String),
    LBrace,
    RBrace,
    Colon,
    Semi,
    Comma,
    LParen,
    RParen,
    Tilde,
    Star,
    Minus,
    OpenQuote,
    CloseQuote,
    Str(String),
    Other(char),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("`{w}`"),
            Tok::Str(s) => format!("\"{s}\""),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Comma => "`,`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Tilde => "`~`".into(),
            Tok::Star => "`*`".into(),
            Tok::Minus => "`-`".into(),
            Tok::OpenQuote => "'`'".into(),
            Tok::CloseQuote => "`'`".into(),
            Tok::Other(c) => format!("`{c}`"),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub line: usize,
    pub span: Range<usize>,
}

pub(crate) fn tokenize(src: &str) -> Result<Vec<Token>, SyntaxError> {
    let mut out = Vec::new();
    let mut line = 1;
    let mut chars = src.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        let tok = match c {
            '\n' => {
                line += 1;
                continue;
            }
            c if c.is_whitespace() => continue,
            '#' => {
                while let Some(&(_, n)) = chars.peek() {
                    if n == '\n' {
                        break;
                    }
                    chars.next();
                }
                continue;
            }
            '{' => Tok::LBrace,
            '}' => Tok::RBrace,
            ':' => Tok::Colon,
            ';' => Tok::Semi,
            ',' => Tok::Comma,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '~' => Tok::Tilde,
            '*' => Tok::Star,
            '-' => Tok::Minus,
            '`' => Tok::OpenQuote,
            '\'' => Tok::CloseQuote,
            '"' => {
                let mut text = String::new();
                let mut closed = false;
                for (_, n) in chars.by_ref() {
                    if n == '"' {
                        closed = true;
                        break;
                    }
                    if n == '\n' {
                        line += 1;
                    }
                    text.push(n);
                }
                if !closed {
                    return Err(SyntaxError::new(line, "unterminated string literal"));
                }
                let end = chars.peek().map_or(src.len(), |&(i, _)| i);
                out.push(Token {
                    tok: Tok::Str(text),
                    line,
                    span: start..end,
                });
                continue;
            }
            c if is_identifier_char(c) => {
                let mut end = start + c.len_utf8();
                while let Some(&(i, n)) = chars.peek() {
                    if !is_identifier_char(n) {
                        break;
                    }
                    end = i + n.len_utf8();
                    chars.next();
                }
                out.push(Token {
                    tok: Tok::Word(src[start..end].to_string()),
                    line,
                    span: start..end,
                });
                continue;
            }
            other => Tok::Other(other),
        };
        out.push(Token {
            tok,
            line,
            span: start..start + c.len_utf8(),
        });
    }
    Ok(out)
}

/// A set expression in a rule position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SetExpr {
    /// `*`
    All,
    /// `a`, `{ a b -c }`, `~a` or `~{ a b }`.
    Items {
        complement: bool,
        include: Vec<Identifier>,
        exclude: Vec<Identifier>,
    },
}

impl SetExpr {
    pub fn single(id: Identifier) -> Self {
        SetExpr::Items {
            complement: false,
            include: vec![id],
            exclude: Vec::new(),
        }
    }

    /// The identifiers of a plain list (no `*`, `~` or `-`).
    pub fn plain(&self) -> Option<&[Identifier]> {
        match self {
            SetExpr::Items {
                complement: false,
                include,
                exclude,
            } if exclude.is_empty() => Some(include),
            _ => None,
        }
    }
}

impl std::fmt::Display for SetExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SetExpr::All => f.write_str("*"),
            SetExpr::Items {
                complement,
                include,
                exclude,
            } => {
                if *complement {
                    f.write_str("~")?;
                }
                if include.len() == 1 && exclude.is_empty() {
                    return write!(f, "{}", include[0]);
                }
                f.write_str("{ ")?;
                for item in include {
                    write!(f, "{item} ")?;
                }
                for item in exclude {
                    write!(f, "-{item} ")?;
                }
                f.write_str("}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatementKind {
    Av {
        kind: AvKind,
        source: SetExpr,
        target: SetExpr,
        classes: SetExpr,
        permissions: SetExpr,
    },
    TypeTransition {
        source: SetExpr,
        target: SetExpr,
        classes: SetExpr,
        default_type: Identifier,
        object_name: Option<String>,
    },
    Type {
        name: Identifier,
        aliases: Vec<Identifier>,
        attributes: Vec<Identifier>,
    },
    Attribute {
        name: Identifier,
    },
    TypeAttribute {
        name: Identifier,
        attributes: Vec<Identifier>,
    },
    TypeAlias {
        name: Identifier,
        aliases: Vec<Identifier>,
    },
    Class {
        name: Identifier,
        inherits: Option<Identifier>,
        permissions: Vec<Identifier>,
    },
    Common {
        name: Identifier,
        permissions: Vec<Identifier>,
    },
    MacroCall {
        name: Identifier,
        args: Vec<Identifier>,
    },
    /// A conditional wrapper macro around a block of statements.
    Guard {
        name: Identifier,
        body: Vec<Statement>,
    },
    Ignored {
        keyword: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub kind: StatementKind,
    /// Line of the first token.
    pub line: usize,
    /// Byte range of the statement in the parsed text.
    pub span: Range<usize>,
}

/// What the grammar needs to know about a macro name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacroShape {
    Guard,
    RuleBlock { arity: usize },
    PermissionSet,
}

pub trait MacroLookup {
    fn shape(&self, name: &str) -> Option<MacroShape>;
}

/// Lookup that knows no macros.
pub struct NoMacros;

impl MacroLookup for NoMacros {
    fn shape(&self, _name: &str) -> Option<MacroShape> {
        None
    }
}

/// M4 builtins outside the supported subset.
pub const UNSUPPORTED_M4: &[&str] = &[
    "ifelse",
    "ifdef",
    "divert",
    "undivert",
    "changequote",
    "changecom",
    "include",
    "sinclude",
    "undefine",
    "pushdef",
    "popdef",
    "define",
    "syscmd",
    "esyscmd",
    "m4exit",
];

const XPERM_STATEMENTS: &[&str] = &[
    "allowxperm",
    "auditallowxperm",
    "dontauditxperm",
    "neverallowxperm",
];

const BLOCK_STATEMENTS: &[&str] = &["if", "optional", "tunable_policy", "require", "booleanif"];

/// Parses a whole source text into statements.
pub fn parse_statements(src: &str, macros: &dyn MacroLookup) -> Result<Vec<Statement>, SyntaxError> {
    let tokens = tokenize(src)?;
    let mut parser = Parser {
        tokens: &tokens,
        pos: 0,
        macros,
    };
    let statements = parser.statements(false)?;
    if let Some(tok) = parser.peek() {
        return Err(SyntaxError::new(
            tok.line,
            format!("unexpected {}", tok.tok.describe()),
        ));
    }
    Ok(statements)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    macros: &'a dyn MacroLookup,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn peek_tok(&self) -> Option<&'a Tok> {
        self.peek().map(|t| &t.tok)
    }

    fn peek_nth(&self, n: usize) -> Option<&'a Tok> {
        self.tokens.get(self.pos + n).map(|t| &t.tok)
    }

    fn last_line(&self) -> usize {
        self.tokens
            .get(self.pos.saturating_sub(1))
            .or(self.tokens.last())
            .map_or(1, |t| t.line)
    }

    fn next(&mut self) -> Result<&'a Token, SyntaxError> {
        let tok = self
            .tokens
            .get(self.pos)
            .ok_or_else(|| SyntaxError::new(self.last_line(), "unexpected end of input"))?;
        self.pos += 1;
        Ok(tok)
    }

    fn expect(&mut self, want: Tok) -> Result<&'a Token, SyntaxError> {
        let tok = self.next()?;
        if tok.tok == want {
            Ok(tok)
        } else {
            Err(SyntaxError::new(
                tok.line,
                format!("expected {}, found {}", want.describe(), tok.tok.describe()),
            ))
        }
    }

    fn eat(&mut self, want: &Tok) -> bool {
        if self.peek_tok() == Some(want) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn identifier(&mut self) -> Result<Identifier, SyntaxError> {
        let tok = self.next()?;
        match &tok.tok {
            Tok::Word(w) => Identifier::new(w).map_err(|e| SyntaxError::new(tok.line, e.to_string())),
            other => Err(SyntaxError::new(
                tok.line,
                format!("expected identifier, found {}", other.describe()),
            )),
        }
    }

    fn statements(&mut self, in_quote: bool) -> Result<Vec<Statement>, SyntaxError> {
        let mut out = Vec::new();
        while let Some(tok) = self.peek() {
            if in_quote && tok.tok == Tok::CloseQuote {
                break;
            }
            out.push(self.statement()?);
        }
        Ok(out)
    }

    fn statement(&mut self) -> Result<Statement, SyntaxError> {
        let first = self.next()?;
        let start = first.span.start;
        let line = first.line;
        let word = match &first.tok {
            Tok::Word(w) => w.as_str(),
            Tok::Semi => {
                // stray `;` after a macro usage
                return Ok(Statement {
                    kind: StatementKind::Ignored {
                        keyword: ";".into(),
                    },
                    line,
                    span: first.span.clone(),
                });
            }
            other => {
                return Err(SyntaxError::new(
                    line,
                    format!("expected a statement, found {}", other.describe()),
                ))
            }
        };

        let kind = match word {
            "allow" => self.av_rule(AvKind::Allow)?,
            "neverallow" => self.av_rule(AvKind::Neverallow)?,
            "type_transition" => self.type_transition()?,
            "type" => self.type_decl()?,
            "attribute" => {
                let name = self.identifier()?;
                self.expect(Tok::Semi)?;
                StatementKind::Attribute { name }
            }
            "typeattribute" => {
                let name = self.identifier()?;
                let attributes = self.comma_list()?;
                self.expect(Tok::Semi)?;
                StatementKind::TypeAttribute { name, attributes }
            }
            "typealias" => {
                let name = self.identifier()?;
                match self.next()? {
                    Token { tok: Tok::Word(w), .. } if w == "alias" => {}
                    t => {
                        return Err(SyntaxError::new(
                            t.line,
                            format!("expected `alias`, found {}", t.tok.describe()),
                        ))
                    }
                }
                let aliases = self.braced_or_single()?;
                self.expect(Tok::Semi)?;
                StatementKind::TypeAlias { name, aliases }
            }
            "class" => self.class_decl()?,
            "common" => {
                let name = self.identifier()?;
                let permissions = self.braced_list()?;
                StatementKind::Common { name, permissions }
            }
            w if XPERM_STATEMENTS.contains(&w) => {
                return Err(SyntaxError::new(
                    line,
                    format!("`{w}` statements are not supported"),
                ));
            }
            w if UNSUPPORTED_M4.contains(&w) && self.peek_tok() == Some(&Tok::LParen) => {
                return Err(SyntaxError::new(
                    line,
                    format!("unsupported M4 construct `{w}`"),
                ));
            }
            w if BLOCK_STATEMENTS.contains(&w) => {
                self.skip_block()?;
                StatementKind::Ignored { keyword: w.into() }
            }
            w => match self.macros.shape(w) {
                Some(MacroShape::Guard) if self.peek_tok() == Some(&Tok::LParen) => {
                    self.guard(w, line)?
                }
                Some(MacroShape::RuleBlock { .. }) if self.peek_tok() == Some(&Tok::LParen) => {
                    self.macro_call(w, line)?
                }
                Some(MacroShape::RuleBlock { arity: 0 }) => {
                    self.eat(&Tok::Semi);
                    StatementKind::MacroCall {
                        name: Identifier::new(w).map_err(|e| SyntaxError::new(line, e.to_string()))?,
                        args: Vec::new(),
                    }
                }
                Some(MacroShape::PermissionSet) if self.peek_tok() == Some(&Tok::LParen) => {
                    return Err(SyntaxError::new(
                        line,
                        format!("permission-set macro `{w}` takes no arguments"),
                    ));
                }
                _ if self.peek_tok() == Some(&Tok::LParen) => {
                    return Err(SyntaxError::new(line, format!("unknown macro `{w}`")));
                }
                _ => {
                    self.skip_statement()?;
                    StatementKind::Ignored { keyword: w.into() }
                }
            },
        };
        let end = self.tokens[self.pos - 1].span.end;
        Ok(Statement {
            kind,
            line,
            span: start..end,
        })
    }

    fn av_rule(&mut self, kind: AvKind) -> Result<StatementKind, SyntaxError> {
        let source = self.set_expr()?;
        let target = self.set_expr()?;
        self.expect(Tok::Colon)?;
        let classes = self.set_expr()?;
        let permissions = self.set_expr()?;
        self.expect(Tok::Semi)?;
        Ok(StatementKind::Av {
            kind,
            source,
            target,
            classes,
            permissions,
        })
    }

    fn type_transition(&mut self) -> Result<StatementKind, SyntaxError> {
        let source = self.set_expr()?;
        let target = self.set_expr()?;
        self.expect(Tok::Colon)?;
        let classes = self.set_expr()?;
        let default_type = self.identifier()?;
        let object_name = match self.peek_tok() {
            Some(Tok::Str(s)) => {
                self.pos += 1;
                Some(s.clone())
            }
            Some(Tok::Word(w)) => {
                self.pos += 1;
                Some(w.clone())
            }
            _ => None,
        };
        self.expect(Tok::Semi)?;
        Ok(StatementKind::TypeTransition {
            source,
            target,
            classes,
            default_type,
            object_name,
        })
    }

    fn type_decl(&mut self) -> Result<StatementKind, SyntaxError> {
        let name = self.identifier()?;
        let mut aliases = Vec::new();
        if matches!(self.peek_tok(), Some(Tok::Word(w)) if w == "alias") {
            self.pos += 1;
            aliases = self.braced_or_single()?;
        }
        let attributes = if self.peek_tok() == Some(&Tok::Semi) {
            Vec::new()
        } else {
            self.comma_list()?
        };
        self.expect(Tok::Semi)?;
        Ok(StatementKind::Type {
            name,
            aliases,
            attributes,
        })
    }

    fn class_decl(&mut self) -> Result<StatementKind, SyntaxError> {
        let name = self.identifier()?;
        let mut inherits = None;
        let mut permissions = Vec::new();
        if matches!(self.peek_tok(), Some(Tok::Word(w)) if w == "inherits") {
            self.pos += 1;
            inherits = Some(self.identifier()?);
        }
        if self.peek_tok() == Some(&Tok::LBrace) {
            permissions = self.braced_list()?;
        }
        // access_vectors entries carry no `;`, security_classes entries neither
        self.eat(&Tok::Semi);
        Ok(StatementKind::Class {
            name,
            inherits,
            permissions,
        })
    }

    /// `, a, b` after a declared name (leading comma optional).
    fn comma_list(&mut self) -> Result<Vec<Identifier>, SyntaxError> {
        let mut out = Vec::new();
        self.eat(&Tok::Comma);
        loop {
            out.push(self.identifier()?);
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        Ok(out)
    }

    fn braced_list(&mut self) -> Result<Vec<Identifier>, SyntaxError> {
        self.expect(Tok::LBrace)?;
        let mut out = Vec::new();
        while !self.eat(&Tok::RBrace) {
            out.push(self.identifier()?);
        }
        Ok(out)
    }

    fn braced_or_single(&mut self) -> Result<Vec<Identifier>, SyntaxError> {
        if self.peek_tok() == Some(&Tok::LBrace) {
            self.braced_list()
        } else {
            Ok(vec![self.identifier()?])
        }
    }

    fn set_expr(&mut self) -> Result<SetExpr, SyntaxError> {
        if self.eat(&Tok::Star) {
            return Ok(SetExpr::All);
        }
        let complement = self.eat(&Tok::Tilde);
        let mut include = Vec::new();
        let mut exclude = Vec::new();
        if self.peek_tok() == Some(&Tok::LBrace) {
            self.set_items(&mut include, &mut exclude)?;
        } else {
            include.push(self.identifier()?);
        }
        Ok(SetExpr::Items {
            complement,
            include,
            exclude,
        })
    }

    /// Braced items; nested braces (from macro expansion) are flattened.
    fn set_items(
        &mut self,
        include: &mut Vec<Identifier>,
        exclude: &mut Vec<Identifier>,
    ) -> Result<(), SyntaxError> {
        self.expect(Tok::LBrace)?;
        loop {
            match self.peek_tok() {
                Some(Tok::RBrace) => {
                    self.pos += 1;
                    return Ok(());
                }
                Some(Tok::LBrace) => self.set_items(include, exclude)?,
                Some(Tok::Minus) => {
                    self.pos += 1;
                    exclude.push(self.identifier()?);
                }
                _ => include.push(self.identifier()?),
            }
        }
    }

    fn macro_call(&mut self, name: &str, line: usize) -> Result<StatementKind, SyntaxError> {
        let name = Identifier::new(name).map_err(|e| SyntaxError::new(line, e.to_string()))?;
        self.expect(Tok::LParen)?;
        let mut args = Vec::new();
        if !self.eat(&Tok::RParen) {
            loop {
                let quoted = self.eat(&Tok::OpenQuote);
                let tok = self.next()?;
                let arg = match &tok.tok {
                    Tok::Word(w) => {
                        if self.macros.shape(w).is_some() {
                            return Err(SyntaxError::new(
                                tok.line,
                                format!("macro `{w}` used as an argument of `{name}`"),
                            ));
                        }
                        Identifier::new(w).map_err(|e| SyntaxError::new(tok.line, e.to_string()))?
                    }
                    other => {
                        return Err(SyntaxError::new(
                            tok.line,
                            format!(
                                "macro arguments must be identifiers, found {}",
                                other.describe()
                            ),
                        ))
                    }
                };
                if quoted {
                    self.expect(Tok::CloseQuote)?;
                }
                args.push(arg);
                if self.eat(&Tok::RParen) {
                    break;
                }
                self.expect(Tok::Comma)?;
            }
        }
        self.eat(&Tok::Semi);
        Ok(StatementKind::MacroCall { name, args })
    }

    fn guard(&mut self, name: &str, line: usize) -> Result<StatementKind, SyntaxError> {
        let name = Identifier::new(name).map_err(|e| SyntaxError::new(line, e.to_string()))?;
        self.expect(Tok::LParen)?;
        let body = if self.eat(&Tok::OpenQuote) {
            let body = self.statements(true)?;
            self.expect(Tok::CloseQuote)?;
            body
        } else {
            let mut body = Vec::new();
            while self.peek_tok() != Some(&Tok::RParen) {
                if self.peek().is_none() {
                    return Err(SyntaxError::new(line, format!("unterminated `{name}(`")));
                }
                body.push(self.statement()?);
            }
            body
        };
        self.expect(Tok::RParen)?;
        self.eat(&Tok::Semi);
        Ok(StatementKind::Guard { name, body })
    }

    /// Skips to the `;` ending an unmodelled statement.
    fn skip_statement(&mut self) -> Result<(), SyntaxError> {
        let mut depth = 0usize;
        loop {
            let tok = self.next()?;
            match tok.tok {
                Tok::LBrace | Tok::LParen => depth += 1,
                Tok::RBrace | Tok::RParen => depth = depth.saturating_sub(1),
                Tok::Semi if depth == 0 => return Ok(()),
                _ => {}
            }
        }
    }

    /// Skips `keyword ... { ... }` blocks, including an `else { ... }` arm.
    fn skip_block(&mut self) -> Result<(), SyntaxError> {
        loop {
            let tok = self.next()?;
            match tok.tok {
                Tok::LBrace => break,
                Tok::Semi => return Ok(()),
                _ => {}
            }
        }
        let mut depth = 1usize;
        while depth > 0 {
            match self.next()?.tok {
                Tok::LBrace => depth += 1,
                Tok::RBrace => depth -= 1,
                _ => {}
            }
        }
        if matches!(self.peek_tok(), Some(Tok::Word(w)) if w == "else")
            && self.peek_nth(1) == Some(&Tok::LBrace)
        {
            self.pos += 1;
            self.skip_block()?;
        }
        Ok(())
    }
}

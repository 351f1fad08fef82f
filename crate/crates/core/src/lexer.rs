//! Lexical C/C++ tokenizer with exact line provenance, fixed-capacity token
//! streams, and a corpus-derived vocabulary.
//!
//! The lexer never expands the preprocessor. Directives come out as ordinary
//! tokens: `#` is punctuation, `include`/`define` are identifiers.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::corpus::FunctionRecord;
use crate::error::{Error, Result};

pub const MAX_TOKENS: usize = 512;
/// Room left for source tokens once `<BOS>` and `<EOS>` are placed.
pub const MAX_PAYLOAD: usize = MAX_TOKENS - 2;

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: [&str; 4] = [PAD, BOS, EOS, UNK];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Identifier,
    Keyword,
    Number,
    StringLit,
    CharLit,
    Operator,
    Punctuation,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    /// 1-based source line of the first character; 0 for special tokens.
    pub line: usize,
}

impl Token {
    fn special(text: &str) -> Self {
        Token {
            text: text.to_string(),
            kind: TokenKind::Special,
            line: 0,
        }
    }

    pub fn is_special(&self) -> bool {
        self.kind == TokenKind::Special
    }

    pub fn is_pad(&self) -> bool {
        self.kind == TokenKind::Special && self.text == PAD
    }

    pub fn is(&self, text: &str) -> bool {
        !self.is_special() && self.text == text
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_special() {
            write!(f, "{}", self.text)
        } else {
            write!(f, "{}@{}", self.text, self.line)
        }
    }
}

/// A token plus its byte span in the lexed text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexeme {
    pub token: Token,
    pub start: usize,
    pub end: usize,
}

const KEYWORDS: &[&str] = &[
    "alignas",
    "alignof",
    "asm",
    "auto",
    "bool",
    "break",
    "case",
    "catch",
    "char",
    "char16_t",
    "char32_t",
    "char8_t",
    "class",
    "const",
    "const_cast",
    "consteval",
    "constexpr",
    "constinit",
    "continue",
    "decltype",
    "default",
    "delete",
    "do",
    "double",
    "dynamic_cast",
    "else",
    "enum",
    "explicit",
    "export",
    "extern",
    "false",
    "float",
    "for",
    "friend",
    "goto",
    "if",
    "inline",
    "int",
    "long",
    "mutable",
    "namespace",
    "new",
    "noexcept",
    "nullptr",
    "operator",
    "private",
    "protected",
    "public",
    "register",
    "reinterpret_cast",
    "restrict",
    "return",
    "short",
    "signed",
    "sizeof",
    "static",
    "static_assert",
    "static_cast",
    "struct",
    "switch",
    "template",
    "this",
    "thread_local",
    "throw",
    "true",
    "try",
    "typedef",
    "typeid",
    "typename",
    "union",
    "unsigned",
    "using",
    "virtual",
    "void",
    "volatile",
    "wchar_t",
    "while",
    "_Alignas",
    "_Alignof",
    "_Atomic",
    "_Bool",
    "_Complex",
    "_Generic",
    "_Imaginary",
    "_Noreturn",
    "_Static_assert",
    "_Thread_local",
];

// Longest first within each length class so greedy matching works.
const OPERATORS: &[&str] = &[
    "<<=", ">>=", "...", "->*", "<=>", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=", "-=",
    "*=", "/=", "%=", "&=", "|=", "^=", "::", "##", ".*",
];

const PUNCTUATION: &[&str] = &["(", ")", "[", "]", "{", "}", ";", ",", "#", "##"];

pub fn is_keyword(text: &str) -> bool {
    KEYWORDS.contains(&text)
}

fn is_ident_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_ident_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek_at(&self, n: usize) -> Option<char> {
        self.src[self.pos..].chars().nth(n)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
        }
        Some(c)
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }
}

/// Lexes `source` into lexemes. Comments and whitespace are dropped.
pub fn lex(source: &str) -> Result<Vec<Lexeme>> {
    let mut cur = Cursor {
        src: source,
        pos: 0,
        line: 1,
    };
    let mut out = Vec::new();
    while let Some(c) = cur.peek() {
        if c.is_whitespace() {
            cur.bump();
            continue;
        }
        // line splice outside literals
        if c == '\\' && matches!(cur.peek_at(1), Some('\n')) {
            cur.bump();
            cur.bump();
            continue;
        }
        if c == '\\' && cur.rest().starts_with("\\\r\n") {
            cur.bump();
            cur.bump();
            cur.bump();
            continue;
        }
        if cur.rest().starts_with("//") {
            while let Some(c) = cur.peek() {
                if c == '\n' {
                    break;
                }
                cur.bump();
            }
            continue;
        }
        if cur.rest().starts_with("/*") {
            let line = cur.line;
            cur.bump();
            cur.bump();
            loop {
                if cur.rest().starts_with("*/") {
                    cur.bump();
                    cur.bump();
                    break;
                }
                if cur.bump().is_none() {
                    return Err(Error::Lex {
                        line,
                        message: "unterminated block comment".into(),
                    });
                }
            }
            continue;
        }

        let start = cur.pos;
        let line = cur.line;
        let kind = if is_ident_start(c) {
            lex_word(&mut cur)?
        } else if c.is_ascii_digit() || (c == '.' && cur.peek_at(1).is_some_and(|d| d.is_ascii_digit())) {
            lex_number(&mut cur);
            TokenKind::Number
        } else if c == '"' {
            lex_quoted(&mut cur, '"')?;
            TokenKind::StringLit
        } else if c == '\'' {
            lex_quoted(&mut cur, '\'')?;
            TokenKind::CharLit
        } else {
            lex_symbol(&mut cur)
        };
        let text = &source[start..cur.pos];
        let kind = match kind {
            TokenKind::Identifier if is_keyword(text) => TokenKind::Keyword,
            k => k,
        };
        out.push(Lexeme {
            token: Token {
                text: text.to_string(),
                kind,
                line,
            },
            start,
            end: cur.pos,
        });
    }
    Ok(out)
}

/// Identifier, keyword, or a prefixed string/char literal such as `L"x"`,
/// `u8'c'`, or the raw form `R"d(...)d"`.
fn lex_word(cur: &mut Cursor<'_>) -> Result<TokenKind> {
    let start = cur.pos;
    while cur.peek().is_some_and(is_ident_continue) {
        cur.bump();
    }
    let word = &cur.src[start..cur.pos];
    match (word, cur.peek()) {
        ("L" | "u" | "U" | "u8", Some('"')) => {
            lex_quoted(cur, '"')?;
            Ok(TokenKind::StringLit)
        }
        ("L" | "u" | "U" | "u8", Some('\'')) => {
            lex_quoted(cur, '\'')?;
            Ok(TokenKind::CharLit)
        }
        ("R" | "LR" | "uR" | "UR" | "u8R", Some('"')) => {
            lex_raw_string(cur)?;
            Ok(TokenKind::StringLit)
        }
        _ => Ok(TokenKind::Identifier),
    }
}

fn lex_number(cur: &mut Cursor<'_>) {
    let mut prev = '\0';
    while let Some(c) = cur.peek() {
        let exponent_sign = (c == '+' || c == '-') && matches!(prev, 'e' | 'E' | 'p' | 'P');
        if c.is_ascii_alphanumeric()
            || c == '.'
            || c == '_'
            || c == '\'' && cur.peek_at(1).is_some_and(|d| d.is_ascii_alphanumeric())
            || exponent_sign
        {
            prev = c;
            cur.bump();
        } else {
            break;
        }
    }
}

fn lex_quoted(cur: &mut Cursor<'_>, quote: char) -> Result<()> {
    let line = cur.line;
    let what = if quote == '"' { "string" } else { "character" };
    cur.bump();
    loop {
        match cur.bump() {
            None | Some('\n') => {
                return Err(Error::Lex {
                    line,
                    message: format!("unterminated {what} literal"),
                })
            }
            Some('\\') => {
                // escapes, including a line splice inside the literal
                if cur.bump().is_none() {
                    return Err(Error::Lex {
                        line,
                        message: format!("unterminated {what} literal"),
                    });
                }
            }
            Some(c) if c == quote => return Ok(()),
            Some(_) => {}
        }
    }
}

fn lex_raw_string(cur: &mut Cursor<'_>) -> Result<()> {
    let line = cur.line;
    let unterminated = || Error::Lex {
        line,
        message: "unterminated raw string literal".into(),
    };
    cur.bump(); // opening quote
    let delim_start = cur.pos;
    loop {
        match cur.bump() {
            Some('(') => break,
            Some(c) if c != '"' && c != '\n' && !c.is_whitespace() => {}
            _ => return Err(unterminated()),
        }
    }
    let close = format!("){}\"", &cur.src[delim_start..cur.pos - 1]);
    loop {
        if cur.rest().starts_with(&close) {
            for _ in 0..close.chars().count() {
                cur.bump();
            }
            return Ok(());
        }
        if cur.bump().is_none() {
            return Err(unterminated());
        }
    }
}

fn lex_symbol(cur: &mut Cursor<'_>) -> TokenKind {
    let rest = cur.rest();
    let matched = OPERATORS.iter().find(|op| rest.starts_with(*op)).map(|op| op.len());
    let len = matched.unwrap_or_else(|| cur.peek().map_or(1, char::len_utf8));
    let text = &rest[..len];
    for _ in 0..text.chars().count() {
        cur.bump();
    }
    if PUNCTUATION.contains(&text) {
        TokenKind::Punctuation
    } else {
        TokenKind::Operator
    }
}

/// A function's tokens, bracketed by `<BOS>`/`<EOS>` and padded to exactly
/// [`MAX_TOKENS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<Token>,
    content_len: usize,
    truncated: bool,
}

impl TokenStream {
    /// Wraps already-lexed tokens, truncating beyond [`MAX_PAYLOAD`].
    pub fn from_payload(mut payload: Vec<Token>) -> Self {
        let truncated = payload.len() > MAX_PAYLOAD;
        payload.truncate(MAX_PAYLOAD);
        let mut tokens = Vec::with_capacity(MAX_TOKENS);
        tokens.push(Token::special(BOS));
        tokens.extend(payload);
        tokens.push(Token::special(EOS));
        let content_len = tokens.len();
        tokens.resize(MAX_TOKENS, Token::special(PAD));
        TokenStream {
            tokens,
            content_len,
            truncated,
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Non-PAD prefix: `<BOS>`, the payload, `<EOS>`.
    pub fn content(&self) -> &[Token] {
        &self.tokens[..self.content_len]
    }

    pub fn content_len(&self) -> usize {
        self.content_len
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions of source tokens (everything non-special).
    pub fn payload_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.content_len.saturating_sub(1)).filter(|&i| !self.tokens[i].is_special())
    }

    pub fn payload_len(&self) -> usize {
        self.content_len - 2
    }

    /// Highest source line reached by any payload token.
    pub fn last_line(&self) -> usize {
        self.content().iter().map(|t| t.line).max().unwrap_or(0)
    }
}

pub fn tokenize(source: &str) -> Result<TokenStream> {
    if source.is_empty() {
        return Err(Error::EmptySource);
    }
    let payload = lex(source)?.into_iter().map(|l| l.token).collect();
    Ok(TokenStream::from_payload(payload))
}

/// Mean payload length over a corpus, counting `<BOS>`/`<EOS>`.
pub fn mean_content_len(streams: &[TokenStream]) -> f64 {
    if streams.is_empty() {
        return 0.0;
    }
    streams.iter().map(|s| s.content_len() as f64).sum::<f64>() / streams.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        Self::from_tokens(Vec::new())
    }

    fn from_tokens(extra: Vec<String>) -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(extra).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, text: &str) -> Option<usize> {
        self.ids.get(text).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, text: &str) -> bool {
        self.ids.contains_key(text)
    }

    pub fn encode_token(&self, token: &Token) -> usize {
        if token.is_special() {
            return match token.text.as_str() {
                BOS => BOS_ID,
                EOS => EOS_ID,
                _ => PAD_ID,
            };
        }
        match self.ids.get(&token.text) {
            Some(&id) if id >= RESERVED.len() => id,
            _ => UNK_ID,
        }
    }

    /// `token<TAB>id` per line, reserved ids first. Tabs, newlines and
    /// backslashes inside token text are escaped.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            out.push_str(&escape(tok));
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = |message: &str| Error::Checkpoint(format!("vocabulary line {}: {message}", n + 1));
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            tokens.push(unescape(tok));
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Checkpoint(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        Ok(Self::from_tokens(tokens.split_off(RESERVED.len())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Counts payload tokens over the (truncated) streams of `records`; tokens
/// seen fewer than `min_count` times are left out and encode as `<UNK>`.
pub fn build_vocab<'a, I>(records: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a FunctionRecord>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for record in records {
        let stream = tokenize(&record.source)?;
        for pos in stream.payload_positions() {
            *counts.entry(stream.tokens()[pos].text.clone()).or_default() += 1;
        }
    }
    Ok(vocab_from_counts(counts, min_count))
}

pub fn vocab_from_counts(counts: HashMap<String, usize>, min_count: usize) -> Vocabulary {
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(tok, c)| *c >= min_count.max(1) && !RESERVED.contains(&tok.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t).collect())
}

pub fn encode(stream: &TokenStream, vocab: &Vocabulary) -> Vec<usize> {
    stream.tokens().iter().map(|t| vocab.encode_token(t)).collect()
}

use std::fmt;

/// Number of distinct symbols shared by prompts and responses.
pub const VOCAB_SIZE: usize = 32;
/// Content symbols `a`, `b`, ... available to instructions.
pub const MAX_ALPHABET: usize = 21;

const FIRST_LETTER: u8 = 11;

/// One vocabulary symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub u8);

impl Token {
    /// Response terminator.
    pub const EOS: Token = Token(0);
    /// Prompt/response separator.
    pub const SEP: Token = Token(1);
    /// Semantically empty padding; dropped by the canonical form.
    pub const FILL: Token = Token(2);
    pub const COPY: Token = Token(3);
    pub const REVERSE: Token = Token(4);
    pub const SORT: Token = Token(5);
    pub const REPEAT: Token = Token(6);
    pub const DEDUP: Token = Token(7);
    pub const MAX: Token = Token(8);
    pub const K2: Token = Token(9);
    pub const K3: Token = Token(10);

    pub fn letter(i: usize) -> Token {
        assert!(i < MAX_ALPHABET, "letter index {i} out of range");
        Token(FIRST_LETTER + i as u8)
    }

    pub fn is_letter(self) -> bool {
        self.0 >= FIRST_LETTER && (self.0 as usize) < VOCAB_SIZE
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_index(i: usize) -> Option<Token> {
        (i < VOCAB_SIZE).then_some(Token(i as u8))
    }

    pub fn name(self) -> String {
        match self {
            Token::EOS => "<eos>".into(),
            Token::SEP => "<sep>".into(),
            Token::FILL => "<fill>".into(),
            Token::COPY => "COPY".into(),
            Token::REVERSE => "REV".into(),
            Token::SORT => "SORT".into(),
            Token::REPEAT => "REPEAT".into(),
            Token::DEDUP => "DEDUP".into(),
            Token::MAX => "MAX".into(),
            Token::K2 => "k2".into(),
            Token::K3 => "k3".into(),
            t if t.is_letter() => ((b'a' + (t.0 - FIRST_LETTER)) as char).to_string(),
            t => format!("<{}>", t.0),
        }
    }

    pub fn parse(s: &str) -> Option<Token> {
        (0..VOCAB_SIZE)
            .map(|i| Token(i as u8))
            .find(|t| t.name() == s)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Space-separated token names.
pub fn render_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.name()).collect::<Vec<_>>().join(" ")
}

pub fn parse_tokens(s: &str) -> Option<Vec<Token>> {
    s.split_whitespace().map(Token::parse).collect()
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const PAUSE_ID: usize = 10;
pub const BLANK_ID: usize = 11;
/// Decoder start and end markers share one id.
pub const SOS_ID: usize = 12;
pub const EOS_ID: usize = 12;
/// Digits, PAUSE and BLANK.
pub const CTC_VOCAB: usize = 12;
/// Digits, PAUSE, BLANK and SOS/EOS.
pub const DECODER_VOCAB: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Digit(u8),
    Pause,
    Blank,
    Sos,
    Eos,
}

impl Token {
    pub fn id(self) -> usize {
        match self {
            Token::Digit(d) => d as usize,
            Token::Pause => PAUSE_ID,
            Token::Blank => BLANK_ID,
            Token::Sos => SOS_ID,
            Token::Eos => EOS_ID,
        }
    }

    /// Transcript token for an id; BLANK and the boundary id are not
    /// transcript tokens.
    pub fn from_transcript_id(id: usize) -> Option<Token> {
        match id {
            0..=9 => Some(Token::Digit(id as u8)),
            PAUSE_ID => Some(Token::Pause),
            _ => None,
        }
    }
}

/// A reference transcript: digits and pauses only.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if let Some(t) = tokens.iter().find(|t| !matches!(t, Token::Digit(d) if *d <= 9) && **t != Token::Pause) {
            return Err(Error::Domain(format!("{:?} cannot appear in a transcript", t)));
        }
        Ok(TokenSeq(tokens))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.id()).collect()
    }

    pub fn from_ids(ids: &[usize]) -> Result<Self> {
        ids.iter()
            .map(|&i| Token::from_transcript_id(i).ok_or_else(|| Error::Domain(format!("id {} is not a transcript token", i))))
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq)
    }

    pub fn digit_count(&self) -> usize {
        self.0.iter().filter(|t| matches!(t, Token::Digit(_))).count()
    }

    pub fn pause_count(&self) -> usize {
        self.0.iter().filter(|t| **t == Token::Pause).count()
    }

    /// Teacher-forcing pair: `[SOS, t…]` as decoder input, `[t…, EOS]` as labels.
    pub fn decoder_io(&self) -> (Vec<usize>, Vec<usize>) {
        let mut input = vec![SOS_ID];
        input.extend(self.ids());
        let mut labels = self.ids();
        labels.push(EOS_ID);
        (input, labels)
    }
}

/// Digits as characters, PAUSE as `|`: `"8173|2596|04"`.
impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.0 {
            match t {
                Token::Digit(d) => write!(f, "{}", d)?,
                Token::Pause => f.write_str("|")?,
                _ => unreachable!("transcripts hold digits and pauses only"),
            }
        }
        Ok(())
    }
}

impl FromStr for TokenSeq {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0'..='9' => Ok(Token::Digit(c as u8 - b'0')),
                '|' => Ok(Token::Pause),
                _ => Err(Error::Domain(format!("bad transcript character {:?} in {:?}", c, s))),
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq)
    }
}

impl Serialize for TokenSeq {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TokenSeq {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The six digit-string rhythm classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TextLabel {
    #[serde(rename = "d001")]
    D001,
    #[serde(rename = "d002")]
    D002,
    #[serde(rename = "d003")]
    D003,
    #[serde(rename = "d004")]
    D004,
    #[serde(rename = "d005")]
    D005,
    #[serde(rename = "d006")]
    D006,
}

impl TextLabel {
    pub const ALL: [TextLabel; 6] = [
        TextLabel::D001,
        TextLabel::D002,
        TextLabel::D003,
        TextLabel::D004,
        TextLabel::D005,
        TextLabel::D006,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TextLabel> {
        TextLabel::ALL.get(i).copied()
    }

    pub fn id(self) -> &'static str {
        match self {
            TextLabel::D001 => "d001",
            TextLabel::D002 => "d002",
            TextLabel::D003 => "d003",
            TextLabel::D004 => "d004",
            TextLabel::D005 => "d005",
            TextLabel::D006 => "d006",
        }
    }

    /// Written form with `-` between digits and a space at each pause.
    pub fn text_content(self) -> &'static str {
        match self {
            TextLabel::D001 => "8-1-7-3-2-5-9-6-0-4",
            TextLabel::D002 => "8-1-7-3 2-5-9-6 -0-4",
            TextLabel::D003 => "8-1-7 -3-2-5 -9-6-0 -4",
            TextLabel::D004 => "8-1 -7-3 -2-5 -9-6 -0-4",
            TextLabel::D005 => "9-4-0-5 3-7-2-6 -8-1",
            TextLabel::D006 => "9-4-0 -5-3-7 -2-6-8 -1",
        }
    }

    pub fn canonical(self) -> TokenSeq {
        let mut out = Vec::new();
        for c in self.text_content().chars() {
            match c {
                '0'..='9' => out.push(Token::Digit(c as u8 - b'0')),
                ' ' => out.push(Token::Pause),
                _ => {}
            }
        }
        TokenSeq(out)
    }
}

impl fmt::Display for TextLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TextLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TextLabel::ALL
            .into_iter()
            .find(|l| l.id() == s)
            .ok_or_else(|| Error::Lookup(format!("unknown text label {:?}", s)))
    }
}

//! Integer ids for the surface alphabet plus two sequence specials.

use crate::grammar::Token;

pub const BOS: u32 = Token::ALL.len() as u32;
pub const EOS: u32 = BOS + 1;
pub const VOCAB_SIZE: usize = Token::ALL.len() + 2;
pub const MASK: u32 = Token::Mask as u32;

pub fn token_id(t: Token) -> u32 {
    t.index() as u32
}

pub fn id_token(id: u32) -> Option<Token> {
    Token::ALL.get(id as usize).copied()
}

pub fn is_special(id: u32) -> bool {
    id == BOS || id == EOS
}

/// `BOS tokens EOS`.
pub fn with_specials(tokens: &[Token]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(BOS);
    ids.extend(tokens.iter().map(|&t| token_id(t)));
    ids.push(EOS);
    ids
}

/// `BOS tokens`, the prefix an autoregressive model reads for a sentence.
pub fn with_bos(tokens: &[Token]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(BOS);
    ids.extend(tokens.iter().map(|&t| token_id(t)));
    ids
}

/// Surface ids a masked model may substitute at a corrupted position.
pub fn replacement_ids() -> Vec<u32> {
    Token::ALL
        .iter()
        .filter(|&&t| t != Token::Mask)
        .map(|&t| token_id(t))
        .collect()
}

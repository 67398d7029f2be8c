//! Tokenizer and the diagnosis response schema.
//!
//! The vocabulary is word-level and built from a world's site/kind name
//! lists plus coordinate and keyword tokens. The canonical response reads
//!
//! ```text
//! abnormality present bbox <x1> <y1> <x2> <y2> category <site> <kind> <eos>
//! ```
//!
//! and the parser is total: any token sequence yields a `Response`, with
//! `schema_valid` set only when both a bbox and a category were extracted.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::BBox;
use crate::sample::{Response, TokenId};

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error("coordinate {0} outside token range 0..={1}")]
    CoordinateRange(usize, usize),
    #[error("category id {0} out of range (C = {1})")]
    CategoryRange(usize, usize),
}

pub const WORD_PAD: &str = "<pad>";
pub const WORD_BOS: &str = "<bos>";
pub const WORD_EOS: &str = "<eos>";
pub const WORD_SEP: &str = "<sep>";
pub const KW_ABNORMALITY: &str = "abnormality";
pub const KW_PRESENT: &str = "present";
pub const KW_BBOX: &str = "bbox";
pub const KW_CATEGORY: &str = "category";
pub const KW_HINT: &str = "hint";
const QUERY_WORDS: [&str; 3] = ["describe", "the", "image"];

/// Category ids enumerate the (site, kind) grid in kind-major order.
pub fn category_id(site_idx: usize, kind_idx: usize, n_kinds: usize) -> usize {
    site_idx * n_kinds + kind_idx
}

pub fn site_idx(category: usize, n_kinds: usize) -> usize {
    category / n_kinds
}

pub fn kind_idx(category: usize, n_kinds: usize) -> usize {
    category % n_kinds
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    sites: Vec<String>,
    kinds: Vec<String>,
    coord_base: TokenId,
    coord_max: usize,
    site_base: TokenId,
    kind_base: TokenId,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words && self.sites == other.sites && self.kinds == other.kinds
    }
}

impl Vocab {
    /// Build the vocabulary for a world with the given site/kind names and a
    /// maximum coordinate value (inclusive). Token ids form one contiguous
    /// range; specials come first so PAD is always 0.
    pub fn new(sites: &[String], kinds: &[String], coord_max: usize) -> Self {
        let mut words: Vec<String> = vec![
            WORD_PAD.into(),
            WORD_BOS.into(),
            WORD_EOS.into(),
            WORD_SEP.into(),
            KW_ABNORMALITY.into(),
            KW_PRESENT.into(),
            KW_BBOX.into(),
            KW_CATEGORY.into(),
            KW_HINT.into(),
        ];
        words.extend(QUERY_WORDS.iter().map(|w| w.to_string()));
        let coord_base = words.len() as TokenId;
        words.extend((0..=coord_max).map(|v| v.to_string()));
        let site_base = words.len() as TokenId;
        words.extend(sites.iter().cloned());
        let kind_base = words.len() as TokenId;
        words.extend(kinds.iter().cloned());

        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self {
            words,
            index,
            sites: sites.to_vec(),
            kinds: kinds.to_vec(),
            coord_base,
            coord_max,
            site_base,
            kind_base,
        }
    }

    /// Rebuild the word index after deserialization (the map is not stored).
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn bos(&self) -> TokenId {
        1
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn sep(&self) -> TokenId {
        3
    }

    pub fn coord_max(&self) -> usize {
        self.coord_max
    }

    pub fn num_categories(&self) -> usize {
        self.sites.len() * self.kinds.len()
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn kinds(&self) -> &[String] {
        &self.kinds
    }

    pub fn word(&self, id: TokenId) -> Result<&str, VocabError> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(VocabError::UnknownToken(id))
    }

    pub fn token(&self, word: &str) -> Result<TokenId, VocabError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| VocabError::UnknownWord(word.to_string()))
    }

    /// Whitespace-tokenized encoding; errors on any out-of-vocabulary word.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.split_whitespace().map(|w| self.token(w)).collect()
    }

    /// Renders token ids back to a space-joined string. Out-of-range ids
    /// render as `<unk:ID>` so decoding is total.
    pub fn decode_text(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| match self.words.get(t as usize) {
                Some(w) => w.clone(),
                None => format!("<unk:{t}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn coord_token(&self, value: usize) -> Result<TokenId, VocabError> {
        if value > self.coord_max {
            return Err(VocabError::CoordinateRange(value, self.coord_max));
        }
        Ok(self.coord_base + value as TokenId)
    }

    pub fn coord_value(&self, token: TokenId) -> Option<usize> {
        let v = token.checked_sub(self.coord_base)? as usize;
        (v <= self.coord_max).then_some(v)
    }

    pub fn site_token(&self, site: usize) -> TokenId {
        self.site_base + site as TokenId
    }

    pub fn kind_token(&self, kind: usize) -> TokenId {
        self.kind_base + kind as TokenId
    }

    fn site_of_token(&self, token: TokenId) -> Option<usize> {
        let v = token.checked_sub(self.site_base)? as usize;
        (v < self.sites.len()).then_some(v)
    }

    fn kind_of_token(&self, token: TokenId) -> Option<usize> {
        let v = token.checked_sub(self.kind_base)? as usize;
        (v < self.kinds.len()).then_some(v)
    }

    /// True for tokens that are part of a category name (site or kind word).
    pub fn is_name_token(&self, token: TokenId) -> bool {
        self.site_of_token(token).is_some() || self.kind_of_token(token).is_some()
    }

    pub fn category_tokens(&self, category: usize) -> Result<(TokenId, TokenId), VocabError> {
        if category >= self.num_categories() {
            return Err(VocabError::CategoryRange(category, self.num_categories()));
        }
        let s = site_idx(category, self.kinds.len());
        let k = kind_idx(category, self.kinds.len());
        Ok((self.site_token(s), self.kind_token(k)))
    }

    /// Human-readable category name, e.g. `"lung nodule"`.
    pub fn category_name(&self, category: usize) -> Result<String, VocabError> {
        if category >= self.num_categories() {
            return Err(VocabError::CategoryRange(category, self.num_categories()));
        }
        let s = site_idx(category, self.kinds.len());
        let k = kind_idx(category, self.kinds.len());
        Ok(format!("{} {}", self.sites[s], self.kinds[k]))
    }

    /// Quantize a continuous box to integer patch coordinates, clamped to the
    /// coordinate-token range. Rounding is monotone, so ordering survives.
    pub fn quantize_bbox(&self, bbox: &BBox) -> [usize; 4] {
        let q = |v: f64| (v.round().max(0.0) as usize).min(self.coord_max);
        [q(bbox.x1), q(bbox.y1), q(bbox.x2), q(bbox.y2)]
    }

    /// Canonical response: detection phrase, then bbox, then category, then
    /// EOS. Coordinates are quantized to integer patch units.
    pub fn encode_response(&self, category: usize, bbox: &BBox) -> Result<Vec<TokenId>, VocabError> {
        let (site_tok, kind_tok) = self.category_tokens(category)?;
        let [x1, y1, x2, y2] = self.quantize_bbox(bbox);
        Ok(vec![
            self.token(KW_ABNORMALITY)?,
            self.token(KW_PRESENT)?,
            self.token(KW_BBOX)?,
            self.coord_token(x1)?,
            self.coord_token(y1)?,
            self.coord_token(x2)?,
            self.coord_token(y2)?,
            self.token(KW_CATEGORY)?,
            site_tok,
            kind_tok,
            self.eos(),
        ])
    }

    /// Hint suffix appended to a query: `hint bbox <x1> <y1> <x2> <y2>`.
    pub fn encode_hint(&self, bbox: &BBox) -> Result<Vec<TokenId>, VocabError> {
        let [x1, y1, x2, y2] = self.quantize_bbox(bbox);
        Ok(vec![
            self.token(KW_HINT)?,
            self.token(KW_BBOX)?,
            self.coord_token(x1)?,
            self.coord_token(y1)?,
            self.coord_token(x2)?,
            self.coord_token(y2)?,
        ])
    }

    /// Standard query for a site: `describe the <site> image`.
    pub fn encode_query(&self, site: usize) -> Vec<TokenId> {
        vec![
            self.token("describe").unwrap(),
            self.token("the").unwrap(),
            self.site_token(site),
            self.token("image").unwrap(),
        ]
    }

    /// Total, order-tolerant parse. Scans for the first `bbox` keyword
    /// followed by four coordinate tokens in valid order, and the first
    /// `category` keyword followed by a site and a kind token; either segment
    /// may come first. Malformed input yields `schema_valid = false`.
    pub fn parse_response(&self, tokens: &[TokenId]) -> Response {
        let kw_bbox = self.token(KW_BBOX).unwrap();
        let kw_category = self.token(KW_CATEGORY).unwrap();

        let mut parsed_bbox = None;
        let mut parsed_category = None;
        for (i, &t) in tokens.iter().enumerate() {
            if parsed_bbox.is_none() && t == kw_bbox && i + 4 < tokens.len() {
                let coords: Vec<usize> = tokens[i + 1..i + 5]
                    .iter()
                    .filter_map(|&c| self.coord_value(c))
                    .collect();
                if coords.len() == 4 {
                    if let Ok(b) = BBox::new(
                        coords[0] as f64,
                        coords[1] as f64,
                        coords[2] as f64,
                        coords[3] as f64,
                    ) {
                        parsed_bbox = Some(b);
                    }
                }
            }
            if parsed_category.is_none() && t == kw_category && i + 2 < tokens.len() {
                let s = self.site_of_token(tokens[i + 1]);
                let k = self.kind_of_token(tokens[i + 2]);
                if let (Some(s), Some(k)) = (s, k) {
                    parsed_category = Some(category_id(s, k, self.kinds.len()));
                }
            }
        }
        Response {
            tokens: tokens.to_vec(),
            schema_valid: parsed_bbox.is_some() && parsed_category.is_some(),
            parsed_category,
            parsed_bbox,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(
            &["lung".into(), "kidney".into()],
            &["nodule".into(), "stone".into()],
            10,
        )
    }

    #[test]
    fn token_ids_are_contiguous_and_round_trip() {
        let v = vocab();
        for id in 0..v.size() as TokenId {
            let w = v.word(id).unwrap().to_string();
            assert_eq!(v.token(&w).unwrap(), id);
        }
    }

    #[test]
    fn encode_then_parse_round_trips() {
        let v = vocab();
        let bbox = BBox::new(1.0, 2.0, 5.0, 6.0).unwrap();
        let toks = v.encode_response(2, &bbox).unwrap();
        let r = v.parse_response(&toks);
        assert!(r.schema_valid);
        assert_eq!(r.parsed_category, Some(2));
        assert_eq!(r.parsed_bbox, Some(bbox));
    }

    #[test]
    fn parse_empty_is_invalid() {
        let v = vocab();
        let r = v.parse_response(&[]);
        assert!(!r.schema_valid);
        assert_eq!(r.parsed_category, None);
        assert_eq!(r.parsed_bbox, None);
    }

    #[test]
    fn parse_tolerates_category_before_bbox() {
        let v = vocab();
        let canonical = v.encode_response(1, &BBox::new(1.0, 2.0, 5.0, 6.0).unwrap()).unwrap();
        // Rearrange: category segment (positions 7..10) before bbox segment
        // (positions 2..7), keep the detection phrase in front.
        let mut permuted = canonical[..2].to_vec();
        permuted.extend_from_slice(&canonical[7..10]);
        permuted.extend_from_slice(&canonical[2..7]);
        permuted.push(v.eos());
        let r = v.parse_response(&permuted);
        assert!(r.schema_valid);
        assert_eq!(r.parsed_category, Some(1));
        assert_eq!(r.parsed_bbox, Some(BBox::new(1.0, 2.0, 5.0, 6.0).unwrap()));
    }

    #[test]
    fn parse_rejects_inverted_bbox_coordinates() {
        let v = vocab();
        let mut toks = vec![v.token(KW_BBOX).unwrap()];
        for c in [5usize, 2, 1, 6] {
            toks.push(v.coord_token(c).unwrap());
        }
        toks.push(v.eos());
        let r = v.parse_response(&toks);
        assert_eq!(r.parsed_bbox, None);
        assert!(!r.schema_valid);
    }

    #[test]
    fn schema_valid_implies_both_fields() {
        let v = vocab();
        // Category present, bbox absent.
        let mut toks = vec![v.token(KW_CATEGORY).unwrap(), v.site_token(0), v.kind_token(1)];
        toks.push(v.eos());
        let r = v.parse_response(&toks);
        assert_eq!(r.parsed_category, Some(1));
        assert!(!r.schema_valid);
    }

    #[test]
    fn coordinate_quantization_clamps() {
        let v = vocab();
        let b = BBox::new(-2.0, 0.4, 9.6, 25.0).unwrap();
        assert_eq!(v.quantize_bbox(&b), [0, 0, 10, 10]);
    }

    proptest! {
        /// Tokenizer round trip is the identity on all schema-valid responses.
        #[test]
        fn prop_schema_round_trip(cat in 0usize..4, x1 in 0usize..10, y1 in 0usize..10,
                                  w in 0usize..10, h in 0usize..10) {
            let v = vocab();
            let x2 = (x1 + w).min(10);
            let y2 = (y1 + h).min(10);
            let bbox = BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap();
            let toks = v.encode_response(cat, &bbox).unwrap();
            let r = v.parse_response(&toks);
            prop_assert!(r.schema_valid);
            prop_assert_eq!(r.parsed_category, Some(cat));
            prop_assert_eq!(r.parsed_bbox, Some(bbox));
            // encode(decode(ids)) = ids through the text path as well.
            let text = v.decode_text(&toks);
            prop_assert_eq!(v.encode_text(&text).unwrap(), toks);
        }

        /// The parser is total: arbitrary token soup never panics.
        #[test]
        fn prop_parse_total(tokens in proptest::collection::vec(0u32..40, 0..24)) {
            let v = vocab();
            let r = v.parse_response(&tokens);
            if r.schema_valid {
                prop_assert!(r.parsed_category.is_some() && r.parsed_bbox.is_some());
            }
        }
    }
}

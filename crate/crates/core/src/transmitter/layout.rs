use crate::corpus::{Persona, Speaker, TokenId, Turn, Vocab};
use crate::error::{Error, Result};

pub const SEG_PERSONA: usize = 0;
pub const SEG_PARTNER: usize = 1;
pub const SEG_SELF: usize = 2;
pub const SEG_RESPONSE: usize = 3;

/// Persona and history of one responder, already encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedContext {
    pub persona: Vec<Vec<TokenId>>,
    /// `(spoken by the responder, tokens)`, oldest first.
    pub history: Vec<(bool, Vec<TokenId>)>,
}

impl EncodedContext {
    pub fn new(vocab: &Vocab, persona: &Persona, history: &[Turn], responder: Speaker) -> Self {
        EncodedContext {
            persona: persona.profiles.iter().map(|p| vocab.encode(p)).collect(),
            history: history
                .iter()
                .map(|t| (t.speaker == responder, vocab.encode(&t.text)))
                .collect(),
        }
    }

    /// No persona and no history: the model used as a plain language model.
    pub fn unconditional() -> Self {
        EncodedContext {
            persona: Vec::new(),
            history: Vec::new(),
        }
    }

    pub fn push(&mut self, from_responder: bool, tokens: Vec<TokenId>) {
        self.history.push((from_responder, tokens));
    }
}

/// What follows the context in a layout.
#[derive(Clone, Copy, Debug)]
pub enum Tail<'a> {
    /// Ends at the response `[SEP]`, ready for generation. `reserve` positions
    /// are kept free for generated tokens.
    Open { reserve: usize },
    Response {
        tokens: &'a [TokenId],
        eos: bool,
        cls: bool,
    },
}

/// Assembled model input.
///
/// `[PS] persona… ([SEP] utterance…)* [SEP] response… [EOS] [CLS]`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<usize>,
    /// 1 on response tokens and the closing `[EOS]`.
    pub loss_mask: Vec<u8>,
    pub cls_position: Option<usize>,
    /// Index of the first response token (one past the response `[SEP]`).
    pub response_start: usize,
    /// History utterances dropped to fit `max_positions`.
    pub dropped_history: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// `(row, target)` pairs: logits at `row` predict the masked token at `row + 1`.
    pub fn targets(&self) -> Vec<(usize, TokenId)> {
        self.loss_mask
            .iter()
            .enumerate()
            .filter(|&(t, &m)| m == 1 && t > 0)
            .map(|(t, _)| (t - 1, self.token_ids[t]))
            .collect()
    }

    /// Appends a generated token to an open layout.
    pub fn push_response_token(&mut self, token: TokenId) {
        self.token_ids.push(token);
        self.segment_ids.push(SEG_RESPONSE);
        self.loss_mask.push(1);
    }
}

/// Assembles a layout, dropping the oldest history utterances first when the
/// result would exceed `max_positions`. The persona is never truncated.
pub fn build_layout(ctx: &EncodedContext, tail: Tail<'_>, max_positions: usize) -> Result<TokenLayout> {
    let persona_len = 1 + ctx.persona.iter().map(Vec::len).sum::<usize>();
    let tail_len = match tail {
        Tail::Open { reserve } => 1 + reserve,
        Tail::Response { tokens, eos, cls } => 1 + tokens.len() + eos as usize + cls as usize,
    };
    if persona_len > max_positions {
        return Err(Error::TooLong {
            len: persona_len,
            max: max_positions,
        });
    }
    if persona_len + tail_len > max_positions {
        return Err(Error::TooLong {
            len: persona_len + tail_len,
            max: max_positions,
        });
    }
    let mut budget = max_positions - persona_len - tail_len;
    let mut keep_from = ctx.history.len();
    for (i, (_, utt)) in ctx.history.iter().enumerate().rev() {
        let need = 1 + utt.len();
        if need > budget {
            break;
        }
        budget -= need;
        keep_from = i;
    }

    let mut layout = TokenLayout {
        token_ids: Vec::new(),
        segment_ids: Vec::new(),
        loss_mask: Vec::new(),
        cls_position: None,
        response_start: 0,
        dropped_history: keep_from,
    };
    let push = |layout: &mut TokenLayout, tok: TokenId, seg: usize, mask: u8| {
        layout.token_ids.push(tok);
        layout.segment_ids.push(seg);
        layout.loss_mask.push(mask);
    };
    push(&mut layout, Vocab::PS, SEG_PERSONA, 0);
    for &t in ctx.persona.iter().flatten() {
        push(&mut layout, t, SEG_PERSONA, 0);
    }
    for (own, utt) in &ctx.history[keep_from..] {
        let seg = if *own { SEG_SELF } else { SEG_PARTNER };
        push(&mut layout, Vocab::SEP, seg, 0);
        for &t in utt {
            push(&mut layout, t, seg, 0);
        }
    }
    push(&mut layout, Vocab::SEP, SEG_RESPONSE, 0);
    layout.response_start = layout.len();
    if let Tail::Response { tokens, eos, cls } = tail {
        for &t in tokens {
            push(&mut layout, t, SEG_RESPONSE, 1);
        }
        if eos {
            push(&mut layout, Vocab::EOS, SEG_RESPONSE, 1);
        }
        if cls {
            layout.cls_position = Some(layout.len());
            push(&mut layout, Vocab::CLS, SEG_RESPONSE, 0);
        }
    }
    Ok(layout)
}

//! Input layout for the two passes through the shared network.
//!
//! Both passes see `prefix ⧺ knowledge ⧺ context ⧺ [BOU] response [EOU]`.
//! The generation pass uses the latent token `[Z_z]` as prefix and a mask
//! that is causal inside the response; the recognition pass uses `[MASK]`
//! and full bi-directional attention.

use crate::corpus::{latent_token_id, EncodedSample, Speaker, BOU, EOU, MASK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Latent,
    Mask,
    Knowledge,
    Context,
    Response,
}

impl Segment {
    fn is_response(self) -> bool {
        self == Segment::Response
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// The responding speaker.
    A,
    /// The other speaker.
    B,
    /// Background knowledge.
    C,
}

/// The first position of the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prefix {
    Latent(usize),
    Mask,
}

/// Sequence budgets shared by composition and decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    /// Tokens allowed for knowledge plus context, `[EOU]`s included.
    pub max_context_len: usize,
    /// Tokens allowed for the response words plus the closing `[EOU]`.
    pub max_response_len: usize,
    /// Largest relative turn index a context utterance may carry.
    pub max_turns: usize,
    pub latent_k: usize,
}

impl Limits {
    /// Rows of the position table: one empty row, then positions.
    pub fn position_rows(&self) -> usize {
        1 + self.max_context_len.max(self.max_response_len + 1)
    }

    /// Rows of the turn table: one empty row, then turns `0..=max_turns`.
    pub fn turn_rows(&self) -> usize {
        self.max_turns + 2
    }
}

pub const ROLE_ROWS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedInput {
    pub prefix: Prefix,
    pub token_ids: Vec<u32>,
    pub roles: Vec<Option<Role>>,
    pub turns: Vec<Option<usize>>,
    pub positions: Vec<Option<usize>>,
    pub segments: Vec<Segment>,
    pub attn_mask: Tensor,
    /// Index of `[BOU]`.
    pub response_start: usize,
}

impl ComposedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Embedding-table rows; row 0 of each table is the pinned empty row.
    pub fn role_rows(&self) -> Vec<usize> {
        self.roles
            .iter()
            .map(|r| match r {
                None => 0,
                Some(Role::A) => 1,
                Some(Role::B) => 2,
                Some(Role::C) => 3,
            })
            .collect()
    }

    pub fn turn_rows(&self) -> Vec<usize> {
        self.turns.iter().map(|t| t.map_or(0, |t| t + 1)).collect()
    }

    pub fn position_rows(&self) -> Vec<usize> {
        self.positions.iter().map(|p| p.map_or(0, |p| p + 1)).collect()
    }

    /// Response word ids (between `[BOU]` and any closing `[EOU]`).
    pub fn response_tokens(&self) -> &[u32] {
        let body = &self.token_ids[self.response_start + 1..];
        match body.last() {
            Some(&EOU) => &body[..body.len() - 1],
            _ => body,
        }
    }
}

#[derive(Default)]
struct Builder {
    token_ids: Vec<u32>,
    roles: Vec<Option<Role>>,
    turns: Vec<Option<usize>>,
    positions: Vec<Option<usize>>,
    segments: Vec<Segment>,
}

impl Builder {
    fn push(&mut self, id: u32, role: Option<Role>, turn: Option<usize>, pos: Option<usize>, seg: Segment) {
        self.token_ids.push(id);
        self.roles.push(role);
        self.turns.push(turn);
        self.positions.push(pos);
        self.segments.push(seg);
    }

    fn utterance(&mut self, ids: &[u32], role: Role, turn: usize, seg: Segment) {
        for (p, &id) in ids.iter().chain(std::iter::once(&EOU)).enumerate() {
            self.push(id, Some(role), Some(turn), Some(p), seg);
        }
    }
}

fn role_of(speaker: Speaker) -> Role {
    match speaker {
        Speaker::A => Role::A,
        Speaker::B => Role::B,
    }
}

/// Lays out one pass. With `terminated` the response is closed by `[EOU]`;
/// without it the sequence ends on the last given response token, which is
/// how decoding extends a partial response.
pub fn compose(
    prefix: Prefix,
    sample: &EncodedSample,
    response: &[u32],
    terminated: bool,
    limits: &Limits,
) -> Result<ComposedInput> {
    if let Prefix::Latent(z) = prefix {
        if z >= limits.latent_k {
            return Err(Error::LatentRange {
                z,
                k: limits.latent_k,
            });
        }
    }
    let resp_len = response.len() + usize::from(terminated);
    if resp_len > limits.max_response_len {
        return Err(Error::Length(format!(
            "response needs {resp_len} tokens, limit is {}",
            limits.max_response_len
        )));
    }

    let knowledge_len: usize = sample.knowledge.iter().map(|k| k.len() + 1).sum();
    if knowledge_len > limits.max_context_len {
        return Err(Error::Length(format!(
            "knowledge needs {knowledge_len} tokens, limit is {}",
            limits.max_context_len
        )));
    }
    // Keep the newest utterances that fit; older ones are dropped whole.
    let mut budget = limits.max_context_len - knowledge_len;
    let mut kept = 0;
    for (_, ids) in sample.context.iter().rev() {
        let need = ids.len() + 1;
        if need > budget || kept + 1 > limits.max_turns {
            break;
        }
        budget -= need;
        kept += 1;
    }
    if kept == 0 && !sample.context.is_empty() {
        return Err(Error::Length(format!(
            "latest context utterance does not fit in {} tokens",
            limits.max_context_len - knowledge_len
        )));
    }
    let context = &sample.context[sample.context.len() - kept..];

    let mut b = Builder::default();
    match prefix {
        Prefix::Latent(z) => b.push(latent_token_id(z), None, None, None, Segment::Latent),
        Prefix::Mask => b.push(MASK, None, None, None, Segment::Mask),
    }
    for k in &sample.knowledge {
        b.utterance(k, Role::C, 0, Segment::Knowledge);
    }
    for (i, (speaker, ids)) in context.iter().enumerate() {
        b.utterance(ids, role_of(*speaker), kept - i, Segment::Context);
    }
    let response_start = b.token_ids.len();
    b.push(BOU, Some(Role::A), Some(0), Some(0), Segment::Response);
    for (p, &id) in response.iter().enumerate() {
        b.push(id, Some(Role::A), Some(0), Some(p + 1), Segment::Response);
    }
    if terminated {
        b.push(EOU, Some(Role::A), Some(0), Some(response.len() + 1), Segment::Response);
    }

    let attn_mask = match prefix {
        Prefix::Latent(_) => build_generation_mask(&b.segments),
        Prefix::Mask => build_recognition_mask(&b.segments),
    };
    Ok(ComposedInput {
        prefix,
        token_ids: b.token_ids,
        roles: b.roles,
        turns: b.turns,
        positions: b.positions,
        segments: b.segments,
        attn_mask,
        response_start,
    })
}

/// Generation-pass layout with latent value `z` and a closed response.
pub fn compose_generation_input(sample: &EncodedSample, z: usize, limits: &Limits) -> Result<ComposedInput> {
    compose(Prefix::Latent(z), sample, &sample.response, true, limits)
}

/// Recognition-pass layout scoring `response` against the sample's context.
pub fn compose_recognition_input(
    sample: &EncodedSample,
    response: &[u32],
    limits: &Limits,
) -> Result<ComposedInput> {
    compose(Prefix::Mask, sample, response, true, limits)
}

/// Bi-directional among latent, knowledge and context; causal inside the
/// response; nothing outside the response attends into it.
pub fn build_generation_mask(segments: &[Segment]) -> Tensor {
    let s = segments.len();
    let mut mask = Tensor::zeros(&[s, s]);
    for (i, si) in segments.iter().enumerate() {
        let row = mask.row_mut(i);
        for (j, sj) in segments.iter().enumerate() {
            let allowed = if si.is_response() {
                !sj.is_response() || j <= i
            } else {
                !sj.is_response()
            };
            if allowed {
                row[j] = 1.0;
            }
        }
    }
    mask
}

pub fn build_recognition_mask(segments: &[Segment]) -> Tensor {
    let s = segments.len();
    Tensor::full(&[s, s], 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialogueSample, Utterance, Vocab};

    fn limits(k: usize) -> Limits {
        Limits {
            max_context_len: 64,
            max_response_len: 16,
            max_turns: 16,
            latent_k: k,
        }
    }

    fn hi_hello() -> (Vocab, EncodedSample) {
        let s = DialogueSample::new(vec![Utterance::new(Speaker::B, "hi")], "hello");
        let v = Vocab::build([&s], 1, 100, 2).unwrap();
        let e = s.encode(&v);
        (v, e)
    }

    #[test]
    fn generation_layout_example() {
        let (v, e) = hi_hello();
        let c = compose_generation_input(&e, 1, &limits(2)).unwrap();
        let hi = v.id("hi").unwrap();
        let hello = v.id("hello").unwrap();
        assert_eq!(c.token_ids, vec![v.latent_id(1), hi, EOU, BOU, hello, EOU]);
        use Role::*;
        assert_eq!(c.roles, vec![None, Some(B), Some(B), Some(A), Some(A), Some(A)]);
        assert_eq!(c.turns, vec![None, Some(1), Some(1), Some(0), Some(0), Some(0)]);
        assert_eq!(c.positions, vec![None, Some(0), Some(1), Some(0), Some(1), Some(2)]);
        assert_eq!(c.response_start, 3);
        assert_eq!(c.role_rows()[0], 0);
        assert_eq!(c.turn_rows()[0], 0);
        assert_eq!(c.position_rows()[0], 0);
        assert_eq!(c.response_tokens(), &[hello]);
    }

    #[test]
    fn recognition_layout_example() {
        let (v, e) = hi_hello();
        let c = compose_recognition_input(&e, &e.response, &limits(2)).unwrap();
        let hi = v.id("hi").unwrap();
        let hello = v.id("hello").unwrap();
        assert_eq!(c.token_ids, vec![MASK, hi, EOU, BOU, hello, EOU]);
        assert_eq!(c.segments[0], Segment::Mask);
        assert_eq!(c.roles[0], None);
        assert_eq!(c.attn_mask.data(), &[1.0; 36]);
    }

    #[test]
    fn negative_response_swaps_only_the_response_segment() {
        let (v, e) = hi_hello();
        let pos = compose_recognition_input(&e, &e.response, &limits(2)).unwrap();
        let neg = compose_recognition_input(&e, &[v.id("hi").unwrap(), UNK_ID], &limits(2)).unwrap();
        assert_eq!(pos.token_ids[..pos.response_start + 1], neg.token_ids[..neg.response_start + 1]);
        assert_eq!(neg.response_tokens(), &[v.id("hi").unwrap(), UNK_ID]);
    }
    const UNK_ID: u32 = crate::corpus::UNK;

    #[test]
    fn same_speaker_context_shares_role_a() {
        let s = DialogueSample::new(
            vec![
                Utterance::new(Speaker::A, "one"),
                Utterance::new(Speaker::A, "two"),
                Utterance::new(Speaker::B, "three"),
            ],
            "four",
        );
        let v = Vocab::build([&s], 1, 100, 2).unwrap();
        let c = compose_generation_input(&s.encode(&v), 0, &limits(2)).unwrap();
        assert_eq!(&c.roles[1..5], &[Some(Role::A); 4]);
        assert_eq!(&c.roles[5..7], &[Some(Role::B); 2]);
        assert_eq!(&c.turns[1..7], &[Some(3), Some(3), Some(2), Some(2), Some(1), Some(1)]);
    }

    #[test]
    fn knowledge_follows_the_prefix_with_role_c() {
        let s = DialogueSample::new(vec![Utterance::new(Speaker::B, "hi")], "yo")
            .with_knowledge(vec!["tea".into()]);
        let v = Vocab::build([&s], 1, 100, 2).unwrap();
        let c = compose_generation_input(&s.encode(&v), 0, &limits(2)).unwrap();
        assert_eq!(c.segments[1..3], [Segment::Knowledge; 2]);
        assert_eq!(c.roles[1], Some(Role::C));

        let (_, e) = hi_hello();
        let c = compose_generation_input(&e, 0, &limits(2)).unwrap();
        assert!(!c.segments.contains(&Segment::Knowledge));
    }

    #[test]
    fn latent_out_of_range() {
        let (_, e) = hi_hello();
        assert!(matches!(
            compose_generation_input(&e, 2, &limits(2)),
            Err(Error::LatentRange { z: 2, k: 2 })
        ));
    }

    #[test]
    fn truncation_drops_oldest_utterances_whole() {
        let s = DialogueSample::new(
            vec![
                Utterance::new(Speaker::B, "a a a"),
                Utterance::new(Speaker::A, "b b"),
                Utterance::new(Speaker::B, "c"),
            ],
            "d",
        );
        let v = Vocab::build([&s], 1, 100, 2).unwrap();
        let lim = Limits {
            max_context_len: 6,
            ..limits(2)
        };
        let c = compose_generation_input(&s.encode(&v), 0, &lim).unwrap();
        // "b b [EOU] c [EOU]" fits in 6, "a a a [EOU]" does not
        assert_eq!(c.response_start, 1 + 5);
        assert_eq!(c.turns[1], Some(2));

        let tight = Limits {
            max_context_len: 1,
            ..limits(2)
        };
        assert!(matches!(
            compose_generation_input(&s.encode(&v), 0, &tight),
            Err(Error::Length(_))
        ));
        let short = Limits {
            max_response_len: 1,
            ..limits(2)
        };
        assert!(matches!(
            compose_generation_input(&s.encode(&v), 0, &short),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn response_turn_stays_zero_regardless_of_dialogue_round() {
        let base = vec![Utterance::new(Speaker::B, "x"), Utterance::new(Speaker::A, "y")];
        let mut long = vec![Utterance::new(Speaker::A, "old"); 5];
        long.extend(base.clone());
        let short = DialogueSample::new(base, "z");
        let long = DialogueSample::new(long, "z");
        let v = Vocab::build([&short, &long], 1, 100, 2).unwrap();
        let lim = Limits {
            max_context_len: 4,
            ..limits(2)
        };
        let a = compose_generation_input(&short.encode(&v), 0, &lim).unwrap();
        let b = compose_generation_input(&long.encode(&v), 0, &lim).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.turns[a.response_start], Some(0));
    }

    #[test]
    fn generation_mask_example() {
        use Segment::*;
        let m = build_generation_mask(&[Latent, Context, Response, Response]);
        assert_eq!(
            m.data(),
            &[1., 1., 0., 0., 1., 1., 0., 0., 1., 1., 1., 0., 1., 1., 1., 1.]
        );
    }

    #[test]
    fn recognition_mask_is_all_ones() {
        use Segment::*;
        let m = build_recognition_mask(&[Mask, Context, Response]);
        assert_eq!(m.shape(), &[3, 3]);
        assert!(m.data().iter().all(|&x| x == 1.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn segments() -> impl Strategy<Value = Vec<Segment>> {
            (0usize..3, 0usize..6, 1usize..6).prop_map(|(k, c, r)| {
                let mut s = vec![Segment::Latent];
                s.extend(std::iter::repeat_n(Segment::Knowledge, k));
                s.extend(std::iter::repeat_n(Segment::Context, c));
                s.extend(std::iter::repeat_n(Segment::Response, r));
                s
            })
        }

        proptest! {
            #[test]
            fn generation_mask_causality(segs in segments()) {
                let m = build_generation_mask(&segs);
                let n = segs.len();
                for i in 0..n {
                    for j in 0..n {
                        let v = m.row(i)[j];
                        if segs[j].is_response() && (!segs[i].is_response() || j > i) {
                            prop_assert_eq!(v, 0.0);
                        } else {
                            prop_assert_eq!(v, 1.0);
                        }
                    }
                }
                prop_assert!(m.row(n - 1).iter().all(|&x| x == 1.0));
            }
        }
    }
}

//! Text side of the pipeline: normalization and vocabulary, BIO role
//! labels, CRF decoding, the BiLSTM-CRF role tagger, and the contextual
//! embedding encoder whose outputs feed the fusion stage.
//!
//! Roles split an expression into identity words (what the object is) and
//! attribute words (how to pick it out): in "the red mug on the left",
//! "mug" carries identity, "red" and "left" carry attributes. Tags use the
//! usual BIO scheme over `{B-IW, I-IW, B-AW, I-AW, O}`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::nn::{AdamConfig, AdamW, Binder, GradAccum, Init, LinearP, LstmP, ParamId, ParamStore};
use crate::{Result, RorError};

/// Reserved id for padding.
pub const PAD_ID: u32 = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 1;
/// Number of reserved ids before real tokens start.
pub const SPECIAL_TOKENS: u32 = 2;

/// Large negative score used to forbid CRF starts/transitions without
/// leaving f64 range under repeated addition.
pub const CRF_MASK: f64 = -1e30;

// ---- normalization & vocabulary ---------------------------------------------

/// Lowercases, strips everything but ASCII letters and digits, and splits on
/// whitespace. Deterministic and allocation-light; the generator and the
/// tokenizer must agree on this exact function.
pub fn normalize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for ch in text.chars() {
        if ch.is_ascii_alphanumeric() {
            cleaned.push(ch.to_ascii_lowercase());
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Token-to-id mapping. Real tokens are stored sorted and map to ids
/// `SPECIAL_TOKENS..`; id 0 is padding, id 1 is unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds from any token iterator; duplicates collapse, order is sorted.
    pub fn from_tokens<I: IntoIterator<Item = String>>(iter: I) -> Self {
        let mut tokens: Vec<String> = iter.into_iter().collect();
        tokens.sort();
        tokens.dedup();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + SPECIAL_TOKENS))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Total id space, including the two reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + SPECIAL_TOKENS as usize
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            UNK_ID => Some("<unk>"),
            _ => self.tokens.get((id - SPECIAL_TOKENS) as usize).map(String::as_str),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes the sorted token list, one per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| RorError::io(path.display().to_string(), e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| RorError::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    /// Loads a vocabulary file, rejecting unsorted or duplicated lines so a
    /// hand-edited file cannot silently shift every id.
    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| RorError::io(path.display().to_string(), e))?;
        let mut tokens = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| RorError::io(path.display().to_string(), e))?;
            let tok = line.trim().to_string();
            if tok.is_empty() {
                continue;
            }
            if let Some(prev) = tokens.last() {
                if *prev >= tok {
                    return Err(RorError::InvalidInput(format!(
                        "vocabulary not sorted/unique at {prev:?} -> {tok:?}"
                    )));
                }
            }
            tokens.push(tok);
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// A normalized expression with its vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExpression {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
}

impl TokenizedExpression {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Normalizes and maps to ids. Unknown tokens map to [`UNK_ID`]; an
/// expression with no usable tokens is rejected.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenizedExpression> {
    let tokens = normalize(text);
    if tokens.is_empty() {
        return Err(RorError::EmptyExpression);
    }
    let ids = tokens.iter().map(|t| vocab.id(t)).collect();
    Ok(TokenizedExpression { tokens, ids })
}

// ---- roles -------------------------------------------------------------------

/// BIO role label. Index order is fixed and observable (ties in decoding
/// resolve toward the lowest index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoleLabel {
    #[serde(rename = "B-IW")]
    BeginIdentity,
    #[serde(rename = "I-IW")]
    InsideIdentity,
    #[serde(rename = "B-AW")]
    BeginAttribute,
    #[serde(rename = "I-AW")]
    InsideAttribute,
    #[serde(rename = "O")]
    Outside,
}

impl RoleLabel {
    pub const COUNT: usize = 5;
    pub const ALL: [RoleLabel; 5] = [
        RoleLabel::BeginIdentity,
        RoleLabel::InsideIdentity,
        RoleLabel::BeginAttribute,
        RoleLabel::InsideAttribute,
        RoleLabel::Outside,
    ];

    pub fn index(self) -> usize {
        match self {
            RoleLabel::BeginIdentity => 0,
            RoleLabel::InsideIdentity => 1,
            RoleLabel::BeginAttribute => 2,
            RoleLabel::InsideAttribute => 3,
            RoleLabel::Outside => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<RoleLabel> {
        RoleLabel::ALL.get(i).copied()
    }

    pub fn is_identity(self) -> bool {
        matches!(self, RoleLabel::BeginIdentity | RoleLabel::InsideIdentity)
    }

    pub fn is_attribute(self) -> bool {
        matches!(self, RoleLabel::BeginAttribute | RoleLabel::InsideAttribute)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoleLabel::BeginIdentity => "B-IW",
            RoleLabel::InsideIdentity => "I-IW",
            RoleLabel::BeginAttribute => "B-AW",
            RoleLabel::InsideAttribute => "I-AW",
            RoleLabel::Outside => "O",
        }
    }
}

/// True iff the sequence satisfies BIO chaining: every `I-x` continues a
/// `B-x` or `I-x` of the same role.
pub fn bio_valid(labels: &[RoleLabel]) -> bool {
    let mut prev: Option<RoleLabel> = None;
    for &l in labels {
        let ok = match l {
            RoleLabel::InsideIdentity => {
                matches!(prev, Some(RoleLabel::BeginIdentity | RoleLabel::InsideIdentity))
            }
            RoleLabel::InsideAttribute => {
                matches!(prev, Some(RoleLabel::BeginAttribute | RoleLabel::InsideAttribute))
            }
            _ => true,
        };
        if !ok {
            return false;
        }
        prev = Some(l);
    }
    true
}

/// A validated BIO sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleTags {
    labels: Vec<RoleLabel>,
}

impl RoleTags {
    pub fn try_new(labels: Vec<RoleLabel>) -> Result<Self> {
        if !bio_valid(&labels) {
            let seq: Vec<&str> = labels.iter().map(|l| l.as_str()).collect();
            return Err(RorError::InvalidInput(format!(
                "label sequence violates BIO chaining: {seq:?}"
            )));
        }
        Ok(RoleTags { labels })
    }

    pub fn labels(&self) -> &[RoleLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Positions tagged as identity words.
    pub fn identity_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_identity())
            .map(|(i, _)| i)
            .collect()
    }

    /// Positions tagged as attribute words.
    pub fn attribute_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_attribute())
            .map(|(i, _)| i)
            .collect()
    }
}

// ---- CRF ----------------------------------------------------------------------

/// Viterbi decode of `(T,5)` emission scores under `(5,5)` transition
/// scores (`transitions[prev][next]`). Ties break toward the lowest label
/// index at every decision, so equal-score inputs decode deterministically.
pub fn crf_decode(emissions: &Tensor, transitions: &Tensor) -> Vec<RoleLabel> {
    let k = RoleLabel::COUNT;
    assert_eq!(emissions.dims().len(), 2, "emissions must be (T,{k})");
    assert_eq!(emissions.dims()[1], k, "emissions must be (T,{k})");
    assert_eq!(transitions.dims(), &[k, k], "transitions must be ({k},{k})");
    let t_len = emissions.dims()[0];
    assert!(t_len > 0, "empty emission sequence");

    let em = emissions.data();
    let tr = transitions.data();
    let mut delta: Vec<f64> = em[..k].to_vec();
    let mut bp = vec![0usize; t_len * k];
    for t in 1..t_len {
        let mut next = vec![f64::NEG_INFINITY; k];
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for (i, &d) in delta.iter().enumerate() {
                let s = d + tr[i * k + j];
                if s > best {
                    best = s;
                    best_i = i;
                }
            }
            next[j] = best + em[t * k + j];
            bp[t * k + j] = best_i;
        }
        delta = next;
    }
    let mut last = 0;
    let mut best = f64::NEG_INFINITY;
    for (j, &d) in delta.iter().enumerate() {
        if d > best {
            best = d;
            last = j;
        }
    }
    let mut path = vec![last; t_len];
    for t in (1..t_len).rev() {
        path[t - 1] = bp[t * k + path[t]];
    }
    path.iter().map(|&i| RoleLabel::from_index(i).unwrap()).collect()
}

/// Start mask: `I-*` cannot open a sequence.
fn start_mask() -> [f64; 5] {
    let mut m = [0.0; 5];
    m[RoleLabel::InsideIdentity.index()] = CRF_MASK;
    m[RoleLabel::InsideAttribute.index()] = CRF_MASK;
    m
}

/// Transition mask forbidding BIO-invalid moves.
fn transition_mask() -> [[f64; 5]; 5] {
    let mut m = [[0.0; 5]; 5];
    for from in RoleLabel::ALL {
        for to in RoleLabel::ALL {
            let legal = match to {
                RoleLabel::InsideIdentity => {
                    matches!(from, RoleLabel::BeginIdentity | RoleLabel::InsideIdentity)
                }
                RoleLabel::InsideAttribute => {
                    matches!(from, RoleLabel::BeginAttribute | RoleLabel::InsideAttribute)
                }
                _ => true,
            };
            if !legal {
                m[from.index()][to.index()] = CRF_MASK;
            }
        }
    }
    m
}

/// Constrained decode: applies the BIO start/transition masks before
/// Viterbi, so the result is always a valid [`RoleTags`].
pub fn tag_roles(emissions: &Tensor, transitions: &Tensor) -> RoleTags {
    let k = RoleLabel::COUNT;
    let mut em = emissions.clone();
    let sm = start_mask();
    for (j, m) in sm.iter().enumerate() {
        em.data_mut()[j] += m;
    }
    let mut tr = transitions.clone();
    let tm = transition_mask();
    for i in 0..k {
        for j in 0..k {
            tr.data_mut()[i * k + j] += tm[i][j];
        }
    }
    let labels = crf_decode(&em, &tr);
    RoleTags::try_new(labels).expect("constrained decode produced an invalid BIO sequence")
}

// ---- tagger ---------------------------------------------------------------------

/// Tagger hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            embed_dim: 24,
            hidden: 32,
            epochs: 8,
            batch: 8,
            lr: 0.01,
        }
    }
}

/// BiLSTM-CRF role tagger. Owns its parameters; training minimizes the CRF
/// negative log-likelihood via the forward algorithm, decoding runs the
/// constrained Viterbi of [`tag_roles`].
pub struct Tagger {
    pub(crate) store: ParamStore,
    embed: ParamId,
    fwd: LstmP,
    bwd: LstmP,
    emit: LinearP,
    trans: ParamId,
    pub cfg: TaggerConfig,
    pub vocab_size: usize,
}

impl Tagger {
    pub fn new(vocab_size: usize, cfg: TaggerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add(
            "tagger.embed",
            &[vocab_size, cfg.embed_dim],
            Init::Normal(0.1),
            &mut rng,
        );
        let fwd = LstmP::register(&mut store, "tagger.fwd", cfg.embed_dim, cfg.hidden, &mut rng);
        let bwd = LstmP::register(&mut store, "tagger.bwd", cfg.embed_dim, cfg.hidden, &mut rng);
        let emit = LinearP::register(
            &mut store,
            "tagger.emit",
            2 * cfg.hidden,
            RoleLabel::COUNT,
            true,
            &mut rng,
        );
        let trans = store.add(
            "tagger.trans",
            &[RoleLabel::COUNT, RoleLabel::COUNT],
            Init::Uniform(0.1),
            &mut rng,
        );
        Tagger {
            store,
            embed,
            fwd,
            bwd,
            emit,
            trans,
            cfg,
            vocab_size,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Emission scores `(T,5)` from the BiLSTM over token ids.
    fn emissions(&self, g: &mut Graph, binder: &mut Binder, ids: &[u32]) -> Var {
        let t_len = ids.len();
        let h = self.cfg.hidden;
        let table = binder.var(g, self.embed);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let rows = g.select_dim0(table, &idx); // (T, E)

        let mut cols = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let row = g.slice_dim0(rows, t, t + 1);
            cols.push(g.transpose(row)); // (E,1)
        }

        let zeros = Tensor::zeros(&[h, 1]);
        let mut hf = g.constant(zeros.clone());
        let mut cf = g.constant(zeros.clone());
        let mut fwd_h = Vec::with_capacity(t_len);
        for &x in &cols {
            let (nh, nc) = self.fwd.step(g, binder, x, hf, cf);
            hf = nh;
            cf = nc;
            fwd_h.push(nh);
        }
        let mut hb = g.constant(zeros.clone());
        let mut cb = g.constant(zeros);
        let mut bwd_h = vec![hb; t_len];
        for t in (0..t_len).rev() {
            let (nh, nc) = self.bwd.step(g, binder, cols[t], hb, cb);
            hb = nh;
            cb = nc;
            bwd_h[t] = nh;
        }

        let mut emit_rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let both = g.concat_dim0(&[fwd_h[t], bwd_h[t]]); // (2H,1)
            let row = g.transpose(both); // (1,2H)
            emit_rows.push(self.emit.apply(g, binder, row)); // (1,5)
        }
        g.concat_dim0(&emit_rows) // (T,5)
    }

    /// CRF negative log-likelihood of a gold sequence (forward algorithm).
    pub fn nll(&self, g: &mut Graph, binder: &mut Binder, ids: &[u32], gold: &[RoleLabel]) -> Var {
        assert_eq!(ids.len(), gold.len(), "ids/gold length mismatch");
        let k = RoleLabel::COUNT;
        let t_len = ids.len();
        let em = self.emissions(g, binder, ids);
        let tr = binder.var(g, self.trans);

        let mut alpha = g.slice_dim0(em, 0, 1); // (1,5)
        for t in 1..t_len {
            let scored = g.add_col_broadcast(tr, alpha); // [i,j] = tr + alpha_i
            let lse = g.logsumexp_dim0(scored); // (1,5)
            let em_t = g.slice_dim0(em, t, t + 1);
            alpha = g.add(lse, em_t);
        }
        let alpha_col = g.transpose(alpha);
        let log_z = g.logsumexp_dim0(alpha_col); // (1,1)

        let em_picks: Vec<usize> = gold.iter().enumerate().map(|(t, l)| t * k + l.index()).collect();
        let gold_em = g.pick_sum(em, &em_picks);
        let gold_score = if t_len > 1 {
            let tr_picks: Vec<usize> = gold
                .windows(2)
                .map(|w| w[0].index() * k + w[1].index())
                .collect();
            let gold_tr = g.pick_sum(tr, &tr_picks);
            g.add(gold_em, gold_tr)
        } else {
            gold_em
        };
        let log_z_flat = g.reshape(log_z, &[1]);
        g.sub(log_z_flat, gold_score)
    }

    /// Constrained-decode tags for a token id sequence.
    pub fn tag(&self, ids: &[u32]) -> RoleTags {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.store);
        let em = self.emissions(&mut g, &mut binder, ids);
        let em_t = g.value(em).clone();
        tag_roles(&em_t, &self.store.tensor(self.trans))
    }

    /// Trains on `(ids, gold)` pairs. Returns the mean NLL of the final
    /// epoch. Deterministic for a given seed.
    pub fn fit(&mut self, corpus: &[(Vec<u32>, Vec<RoleLabel>)], seed: u64) -> f64 {
        assert!(!corpus.is_empty(), "empty tagger corpus");
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = AdamW::new(&self.store, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut last_epoch_nll = 0.0;
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_nll = 0.0;
            for batch in order.chunks(self.cfg.batch) {
                let mut accum = GradAccum::for_store(&self.store);
                for &i in batch {
                    let (ids, gold) = &corpus[i];
                    let mut g = Graph::new();
                    let mut binder = Binder::new(&self.store);
                    let loss = self.nll(&mut g, &mut binder, ids, gold);
                    epoch_nll += g.value(loss).item();
                    let mut grads = g.backward(loss);
                    binder.collect_into(&mut grads, &mut accum);
                }
                accum.scale(1.0 / batch.len() as f64);
                opt.step(&mut self.store, &accum, self.cfg.lr);
            }
            last_epoch_nll = epoch_nll / corpus.len() as f64;
        }
        last_epoch_nll
    }

    /// Per-token accuracy of constrained decoding against gold labels.
    pub fn token_accuracy(&self, corpus: &[(Vec<u32>, Vec<RoleLabel>)]) -> f64 {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (ids, gold) in corpus {
            let tags = self.tag(ids);
            for (p, g) in tags.labels().iter().zip(gold) {
                total += 1;
                if p == g {
                    hit += 1;
                }
            }
        }
        hit as f64 / total.max(1) as f64
    }
}

// ---- contextual embeddings -----------------------------------------------------

/// Role-split contextual embeddings for one expression. Columns are tokens.
pub struct SyntaxEmbeddings {
    /// All tokens, `(C_L, T)`.
    pub full: Var,
    /// Attribute-word columns, `(C_L, T_aw)`; `None` when no token carries
    /// an attribute role.
    pub attribute: Option<Var>,
    /// Identity-word columns, `(C_L, T_iw)`. Never absent: expressions with
    /// no tagged identity fall back to a learned column.
    pub identity: Var,
    /// True when [`SyntaxEmbeddings::identity`] is the learned fallback.
    pub identity_is_fallback: bool,
}

/// Parameters of the contextual text encoder. Hidden size is `dim/2` per
/// direction so the concatenated state is exactly `dim`.
pub struct TextEncoderP {
    pub embed: ParamId,
    fwd: LstmP,
    bwd: LstmP,
    fallback: ParamId,
    pub dim: usize,
}

impl TextEncoderP {
    pub fn register(store: &mut ParamStore, vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % 2 == 0, "text dim must be even, got {dim}");
        let h = dim / 2;
        let embed = store.add("text.embed", &[vocab_size, dim], Init::Normal(0.1), rng);
        let fwd = LstmP::register(store, "text.fwd", dim, h, rng);
        let bwd = LstmP::register(store, "text.bwd", dim, h, rng);
        let fallback = store.add("text.iw_fallback", &[dim, 1], Init::Normal(0.1), rng);
        TextEncoderP {
            embed,
            fwd,
            bwd,
            fallback,
            dim,
        }
    }

    /// Runs the BiLSTM and splits columns by role.
    pub fn extract_embeddings(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        ids: &[u32],
        tags: &RoleTags,
    ) -> Result<SyntaxEmbeddings> {
        if ids.is_empty() {
            return Err(RorError::EmptyExpression);
        }
        if ids.len() != tags.len() {
            return Err(RorError::shape(
                format!("{} role tags", ids.len()),
                format!("{}", tags.len()),
            ));
        }
        let t_len = ids.len();
        let h = self.dim / 2;
        let table = binder.var(g, self.embed);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let rows = g.select_dim0(table, &idx); // (T, dim)

        let mut cols = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let row = g.slice_dim0(rows, t, t + 1);
            cols.push(g.transpose(row));
        }
        let zeros = Tensor::zeros(&[h, 1]);
        let mut hf = g.constant(zeros.clone());
        let mut cf = g.constant(zeros.clone());
        let mut fwd_h = Vec::with_capacity(t_len);
        for &x in &cols {
            let (nh, nc) = self.fwd.step(g, binder, x, hf, cf);
            hf = nh;
            cf = nc;
            fwd_h.push(nh);
        }
        let mut hb = g.constant(zeros.clone());
        let mut cb = g.constant(zeros);
        let mut bwd_h = vec![hb; t_len];
        for t in (0..t_len).rev() {
            let (nh, nc) = self.bwd.step(g, binder, cols[t], hb, cb);
            hb = nh;
            cb = nc;
            bwd_h[t] = nh;
        }
        let mut token_rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let both = g.concat_dim0(&[fwd_h[t], bwd_h[t]]); // (dim,1)
            token_rows.push(g.transpose(both)); // (1,dim)
        }
        let rows_mat = g.concat_dim0(&token_rows); // (T,dim)
        let full = g.transpose(rows_mat); // (dim,T)

        let aw = tags.attribute_indices();
        let attribute = (!aw.is_empty()).then(|| g.select_cols(full, &aw));
        let iw = tags.identity_indices();
        let (identity, identity_is_fallback) = if iw.is_empty() {
            (binder.var(g, self.fallback), true)
        } else {
            (g.select_cols(full, &iw), false)
        };
        Ok(SyntaxEmbeddings {
            full,
            attribute,
            identity,
            identity_is_fallback,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_seq(idx: &[usize]) -> Vec<RoleLabel> {
        idx.iter().map(|&i| RoleLabel::from_index(i).unwrap()).collect()
    }

    #[test]
    fn normalize_strips_case_and_punctuation() {
        assert_eq!(normalize("The  RED mug!"), vec!["the", "red", "mug"]);
        assert_eq!(normalize("fire-hydrant, left."), vec!["fire", "hydrant", "left"]);
        assert!(normalize(" ?! ").is_empty());
    }

    #[test]
    fn vocabulary_assigns_sorted_ids_after_specials() {
        let v = Vocabulary::from_tokens(["mug", "red", "the", "red"].map(String::from));
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("mug"), 2);
        assert_eq!(v.id("red"), 3);
        assert_eq!(v.id("the"), 4);
        assert_eq!(v.id("zebra"), UNK_ID);
        assert_eq!(v.token(3), Some("red"));
    }

    #[test]
    fn vocabulary_roundtrips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_tokens(["mug", "red", "the"].map(String::from));
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn vocabulary_load_rejects_unsorted_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "red\nmug\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    #[test]
    fn tokenize_rejects_empty_expressions() {
        let v = Vocabulary::from_tokens(["mug"].map(String::from));
        assert!(matches!(tokenize("?!", &v), Err(RorError::EmptyExpression)));
    }

    #[test]
    fn bio_validity_rules() {
        assert!(bio_valid(&label_seq(&[0, 1, 1, 4])));
        assert!(bio_valid(&label_seq(&[4, 2, 3, 0])));
        assert!(!bio_valid(&label_seq(&[1])), "I-IW cannot start");
        assert!(!bio_valid(&label_seq(&[2, 1])), "I-IW cannot follow B-AW");
        assert!(!bio_valid(&label_seq(&[0, 3])), "I-AW cannot follow B-IW");
        assert!(!bio_valid(&label_seq(&[4, 3])), "I-AW cannot follow O");
    }

    /// Brute-force best path by enumerating all 5^T sequences. Uses strict
    /// improvement, so with distinct scores the unique argmax is found.
    fn enumerate_best(em: &Tensor, tr: &Tensor) -> Vec<usize> {
        let k = RoleLabel::COUNT;
        let t_len = em.dims()[0];
        let mut best_score = f64::NEG_INFINITY;
        let mut best = vec![0; t_len];
        let total = k.pow(t_len as u32);
        for code in 0..total {
            let mut seq = Vec::with_capacity(t_len);
            let mut c = code;
            for _ in 0..t_len {
                seq.push(c % k);
                c /= k;
            }
            let mut score = 0.0;
            for (t, &l) in seq.iter().enumerate() {
                score += em.at2(t, l);
                if t > 0 {
                    score += tr.at2(seq[t - 1], l);
                }
            }
            if score > best_score {
                best_score = score;
                best = seq;
            }
        }
        best
    }

    #[test]
    fn viterbi_matches_enumeration_on_random_cases() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let t_len = 1 + case % 4;
            let em = Tensor::from_fn(&[t_len, 5], |_| rng.gen::<f64>() * 4.0 - 2.0);
            let tr = Tensor::from_fn(&[5, 5], |_| rng.gen::<f64>() * 2.0 - 1.0);
            let got: Vec<usize> = crf_decode(&em, &tr).iter().map(|l| l.index()).collect();
            let want = enumerate_best(&em, &tr);
            assert_eq!(got, want, "case {case} (T={t_len})");
        }
    }

    #[test]
    fn viterbi_ties_break_to_lowest_index() {
        let em = Tensor::zeros(&[3, 5]);
        let tr = Tensor::zeros(&[5, 5]);
        let got = crf_decode(&em, &tr);
        assert!(got.iter().all(|&l| l == RoleLabel::BeginIdentity), "{got:?}");
    }

    #[test]
    fn constrained_decode_is_always_bio_valid() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let t_len = 1 + rng.gen_range(0..5);
            // skew emissions hard toward I-* to stress the constraint
            let em = Tensor::from_fn(&[t_len, 5], |i| {
                let col = i % 5;
                let boost = if col == 1 || col == 3 { 3.0 } else { 0.0 };
                rng.gen::<f64>() + boost
            });
            let tr = Tensor::from_fn(&[5, 5], |_| rng.gen::<f64>() - 0.5);
            let tags = tag_roles(&em, &tr);
            assert!(bio_valid(tags.labels()));
        }
    }

    #[test]
    fn crf_nll_matches_enumerated_partition() {
        // logZ from the graph forward algorithm vs brute-force enumeration
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vocab = 9;
        let tagger = Tagger::new(
            vocab,
            TaggerConfig {
                embed_dim: 6,
                hidden: 5,
                ..TaggerConfig::default()
            },
            3,
        );
        let ids = vec![2u32, 5, 7];
        let gold = label_seq(&[0, 1, 4]);

        let mut g = Graph::new();
        let mut binder = Binder::new(&tagger.store);
        let em_var = tagger.emissions(&mut g, &mut binder, &ids);
        let em = g.value(em_var).clone();
        let tr = tagger.store.tensor(tagger.trans);

        let k = RoleLabel::COUNT;
        let t_len = ids.len();
        let mut log_z_terms = Vec::new();
        for code in 0..k.pow(t_len as u32) {
            let mut seq = Vec::new();
            let mut c = code;
            for _ in 0..t_len {
                seq.push(c % k);
                c /= k;
            }
            let mut score = 0.0;
            for (t, &l) in seq.iter().enumerate() {
                score += em.at2(t, l);
                if t > 0 {
                    score += tr.at2(seq[t - 1], l);
                }
            }
            log_z_terms.push(score);
        }
        let m = log_z_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = m + log_z_terms.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        let mut gold_score = 0.0;
        for (t, l) in gold.iter().enumerate() {
            gold_score += em.at2(t, l.index());
            if t > 0 {
                gold_score += tr.at2(gold[t - 1].index(), l.index());
            }
        }
        let want = log_z - gold_score;

        let mut g2 = Graph::new();
        let mut binder2 = Binder::new(&tagger.store);
        let nll = tagger.nll(&mut g2, &mut binder2, &ids, &gold);
        let got = g2.value(nll).item();
        assert!((got - want).abs() < 1e-9, "nll {got} vs enumerated {want}");
        let _ = rng.gen::<f64>();
    }

    #[test]
    fn tagger_overfits_a_tiny_corpus() {
        let vocab = Vocabulary::from_tokens(
            ["the", "red", "striped", "mug", "ball", "on", "left", "right", "remove"].map(String::from),
        );
        let sents: [(&str, &[usize]); 6] = [
            ("remove the red mug", &[4, 4, 2, 0]),
            ("remove the ball", &[4, 4, 0]),
            ("the striped ball on the left", &[4, 2, 0, 4, 4, 2]),
            ("the mug on the right", &[4, 0, 4, 4, 2]),
            ("remove the striped red mug", &[4, 4, 2, 2, 0]),
            ("the red ball", &[4, 2, 0]),
        ];
        let corpus: Vec<(Vec<u32>, Vec<RoleLabel>)> = sents
            .iter()
            .map(|(s, l)| (tokenize(s, &vocab).unwrap().ids, label_seq(l)))
            .collect();
        let mut tagger = Tagger::new(
            vocab.len(),
            TaggerConfig {
                embed_dim: 12,
                hidden: 12,
                epochs: 60,
                batch: 3,
                lr: 0.02,
            },
            7,
        );
        tagger.fit(&corpus, 123);
        let acc = tagger.token_accuracy(&corpus);
        assert!(acc > 0.99, "tiny-corpus accuracy {acc}");
    }

    #[test]
    fn embeddings_split_by_role_with_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = TextEncoderP::register(&mut store, 10, 8, &mut rng);

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let tags = RoleTags::try_new(label_seq(&[4, 2, 0])).unwrap();
        let e = enc
            .extract_embeddings(&mut g, &mut binder, &[3, 4, 5], &tags)
            .unwrap();
        assert_eq!(g.dims(e.full), &[8, 3]);
        assert_eq!(g.dims(e.attribute.unwrap()), &[8, 1]);
        assert_eq!(g.dims(e.identity), &[8, 1]);
        assert!(!e.identity_is_fallback);

        // all-O tagging: no attributes, identity falls back to the learned column
        let mut g2 = Graph::new();
        let mut binder2 = Binder::new(&store);
        let tags2 = RoleTags::try_new(label_seq(&[4, 4])).unwrap();
        let e2 = enc
            .extract_embeddings(&mut g2, &mut binder2, &[3, 4], &tags2)
            .unwrap();
        assert!(e2.attribute.is_none());
        assert!(e2.identity_is_fallback);
        assert_eq!(g2.dims(e2.identity), &[8, 1]);

        // length mismatch is rejected
        let mut g3 = Graph::new();
        let mut binder3 = Binder::new(&store);
        assert!(enc
            .extract_embeddings(&mut g3, &mut binder3, &[3], &tags2)
            .is_err());
    }
}

"""Attention-based GRU encoder-decoder over a shared vocabulary.

Conventions, fixed once here:

* GRU cell: ``z = sigmoid(Wz x + Uz h + bz)``, ``r = sigmoid(Wr x + Ur h + br)``,
  ``cand = tanh(Wh x + Uh (r * h) + bh)``, ``h' = (1 - z) * h + z * cand``.
* Encoder is bidirectional; the state at source position t is the
  concatenation of the forward and backward GRU states there (size 2H).
* Attention energy for decoder state s against encoder state h is
  ``v . tanh(W s + U h)``; weights are the softmax over positions, the
  context is the weighted sum of encoder states.
* The decoder GRU consumes [previous-token embedding; context]; logits are
  a linear map of [new state; context]. Its initial state is
  ``tanh(Wi b1 + bi)`` where b1 is the backward encoder state at position 1.
* Reserved token ids: START=0, END=1, UNK=2.

Two output distributions share the decoder logits ``o``: the positive one is
``softmax(o)`` and the negative one ``softmax(-o)``, which orders candidate
tokens exactly in reverse. Sampling draws one sequence token by token from
the positive distribution; pair sampling additionally rolls a greedy
sequence, conditions *both* pair members on that greedy prefix, and swaps in
the negative distribution at a single uniformly chosen position.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    attention_weights,
    concat,
    constant,
    embedding_lookup,
    gru_cell,
    logsumexp,
    matmul,
    matvec,
    mul,
    neg,
    no_grad,
    parameter,
    pick,
    softmax,
    stack_rows,
    tanh,
    token_log_prob,
    weighted_rows,
)

START, END, UNK = 0, 1, 2

__all__ = [
    "START",
    "END",
    "UNK",
    "Vocabulary",
    "ModelParams",
    "EncodedSource",
    "SampledSequence",
    "SampledPair",
    "encode",
    "encode_full",
    "attention_context",
    "decoder_step",
    "output_distribution",
    "forced_logits",
    "sequence_log_prob",
    "pair_log_prob",
    "greedy_decode",
    "sample_sequence",
    "sample_pair",
    "enumerate_sequences",
    "enumerate_log_prob_nodes",
    "count_sequences",
]


class Vocabulary:
    """Bijection between token strings and ids with three reserved slots."""

    RESERVED = ("<s>", "</s>", "<unk>")
    START_ID, END_ID, UNK_ID = START, END, UNK

    def __init__(self, tokens=()):
        for tok in tokens:
            if tok in self.RESERVED:
                raise ValueError(f"corpus token collides with reserved token {tok!r}")
        self._tokens = list(self.RESERVED) + list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def from_corpus(cls, sentences, cutoff=1):
        """Tokens with frequency >= cutoff, ordered by descending frequency
        then lexicographically; everything else maps to UNK."""
        counts = Counter()
        for sent in sentences:
            counts.update(sent)
        kept = sorted(
            (t for t, c in counts.items() if c >= cutoff),
            key=lambda t: (-counts[t], t),
        )
        return cls(kept)

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id_of(self, token):
        return self._ids.get(token, self.UNK_ID)

    def token_of(self, idx):
        return self._tokens[idx]

    def encode(self, tokens):
        return [self.id_of(t) for t in tokens]

    def decode(self, ids):
        return [self._tokens[i] for i in ids]

    @property
    def tokens(self):
        """All token strings in id order, reserved first."""
        return tuple(self._tokens)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            toks = [line.rstrip("\n") for line in fh]
        if tuple(toks[:3]) != cls.RESERVED:
            raise ValueError(f"vocabulary file {path} lacks the reserved prefix")
        return cls(toks[3:])


def _glorot(rng, rows, cols):
    r = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-r, r, size=(rows, cols))


class ModelParams:
    """Named parameter tensors of the encoder-decoder.

    Attention size equals the hidden size. The tensor dict is insertion
    ordered and that order is part of the checkpoint contract.
    """

    GRU_SUFFIXES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")

    def __init__(self, vocab_size, embed_size=32, hidden_size=64, seed=0,
                 init="glorot"):
        self.vocab_size = int(vocab_size)
        self.embed_size = int(embed_size)
        self.hidden_size = int(hidden_size)
        rng = np.random.default_rng(seed)
        v, e, h = self.vocab_size, self.embed_size, self.hidden_size

        def mat(rows, cols):
            if init == "zeros":
                return np.zeros((rows, cols))
            return _glorot(rng, rows, cols)

        self.tensors = {}

        def put(name, data):
            self.tensors[name] = parameter(name, data)

        put("src_emb", mat(v, e))
        put("tgt_emb", mat(v, e))
        for prefix, in_dim in (("enc_fwd", e), ("enc_bwd", e), ("dec", e + 2 * h)):
            for gate in ("z", "r", "h"):
                put(f"{prefix}.W{gate}", mat(h, in_dim))
                put(f"{prefix}.U{gate}", mat(h, h))
                put(f"{prefix}.b{gate}", np.zeros(h))
        put("att.W", mat(h, h))
        put("att.U", mat(2 * h, h))
        put("att.v", mat(1, h)[0])
        put("dec_init.W", mat(h, h))
        put("dec_init.b", np.zeros(h))
        put("out.W", mat(v, 3 * h))
        put("out.b", np.zeros(v))

    @classmethod
    def from_tensors(cls, vocab_size, arrays):
        """Rebuild from named arrays (e.g. a loaded checkpoint), validating
        shape consistency against the vocabulary size."""
        try:
            v_emb, e = arrays["src_emb"].shape
            h = arrays["dec_init.b"].shape[0]
        except KeyError as exc:
            raise ValueError(f"missing parameter tensor {exc.args[0]!r}")
        model = cls(vocab_size, embed_size=e, hidden_size=h, init="zeros")
        expected = {name: t.data.shape for name, t in model.tensors.items()}
        if set(arrays) != set(expected):
            missing = set(expected) - set(arrays)
            extra = set(arrays) - set(expected)
            raise ValueError(
                f"parameter names do not match model (missing={sorted(missing)}, "
                f"unexpected={sorted(extra)})"
            )
        for name, arr in arrays.items():
            if arr.shape != expected[name]:
                raise ValueError(
                    f"tensor {name!r} has shape {arr.shape}, expected "
                    f"{expected[name]} for vocabulary size {vocab_size}"
                )
            model.tensors[name].data = np.array(arr, dtype=np.float64)
        return model

    def __getitem__(self, name):
        return self.tensors[name]

    def copy_values(self):
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_values(self, arrays):
        for name, t in self.tensors.items():
            t.data[...] = arrays[name]


@dataclass
class EncodedSource:
    """Encoder output plus quantities reused across decoder steps."""

    states: list          # per position, concat of fwd and bwd (size 2H)
    fwd: list
    bwd: list
    matrix: Tensor        # the same states stacked into [Tx, 2H]
    att_proj: Tensor      # matrix @ att.U, precomputed, [Tx, A]
    init_state: Tensor

    @classmethod
    def from_states(cls, states, params):
        matrix = stack_rows(states)
        return cls(states=list(states), fwd=[], bwd=[], matrix=matrix,
                   att_proj=matmul(matrix, params["att.U"]), init_state=None)


def _mask(size, dropout):
    """Inverted-dropout mask constant, or None when dropout is off."""
    if dropout is None:
        return None
    rate, rng = dropout
    if rate <= 0.0:
        return None
    keep = (rng.random(size) >= rate).astype(np.float64) / (1.0 - rate)
    return constant(keep)


def _maybe_mask(x, m):
    return x if m is None else mul(x, m)


def _gru(params, prefix, x, h):
    return gru_cell(x, h,
                    params[f"{prefix}.Wz"], params[f"{prefix}.Uz"],
                    params[f"{prefix}.bz"],
                    params[f"{prefix}.Wr"], params[f"{prefix}.Ur"],
                    params[f"{prefix}.br"],
                    params[f"{prefix}.Wh"], params[f"{prefix}.Uh"],
                    params[f"{prefix}.bh"])


def encode_full(source, params, dropout=None):
    """Bidirectional encode; also precomputes attention projections and the
    decoder's initial state."""
    if len(source) == 0:
        raise ValueError("encode: source sequence must be non-empty")
    h_dim = params.hidden_size
    embs = []
    for tok in source:
        x = embedding_lookup(params["src_emb"], tok)
        embs.append(_maybe_mask(x, _mask(params.embed_size, dropout)))
    zero = constant(np.zeros(h_dim))
    fwd = []
    h = zero
    for x in embs:
        h = _gru(params, "enc_fwd", x, h)
        fwd.append(h)
    bwd_rev = []
    h = zero
    for x in reversed(embs):
        h = _gru(params, "enc_bwd", x, h)
        bwd_rev.append(h)
    bwd = bwd_rev[::-1]
    states = [concat([f, b]) for f, b in zip(fwd, bwd)]
    matrix = stack_rows(states)
    att_proj = matmul(matrix, params["att.U"])
    init = tanh(matvec(params["dec_init.W"], bwd[0]) + params["dec_init.b"])
    init = _maybe_mask(init, _mask(h_dim, dropout))
    return EncodedSource(states=states, fwd=fwd, bwd=bwd, matrix=matrix,
                         att_proj=att_proj, init_state=init)


def encode(source, params):
    """Encoder states h_1..h_Tx, each the concat of both GRU directions."""
    return encode_full(source, params).states


def _as_encoded(enc_states, params):
    if isinstance(enc_states, EncodedSource):
        return enc_states
    return EncodedSource.from_states(enc_states, params)


def attention_context(state, enc_states, params):
    """Attention weights over encoder states and the resulting context.

    Returns ``(context, alpha)`` where alpha is a softmax over the
    alignment energies ``v . tanh(W state + U h_t)``.
    """
    enc = _as_encoded(enc_states, params)
    if not enc.states:
        raise ValueError("attention_context: no encoder states")
    alpha = attention_weights(state, enc.att_proj, params["att.W"],
                              params["att.v"])
    context = weighted_rows(alpha, enc.matrix)
    return context, alpha


def decoder_step(prev_id, prev_state, enc_states, params, dropout=None):
    """One decoder transition: returns (logits over V, new state, alpha)."""
    enc = _as_encoded(enc_states, params)
    context, alpha = attention_context(prev_state, enc, params)
    emb = embedding_lookup(params["tgt_emb"], prev_id)
    emb = _maybe_mask(emb, _mask(params.embed_size, dropout))
    state = _gru(params, "dec", concat([emb, context]), prev_state)
    pre_out = concat([state, context])
    pre_out = _maybe_mask(pre_out, _mask(3 * params.hidden_size, dropout))
    logits = matvec(params["out.W"], pre_out) + params["out.b"]
    return logits, state, alpha


def output_distribution(logits, mode="positive"):
    """Token distribution from logits: softmax(o) or softmax(-o).

    The negative mode ranks candidates in exactly the opposite order of the
    positive mode, which is what makes it a source of perturbations.
    """
    if mode == "positive":
        return softmax(logits)
    if mode == "negative":
        return softmax(neg(logits))
    raise ValueError(f"unknown output distribution mode {mode!r}")


def _log_prob_node(logits, token, negated):
    return token_log_prob(logits, token, negated)


def forced_logits(source, inputs, params, dropout=None):
    """Roll the decoder over a fixed input-token sequence.

    ``inputs[t]`` is the token fed at step t (so ``inputs[0]`` is START);
    returns one logits tensor per step, plus the attention weights.
    """
    enc = encode_full(source, params, dropout=dropout)
    state = enc.init_state
    logits_per_step = []
    alphas = []
    for tok in inputs:
        logits, state, alpha = decoder_step(tok, state, enc, params,
                                            dropout=dropout)
        logits_per_step.append(logits)
        alphas.append(alpha)
    return logits_per_step, alphas


def sequence_log_prob(source, target, params, mode="positive", dropout=None):
    """Differentiable log-probability of ``target`` teacher-forced on its
    own prefix: sum over steps of log p(y_t | y_<t, x)."""
    if len(target) == 0:
        raise ValueError("sequence_log_prob: target must be non-empty")
    negated = mode == "negative"
    if mode not in ("positive", "negative"):
        raise ValueError(f"unknown mode {mode!r}")
    inputs = [START] + list(target[:-1])
    logits_per_step, _ = forced_logits(source, inputs, params, dropout=dropout)
    total = _log_prob_node(logits_per_step[0], target[0], negated)
    for t in range(1, len(target)):
        total = total + _log_prob_node(logits_per_step[t], target[t], negated)
    return total


def pair_log_prob(source, pair, params):
    """Recompute both halves of a sampled pair's joint log-probability.

    Both members are conditioned on the recorded greedy prefix; the
    negative distribution applies only at the recorded perturbation
    position. Returns ``(lp_pos, lp_perturbed)`` whose sum reproduces the
    pair's accumulated log-probability.
    """
    n = len(pair.tokens_pos)
    inputs = [START] + list(pair.greedy[: n - 1])
    logits_per_step, _ = forced_logits(source, inputs, params)
    lp_pos = _log_prob_node(logits_per_step[0], pair.tokens_pos[0], False)
    lp_neg = _log_prob_node(logits_per_step[0], pair.tokens_neg[0],
                            pair.position == 1)
    for t in range(1, n):
        lp_pos = lp_pos + _log_prob_node(logits_per_step[t], pair.tokens_pos[t],
                                         False)
        lp_neg = lp_neg + _log_prob_node(logits_per_step[t], pair.tokens_neg[t],
                                         pair.position == t + 1)
    return lp_pos, lp_neg


@dataclass
class SampledSequence:
    """A sequence drawn token-by-token from the model, with its log-prob."""

    tokens: list
    log_prob: float

    @property
    def length(self):
        return len(self.tokens)


@dataclass
class SampledPair:
    """A positive sample and a one-position perturbation, both conditioned
    on the same greedy prefix."""

    tokens_pos: list
    tokens_neg: list
    greedy: list
    position: int      # 1-based step at which the perturbation was drawn
    log_prob: float


def _log_softmax_values(logits):
    m = logits.max()
    e = np.exp(logits - m)
    return logits - (m + np.log(e.sum()))


def _softmax_values(logits):
    m = logits.max()
    e = np.exp(logits - m)
    return e / e.sum()


def _draw(probs, rng):
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


def greedy_decode(source, params, max_len, return_attention=False):
    """Deterministic decode: argmax token each step (ties -> lowest id),
    stopping after END or ``max_len`` tokens. END, when reached, is kept as
    the final token."""
    if max_len < 1:
        raise ValueError("greedy_decode: max_len must be >= 1")
    tokens = []
    attention = []
    with no_grad():
        enc = encode_full(source, params)
        state = enc.init_state
        prev = START
        for _ in range(max_len):
            logits, state, alpha = decoder_step(prev, state, enc, params)
            tok = int(np.argmax(logits.data))
            tokens.append(tok)
            attention.append(alpha.data.copy())
            if tok == END:
                break
            prev = tok
    if return_attention:
        return tokens, attention
    return tokens


def sample_sequence(source, params, max_len, rng):
    """Draw one sequence from the positive distribution, conditioning each
    step on the tokens already drawn; accumulates the log-probability and
    stops after END or ``max_len`` tokens."""
    tokens = []
    log_prob = 0.0
    with no_grad():
        enc = encode_full(source, params)
        state = enc.init_state
        prev = START
        for _ in range(max_len):
            logits, state, _ = decoder_step(prev, state, enc, params)
            log_p = _log_softmax_values(logits.data)
            tok = _draw(np.exp(log_p), rng)
            log_prob += float(log_p[tok])
            tokens.append(tok)
            if tok == END:
                break
            prev = tok
    return SampledSequence(tokens=tokens, log_prob=log_prob)


def sample_pair(source, params, max_len, rng):
    """Draw a (positive, perturbed) pair conditioned on the greedy roll-out.

    A perturbation position i is drawn uniformly from 1..max_len first.
    Each step then computes the greedy token (which extends the shared
    conditioning prefix), draws the positive member's token, and draws the
    perturbed member's token — from the negative distribution at step i,
    from the positive one elsewhere. All ``max_len`` steps are taken; END
    does not stop the roll-out here, feedback simply ignores anything an
    END precedes. The joint log-probability accumulates every factor.
    """
    if max_len < 1:
        raise ValueError("sample_pair: max_len must be >= 1")
    position = int(rng.integers(1, max_len + 1))
    tokens_pos = []
    tokens_neg = []
    greedy = []
    log_prob = 0.0
    with no_grad():
        enc = encode_full(source, params)
        state = enc.init_state
        prev = START
        for t in range(1, max_len + 1):
            logits, state, _ = decoder_step(prev, state, enc, params)
            log_p_pos = _log_softmax_values(logits.data)
            greedy_tok = int(np.argmax(logits.data))
            w = _draw(np.exp(log_p_pos), rng)
            log_prob += float(log_p_pos[w])
            if t == position:
                log_p_neg = _log_softmax_values(-logits.data)
                w_prime = _draw(np.exp(log_p_neg), rng)
                log_prob += float(log_p_neg[w_prime])
            else:
                w_prime = _draw(np.exp(log_p_pos), rng)
                log_prob += float(log_p_pos[w_prime])
            tokens_pos.append(w)
            tokens_neg.append(w_prime)
            greedy.append(greedy_tok)
            prev = greedy_tok
    return SampledPair(tokens_pos=tokens_pos, tokens_neg=tokens_neg,
                       greedy=greedy, position=position, log_prob=log_prob)


def count_sequences(vocab_size, max_len):
    """Number of distinct outcomes of the sampling process up to max_len."""
    non_end = vocab_size - 1
    total = 0
    for k in range(1, max_len + 1):
        total += non_end ** (k - 1)
    return total + non_end ** max_len


def enumerate_sequences(source, params, max_len):
    """All sampling outcomes with their log-probabilities.

    Covers every END-terminated sequence of length <= max_len plus every
    END-free sequence of exactly max_len (the truncation cases); together
    their probabilities sum to one.
    """
    vocab = params.vocab_size
    results = []
    with no_grad():
        enc = encode_full(source, params)

        def walk(prev, state, prefix, lp):
            logits, new_state, _ = decoder_step(prev, state, enc, params)
            log_p = _log_softmax_values(logits.data)
            for tok in range(vocab):
                seq = prefix + (tok,)
                seq_lp = lp + float(log_p[tok])
                if tok == END or len(seq) == max_len:
                    results.append((seq, seq_lp))
                else:
                    walk(tok, new_state, seq, seq_lp)

        walk(START, enc.init_state, (), 0.0)
    return results


def enumerate_log_prob_nodes(source, params, max_len):
    """Graph-building twin of :func:`enumerate_sequences`: returns
    ``(tokens, log-prob Tensor)`` pairs suitable for building exact-risk
    expressions. Shares decoder steps along common prefixes."""
    vocab = params.vocab_size
    results = []
    enc = encode_full(source, params)

    def walk(prev, state, prefix, lp_node):
        logits, new_state, _ = decoder_step(prev, state, enc, params)
        lse = logsumexp(logits)
        for tok in range(vocab):
            step_lp = pick(logits, tok) - lse
            seq_lp = step_lp if lp_node is None else lp_node + step_lp
            seq = prefix + (tok,)
            if tok == END or len(seq) == max_len:
                results.append((seq, seq_lp))
            else:
                walk(tok, new_state, seq, seq_lp)

    walk(START, enc.init_state, (), None)
    return results

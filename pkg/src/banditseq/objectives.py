"""Training objectives, gradient estimators, and the online update loop.

Three gradients are available. MLE is the usual supervised negative
log-likelihood. The expected-loss (EL) estimator scores one sampled output
with a scalar task loss and scales the score function by it:
``s = delta * d(log p(sample))/d(theta)``. The pairwise-ranking (PR)
estimator scores a (positive, perturbed) pair and scales the gradient of
the pair's joint log-probability. Both are unbiased for the corresponding
expected-risk objectives, which the enumeration oracles at the bottom of
this module make checkable on tiny instances.

Pairwise feedback is oriented so that positive values mean the positive
member was ranked *worse* than the perturbation (a misranking): binary
feedback fires 1 on misrankings only, continuous feedback is the signed
loss difference. Minimizing the resulting risk suppresses misranked pairs.

Control variates reduce estimator variance without touching its mean. The
running-average baseline recenters the scalar feedback; the score-function
variate subtracts ``chat * d(log p)/d(theta)`` with a per-entry coefficient
``chat = Cov(s, y) / Var(y)`` maintained by streaming moment accumulators.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, exp, logsumexp, mul, neg, no_grad, pick
from .model import (
    START,
    SampledPair,
    count_sequences,
    decoder_step,
    encode_full,
    enumerate_log_prob_nodes,
    pair_log_prob,
    sample_pair,
    sample_sequence,
    sequence_log_prob,
)

__all__ = [
    "GradientEstimate",
    "TrainingDiverged",
    "mle_loss_and_grad",
    "el_gradient",
    "pr_gradient",
    "pairwise_feedback",
    "ControlVariateState",
    "apply_baseline_cv",
    "apply_score_function_cv",
    "clip_gradient",
    "grad_norm",
    "OptimizerState",
    "adam_update",
    "SgdState",
    "sgd_update",
    "TrainingConfig",
    "BanditResult",
    "bandit_train_loop",
    "AntitheticTracker",
    "antithetic_variance_identity",
    "exact_risk_and_grad",
    "enumerate_pair_outcomes",
    "exact_pr_risk_and_grad",
]


@dataclass
class GradientEstimate:
    """A parameter-gradient map plus the feedback and objective behind it."""

    grads: dict
    feedback: float
    kind: str  # "mle" | "el" | "pr"


class TrainingDiverged(RuntimeError):
    """Raised when an update produces non-finite gradients."""


def _scaled(grads, c):
    return {name: c * g for name, g in grads.items()}


def mle_loss_and_grad(source, reference, params, dropout=None):
    """Negative log-likelihood of the reference and its gradient."""
    if len(reference) == 0:
        raise ValueError("mle_loss_and_grad: reference must be non-empty")
    with Tape() as tape:
        lp = sequence_log_prob(source, reference, params, dropout=dropout)
        loss = neg(lp)
    grads = tape.backward(loss, params.tensors)
    return float(loss.data), GradientEstimate(grads=grads, feedback=0.0, kind="mle")


def el_gradient(source, sample, feedback, params):
    """Expected-loss estimator from one sampled sequence.

    Returns ``(estimate, score)`` where score is the gradient of the
    sample's log-probability (teacher-forced on its own prefix) and the
    estimate's gradients are ``feedback * score``.
    """
    with Tape() as tape:
        lp = sequence_log_prob(source, sample.tokens, params)
    score = tape.backward(lp, params.tensors)
    est = GradientEstimate(grads=_scaled(score, feedback), feedback=feedback,
                           kind="el")
    return est, score


def pr_gradient(source, pair, feedback, params, want_parts=False):
    """Pairwise-ranking estimator from one sampled pair.

    The joint log-probability is recomputed teacher-forced on the pair's
    recorded greedy prefix, with the negative distribution applied only at
    the recorded perturbation position. Returns ``(estimate, score)`` or,
    with ``want_parts``, ``(estimate, score, (g_pos, g_neg))`` where the
    parts are the separate gradients of the two halves (the antithetic
    variates).
    """
    with Tape() as tape:
        lp_pos, lp_neg = pair_log_prob(source, pair, params)
        joint = lp_pos + lp_neg
    if want_parts:
        g_pos = tape.backward(lp_pos, params.tensors)
        g_neg = tape.backward(lp_neg, params.tensors)
        score = {name: g_pos[name] + g_neg[name] for name in g_pos}
    else:
        score = tape.backward(joint, params.tensors)
    est = GradientEstimate(grads=_scaled(score, feedback), feedback=feedback,
                           kind="pr")
    if want_parts:
        return est, score, (g_pos, g_neg)
    return est, score


def pairwise_feedback(delta_pos, delta_neg, kind):
    """Combine two task losses into pairwise feedback.

    ``delta_pos`` belongs to the positive-distribution sample, ``delta_neg``
    to the perturbed one. Binary feedback is 1.0 exactly when the positive
    member scored worse (a misranking; ties give 0). Continuous feedback is
    the signed difference ``delta_pos - delta_neg``, positive on
    misrankings.
    """
    if not (math.isfinite(delta_pos) and math.isfinite(delta_neg)):
        raise ValueError("pairwise_feedback: losses must be finite")
    if kind == "binary":
        return 1.0 if delta_pos > delta_neg else 0.0
    if kind == "continuous":
        return delta_pos - delta_neg
    raise ValueError(f"unknown pairwise feedback kind {kind!r}")


class ControlVariateState:
    """Running statistics behind the two control variates.

    For the baseline it tracks the count and sum of observed feedback; for
    the score-function variate it keeps per-entry streaming means, the
    co-moment of (s, y), and second moments of both, from which
    ``chat = Cov(s, y) / Var(y)`` is read off (Var(s) is tracked too, for
    diagnostics). Entries whose variance is below 1e-12 fall back to
    chat = 0.
    """

    VAR_FLOOR = 1e-12

    def __init__(self, mode="none", include_current=True):
        if mode not in ("none", "baseline", "sf"):
            raise ValueError(f"unknown control-variate mode {mode!r}")
        self.mode = mode
        self.include_current = include_current
        self.k = 0
        self.feedback_sum = 0.0
        self.n = 0
        self._mean_s = {}
        self._mean_y = {}
        self._co_sy = {}
        self._m2_y = {}
        self._m2_s = {}

    # -- average-feedback baseline -------------------------------------
    def register_feedback(self, delta):
        self.k += 1
        self.feedback_sum += delta

    @property
    def average_feedback(self):
        if self.k == 0:
            return 0.0
        return self.feedback_sum / self.k

    # -- score-function coefficient -------------------------------------
    def update_sf(self, s_grads, y_grads):
        self.n += 1
        n = self.n
        for name, s in s_grads.items():
            y = y_grads[name]
            if name not in self._mean_s:
                self._mean_s[name] = np.zeros_like(s)
                self._mean_y[name] = np.zeros_like(s)
                self._co_sy[name] = np.zeros_like(s)
                self._m2_y[name] = np.zeros_like(s)
                self._m2_s[name] = np.zeros_like(s)
            ds = s - self._mean_s[name]
            self._mean_s[name] += ds / n
            dy = y - self._mean_y[name]
            self._mean_y[name] += dy / n
            self._co_sy[name] += ds * (y - self._mean_y[name])
            self._m2_y[name] += dy * (y - self._mean_y[name])
            self._m2_s[name] += ds * (s - self._mean_s[name])

    def chat(self, name, like):
        if name not in self._co_sy:
            return np.zeros_like(like)
        m2 = self._m2_y[name]
        out = np.zeros_like(like)
        ok = m2 > self.VAR_FLOOR
        np.divide(self._co_sy[name], m2, out=out, where=ok)
        return out

    def chat_mean(self):
        if not self._co_sy:
            return 0.0
        total = 0.0
        count = 0
        for name, co in self._co_sy.items():
            m2 = self._m2_y[name]
            ok = m2 > self.VAR_FLOOR
            c = np.zeros_like(co)
            np.divide(co, m2, out=c, where=ok)
            total += float(c.sum())
            count += c.size
        return total / count


def apply_baseline_cv(estimate, state, score_grad):
    """Recenter the feedback by the running average before scaling the score.

    With ``include_current`` (the default) the current feedback enters the
    average first, so the very first adjusted gradient is exactly zero.
    """
    if state.include_current:
        state.register_feedback(estimate.feedback)
        centered = estimate.feedback - state.average_feedback
    else:
        centered = estimate.feedback - state.average_feedback
        state.register_feedback(estimate.feedback)
    return GradientEstimate(grads=_scaled(score_grad, centered),
                            feedback=estimate.feedback, kind=estimate.kind)


def apply_score_function_cv(estimate, state, score_grad):
    """Subtract ``chat * score`` entrywise, then fold the draw into the
    running moment estimates. With no history chat is zero and the
    estimate passes through unchanged."""
    adjusted = {}
    for name, s in estimate.grads.items():
        c = state.chat(name, s)
        adjusted[name] = s - c * score_grad[name]
    state.update_sf(estimate.grads, score_grad)
    return GradientEstimate(grads=adjusted, feedback=estimate.feedback,
                            kind=estimate.kind)


def grad_norm(grads):
    """Global L2 norm over all entries of a gradient map."""
    total = 0.0
    for g in grads.values():
        flat = g.ravel()
        total += float(flat @ flat)
    return math.sqrt(total)


def clip_gradient(grads, max_norm):
    """Scale the whole map down to ``max_norm`` when its global L2 norm
    exceeds it; otherwise return it unchanged."""
    if max_norm <= 0:
        raise ValueError("clip_gradient: max_norm must be positive")
    norm = grad_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return _scaled(grads, scale)


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters."""

    m: dict
    v: dict
    t: int
    alpha: float
    beta1: float
    beta2: float
    eps: float

    @classmethod
    def for_params(cls, params, alpha=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        m = {name: np.zeros_like(t.data) for name, t in params.tensors.items()}
        v = {name: np.zeros_like(t.data) for name, t in params.tensors.items()}
        return cls(m=m, v=v, t=0, alpha=alpha, beta1=beta1, beta2=beta2, eps=eps)


def adam_update(params, grads, state):
    """Bias-corrected Adam step; parameters move against the gradient.

    Uses the algebraically identical folded form
    ``theta -= alpha*sqrt(bc2)/bc1 * m / (sqrt(v) + eps*sqrt(bc2))`` to
    avoid materializing the bias-corrected moments.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    sqrt_bc2 = math.sqrt(1.0 - b2 ** state.t)
    step_size = state.alpha * sqrt_bc2 / bc1
    eps_t = state.eps * sqrt_bc2
    for name, tensor in params.tensors.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v)
        denom += eps_t
        update = m / denom
        update *= step_size
        tensor.data -= update
    return params, state


@dataclass
class SgdState:
    """Plain SGD with the step-size schedule gamma_k = gamma0 / (1 + decay*k)."""

    gamma0: float
    decay: float = 0.0
    t: int = 0


def sgd_update(params, grads, state):
    gamma = state.gamma0 / (1.0 + state.decay * state.t)
    state.t += 1
    for name, tensor in params.tensors.items():
        tensor.data -= gamma * grads[name]
    return params, state


class AntitheticTracker:
    """Streaming per-entry covariance between the two halves of the PR
    gradient; its mean is reported as a diagnostic during PR training."""

    def __init__(self):
        self.n = 0
        self._mean_a = {}
        self._mean_b = {}
        self._co = {}

    def update(self, g_a, g_b):
        self.n += 1
        n = self.n
        for name, a in g_a.items():
            b = g_b[name]
            if name not in self._co:
                self._mean_a[name] = np.zeros_like(a)
                self._mean_b[name] = np.zeros_like(a)
                self._co[name] = np.zeros_like(a)
            da = a - self._mean_a[name]
            self._mean_a[name] += da / n
            self._mean_b[name] += (b - self._mean_b[name]) / n
            self._co[name] += da * (b - self._mean_b[name])

    def cov_mean(self):
        if self.n < 2 or not self._co:
            return 0.0
        total = 0.0
        count = 0
        for co in self._co.values():
            total += float(co.sum()) / (self.n - 1)
            count += co.size
        return total / count


def antithetic_variance_identity(x1, x2):
    """Empirical check quantities for the averaged-pair estimator: returns
    ``(var of (x1+x2)/2, (var x1 + var x2 + 2 cov) / 4)`` using population
    moments, for which the identity is exact."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    lhs = np.var((x1 + x2) / 2.0)
    cov = np.mean((x1 - x1.mean()) * (x2 - x2.mean()))
    rhs = 0.25 * (np.var(x1) + np.var(x2) + 2.0 * cov)
    return float(lhs), float(rhs)


@dataclass
class TrainingConfig:
    """Knobs of the bandit update loop."""

    objective: str = "el"             # "el" | "pr"
    pair_feedback: str = "continuous"  # "binary" | "continuous"
    cv_mode: str = "none"             # "none" | "baseline" | "sf"
    iters: int = 1000
    valid_interval: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    baseline_includes_current: bool = True
    optimizer: str = "adam"           # "adam" | "sgd"
    sgd_decay: float = 0.0
    max_len: int = 20
    epoch_size: int = 0               # examples per epoch, for the log only

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.objective not in ("el", "pr"):
            raise ValueError(f"bandit objective must be el or pr, got "
                             f"{self.objective!r}")


@dataclass
class BanditResult:
    """Outcome of a bandit training run."""

    best_values: dict
    best_score: float
    best_iteration: int
    rows: list = field(default_factory=list)
    oracle_calls: int = 0


def bandit_train_loop(config, params, stream, feedback_fn, validate_fn=None):
    """Online learning from per-sample feedback (the adapted update loop).

    Per iteration: observe a source sentence from ``stream`` (an iterator
    of ``(sentence_id, source_ids)``), sample an output or pair, obtain the
    scalar feedback, form the gradient estimate, apply the configured
    control variate, clip, and take an optimizer step. ``validate_fn``,
    when given, maps the current parameters to a metric dict whose "ggleu"
    entry drives best-iterate selection (online-to-batch conversion); it
    runs every ``valid_interval`` iterations and at the end.

    The loop never sees references: only ``feedback_fn`` scalars.
    """
    rng = np.random.default_rng(config.seed)
    cv_state = ControlVariateState(mode=config.cv_mode,
                                   include_current=config.baseline_includes_current)
    if config.optimizer == "adam":
        opt_state = OptimizerState.for_params(params, alpha=config.alpha,
                                              beta1=config.beta1,
                                              beta2=config.beta2, eps=config.eps)
        step = adam_update
    elif config.optimizer == "sgd":
        opt_state = SgdState(gamma0=config.alpha, decay=config.sgd_decay)
        step = sgd_update
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    antithetic = AntitheticTracker() if config.objective == "pr" else None

    rows = []
    best_values = params.copy_values()
    best_score = -math.inf
    best_iteration = 0

    def epoch_of(k):
        return k // config.epoch_size if config.epoch_size else 0

    def emit(k, split, metric, value):
        rows.append({"iteration": k, "epoch": epoch_of(k), "split": split,
                     "metric": metric, "value": float(value)})

    def run_validation(k):
        nonlocal best_score, best_values, best_iteration
        if validate_fn is None:
            return
        scores = validate_fn(params)
        for metric, value in sorted(scores.items()):
            emit(k, "valid", metric, value)
        score = scores.get("ggleu")
        if score is not None and score > best_score:
            best_score = score
            best_values = params.copy_values()
            best_iteration = k

    window_feedback = []
    window_norms = []

    run_validation(0)
    for k in range(1, config.iters + 1):
        sentence_id, source = next(stream)
        if config.objective == "el":
            sample = sample_sequence(source, params, config.max_len, rng)
            delta = feedback_fn(sentence_id, sample.tokens)
            estimate, score = el_gradient(source, sample, delta, params)
        else:
            pair = sample_pair(source, params, config.max_len, rng)
            delta = feedback_fn(sentence_id, pair.tokens_pos, pair.tokens_neg)
            estimate, score, parts = pr_gradient(source, pair, delta, params,
                                                 want_parts=True)
            antithetic.update(*parts)
        if config.cv_mode == "baseline":
            estimate = apply_baseline_cv(estimate, cv_state, score)
        elif config.cv_mode == "sf":
            estimate = apply_score_function_cv(estimate, cv_state, score)
        norm = grad_norm(estimate.grads)
        if not math.isfinite(norm):
            raise TrainingDiverged(
                f"non-finite gradient at iteration {k} "
                f"(objective={config.objective}, feedback={delta!r})"
            )
        clipped = clip_gradient(estimate.grads, config.clip_norm)
        step(params, clipped, opt_state)
        window_feedback.append(delta)
        window_norms.append(norm)
        if k % config.valid_interval == 0 or k == config.iters:
            emit(k, "train", "mean_feedback",
                 sum(window_feedback) / len(window_feedback))
            emit(k, "train", "grad_norm", sum(window_norms) / len(window_norms))
            if config.cv_mode == "sf":
                emit(k, "train", "cv_chat_mean", cv_state.chat_mean())
            if antithetic is not None:
                emit(k, "train", "antithetic_cov_mean", antithetic.cov_mean())
            window_feedback = []
            window_norms = []
            run_validation(k)
    return BanditResult(best_values=best_values, best_score=best_score,
                        best_iteration=best_iteration, rows=rows)


# ---------------------------------------------------------------------------
# Enumeration oracles. Sampling without replacement of anything: these walk
# every outcome of the samplers on tiny instances, so expectations and their
# gradients can be computed exactly and compared against the estimators.
# ---------------------------------------------------------------------------


def exact_risk_and_grad(source, params, delta_fn, max_len, guard=1_000_000):
    """Exact expected loss and its gradient by full enumeration.

    Sums ``p(y) * delta_fn(y)`` over every END-terminated sequence up to
    ``max_len`` and every truncated length-``max_len`` sequence, then
    differentiates the whole expression.
    """
    n = count_sequences(params.vocab_size, max_len)
    if n > guard:
        raise ValueError(
            f"enumeration of {n} sequences exceeds the guard of {guard}"
        )
    with Tape() as tape:
        risk = None
        for tokens, lp_node in enumerate_log_prob_nodes(source, params, max_len):
            term = mul(exp(lp_node), float(delta_fn(list(tokens))))
            risk = term if risk is None else risk + term
    grads = tape.backward(risk, params.tensors)
    return float(risk.data), grads


def _greedy_step_log_probs(source, params, t_y):
    """Greedy roll-out of ``t_y`` steps (no END stopping, as in pair
    sampling) with the per-step log-distributions along it."""
    log_pos = []
    log_neg = []
    greedy = []
    with no_grad():
        enc = encode_full(source, params)
        state = enc.init_state
        prev = START
        for _ in range(t_y):
            logits, state, _ = decoder_step(prev, state, enc, params)
            x = logits.data
            m = x.max()
            log_pos.append(x - (m + np.log(np.exp(x - m).sum())))
            mn = (-x).max()
            log_neg.append(-x - (mn + np.log(np.exp(-x - mn).sum())))
            tok = int(np.argmax(x))
            greedy.append(tok)
            prev = tok
    return log_pos, log_neg, greedy


def enumerate_pair_outcomes(source, params, t_y, guard=1_000_000):
    """Every (position, positive, perturbed) outcome of pair sampling with
    its probability, as ``(SampledPair, probability)`` tuples."""
    vocab = params.vocab_size
    n_outcomes = t_y * vocab ** (2 * t_y)
    if n_outcomes > guard:
        raise ValueError(
            f"enumeration of {n_outcomes} pair outcomes exceeds the guard"
        )
    log_pos, log_neg, greedy = _greedy_step_log_probs(source, params, t_y)
    outcomes = []
    for position in range(1, t_y + 1):
        for w in itertools.product(range(vocab), repeat=t_y):
            lp_w = sum(log_pos[t][w[t]] for t in range(t_y))
            for w_prime in itertools.product(range(vocab), repeat=t_y):
                lp = lp_w
                for t in range(t_y):
                    table = log_neg if t + 1 == position else log_pos
                    lp += table[t][w_prime[t]]
                pair = SampledPair(tokens_pos=list(w), tokens_neg=list(w_prime),
                                   greedy=list(greedy), position=position,
                                   log_prob=float(lp))
                outcomes.append((pair, math.exp(lp) / t_y))
    return outcomes


def exact_pr_risk_and_grad(source, params, pair_delta_fn, t_y,
                           guard=1_000_000):
    """Exact pairwise-ranking risk and gradient by enumerating every pair
    outcome. The greedy conditioning prefix is held fixed (it is locally
    constant in the parameters), matching the estimator's semantics."""
    vocab = params.vocab_size
    n_outcomes = t_y * vocab ** (2 * t_y)
    if n_outcomes > guard:
        raise ValueError(
            f"enumeration of {n_outcomes} pair outcomes exceeds the guard"
        )
    _, _, greedy = _greedy_step_log_probs(source, params, t_y)
    with Tape() as tape:
        enc = encode_full(source, params)
        state = enc.init_state
        prev = START
        step_lp_pos = []
        step_lp_neg = []
        for t in range(t_y):
            logits, state, _ = decoder_step(prev, state, enc, params)
            lse_pos = logsumexp(logits)
            neg_logits = neg(logits)
            lse_neg = logsumexp(neg_logits)
            step_lp_pos.append([pick(logits, v) - lse_pos
                                for v in range(vocab)])
            step_lp_neg.append([pick(neg_logits, v) - lse_neg
                                for v in range(vocab)])
            prev = greedy[t]
        risk = None
        for position in range(1, t_y + 1):
            for w in itertools.product(range(vocab), repeat=t_y):
                lp_w = step_lp_pos[0][w[0]]
                for t in range(1, t_y):
                    lp_w = lp_w + step_lp_pos[t][w[t]]
                for w_prime in itertools.product(range(vocab), repeat=t_y):
                    lp = lp_w
                    for t in range(t_y):
                        table = step_lp_neg if t + 1 == position else step_lp_pos
                        lp = lp + table[t][w_prime[t]]
                    delta = pair_delta_fn(list(w), list(w_prime))
                    term = mul(exp(lp), float(delta) / t_y)
                    risk = term if risk is None else risk + term
    grads = tape.backward(risk, params.tensors)
    return float(risk.data), grads

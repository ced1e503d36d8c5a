"""The pretrain -> adapt -> evaluate experiment pipeline.

Stages (selected by the ``stages`` config key):

* ``gen-data``     write synthetic corpora for both domains
* ``build-vocab``  frequency vocabulary from the domain-A training corpus
* ``train-mle``    supervised pretraining on domain A (the seed model)
* ``train-bandit`` one adaptation run per seed on domain-B feedback;
                   references stay behind the feedback oracle
* ``evaluate``     greedy-decode both test sets for the seed model and every
                   run's selected checkpoint; write decoded outputs (raw and
                   UNK-replaced) and a metrics CSV including mean/std rows
                   across runs

All randomness descends from the single config seed through fixed
per-stage offsets, so a rerun with the same config is byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, format_config
from .data import SPLITS, Corpus, SyntheticTaskSpec, corpus_paths, gen_data, \
    read_parallel, write_corpus
from .metrics import FeedbackOracle, clean_hypothesis, corpus_bleu, corpus_ggleu
from .model import END, ModelParams, START, UNK, Vocabulary, greedy_decode
from .objectives import OptimizerState, TrainingConfig, adam_update, \
    bandit_train_loop, clip_gradient, mle_loss_and_grad

__all__ = [
    "derive_seed",
    "unk_replace",
    "evaluate_on_corpus",
    "train_mle",
    "BanditRunOutcome",
    "PipelineResult",
    "run_pipeline",
    "write_metrics_csv",
]

CSV_FIELDS = ("run", "iteration", "epoch", "split", "metric", "value")

# Stage offsets under the master seed; runs add their index on top.
_SEED_MODEL_INIT = 11
_SEED_MLE_ORDER = 12
_SEED_MLE_DROPOUT = 13
_SEED_BANDIT_STREAM = 20
_SEED_BANDIT_LOOP = 40


def derive_seed(base, *offsets):
    """Fold offsets into a base seed; stable across platforms."""
    ss = np.random.SeedSequence([int(base), *[int(o) for o in offsets]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def unk_replace(tokens, attentions, source_tokens):
    """Replace UNK output tokens by the source token with the highest
    attention weight at that step (ties: lowest source position). Pure
    post-processing; non-UNK tokens pass through."""
    if len(attentions) != len(tokens):
        raise ValueError(
            f"unk_replace: {len(tokens)} tokens but {len(attentions)} "
            f"attention vectors"
        )
    out = []
    for tok, attn in zip(tokens, attentions):
        if tok == Vocabulary.RESERVED[UNK]:
            out.append(source_tokens[int(np.argmax(attn))])
        else:
            out.append(tok)
    return out


def _decode_sentence(params, vocab, src_tokens, max_len):
    """Greedy decode one sentence; returns (plain tokens, unk-replaced)."""
    src_ids = vocab.encode(src_tokens)
    out_ids, attn = greedy_decode(src_ids, params, max_len, return_attention=True)
    kept_ids = []
    kept_attn = []
    for tok, a in zip(out_ids, attn):
        if tok == END:
            break
        if tok == START:
            continue
        kept_ids.append(tok)
        kept_attn.append(a)
    tokens = vocab.decode(kept_ids)
    return tokens, unk_replace(tokens, kept_attn, src_tokens)


def evaluate_on_corpus(params, vocab, corpus, max_len, max_n=4):
    """Greedy-decode a corpus and score it. Returns (scores, decoded,
    decoded with UNK replacement); scores carry ggleu/bleu for both."""
    hyps = []
    hyps_unk = []
    for src_tokens, _ in corpus.pairs:
        tokens, tokens_unk = _decode_sentence(params, vocab, src_tokens, max_len)
        hyps.append(tokens)
        hyps_unk.append(tokens_unk)
    refs = corpus.targets
    scores = {
        "ggleu": corpus_ggleu(hyps, refs, max_n),
        "bleu": corpus_bleu(hyps, refs, max_n),
        "ggleu_unk": corpus_ggleu(hyps_unk, refs, max_n),
        "bleu_unk": corpus_bleu(hyps_unk, refs, max_n),
    }
    return scores, hyps, hyps_unk


def _make_validator(vocab, corpus, max_len, max_n):
    sources = [vocab.encode(src) for src in corpus.sources]
    refs = corpus.targets

    def validate(params):
        hyps = []
        for src_ids, src_tokens in zip(sources, corpus.sources):
            out_ids = greedy_decode(src_ids, params, max_len)
            hyps.append(vocab.decode(clean_hypothesis(out_ids)))
        return {
            "ggleu": corpus_ggleu(hyps, refs, max_n),
            "bleu": corpus_bleu(hyps, refs, max_n),
        }

    return validate


def train_mle(cfg, vocab, train_corpus, valid_corpus):
    """Minibatch MLE pretraining with per-epoch validation; returns the
    best-validation parameters and the metric rows."""
    params = ModelParams(len(vocab), cfg.embedding_size, cfg.hidden_size,
                         seed=derive_seed(cfg.seed, _SEED_MODEL_INIT))
    opt = OptimizerState.for_params(params, alpha=cfg.mle_alpha,
                                    beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                                    eps=cfg.adam_eps)
    examples = [
        (vocab.encode(src), vocab.encode(tgt) + [END])
        for src, tgt in train_corpus.pairs
    ]
    order_rng = np.random.default_rng(derive_seed(cfg.seed, _SEED_MLE_ORDER))
    dropout_rng = np.random.default_rng(derive_seed(cfg.seed, _SEED_MLE_DROPOUT))
    dropout = (cfg.dropout, dropout_rng) if cfg.dropout > 0 else None
    validate = _make_validator(vocab, valid_corpus, cfg.max_len, cfg.ggleu_max_n)

    rows = []
    best_score = -math.inf
    best_values = params.copy_values()
    updates = 0
    for epoch in range(1, cfg.mle_epochs + 1):
        order = order_rng.permutation(len(examples))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.mle_batch):
            batch = order[start:start + cfg.mle_batch]
            acc = None
            for idx in batch:
                src, ref = examples[int(idx)]
                loss, est = mle_loss_and_grad(src, ref, params, dropout=dropout)
                epoch_loss += loss
                if acc is None:
                    acc = est.grads
                else:
                    for name in acc:
                        acc[name] += est.grads[name]
            scale = 1.0 / len(batch)
            grads = {name: g * scale for name, g in acc.items()}
            grads = clip_gradient(grads, cfg.clip_norm)
            adam_update(params, grads, opt)
            updates += 1
        scores = validate(params)
        rows.append({"iteration": updates, "epoch": epoch, "split": "train",
                     "metric": "mle_loss", "value": epoch_loss / len(examples)})
        for metric in sorted(scores):
            rows.append({"iteration": updates, "epoch": epoch, "split": "valid",
                         "metric": metric, "value": scores[metric]})
        if scores["ggleu"] > best_score:
            best_score = scores["ggleu"]
            best_values = params.copy_values()
    params.load_values(best_values)
    return params, rows


@dataclass
class BanditRunOutcome:
    """One adaptation run: its log, selection, and test scores."""

    run: int
    objective: str
    cv_mode: str
    best_iteration: int
    best_valid_score: float
    rows: list
    test_scores: dict = field(default_factory=dict)
    oracle_calls: int = 0
    checkpoint_path: str = ""


@dataclass
class PipelineResult:
    cfg: object
    out_dir: str
    data_dir: str
    vocab: Vocabulary = None
    seed_test_scores: dict = field(default_factory=dict)
    mle_rows: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    metrics_path: str = ""
    seed_checkpoint_path: str = ""


def _corpus_stream(examples, seed):
    rng = np.random.default_rng(seed)
    while True:
        for i in rng.permutation(len(examples)):
            yield int(i), examples[int(i)]


def _train_bandit_run(cfg, vocab, seed_values, corpora, run_idx):
    params = ModelParams.from_tensors(len(vocab), seed_values)
    train_b = corpora["b", "train"]
    sources = [vocab.encode(src) for src in train_b.sources]
    references = {i: vocab.encode(tgt) for i, (_, tgt) in enumerate(train_b.pairs)}
    if cfg.objective == "el":
        oracle = FeedbackOracle("ggleu-loss", references, max_n=cfg.ggleu_max_n,
                                clean=True)
    else:
        kind = "pair-binary" if cfg.pair_feedback == "binary" else "pair-continuous"
        oracle = FeedbackOracle(kind, references, max_n=cfg.ggleu_max_n,
                                clean=True)
    stream = _corpus_stream(sources,
                            derive_seed(cfg.seed, _SEED_BANDIT_STREAM, run_idx))
    validate = _make_validator(vocab, corpora["b", "valid"], cfg.max_len,
                               cfg.ggleu_max_n)
    train_cfg = TrainingConfig(
        objective=cfg.objective,
        pair_feedback=cfg.pair_feedback,
        cv_mode=cfg.cv_mode,
        iters=cfg.iters,
        valid_interval=cfg.valid_interval,
        clip_norm=cfg.clip_norm,
        seed=derive_seed(cfg.seed, _SEED_BANDIT_LOOP, run_idx),
        alpha=cfg.adam_alpha,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        baseline_includes_current=cfg.baseline_includes_current,
        optimizer=cfg.optimizer,
        sgd_decay=cfg.sgd_decay,
        max_len=cfg.max_len,
        epoch_size=len(sources),
    )
    result = bandit_train_loop(train_cfg, params, stream, oracle,
                               validate_fn=validate)
    params.load_values(result.best_values)
    return BanditRunOutcome(
        run=run_idx + 1,
        objective=cfg.objective,
        cv_mode=cfg.cv_mode,
        best_iteration=result.best_iteration,
        best_valid_score=result.best_score,
        rows=result.rows,
        oracle_calls=oracle.calls,
    ), params


def write_metrics_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            formatted = dict(row)
            formatted["value"] = repr(float(row["value"]))
            writer.writerow(formatted)
    return path


def _write_decoded(out_dir, tag, domain, hyps, hyps_unk):
    os.makedirs(os.path.join(out_dir, "decoded"), exist_ok=True)
    base = os.path.join(out_dir, "decoded", f"{tag}.{domain}")
    with open(base + ".txt", "w", encoding="utf-8") as fh:
        for toks in hyps:
            fh.write(" ".join(toks) + "\n")
    with open(base + ".unk.txt", "w", encoding="utf-8") as fh:
        for toks in hyps_unk:
            fh.write(" ".join(toks) + "\n")


def _load_corpora(data_dir):
    corpora = {}
    for domain in ("a", "b"):
        for split in SPLITS:
            src_path, tgt_path = corpus_paths(data_dir, domain, split)
            if not (os.path.exists(src_path) and os.path.exists(tgt_path)):
                raise ConfigError(
                    f"missing corpus files for domain {domain!r} split "
                    f"{split!r} under {data_dir} (run the gen-data stage?)"
                )
            corpora[domain, split] = read_parallel(src_path, tgt_path,
                                                   domain=domain, split=split)
    return corpora


def task_spec_from_config(cfg):
    return SyntheticTaskSpec(
        src_vocab_size=cfg.src_vocab_size,
        overlap=cfg.overlap,
        band_weight_a=cfg.band_weight_a,
        band_weight_b=cfg.band_weight_b,
        ambiguity=cfg.ambiguity,
        swap_a=cfg.swap_a,
        swap_b=cfg.swap_b,
        min_len=cfg.min_sent_len,
        max_len=cfg.max_sent_len,
        sizes_a=(cfg.train_a, cfg.valid_a, cfg.test_a),
        sizes_b=(cfg.train_b, cfg.valid_b, cfg.test_b),
        seed=cfg.seed,
    )


def config_hash(cfg):
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()


def run_pipeline(cfg):
    """Execute the configured stages; returns a PipelineResult."""
    out_dir = cfg.out_dir
    data_dir = cfg.data_dir or os.path.join(out_dir, "data")
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(data_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    stages = cfg.stage_list()
    known = {"gen-data", "build-vocab", "train-mle", "train-bandit", "evaluate"}
    unknown = set(stages) - known
    if unknown:
        raise ConfigError(f"unknown stages: {sorted(unknown)}")
    result = PipelineResult(cfg=cfg, out_dir=out_dir, data_dir=data_dir)
    chash = config_hash(cfg)

    if "gen-data" in stages:
        corpora = gen_data(task_spec_from_config(cfg))
        for corpus in corpora.values():
            write_corpus(corpus, data_dir)
    else:
        corpora = _load_corpora(data_dir)

    vocab = None
    if "build-vocab" in stages:
        train_a = corpora["a", "train"]
        vocab = Vocabulary.from_corpus(train_a.sources + train_a.targets,
                                       cutoff=cfg.vocab_cutoff)
        vocab.save(os.path.join(out_dir, "vocab.txt"))

    seed_path = cfg.seed_checkpoint or os.path.join(out_dir, "checkpoints",
                                                    "mle.bnsq")
    params = None
    if "train-mle" in stages:
        if vocab is None:
            raise ConfigError("train-mle requires the build-vocab stage")
        params, mle_rows = train_mle(cfg, vocab, corpora["a", "train"],
                                     corpora["a", "valid"])
        result.mle_rows = mle_rows
        for row in mle_rows:
            result.rows.append({"run": 0, **row})
        save_checkpoint(seed_path, Checkpoint(
            vocab=vocab, tensors=params.copy_values(), iteration=0,
            seed=cfg.seed, config_hash=chash))
    elif "train-bandit" in stages or "evaluate" in stages:
        if not os.path.exists(seed_path):
            raise ConfigError(
                f"no seed checkpoint at {seed_path}; run train-mle or set "
                f"seed_checkpoint"
            )
        ckpt = load_checkpoint(seed_path)
        vocab = ckpt.vocab
        params = ckpt.to_model()
    result.vocab = vocab
    result.seed_checkpoint_path = seed_path
    if params is None:
        result.metrics_path = write_metrics_csv(
            os.path.join(out_dir, "metrics.csv"), result.rows)
        return result
    seed_values = params.copy_values()

    run_params = []
    if "train-bandit" in stages:
        if cfg.objective not in ("el", "pr"):
            raise ConfigError(
                "train-bandit requires objective = el or pr; "
                "mle is the pretraining stage"
            )
        for run_idx in range(cfg.runs):
            outcome, best_params = _train_bandit_run(cfg, vocab, seed_values,
                                                     corpora, run_idx)
            tag = f"{cfg.objective}-{cfg.cv_mode}-run{outcome.run}"
            ckpt_path = os.path.join(out_dir, "checkpoints", tag + ".bnsq")
            save_checkpoint(ckpt_path, Checkpoint(
                vocab=vocab, tensors=best_params.copy_values(),
                iteration=outcome.best_iteration, seed=cfg.seed,
                config_hash=chash))
            outcome.checkpoint_path = ckpt_path
            for row in outcome.rows:
                result.rows.append({"run": outcome.run, **row})
            result.runs.append(outcome)
            run_params.append(best_params)

    if "evaluate" in stages:
        test_sets = {"test_a": corpora["a", "test"], "test_b": corpora["b", "test"]}
        seed_model = ModelParams.from_tensors(len(vocab), seed_values)
        for split, corpus in sorted(test_sets.items()):
            scores, hyps, hyps_unk = evaluate_on_corpus(
                seed_model, vocab, corpus, cfg.max_len, cfg.ggleu_max_n)
            result.seed_test_scores[split] = scores
            _write_decoded(out_dir, "seed", split, hyps, hyps_unk)
            for metric in sorted(scores):
                result.rows.append({"run": 0, "iteration": 0, "epoch": 0,
                                    "split": split, "metric": metric,
                                    "value": scores[metric]})
        per_metric = {}
        for outcome, best_params in zip(result.runs, run_params):
            tag = f"{cfg.objective}-{cfg.cv_mode}-run{outcome.run}"
            for split, corpus in sorted(test_sets.items()):
                scores, hyps, hyps_unk = evaluate_on_corpus(
                    best_params, vocab, corpus, cfg.max_len, cfg.ggleu_max_n)
                outcome.test_scores[split] = scores
                _write_decoded(out_dir, tag, split, hyps, hyps_unk)
                for metric in sorted(scores):
                    result.rows.append({
                        "run": outcome.run,
                        "iteration": outcome.best_iteration, "epoch": 0,
                        "split": split, "metric": metric,
                        "value": scores[metric]})
                    per_metric.setdefault((split, metric), []).append(
                        scores[metric])
        for (split, metric), values in sorted(per_metric.items()):
            mean = sum(values) / len(values)
            var = sum((v - mean) ** 2 for v in values) / len(values)
            result.rows.append({"run": "mean", "iteration": 0, "epoch": 0,
                                "split": split, "metric": metric, "value": mean})
            result.rows.append({"run": "std", "iteration": 0, "epoch": 0,
                                "split": split, "metric": metric,
                                "value": math.sqrt(var)})

    result.metrics_path = write_metrics_csv(
        os.path.join(out_dir, "metrics.csv"), result.rows)
    return result

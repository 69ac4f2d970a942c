"""Next-token-prediction training and greedy exact-match evaluation.

Optimization recipe: AdamW (decoupled decay, betas 0.9/0.999, eps 1e-8,
weight decay 0.1 by default) under a linear warmup for the first fifth of
the steps followed by linear decay to zero. Loss is masked cross entropy;
batches are reshuffled each epoch from the config seed, so training is
bitwise deterministic for fixed (init seed, config seed, dataset).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .models import Model, count_params, forward_batch
from .seeding import derive_seed, rng_for
from .tasks import (
    EOS,
    PAD,
    Phonebook,
    Sample,
    Vocabulary,
    bfs_shortest_path,
    Graph,
    gen_phonebook,
    phonebook_samples,
)

__all__ = [
    "TrainConfig",
    "TrainLog",
    "DivergenceError",
    "AdamWState",
    "lr_at",
    "adamw_step",
    "train",
    "EvalResult",
    "evaluate_exact_match",
    "CapacityResult",
    "phonebook_capacity",
    "train_test_gap",
]

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class DivergenceError(RuntimeError):
    """Loss or a gradient went non-finite; the model was rolled back to the
    last epoch-start snapshot before raising."""


@dataclass
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    weight_decay: float = 0.1
    warmup_fraction: float = 0.2
    schedule: str = "linear_decay"
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.schedule != "linear_decay":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    path: str | None = None

    def record(self, kind: str, payload: dict) -> None:
        (self.steps if kind == "step" else self.evals).append(payload)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"kind": kind, **payload}) + "\n")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup fraction, then linear decay to 0."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.learning_rate * step / warm
    if total_steps == warm:
        return cfg.learning_rate
    return cfg.learning_rate * (total_steps - step) / (total_steps - warm)


class AdamWState:
    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    lr: float,
    weight_decay: float,
) -> None:
    """One decoupled-weight-decay Adam update.

    Decay multiplies weights by (1 - lr * wd) directly, independent of the
    gradient path. Parameters without a gradient this step (e.g. unrouted
    experts) are treated as having zero gradient: decay still applies and
    their moments keep decaying.
    """
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
        m, v = state.m[name], state.v[name]
        if g is None:
            m *= ADAM_BETA1
            v *= ADAM_BETA2
        else:
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * np.square(g)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def _clip_grads(params: dict[str, Tensor], max_norm: float) -> None:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad)))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor


def _pad_batch(
    samples: list[Sample], pad_id: int | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (inputs, targets, target_mask) for next-token loss."""
    width = max(len(s.tokens) for s in samples)
    if pad_id is None and any(len(s.tokens) != width for s in samples):
        raise ValueError("variable-length batch but the vocabulary has no pad token")
    fill = pad_id if pad_id is not None else 0
    toks = np.full((len(samples), width), fill, dtype=np.int64)
    mask = np.zeros((len(samples), width), dtype=bool)
    for i, s in enumerate(samples):
        toks[i, : len(s.tokens)] = s.tokens
        mask[i, : len(s.tokens)] = s.loss_mask
    return toks[:, :-1], toks[:, 1:], mask[:, 1:]


def train(
    model: Model,
    dataset: list[Sample],
    cfg: TrainConfig,
    vocab: Vocabulary | None = None,
    log_path: str | None = None,
    eval_every: int | None = None,
    eval_fn: Callable[[Model], dict] | None = None,
) -> tuple[Model, TrainLog]:
    """Train in place with shuffled epochs and the warmup/decay schedule.

    On a non-finite loss or gradient the weights roll back to the epoch-start
    snapshot and DivergenceError is raised.

    ``eval_fn`` runs every ``eval_every`` epochs; its dict is logged, and a
    truthy "stop" key ends training early (used by capacity scans to cut off
    runs that already pass or clearly cannot).
    """
    if not dataset:
        raise ValueError("empty dataset")
    pad_id = vocab.id(PAD) if (vocab is not None and PAD in vocab) else None
    log = TrainLog(path=log_path)
    params = model.params
    state = AdamWState(params)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    shuffle_rng = rng_for(cfg.seed, "batch-shuffle")
    aux_weight = model.config.aux_load_loss_weight

    step = 0
    for epoch in range(cfg.epochs):
        snapshot = model.copy_weights()
        order = shuffle_rng.permutation(len(dataset))
        for b in range(steps_per_epoch):
            batch = [dataset[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            inputs, targets, tmask = _pad_batch(batch, pad_id)
            lr = lr_at(step, total_steps, cfg)
            with Tape():
                out = forward_batch(model, inputs, pad_id=pad_id)
                loss = ad.cross_entropy_masked(out.logits, targets, tmask)
                if aux_weight > 0 and out.aux_loss is not None:
                    loss = ad.add(loss, ad.scale(out.aux_loss, aux_weight))
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    model.restore_weights(snapshot)
                    raise DivergenceError(f"non-finite loss at step {step}")
                if loss.tape is not None:
                    ad.backward(loss)
            if cfg.grad_clip is not None:
                _clip_grads(params, cfg.grad_clip)
            try:
                adamw_step(params, state, lr, cfg.weight_decay)
            except DivergenceError:
                model.restore_weights(snapshot)
                raise
            for p in params.values():
                p.zero_grad()
            log.record("step", {"step": step, "lr": lr, "train_loss": loss_val})
            step += 1
        if eval_fn is not None and eval_every is not None and (epoch + 1) % eval_every == 0:
            payload = eval_fn(model)
            log.record("eval", {"epoch": epoch, **payload})
            if payload.get("stop"):
                break
    return model, log


# --- evaluation -----------------------------------------------------------------


@dataclass
class EvalResult:
    exact_match: float
    valid_path_accuracy: float | None
    num_queries: int


def _greedy_decode_group(
    model: Model, prompts: np.ndarray, eos_id: int, max_new: int
) -> list[list[int]]:
    """Batched greedy decoding for same-length prompts; returns generated ids
    per row, truncated after (and including) the first <EOS>."""
    b = prompts.shape[0]
    current = prompts
    generated: list[list[int]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    for _ in range(max_new):
        if current.shape[1] >= model.config.max_seq_len:
            break
        out = forward_batch(model, current)
        nxt = np.argmax(out.logits.data[:, -1, :], axis=-1)
        for i in range(b):
            if not done[i]:
                generated[i].append(int(nxt[i]))
                if nxt[i] == eos_id:
                    done[i] = True
        if done.all():
            break
        current = np.concatenate([current, nxt[:, None]], axis=1)
    return generated


def _valid_shortest_path(sample: Sample, decoded: list[int], vocab: Vocabulary) -> bool:
    meta = sample.meta
    if meta.get("task") != "shortest_path":
        return False
    if not decoded or decoded[-1] != vocab.id(EOS):
        return False
    try:
        verts = [int(vocab.token(i)) for i in decoded[:-1]]
    except ValueError:
        return False
    if len(verts) < 2:
        return False
    u, v = meta["query"]
    if verts[0] != u or verts[-1] != v:
        return False
    g = Graph(meta["n"], frozenset(tuple(e) for e in meta["edges"]))
    edges = g.edges
    if any((a, b) not in edges for a, b in zip(verts, verts[1:])):
        return False
    reference = bfs_shortest_path(g, u, v)
    return reference is not None and len(verts) == len(reference)


def evaluate_exact_match(
    model: Model,
    queries: list[Sample],
    vocab: Vocabulary,
    max_new: int | None = None,
    decode_batch: int = 256,
) -> EvalResult:
    """Greedy-decode each query prompt and score exact token match against the
    reference answer; for shortest-path queries also score acceptance of any
    valid shortest path. A decode that hits the length cap scores 0."""
    if not queries:
        raise ValueError("no queries")
    eos_id = vocab.id(EOS)
    cap = max_new or max(len(q.answer) for q in queries) + 8

    by_len: dict[int, list[int]] = {}
    for qi, q in enumerate(queries):
        by_len.setdefault(len(q.prompt), []).append(qi)

    exact = 0
    is_path_task = any(q.meta.get("task") == "shortest_path" for q in queries)
    valid = 0
    for plen, idxs in sorted(by_len.items()):
        for lo in range(0, len(idxs), decode_batch):
            chunk = idxs[lo : lo + decode_batch]
            prompts = np.array([queries[i].prompt for i in chunk], dtype=np.int64)
            outs = _greedy_decode_group(model, prompts, eos_id, cap)
            for i, decoded in zip(chunk, outs):
                if decoded == list(queries[i].answer):
                    exact += 1
                    valid += 1
                elif is_path_task and _valid_shortest_path(queries[i], decoded, vocab):
                    valid += 1
    n = len(queries)
    return EvalResult(
        exact_match=exact / n,
        valid_path_accuracy=(valid / n) if is_path_task else None,
        num_queries=n,
    )


# --- derived metrics ----------------------------------------------------------------


@dataclass
class CapacityResult:
    capacity: int  # largest passing size, 0 if none pass
    threshold: float
    per_size: list[dict]


def phonebook_capacity(
    model_builder: Callable[[int], Model],
    train_cfg: TrainConfig | Callable[[int], TrainConfig],
    sizes: list[int],
    vocab: Vocabulary,
    threshold: float = 0.9,
    seed: int = 0,
    num_queries: int = 1000,
    stop_after_failures: int = 2,
) -> CapacityResult:
    """Train a fresh model per phone-book size (ascending) and report the
    largest size whose exact-match accuracy clears ``threshold``.

    The scan stops early after ``stop_after_failures`` consecutive failing
    sizes; memorization accuracy is monotone enough in practice that larger
    sizes cannot rescue the capacity estimate.
    """
    if sorted(sizes) != list(sizes):
        raise ValueError("sizes must be ascending")
    capacity = 0
    per_size = []
    consecutive_failures = 0
    for size in sizes:
        book = gen_phonebook(size, derive_seed(seed, "book", size))
        samples, queries = phonebook_samples(
            book, vocab, num_queries=num_queries, seed=derive_seed(seed, "queries", size)
        )
        model = model_builder(derive_seed(seed, "init", size))
        cfg = train_cfg(size) if callable(train_cfg) else train_cfg

        # checkpoint on a query subset: stop as soon as the run clearly passes,
        # abort once it clearly cannot (late, far below threshold)
        probe = queries[: min(200, len(queries))]
        checkpoints = max(1, cfg.epochs // 6)
        seen = {"count": 0}

        def checkpoint(m: Model) -> dict:
            seen["count"] += 1
            acc = evaluate_exact_match(m, probe, vocab).exact_match
            done_frac = seen["count"] * checkpoints / cfg.epochs
            stop = acc >= min(1.0, threshold + 0.05) or (
                done_frac >= 0.67 and acc < threshold / 3
            )
            return {"probe_exact_match": acc, "stop": stop}

        train(model, samples, cfg, vocab=vocab, eval_every=checkpoints, eval_fn=checkpoint)
        acc = evaluate_exact_match(model, queries, vocab).exact_match
        counts = count_params(model.config)
        per_size.append({"size": size, "exact_match": acc, **counts})
        if acc >= threshold:
            capacity = size
            consecutive_failures = 0
        else:
            consecutive_failures += 1
            if consecutive_failures >= stop_after_failures:
                break
    return CapacityResult(capacity, threshold, per_size)


def train_test_gap(
    model: Model, train_subset: list[Sample], test_set: list[Sample], vocab: Vocabulary
) -> float:
    """Exact-match accuracy difference between (memorized) training examples
    and held-out examples; elevated values signal memorization."""
    if not train_subset or not test_set:
        raise ValueError("both sets must be nonempty")
    train_acc = evaluate_exact_match(model, train_subset, vocab).exact_match
    test_acc = evaluate_exact_match(model, test_set, vocab).exact_match
    return train_acc - test_acc

"""Dense and mixture-of-experts transformer forward passes.

Architecture: pre-norm residual blocks, multi-head causal attention with
rotary positions, and an FFN that is either a single two-matrix ReLU MLP
(dense) or a bank of such MLPs with top-k token-choice routing (MoE).
The FFN intermediate width defaults to d, not 4d, and weights are bias-free
by default (``use_bias`` restores the classical MLP bias).

Parameter accounting distinguishes *total* non-embedding parameters (memory)
from *active* ones (compute: attention + router + only the selected experts).
Token embedding and unembedding are excluded from both counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import rng_for

__all__ = [
    "ModelConfig",
    "Model",
    "RoutingTrace",
    "ForwardOutput",
    "LoadStats",
    "build_model",
    "forward",
    "forward_batch",
    "moe_ffn",
    "count_params",
    "load_balance_stats",
    "save_model",
    "load_model",
]


@dataclass
class ModelConfig:
    """Architecture description shared by dense and MoE models."""

    arch: str  # "dense" or "moe"
    d: int
    L: int
    vocab_size: int
    H: int | None = None  # defaults to d // 64, clamped to >= 1
    E: int = 1
    top_k: int = 1
    max_seq_len: int = 256
    ffn_intermediate: int | None = None  # defaults to d
    aux_load_loss_weight: float = 0.0
    use_bias: bool = False
    rope_theta: float = 10000.0

    def __post_init__(self) -> None:
        if self.arch not in ("dense", "moe"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.arch == "dense" and (self.E != 1 or self.top_k != 1):
            raise ValueError("dense models must have E == 1 and top_k == 1")
        if min(self.d, self.L, self.vocab_size, self.E, self.top_k, self.max_seq_len) < 1:
            raise ValueError("config dimensions must be positive")
        if self.top_k > self.E:
            raise ValueError(f"top_k={self.top_k} exceeds E={self.E}")
        if self.H is None:
            self.H = max(1, self.d // 64)
        if self.d % self.H != 0:
            raise ValueError(f"d={self.d} not divisible by H={self.H}")
        if (self.d // self.H) % 2 != 0:
            raise ValueError("head dimension must be even for rotary positions")
        if self.ffn_intermediate is None:
            self.ffn_intermediate = self.d
        if self.aux_load_loss_weight < 0:
            raise ValueError("aux_load_loss_weight must be nonnegative")


@dataclass
class RoutingTrace:
    """Per-token routing record for one MoE layer.

    expert_indices[t] holds the top_k chosen experts (ties broken toward the
    lower index), gates[t] the renormalized softmax weights over them, and
    logits[t] the full router scores.
    """

    expert_indices: np.ndarray  # [tokens, top_k] int
    gates: np.ndarray  # [tokens, top_k]
    logits: np.ndarray  # [tokens, E]


@dataclass
class ForwardOutput:
    logits: Tensor  # [B, T, V]
    traces: list[RoutingTrace]
    aux_loss: Tensor | None  # load-balance loss, present when weight > 0 and taped


class Model:
    """Config plus named parameter store; single-owner while training."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        dh = config.d // config.H
        pos = np.arange(config.max_seq_len, dtype=np.float64)[:, None]
        freqs = config.rope_theta ** (-np.arange(0, dh, 2, dtype=np.float64) / dh)
        self._rope_cos = np.cos(pos * freqs)
        self._rope_sin = np.sin(pos * freqs)
        self._causal_cache: dict[int, np.ndarray] = {}

    def _causal_mask(self, t: int) -> np.ndarray:
        mask = self._causal_cache.get(t)
        if mask is None:
            mask = np.triu(np.full((t, t), -1e30), k=1)
            self._causal_cache[t] = mask
        return mask

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_element_count(self, include_embeddings: bool = False) -> int:
        skip = () if include_embeddings else ("tok_embed", "unembed")
        return sum(t.data.size for name, t in self.params.items() if name not in skip)

    def copy_weights(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore_weights(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, arr in snapshot.items():
            self.params[name].data[...] = arr

    def assert_finite(self) -> None:
        for name, t in self.params.items():
            t.assert_finite(name)


def build_model(config: ModelConfig, seed: int) -> Model:
    """Initialize weights: N(0, 1/sqrt(d)) fan-in scaling, residual projections
    damped by 1/sqrt(2L), norm gains at one."""
    rng = rng_for(seed, "model-init")
    d, f = config.d, config.ffn_intermediate
    std = d**-0.5
    resid = std / (2 * config.L) ** 0.5

    def p(shape, s) -> Tensor:
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

    params: dict[str, Tensor] = {}
    params["tok_embed"] = p((config.vocab_size, d), std)
    for i in range(config.L):
        pre = f"layers.{i}."
        for name in ("wq", "wk", "wv"):
            params[pre + "attn." + name] = p((d, d), std)
        params[pre + "attn.wo"] = p((d, d), resid)
        params[pre + "norm_attn"] = Tensor(np.ones(d), requires_grad=True)
        params[pre + "norm_ffn"] = Tensor(np.ones(d), requires_grad=True)
        if config.arch == "moe":
            params[pre + "router"] = p((d, config.E), std)
        for e in range(config.E):
            params[pre + f"experts.{e}.w1"] = p((d, f), std)
            params[pre + f"experts.{e}.w2"] = p((f, d), resid)
            if config.use_bias:
                params[pre + f"experts.{e}.b1"] = Tensor(np.zeros(f), requires_grad=True)
                params[pre + f"experts.{e}.b2"] = Tensor(np.zeros(d), requires_grad=True)
    params["norm_final"] = Tensor(np.ones(d), requires_grad=True)
    params["unembed"] = p((d, config.vocab_size), std)
    return Model(config, params)


def _expert_mlp(model: Model, layer: int, expert: int, x: Tensor) -> Tensor:
    p = model.params
    pre = f"layers.{layer}.experts.{expert}."
    h = ad.matmul(x, p[pre + "w1"])
    if model.config.use_bias:
        h = ad.add(h, p[pre + "b1"])
    h = ad.relu(h)
    y = ad.matmul(h, p[pre + "w2"])
    if model.config.use_bias:
        y = ad.add(y, p[pre + "b2"])
    return y


def moe_ffn(
    x: Tensor, router: Tensor, expert_fn, num_experts: int, top_k: int
) -> tuple[Tensor, RoutingTrace]:
    """Top-k token-choice MoE over flattened tokens x [N, d].

    Every token is processed by exactly top_k experts (no dropping); gate
    weights are the softmax of the selected router logits. expert_fn(e, xe)
    maps expert index + gathered rows to that expert's output rows.
    """
    n = x.data.shape[0]
    logits = ad.matmul(x, router)  # [N, E]
    # stable argsort on -logits: equal scores keep ascending expert order
    order = np.argsort(-logits.data, axis=1, kind="stable")[:, :top_k]
    gates = ad.softmax_rows(ad.take_along_last(logits, order))  # [N, k]
    gates_flat = ad.reshape(gates, (n * top_k, 1))

    pieces = []
    for e in range(num_experts):
        token_idx, slot_idx = np.nonzero(order == e)
        if token_idx.size == 0:
            continue
        xe = ad.take_rows(x, token_idx)
        ye = expert_fn(e, xe)
        ge = ad.take_rows(gates_flat, token_idx * top_k + slot_idx)
        pieces.append(ad.scatter_rows(ad.mul(ye, ge), token_idx, n))
    y = pieces[0] if len(pieces) == 1 else ad.add_n(pieces)
    trace = RoutingTrace(order.copy(), gates.data.copy(), logits.data.copy())
    return y, trace


def _load_balance_loss(logits: Tensor, order: np.ndarray, num_experts: int) -> Tensor:
    """Switch-style balance penalty: E * sum_e f_e * mean_e(softmax probs)."""
    n = order.shape[0]
    counts = np.bincount(order.reshape(-1), minlength=num_experts)
    frac = counts / (n * order.shape[1])
    probs = ad.softmax_rows(logits)
    mean_probs = ad.scale(ad.sum_axis0(probs), 1.0 / n)
    weighted = ad.mul(mean_probs, Tensor(frac * num_experts, _checked=True))
    return ad.sum_all(weighted)


def forward_batch(
    model: Model, tokens: np.ndarray, pad_id: int | None = None
) -> ForwardOutput:
    """Causal forward over a [B, T] batch of token ids.

    Positions holding ``pad_id`` are excluded from attention keys; loss
    masking is the caller's business. Returns logits [B, T, V] plus one
    routing trace per MoE layer.
    """
    cfg = model.config
    p = model.params
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("forward_batch expects [B, T] token ids")
    b, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise IndexError("token id out of vocabulary")

    single_head = cfg.H == 1
    causal = model._causal_mask(t)
    has_pad = pad_id is not None and bool(np.any(tokens == pad_id))
    if has_pad:
        key_pad = np.where(tokens == pad_id, -1e30, 0.0)  # [B, T]
        if single_head:
            mask = causal[None, :, :] + key_pad[:, None, :]
        else:
            mask = causal[None, None, :, :] + key_pad[:, None, None, :]
        mask_t = Tensor(mask, _checked=True)
    else:
        shape = (1, t, t) if single_head else (1, 1, t, t)
        mask_t = Tensor(causal.reshape(shape), _checked=True)

    dh = cfg.d // cfg.H
    cos, sin = model._rope_cos[:t], model._rope_sin[:t]

    x = ad.embedding(p["tok_embed"], tokens)  # [B, T, d]
    traces: list[RoutingTrace] = []
    aux_terms = []
    for i in range(cfg.L):
        pre = f"layers.{i}."
        h = ad.rms_norm(x, p[pre + "norm_attn"])
        if single_head:
            q = ad.rope(ad.matmul(h, p[pre + "attn.wq"]), cos, sin)
            k = ad.rope(ad.matmul(h, p[pre + "attn.wk"]), cos, sin)
            v = ad.matmul(h, p[pre + "attn.wv"])
            scores = ad.scale(ad.matmul(q, ad.swapaxes(k, 1, 2)), dh**-0.5)
            att = ad.softmax_rows(ad.add(scores, mask_t))
            ctx = ad.matmul(att, v)
        else:
            q = ad.swapaxes(ad.reshape(ad.matmul(h, p[pre + "attn.wq"]), (b, t, cfg.H, dh)), 1, 2)
            k = ad.swapaxes(ad.reshape(ad.matmul(h, p[pre + "attn.wk"]), (b, t, cfg.H, dh)), 1, 2)
            v = ad.swapaxes(ad.reshape(ad.matmul(h, p[pre + "attn.wv"]), (b, t, cfg.H, dh)), 1, 2)
            q = ad.rope(q, cos, sin)
            k = ad.rope(k, cos, sin)
            scores = ad.scale(ad.matmul(q, ad.swapaxes(k, 2, 3)), dh**-0.5)
            att = ad.softmax_rows(ad.add(scores, mask_t))
            ctx = ad.reshape(ad.swapaxes(ad.matmul(att, v), 1, 2), (b, t, cfg.d))
        x = ad.add(x, ad.matmul(ctx, p[pre + "attn.wo"]))

        h2 = ad.rms_norm(x, p[pre + "norm_ffn"])
        if cfg.arch == "dense":
            y = _expert_mlp(model, i, 0, h2)
        else:
            flat = ad.reshape(h2, (b * t, cfg.d))
            y_flat, trace = moe_ffn(
                flat,
                p[pre + "router"],
                lambda e, xe, _i=i: _expert_mlp(model, _i, e, xe),
                cfg.E,
                cfg.top_k,
            )
            traces.append(trace)
            if cfg.aux_load_loss_weight > 0:
                router_logits = ad.matmul(flat, p[pre + "router"])
                aux_terms.append(
                    _load_balance_loss(router_logits, trace.expert_indices, cfg.E)
                )
            y = ad.reshape(y_flat, (b, t, cfg.d))
        x = ad.add(x, y)

    x = ad.rms_norm(x, p["norm_final"])
    logits = ad.matmul(x, p["unembed"])
    aux = None
    if aux_terms:
        total = aux_terms[0] if len(aux_terms) == 1 else ad.add_n(aux_terms)
        aux = ad.scale(total, 1.0 / len(aux_terms))
    return ForwardOutput(logits, traces, aux)


def forward(
    model: Model, tokens: np.ndarray, pad_id: int | None = None
) -> tuple[Tensor, list[RoutingTrace]]:
    """Single-sequence forward: tokens [T] -> (logits [T, V], traces)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError("forward expects a 1-D token sequence")
    out = forward_batch(model, tokens[None, :], pad_id=pad_id)
    return ad.reshape(out.logits, (tokens.shape[0], model.config.vocab_size)), out.traces


# --- parameter accounting -----------------------------------------------------


def count_params(config: ModelConfig) -> dict[str, int]:
    """Exact non-embedding parameter counts.

    total counts every trainable parameter except token embedding and
    unembedding; active replaces the per-layer expert bank by top_k experts.
    """
    d, f = config.d, config.ffn_intermediate
    expert = 2 * d * f + (f + d if config.use_bias else 0)
    attn = 4 * d * d
    norms = 2 * d
    router = d * config.E if config.arch == "moe" else 0
    per_layer_total = attn + norms + router + config.E * expert
    per_layer_active = attn + norms + router + config.top_k * expert
    total = config.L * per_layer_total + d
    active = config.L * per_layer_active + d
    return {"total_nonembedding": total, "active_nonembedding": active}


@dataclass
class LoadStats:
    counts: np.ndarray  # [E] token assignments summed over the given traces
    total_assignments: int
    max_mean_ratio: float


def load_balance_stats(
    traces: RoutingTrace | list[RoutingTrace], num_experts: int | None = None
) -> LoadStats:
    """Aggregate per-expert assignment counts over one or more routing traces.

    Counts sum to top_k x tokens (per trace, summed over traces); the
    max/mean ratio is 1 for perfectly balanced routing.
    """
    if isinstance(traces, RoutingTrace):
        traces = [traces]
    if not traces:
        raise ValueError("load_balance_stats needs at least one trace")
    if num_experts is None:
        num_experts = traces[0].logits.shape[1]
    counts = np.zeros(num_experts, dtype=np.int64)
    total = 0
    for tr in traces:
        counts += np.bincount(tr.expert_indices.reshape(-1), minlength=num_experts)
        total += tr.expert_indices.size
    ratio = float(counts.max() / counts.mean())
    return LoadStats(counts, total, ratio)


# --- checkpoint container -----------------------------------------------------
#
# A checkpoint is a numpy .npz archive with one array per named parameter plus
# a "__config__" entry holding the JSON-encoded ModelConfig. The layout is
# stable: loading rebuilds the model from the stored config and copies every
# named array into place.


def save_model(model: Model, path: str) -> None:
    arrays = {name: t.data for name, t in model.params.items()}
    arrays["__config__"] = np.frombuffer(
        json.dumps(asdict(model.config)).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str) -> Model:
    with np.load(path) as archive:
        cfg_raw = bytes(archive["__config__"].tobytes()).decode("utf-8")
        config = ModelConfig(**json.loads(cfg_raw))
        params = {
            name: Tensor(archive[name].copy(), requires_grad=True)
            for name in archive.files
            if name != "__config__"
        }
    return Model(config, params)

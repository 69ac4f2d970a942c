"""Seeded generators for the synthetic tasks plus brute-force helpers.

Tasks:
  * shortest path on directed Erdos-Renyi graphs (reasoning probe),
  * phone-book memorization (capacity probe),
  * Gaussian sequence memorization sets (for the constructive memorizer),
  * length-2-path instances encoding set disjointness.

Every generator is a pure function of (args, seed); per-sample streams are
derived with ``seeding.derive_seed`` so output is byte-identical across runs
and platforms.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_seed, rng_for

__all__ = [
    "Graph",
    "Vocabulary",
    "Sample",
    "Phonebook",
    "MemorizationSet",
    "CalibrationError",
    "UnreachableQueryError",
    "graph_vocabulary",
    "phonebook_vocabulary",
    "gen_er_graph",
    "calibrate_p",
    "estimate_mean_path",
    "bfs_shortest_path",
    "shortest_path_sample",
    "gen_shortest_path_dataset",
    "gen_phonebook",
    "phonebook_samples",
    "gen_memorization_set",
    "gen_length2_instance",
    "write_samples",
    "read_samples",
    "file_digest",
]

BOS, EOS, PAD, SEP, EDGE, SLASH = "<BOS>", "<EOS>", "<PAD>", "<SEP>", "<EDGE>", "/"

MAX_NAMES = 26**5
MAX_NUMBERS = 10**8


class CalibrationError(RuntimeError):
    """Raised when no edge probability achieves the target mean path length."""


class UnreachableQueryError(ValueError):
    """Raised when a shortest-path sample is requested for an unreachable pair."""


@dataclass(frozen=True)
class Graph:
    """Directed graph on vertices 1..n with optional designated source/destination."""

    n: int
    edges: frozenset[tuple[int, int]]
    s: int | None = None
    t: int | None = None

    def __post_init__(self) -> None:
        for u, v in self.edges:
            if u == v:
                raise ValueError(f"self-loop {u}->{v}")
            if not (1 <= u <= self.n and 1 <= v <= self.n):
                raise ValueError(f"edge {u}->{v} outside vertex range 1..{self.n}")
        if self.s is not None and self.s == self.t:
            raise ValueError("source and destination must differ")

    def adjacency(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {v: [] for v in range(1, self.n + 1)}
        for u, v in self.edges:
            adj[u].append(v)
        for vs in adj.values():
            vs.sort()
        return adj


class Vocabulary:
    """Ordered token list with stable integer ids (id = position)."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids[token]

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self._ids[t] for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def graph_vocabulary(n: int) -> Vocabulary:
    """Vertex tokens 1..n plus the six specials; size n + 6."""
    return Vocabulary([str(i) for i in range(1, n + 1)] + [EDGE, BOS, EOS, PAD, SEP, SLASH])


def phonebook_vocabulary() -> Vocabulary:
    """26 letters + 10 digits + <BOS>/<EOS>/<SEP>; size 39."""
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    digits = [str(d) for d in range(10)]
    return Vocabulary(letters + digits + [BOS, EOS, SEP])


@dataclass
class Sample:
    """One training/evaluation sequence.

    ``loss_mask`` is true on positions that are penalized; ``answer_span`` is
    the half-open [start, end) range holding the reference completion
    (including the closing <EOS>), which doubles as the prompt/answer split
    for greedy decoding.
    """

    tokens: list[int]
    loss_mask: list[bool]
    answer_span: tuple[int, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.loss_mask):
            raise ValueError("mask length != token length")
        lo, hi = self.answer_span
        if not (0 <= lo <= hi <= len(self.tokens)):
            raise ValueError("answer span out of range")

    @property
    def prompt(self) -> list[int]:
        return self.tokens[: self.answer_span[0]]

    @property
    def answer(self) -> list[int]:
        return self.tokens[self.answer_span[0] : self.answer_span[1]]


@dataclass
class Phonebook:
    entries: list[tuple[str, str]]  # (5-letter name, 8-digit number)


@dataclass
class MemorizationSet:
    sequences: np.ndarray  # [n, N, m] standard normal entries
    labels: np.ndarray  # [n] values in {-1, +1}


# --- graphs -------------------------------------------------------------------


def gen_er_graph(n: int, p: float, seed: int) -> Graph:
    """Directed G(n, p): each ordered pair u != v independently with prob p."""
    if n < 2:
        raise ValueError("need at least two vertices")
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"edge probability {p} outside [0, 1]")
    rng = rng_for(seed, "er-graph")
    mask = rng.random((n, n)) < p
    np.fill_diagonal(mask, False)
    us, vs = np.nonzero(mask)
    return Graph(n, frozenset((int(u) + 1, int(v) + 1) for u, v in zip(us, vs)))


def bfs_shortest_path(g: Graph, u: int, v: int) -> list[int] | None:
    """Lexicographically smallest shortest directed path from u to v, or None.

    Determinism: distances-to-v are computed by reverse BFS, then the path is
    walked greedily picking the smallest-numbered next vertex that stays on a
    shortest path.
    """
    if not (1 <= u <= g.n and 1 <= v <= g.n):
        raise ValueError(f"vertex out of range 1..{g.n}")
    if u == v:
        return [u]
    radj: dict[int, list[int]] = {w: [] for w in range(1, g.n + 1)}
    for a, b in g.edges:
        radj[b].append(a)
    dist = {v: 0}
    queue = deque([v])
    while queue:
        cur = queue.popleft()
        for prev in radj[cur]:
            if prev not in dist:
                dist[prev] = dist[cur] + 1
                queue.append(prev)
    if u not in dist:
        return None
    adj = g.adjacency()
    path = [u]
    cur = u
    while cur != v:
        cur = next(w for w in adj[cur] if dist.get(w, -1) == dist[cur] - 1)
        path.append(cur)
    return path


def estimate_mean_path(n: int, p: float, trials: int, seed: int) -> float:
    """Monte-Carlo mean shortest-path length over connected random ordered pairs."""
    total, hits = 0.0, 0
    for i in range(trials):
        g = gen_er_graph(n, p, derive_seed(seed, "calib-graph", i))
        rng = rng_for(seed, "calib-pair", i)
        for _ in range(20):
            u, v = int(rng.integers(1, n + 1)), int(rng.integers(1, n + 1))
            if u == v:
                continue
            path = bfs_shortest_path(g, u, v)
            if path is not None:
                total += len(path) - 1
                hits += 1
                break
    if hits == 0:
        return float("inf")
    return total / hits


def calibrate_p(
    n: int, target_avg: float, trials: int = 4000, seed: int = 0, tol: float = 0.1
) -> float:
    """Find p so the Monte-Carlo mean shortest-path length hits ``target_avg``.

    The mean path length over connected pairs rises from 1 (only direct edges
    survive as p -> 0) to a peak near the connectivity threshold and then
    decays back to 1 at p = 1. Calibration brackets the decreasing branch:
    a coarse scan locates the peak, then bisection runs on [p_peak, 1].
    """
    if trials < 100:
        raise ValueError("too few trials for a stable estimate")
    coarse = max(200, trials // 8)
    grid = np.geomspace(1.0 / (n * n), 1.0, 14)
    ests = [estimate_mean_path(n, float(p), coarse, derive_seed(seed, "scan", i))
            for i, p in enumerate(grid)]
    finite = [(e, float(p)) for e, p in zip(ests, grid) if np.isfinite(e)]
    if not finite or max(e for e, _ in finite) < target_avg - tol:
        raise CalibrationError(
            f"target mean path {target_avg} unreachable for n={n} "
            f"(max estimate {max((e for e, _ in finite), default=float('nan')):.2f})"
        )
    peak_idx = int(np.nanargmax([e if np.isfinite(e) else -1 for e in ests]))
    lo, hi = float(grid[peak_idx]), 1.0
    best_p, best_err = lo, float("inf")
    for it in range(40):
        mid = 0.5 * (lo + hi)
        est = estimate_mean_path(n, mid, trials, derive_seed(seed, "bisect", it))
        err = abs(est - target_avg)
        if err < best_err:
            best_p, best_err = mid, err
        if err <= tol:
            return mid
        if est > target_avg:
            lo = mid  # paths too long: add edges
        else:
            hi = mid
    if best_err <= tol:
        return best_p
    raise CalibrationError(
        f"bisection did not reach |estimate - {target_avg}| <= {tol} (best {best_err:.3f})"
    )


def shortest_path_sample(
    g: Graph, query: tuple[int, int], vocab: Vocabulary, seed: int
) -> Sample:
    """Serialize one graph + query + reference path.

    Wire format: <BOS> u <EDGE> v / u <EDGE> v / ... <SEP> qu qv <SEP> path <EOS>
    with the edge order drawn from a seeded shuffle. The loss mask is true
    exactly on the path ... <EOS> span.
    """
    u, v = query
    path = bfs_shortest_path(g, u, v)
    if path is None:
        raise UnreachableQueryError(f"no path {u} -> {v}")
    edges = sorted(g.edges)
    rng = rng_for(seed, "edge-order")
    rng.shuffle(edges)

    toks: list[str] = [BOS]
    for i, (a, b) in enumerate(edges):
        if i:
            toks.append(SLASH)
        toks.extend([str(a), EDGE, str(b)])
    toks.extend([SEP, str(u), str(v), SEP])
    answer_start = len(toks)
    toks.extend(str(w) for w in path)
    toks.append(EOS)

    ids = vocab.encode(toks)
    mask = [False] * answer_start + [True] * (len(ids) - answer_start)
    meta = {
        "task": "shortest_path",
        "n": g.n,
        "query": [u, v],
        "edges": [[a, b] for a, b in sorted(g.edges)],
    }
    return Sample(ids, mask, (answer_start, len(ids)), meta)


def _connected_query(g: Graph, seed: int) -> tuple[int, int] | None:
    rng = rng_for(seed, "query")
    for _ in range(200):
        u, v = int(rng.integers(1, g.n + 1)), int(rng.integers(1, g.n + 1))
        if u != v and bfs_shortest_path(g, u, v) is not None:
            return u, v
    return None


def gen_shortest_path_dataset(
    n: int,
    p: float,
    train_size: int,
    test_size: int,
    seed: int,
    vocab: Vocabulary | None = None,
) -> tuple[list[Sample], list[Sample]]:
    """Fresh graph per sample; uniformly random connected ordered query pairs.

    Train and test draw from the same (n, p) distribution but from disjoint
    seed namespaces, so no graph is shared between the splits.
    """
    if train_size < 1 or test_size < 0:
        raise ValueError("sizes must be positive")
    vocab = vocab or graph_vocabulary(n)

    def make(split: str, count: int) -> list[Sample]:
        out = []
        for i in range(count):
            for attempt in range(50):
                gseed = derive_seed(seed, split, i, attempt)
                g = gen_er_graph(n, p, gseed)
                q = _connected_query(g, derive_seed(seed, split + "-q", i, attempt))
                if q is not None:
                    break
            else:
                raise CalibrationError(f"no connected pair found at n={n}, p={p}")
            out.append(shortest_path_sample(g, q, vocab, derive_seed(seed, split + "-e", i)))
        return out

    return make("train", train_size), make("test", test_size)


# --- phone-book -----------------------------------------------------------------


def gen_phonebook(size: int, seed: int) -> Phonebook:
    """Uniform rejection sampling of unique 5-letter names and 8-digit numbers."""
    if size < 1:
        raise ValueError("phonebook size must be positive")
    if size > MAX_NAMES:
        raise ValueError(f"size {size} exceeds the 26^5 name space")
    if size > MAX_NUMBERS:
        raise ValueError(f"size {size} exceeds the 10^8 number space")
    rng = rng_for(seed, "phonebook")
    names: set[str] = set()
    numbers: set[str] = set()
    entries: list[tuple[str, str]] = []
    while len(entries) < size:
        want = size - len(entries)
        name_block = rng.integers(0, 26, size=(want, 5))
        num_block = rng.integers(0, 10, size=(want, 8))
        for row_n, row_d in zip(name_block, num_block):
            name = "".join(chr(ord("a") + int(c)) for c in row_n)
            number = "".join(str(int(c)) for c in row_d)
            if name in names or number in numbers:
                continue
            names.add(name)
            numbers.add(number)
            entries.append((name, number))
    return Phonebook(entries)


def phonebook_samples(
    book: Phonebook, vocab: Vocabulary, num_queries: int = 1000, seed: int = 0
) -> tuple[list[Sample], list[Sample]]:
    """One all-positions-penalized training sample per entry, plus eval queries
    drawn from the training set (without replacement when the book is large
    enough)."""
    if not book.entries:
        raise ValueError("empty phonebook")
    samples = []
    for name, number in book.entries:
        toks = [BOS, *name, SEP, *number, EOS]
        ids = vocab.encode(toks)
        start = 7  # <BOS> + 5 letters + <SEP>
        samples.append(
            Sample(ids, [True] * len(ids), (start, len(ids)), {"task": "phonebook", "name": name})
        )
    rng = rng_for(seed, "phonebook-queries")
    k = min(num_queries, len(samples))
    idx = rng.choice(len(samples), size=k, replace=False)
    queries = [samples[int(i)] for i in idx]
    return samples, queries


# --- memorization + reduction -----------------------------------------------------


def gen_memorization_set(count: int, seq_len: int, dim: int, seed: int) -> MemorizationSet:
    """i.i.d. N(0, I) sequences with uniform random +-1 labels."""
    if min(count, seq_len, dim) < 1:
        raise ValueError("count, seq_len and dim must be positive")
    rng = rng_for(seed, "memorization")
    x = rng.standard_normal((count, seq_len, dim))
    y = rng.integers(0, 2, size=count) * 2 - 1
    return MemorizationSet(x, y.astype(np.int64))


def gen_length2_instance(a: np.ndarray, b: np.ndarray) -> Graph:
    """Encode set disjointness (a, b) as a length-2 path instance.

    Items are vertices 1..r; the source (r+1) gets an edge to every item of a,
    every item of b gets an edge to the destination (r+2). A length-2 s->t
    path exists iff some index is in both sets.
    """
    a = np.asarray(a).astype(int)
    b = np.asarray(b).astype(int)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("bitvectors must be equal-length 1-D arrays")
    r = a.shape[0]
    s, t = r + 1, r + 2
    edges = {(s, i + 1) for i in range(r) if a[i]}
    edges |= {(i + 1, t) for i in range(r) if b[i]}
    return Graph(r + 2, frozenset(edges), s=s, t=t)


# --- dataset files -----------------------------------------------------------------
#
# Newline-delimited JSON records: {"tokens": [ids], "mask": [0/1], "span": [lo, hi],
# "meta": {...}}. The vocabulary file lists tokens in id order, one per line.


def write_samples(path: str, samples: list[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "tokens": list(map(int, s.tokens)),
                "mask": [int(m) for m in s.loss_mask],
                "span": list(s.answer_span),
                "meta": s.meta,
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_samples(path: str) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                Sample(
                    rec["tokens"],
                    [bool(m) for m in rec["mask"]],
                    tuple(rec["span"]),
                    rec.get("meta", {}),
                )
            )
    return out


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

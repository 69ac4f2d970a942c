"""Grid sweep runner: Cartesian products of model/train grids and seeds,
executed with bounded parallelism, appended to a closed-schema CSV, and
resumable through a completed-run manifest.

Reproducibility contract: every run derives its random streams from
(config digest, seed), so neither worker scheduling nor resume order can
change any metric value. Dataset streams are derived from the seed and task
alone, so all configs sharing a seed train on identical data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict

from .models import ModelConfig, build_model, count_params
from .seeding import derive_seed
from .tasks import (
    gen_memorization_set,
    gen_shortest_path_dataset,
    graph_vocabulary,
    phonebook_vocabulary,
)
from .training import TrainConfig, evaluate_exact_match, phonebook_capacity, train

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "task",
    "arch",
    "d",
    "L",
    "H",
    "E",
    "top_k",
    "total_params",
    "active_params",
    "seed",
    "lr",
    "epochs",
    "metric_name",
    "metric_value",
    "wall_seconds",
]
METRIC_NAMES = {
    "capacity",
    "exact_match",
    "valid_path",
    "train_loss_final",
    "gap",
    "sign_match",
    "verified",
}

WORKERS_ENV = "MOELAB_WORKERS"


@dataclass
class ExperimentRecord:
    task: str
    arch: str
    d: int
    L: int
    H: int
    E: int
    top_k: int
    total_params: int
    active_params: int
    seed: int
    lr: float
    epochs: int
    metric_name: str
    metric_value: float
    wall_seconds: float

    def __post_init__(self) -> None:
        if self.total_params < self.active_params:
            raise ValueError("total_params must be >= active_params")
        if self.metric_name not in METRIC_NAMES:
            raise ValueError(f"metric_name {self.metric_name!r} not in the closed set")

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]

    def identity(self) -> tuple:
        """Deterministic identity used to dedupe rows on resume."""
        return tuple(getattr(self, c) for c in CSV_COLUMNS if c not in ("metric_value", "wall_seconds"))


@dataclass
class ExperimentConfig:
    """Schema of a sweep config file (JSON).

    model_grid entries: {"arch", "d", "L", "E", "top_k"} plus optional "H".
    train_grid entries: {"lr", "epochs", "batch_size"}.
    task_params: task-specific knobs, see the presets below.
    """

    task: str
    model_grid: list[dict]
    train_grid: list[dict]
    seeds: list[int]
    out_dir: str
    task_params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.task not in ("shortest_path", "phonebook", "memorization", "length2_verify"):
            raise ValueError(f"unknown task {self.task!r}")
        if not self.model_grid or not self.train_grid or not self.seeds:
            raise ValueError("model_grid, train_grid and seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2)


def _job_digest(task: str, task_params: dict, model: dict, trainspec: dict, seed: int) -> str:
    blob = json.dumps(
        {"task": task, "task_params": task_params, "model": model, "train": trainspec, "seed": seed},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _model_config(model: dict, vocab_size: int, max_seq_len: int, aux: float = 0.0) -> ModelConfig:
    return ModelConfig(
        arch=model["arch"],
        d=model["d"],
        L=model["L"],
        H=model.get("H"),
        E=model.get("E", 1),
        top_k=model.get("top_k", 1),
        vocab_size=vocab_size,
        max_seq_len=max_seq_len,
        aux_load_loss_weight=aux,
    )


def _epochs_for_size(trainspec: dict, task_params: dict, size: int) -> int:
    """Capacity scans budget optimizer steps, not epochs: small books get many
    passes, large books few, with the product roughly constant."""
    sched = task_params.get("epoch_schedule")
    if not sched:
        return trainspec["epochs"]
    steps = sched["step_target"] * trainspec["batch_size"] / size
    return int(min(sched.get("max", 1000), max(sched.get("min", 1), math.ceil(steps))))


def run_job(
    task: str, task_params: dict, model: dict, trainspec: dict, seed: int
) -> list[ExperimentRecord]:
    """Execute one (model config, train config, seed) cell and return records."""
    run_seed = derive_seed(seed, "run", _job_digest(task, task_params, model, trainspec, seed))
    t0 = time.time()

    def record(metric: str, value: float, cfg: ModelConfig, epochs: int) -> ExperimentRecord:
        counts = count_params(cfg)
        return ExperimentRecord(
            task=task,
            arch=cfg.arch,
            d=cfg.d,
            L=cfg.L,
            H=cfg.H,
            E=cfg.E,
            top_k=cfg.top_k,
            total_params=counts["total_nonembedding"],
            active_params=counts["active_nonembedding"],
            seed=seed,
            lr=trainspec.get("lr", 0.0),
            epochs=epochs,
            metric_name=metric,
            metric_value=float(value),
            wall_seconds=round(time.time() - t0, 3),
        )

    if task == "phonebook":
        vocab = phonebook_vocabulary()
        sizes = task_params["sizes"]
        cfg = _model_config(model, len(vocab), task_params.get("max_seq_len", 32))

        def cfg_for(size: int) -> TrainConfig:
            return TrainConfig(
                learning_rate=trainspec["lr"],
                epochs=_epochs_for_size(trainspec, task_params, size),
                batch_size=trainspec["batch_size"],
                seed=derive_seed(run_seed, "train", size),
            )

        result = phonebook_capacity(
            model_builder=lambda s: build_model(cfg, s),
            train_cfg=cfg_for,
            sizes=sizes,
            vocab=vocab,
            threshold=task_params.get("threshold", 0.9),
            seed=derive_seed(seed, "phonebook-data"),
            num_queries=task_params.get("num_queries", 1000),
            stop_after_failures=task_params.get("stop_after_failures", 2),
        )
        return [record("capacity", result.capacity, cfg, trainspec["epochs"])]

    if task == "shortest_path":
        n = task_params["n"]
        vocab = graph_vocabulary(n)
        train_set, test_set = gen_shortest_path_dataset(
            n=n,
            p=task_params["p"],
            train_size=task_params["train_size"],
            test_size=task_params["test_size"],
            seed=derive_seed(seed, "shortest-path-data", n),
            vocab=vocab,
        )
        max_len = max(len(s.tokens) for s in train_set + test_set)
        cfg = _model_config(model, len(vocab), max_len + 8)
        m = build_model(cfg, derive_seed(run_seed, "init"))
        tc = TrainConfig(
            learning_rate=trainspec["lr"],
            epochs=trainspec["epochs"],
            batch_size=trainspec["batch_size"],
            seed=derive_seed(run_seed, "train"),
        )
        m, log = train(m, train_set, tc, vocab=vocab)
        res = evaluate_exact_match(m, test_set, vocab)
        recs = [
            record("exact_match", res.exact_match, cfg, tc.epochs),
            record("valid_path", res.valid_path_accuracy, cfg, tc.epochs),
            record("train_loss_final", log.steps[-1]["train_loss"], cfg, tc.epochs),
        ]
        return recs

    if task == "memorization":
        from .theory import build_moe_memorizer

        data = gen_memorization_set(
            task_params["n"],
            task_params.get("seq_len", 4),
            task_params["m"],
            derive_seed(seed, "memorization-data"),
        )
        _, rep = build_moe_memorizer(
            data, task_params["K"], expert_width=task_params.get("expert_width"), seed=run_seed
        )
        return [
            ExperimentRecord(
                task=task,
                arch="moe",
                d=task_params["m"],
                L=model.get("L", 1),
                H=1,
                E=task_params["K"],
                top_k=1,
                total_params=rep["total_params"],
                active_params=rep["active_params"],
                seed=seed,
                lr=trainspec.get("lr", 0.0),
                epochs=trainspec.get("epochs", 0),
                metric_name="sign_match",
                metric_value=1.0 if rep["sign_match"] else 0.0,
                wall_seconds=round(time.time() - t0, 3),
            )
        ]

    raise ValueError(f"task {task!r} is not sweepable")


# --- sweep driver ----------------------------------------------------------------


def _manifest_path(out_dir: str) -> str:
    return os.path.join(out_dir, "manifest.jsonl")


def _csv_path(out_dir: str) -> str:
    return os.path.join(out_dir, "records.csv")


def _load_manifest(path: str) -> tuple[set[str], list[list]]:
    """Completed cell keys plus every committed CSV row (journal replay)."""
    done: set[str] = set()
    rows: list[list] = []
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    entry = json.loads(line)
                    done.add(entry["key"])
                    rows.extend(entry.get("rows", []))
    return done, rows


def read_records_csv(path: str) -> list[ExperimentRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(
                f"CSV schema mismatch: expected {CSV_COLUMNS}, found {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(
                    ExperimentRecord(
                        task=row["task"],
                        arch=row["arch"],
                        d=int(row["d"]),
                        L=int(row["L"]),
                        H=int(row["H"]),
                        E=int(row["E"]),
                        top_k=int(row["top_k"]),
                        total_params=int(row["total_params"]),
                        active_params=int(row["active_params"]),
                        seed=int(row["seed"]),
                        lr=float(row["lr"]),
                        epochs=int(row["epochs"]),
                        metric_name=row["metric_name"],
                        metric_value=float(row["metric_value"]),
                        wall_seconds=float(row["wall_seconds"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"malformed CSV row at line {lineno}: {row}") from exc
    return records


def _rewrite_csv(path: str, rows: list[list]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
    os.replace(tmp, path)


def _worker(args: tuple) -> tuple[str, list[dict]]:
    key, task, task_params, model, trainspec, seed = args
    records = run_job(task, task_params, model, trainspec, seed)
    return key, [asdict(r) for r in records]


def num_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_sweep(config: ExperimentConfig, workers: int | None = None, echo=print) -> str:
    """Run all grid cells, appending records to out_dir/records.csv.

    Completed cells are listed in manifest.jsonl; rerunning skips them, and
    any CSV rows from cells that never reached the manifest (a mid-write
    kill) are dropped before resuming, so rows are never duplicated.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    csv_path = _csv_path(config.out_dir)
    manifest = _manifest_path(config.out_dir)
    done, committed_rows = _load_manifest(manifest)

    jobs = []
    for model in config.model_grid:
        for trainspec in config.train_grid:
            for seed in config.seeds:
                key = _job_digest(config.task, config.task_params, model, trainspec, seed)
                if key not in done:
                    jobs.append((key, config.task, config.task_params, model, trainspec, seed))

    # the manifest is the journal of committed rows: replaying it drops any
    # CSV rows from cells killed mid-write, so reruns cannot duplicate them
    _rewrite_csv(csv_path, committed_rows)

    echo(f"sweep: {len(jobs)} pending cells ({len(done)} already done)")
    if not jobs:
        return csv_path

    nw = workers if workers is not None else num_workers()
    csv_fh = open(csv_path, "a", newline="", encoding="utf-8")
    man_fh = open(manifest, "a", encoding="utf-8")
    writer = csv.writer(csv_fh)

    def commit(key: str, recdicts: list[dict]) -> None:
        rows = [[rd[c] for c in CSV_COLUMNS] for rd in recdicts]
        writer.writerows(rows)
        csv_fh.flush()
        os.fsync(csv_fh.fileno())
        man_fh.write(json.dumps({"key": key, "rows": rows}) + "\n")
        man_fh.flush()
        os.fsync(man_fh.fileno())

    failures = 0
    try:
        if nw <= 1:
            for job in jobs:
                try:
                    key, recs = _worker(job)
                    commit(key, recs)
                    echo(f"  done {key} ({len(recs)} records)")
                except Exception as exc:  # keep sweeping on per-run failure
                    failures += 1
                    echo(f"  FAILED {job[0]}: {exc}")
        else:
            with ProcessPoolExecutor(max_workers=nw) as pool:
                futs = {pool.submit(_worker, job): job[0] for job in jobs}
                for fut in as_completed(futs):
                    try:
                        key, recs = fut.result()
                        commit(key, recs)
                        echo(f"  done {key} ({len(recs)} records)")
                    except Exception as exc:
                        failures += 1
                        echo(f"  FAILED {futs[fut]}: {exc}")
    finally:
        csv_fh.close()
        man_fh.close()
    if failures:
        echo(f"sweep finished with {failures} failed cells")
    return csv_path


# --- desk-scale presets --------------------------------------------------------------
#
# Grids sized so a full sweep finishes in hours on a small workstation. The
# calibrated edge probability for 12-vertex graphs with mean shortest-path
# length 3.5 is pinned here; tests re-derive it from calibrate_p.

DESK_PHONEBOOK_SIZES = [2**k for k in range(8, 15)]  # 256 .. 16384
DESK_GRAPH_N = 12
DESK_GRAPH_P = 0.085  # calibrate_p(12, 3.5) -- see tests/test_tasks.py


def desk_capacity_config(out_dir: str, seeds: list[int] | None = None) -> ExperimentConfig:
    """Phone-book capacity sweep: dense d in {32, 64, 128} vs top-2 MoE at
    d=32 with E in {4, 8, 16}."""
    models = [
        {"arch": "dense", "d": 32, "L": 2},
        {"arch": "dense", "d": 64, "L": 2},
        {"arch": "dense", "d": 128, "L": 2},
        {"arch": "moe", "d": 32, "L": 2, "E": 4, "top_k": 2},
        {"arch": "moe", "d": 32, "L": 2, "E": 8, "top_k": 2},
        {"arch": "moe", "d": 32, "L": 2, "E": 16, "top_k": 2},
    ]
    return ExperimentConfig(
        task="phonebook",
        model_grid=models,
        train_grid=[{"lr": 1e-2, "epochs": 240, "batch_size": 32}],
        seeds=seeds or [1, 2],
        out_dir=out_dir,
        task_params={
            "sizes": DESK_PHONEBOOK_SIZES,
            "threshold": 0.9,
            "num_queries": 1000,
            "stop_after_failures": 2,
            "epoch_schedule": {"step_target": 6000, "min": 30, "max": 400},
        },
    )


def desk_reasoning_config(out_dir: str, seeds: list[int] | None = None) -> ExperimentConfig:
    """Shortest-path sweep on 12-vertex graphs: quadrupling experts at d=32
    versus doubling width at E=4."""
    models = [
        {"arch": "moe", "d": 32, "L": 2, "E": 4, "top_k": 2},
        {"arch": "moe", "d": 32, "L": 2, "E": 16, "top_k": 2},
        {"arch": "moe", "d": 64, "L": 2, "E": 4, "top_k": 2},
    ]
    return ExperimentConfig(
        task="shortest_path",
        model_grid=models,
        train_grid=[{"lr": 1e-3, "epochs": 8, "batch_size": 32}],
        seeds=seeds or [1, 2, 3, 4, 5],
        out_dir=out_dir,
        task_params={
            "n": DESK_GRAPH_N,
            "p": DESK_GRAPH_P,
            "train_size": 20000,
            "test_size": 500,
        },
    )

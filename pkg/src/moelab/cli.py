"""Command-line front end.

Subcommands: gen, train, eval, verify-constructions, sweep, report.
Exit codes: 0 success, 1 usage error, 2 verification failure, 3 runtime
failure. Worker count for sweeps comes from --workers or the MOELAB_WORKERS
environment variable (default: physical cores).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

USAGE_EXIT, VERIFY_EXIT, RUNTIME_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="moelab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate dataset + vocabulary files")
    g.add_argument("--task", choices=["shortest_path", "phonebook"], required=True)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=12, help="graph vertices (shortest_path)")
    g.add_argument("--p", type=float, default=None, help="edge probability; omit to calibrate")
    g.add_argument("--target-avg", type=float, default=3.5, help="mean path target for calibration")
    g.add_argument("--train", type=int, default=1000)
    g.add_argument("--test", type=int, default=100)
    g.add_argument("--size", type=int, default=None, help="phonebook entries")
    g.add_argument("--queries", type=int, default=1000)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True, help="dataset directory from gen")
    t.add_argument("--arch", choices=["dense", "moe"], default="dense")
    t.add_argument("--d", type=int, default=32)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--experts", type=int, default=1)
    t.add_argument("--top-k", type=int, default=1)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--weight-decay", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint", required=True, help="output .npz checkpoint path")
    t.add_argument("--records", default=None, help="CSV to append ExperimentRecords to")

    e = sub.add_parser("eval", help="evaluate a checkpoint with greedy decoding")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory from gen")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--records", default=None)

    v = sub.add_parser("verify-constructions", help="run the construction verifiers")
    v.add_argument("--out", default=None, help="directory for JSON reports")
    v.add_argument("--max-vertices", type=int, default=6)
    v.add_argument("--disjointness-r", type=int, default=4)
    v.add_argument("--routing-draws", type=int, default=100_000)
    v.add_argument("--balance-n", type=int, default=4096)
    v.add_argument("--balance-seeds", type=int, default=1000)
    v.add_argument("--mem-n", type=int, default=2048)
    v.add_argument("--mem-m", type=int, default=64)
    v.add_argument("--mem-experts", type=int, default=8)
    v.add_argument("--mem-seeds", type=int, default=1)
    v.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sweep", help="run a grid sweep from a config file or preset")
    s.add_argument("--config", default=None, help="JSON ExperimentConfig file")
    s.add_argument("--preset", choices=["capacity", "reasoning"], default=None)
    s.add_argument("--out", default=None, help="output directory (presets)")
    s.add_argument("--seeds", type=int, nargs="*", default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--write-config", default=None, help="dump the preset config JSON and exit")

    r = sub.add_parser("report", help="summarize a records CSV into plots + tables")
    r.add_argument("--csv", required=True)
    r.add_argument("--out", required=True)
    return p


# --- gen ------------------------------------------------------------------------


def _cmd_gen(args) -> int:
    from . import tasks

    os.makedirs(args.out, exist_ok=True)
    if args.task == "phonebook":
        if args.size is None or args.size < 1:
            print("gen phonebook: --size must be a positive integer", file=sys.stderr)
            return USAGE_EXIT
        vocab = tasks.phonebook_vocabulary()
        book = tasks.gen_phonebook(args.size, args.seed)
        samples, queries = tasks.phonebook_samples(book, vocab, args.queries, args.seed)
        tasks.write_samples(os.path.join(args.out, "train.jsonl"), samples)
        tasks.write_samples(os.path.join(args.out, "test.jsonl"), queries)
    else:
        if args.train < 1 or args.test < 1:
            print("gen shortest_path: --train/--test must be positive", file=sys.stderr)
            return USAGE_EXIT
        p = args.p
        if p is None:
            p = tasks.calibrate_p(args.n, args.target_avg, seed=args.seed)
            print(f"calibrated p={p:.5f} for mean path {args.target_avg}")
        vocab = tasks.graph_vocabulary(args.n)
        train_set, test_set = tasks.gen_shortest_path_dataset(
            args.n, p, args.train, args.test, args.seed, vocab
        )
        tasks.write_samples(os.path.join(args.out, "train.jsonl"), train_set)
        tasks.write_samples(os.path.join(args.out, "test.jsonl"), test_set)
    vocab.save(os.path.join(args.out, "vocab.txt"))
    meta = {"task": args.task, "seed": args.seed}
    with open(os.path.join(args.out, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh)
    for name in ("train.jsonl", "test.jsonl", "vocab.txt"):
        path = os.path.join(args.out, name)
        print(f"{name}: sha256={tasks.file_digest(path)}")
    return 0


# --- train / eval ------------------------------------------------------------------


def _cmd_train(args) -> int:
    from . import tasks
    from .models import ModelConfig, build_model, count_params, save_model
    from .training import TrainConfig, train

    vocab = tasks.Vocabulary.load(os.path.join(args.data, "vocab.txt"))
    dataset = tasks.read_samples(os.path.join(args.data, "train.jsonl"))
    max_len = max(len(s.tokens) for s in dataset)
    cfg = ModelConfig(
        arch=args.arch,
        d=args.d,
        L=args.layers,
        E=args.experts,
        top_k=args.top_k,
        vocab_size=len(vocab),
        max_seq_len=max_len + 8,
    )
    model = build_model(cfg, args.seed)
    tc = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    t0 = time.time()
    model, log = train(model, dataset, tc, vocab=vocab, log_path=args.checkpoint + ".log.jsonl")
    save_model(model, args.checkpoint)
    final_loss = log.steps[-1]["train_loss"]
    print(f"trained {len(log.steps)} steps in {time.time() - t0:.1f}s; final loss {final_loss:.4f}")
    if args.records:
        _append_records(
            args.records, cfg, args, "train_loss_final", final_loss, time.time() - t0,
            count_params(cfg),
        )
    return 0


def _append_records(path, cfg, args, metric, value, wall, counts) -> None:
    import csv

    from .sweep import CSV_COLUMNS, ExperimentRecord

    rec = ExperimentRecord(
        task=getattr(args, "task", "cli"),
        arch=cfg.arch,
        d=cfg.d,
        L=cfg.L,
        H=cfg.H,
        E=cfg.E,
        top_k=cfg.top_k,
        total_params=counts["total_nonembedding"],
        active_params=counts["active_nonembedding"],
        seed=getattr(args, "seed", 0),
        lr=getattr(args, "lr", 0.0),
        epochs=getattr(args, "epochs", 0),
        metric_name=metric,
        metric_value=float(value),
        wall_seconds=round(wall, 3),
    )
    fresh = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_COLUMNS)
        writer.writerow(rec.row())


def _cmd_eval(args) -> int:
    from . import tasks
    from .models import count_params, load_model
    from .training import evaluate_exact_match

    if not os.path.exists(args.checkpoint):
        print(f"eval: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return RUNTIME_EXIT
    model = load_model(args.checkpoint)
    vocab = tasks.Vocabulary.load(os.path.join(args.data, "vocab.txt"))
    queries = tasks.read_samples(os.path.join(args.data, f"{args.split}.jsonl"))
    t0 = time.time()
    res = evaluate_exact_match(model, queries, vocab)
    print(f"exact_match: {res.exact_match:.4f} over {res.num_queries} queries")
    if res.valid_path_accuracy is not None:
        print(f"valid_path:  {res.valid_path_accuracy:.4f}")
    if args.records:

        class _A:  # records need lr/epochs/seed context the checkpoint lacks
            task = "cli"
            seed = 0
            lr = 0.0
            epochs = 0

        _append_records(
            args.records, model.config, _A, "exact_match", res.exact_match,
            time.time() - t0, count_params(model.config),
        )
    return 0


# --- verify-constructions -------------------------------------------------------------


def _cmd_verify(args) -> int:
    import math

    from . import theory
    from .tasks import gen_memorization_set
    from .seeding import derive_seed

    if args.mem_experts & (args.mem_experts - 1):
        print(
            f"verify: --mem-experts must be a power of 2, got {args.mem_experts}",
            file=sys.stderr,
        )
        return USAGE_EXIT

    reports = []
    failed: list[str] = []

    def run(name, fn):
        t0 = time.time()
        try:
            rep = fn()
        except Exception as exc:
            rep = {"construction": name, "passed": False, "error": str(exc)}
        rep["wall_seconds"] = round(time.time() - t0, 3)
        reports.append(rep)
        status = "PASS" if rep.get("passed") else "FAIL"
        print(f"[{status}] {name} ({rep['wall_seconds']}s)")
        if not rep.get("passed"):
            failed.append(name)
            detail = rep.get("failures") or rep.get("error")
            if detail:
                print(f"       first failure: {str(detail)[:200]}")

    run("length2_exhaustive", lambda: theory.check_length2_exhaustive(args.max_vertices))
    run(
        "disjointness_reduction",
        lambda: theory.check_disjointness_reduction(args.disjointness_r),
    )
    run(
        "routing_frequency",
        lambda: theory.check_routing_frequency(
            args.mem_experts, args.routing_draws, seed=args.seed
        ),
    )
    run(
        "routing_load_bound",
        lambda: theory.verify_routing_balance(
            args.balance_n, args.mem_m, args.mem_experts, seeds=args.balance_seeds
        ),
    )

    def build_mem():
        width = theory.appendix_width(args.mem_n, args.mem_m, args.mem_experts)
        ok = 0
        models = []
        for s in range(args.mem_seeds):
            data = gen_memorization_set(
                args.mem_n, 4, args.mem_m, derive_seed(args.seed, "verify-mem", s)
            )
            model, rep = theory.build_moe_memorizer(
                data, args.mem_experts, expert_width=width, seed=s
            )
            models.append((model, data))
            ok += rep["sign_match"]
        rep["seeds_ok"] = ok
        rep["seeds"] = args.mem_seeds
        rep["passed"] = ok == args.mem_seeds
        build_mem.models = models
        return rep

    run("moe_memorizer", build_mem)

    def quant_length2():
        seq_len = 2 * args.max_vertices
        bits = math.ceil(math.log2(seq_len)) + 4
        rep = theory.check_length2_exhaustive(args.max_vertices)
        tf = theory.build_length2_dense(args.max_vertices)
        qtf = theory.quantize_params(tf, bits)
        # re-run the exhaustive family against the quantized circuit
        failures = []
        count = 0
        n = args.max_vertices
        from .tasks import Graph, bfs_shortest_path

        mids = list(range(1, n - 1))
        for amask in range(1 << len(mids)):
            for bmask in range(1 << len(mids)):
                edges = {(qtf.source, i) for b, i in enumerate(mids) if amask >> b & 1}
                edges |= {(i, qtf.destination) for b, i in enumerate(mids) if bmask >> b & 1}
                g = Graph(n, frozenset(edges), s=qtf.source, t=qtf.destination)
                path = bfs_shortest_path(g, qtf.source, qtf.destination)
                oracle = path is not None and len(path) == 3
                count += 1
                if theory.eval_explicit(qtf, g) != oracle:
                    failures.append({"amask": amask, "bmask": bmask})
        return {
            "construction": "length2_quantized",
            "bits": bits,
            "instance_count": count,
            "failures": failures,
            "passed": not failures and rep["passed"],
        }

    run("length2_quantized", quant_length2)

    def quant_memorizer():
        bits = 14
        total = hits = 0
        for model, data in getattr(build_mem, "models", []):
            qm = theory.quantize_params(model, bits)
            preds = theory.memorizer_predict(qm, data.sequences)
            hits += int(np.sum(preds == data.labels))
            total += data.labels.size
        retention = hits / total if total else 0.0
        return {
            "construction": "memorizer_quantized",
            "bits": bits,
            "retention": retention,
            "passed": retention >= 0.99,
        }

    run("memorizer_quantized", quant_memorizer)

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "verify_report.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"reports": reports, "passed": not failed}, fh, indent=2)
        print(f"report written to {path}")
    if failed:
        print(f"verification FAILED: {', '.join(failed)}", file=sys.stderr)
        return VERIFY_EXIT
    print("all constructions verified")
    return 0


# --- sweep / report --------------------------------------------------------------------


def _cmd_sweep(args) -> int:
    from .sweep import ExperimentConfig, desk_capacity_config, desk_reasoning_config, run_sweep

    if args.config:
        config = ExperimentConfig.from_json(args.config)
    elif args.preset:
        if not args.out and not args.write_config:
            print("sweep: presets need --out", file=sys.stderr)
            return USAGE_EXIT
        maker = desk_capacity_config if args.preset == "capacity" else desk_reasoning_config
        config = maker(args.out or ".", seeds=args.seeds)
    else:
        print("sweep: provide --config or --preset", file=sys.stderr)
        return USAGE_EXIT
    if args.write_config:
        config.save(args.write_config)
        print(f"config written to {args.write_config}")
        return 0
    csv_path = run_sweep(config, workers=args.workers)
    print(f"records: {csv_path}")
    return 0


def _cmd_report(args) -> int:
    from .report import render_report

    try:
        summary = render_report(args.csv, args.out)
    except ValueError as exc:
        print(f"report: {exc}", file=sys.stderr)
        return USAGE_EXIT
    print(f"summary: {summary['summary_path']}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "verify-constructions":
            return _cmd_verify(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "report":
            return _cmd_report(args)
        return USAGE_EXIT
    except ValueError as exc:
        print(f"moelab {args.command}: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except Exception as exc:  # runtime failure
        print(f"moelab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())

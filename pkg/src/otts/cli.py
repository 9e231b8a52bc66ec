"""Command-line surface for corpus generation, training and selection.

Subcommands: gen, train, dist, stats, select, probe, compare-curriculum.
Every run is fully determined by --seed; outputs are bit-stable files.
Option values resolve as defaults < --config JSON file < explicit
flags, and --dump-config writes the resolved settings back out as JSON
so a run can be reproduced from its dump.  Failures exit nonzero with
a single `error: ...` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, data, selection, training
from .encoder import CheckpointFormatError, init_encoder, load_checkpoint, save_checkpoint
from .solvers import SolverConfig

_THREADS_ENV = "OTTS_THREADS"


def _default_threads() -> int:
    env = os.environ.get(_THREADS_ENV)
    if env:
        return int(env)
    return os.cpu_count() or 1


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicitly passed flags."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"config {config_path}: {exc}") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValueError(f"config {config_path}: unknown keys {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    dump = getattr(args, "dump_config", None)
    if dump:
        with open(dump, "w") as fh:
            json.dump(merged, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return merged


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option overrides")
    p.add_argument("--dump-config", help="write the resolved options as JSON")


def _solver_from(opts: dict) -> SolverConfig:
    return SolverConfig(
        epsilon=opts["epsilon"],
        max_iter=opts["max_iter"],
        tol=opts["tol"],
        gw_outer_iter=opts["gw_outer_iter"],
        gw_epsilon=opts["gw_epsilon"],
        gw_epsilon_start=opts["gw_epsilon_start"],
    )


_SOLVER_DEFAULTS = {
    "epsilon": 0.05,
    "max_iter": 300,
    "tol": 1e-4,
    "gw_outer_iter": 6,
    "gw_epsilon": 0.05,
    "gw_epsilon_start": 0.1,
}


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", type=float, help="entropic regularisation")
    p.add_argument("--max-iter", type=int, help="inner iteration budget")
    p.add_argument("--tol", type=float, help="marginal tolerance")
    p.add_argument("--gw-outer-iter", type=int, help="structural solver outer budget")
    p.add_argument("--gw-epsilon", type=float, help="final structural epsilon")
    p.add_argument("--gw-epsilon-start", type=float, help="initial structural epsilon")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

_GEN_DEFAULTS = {
    "domains": 3,
    "classes": 20,
    "dim": 16,
    "tasks": 2048,
    "n_way": 5,
    "k_shot": 2,
    "seed": 0,
    "mean_scale": 2.0,
    "noise_scale": 0.5,
    "center_scale": 6.0,
    "binary": False,
}


def _cmd_gen(args) -> int:
    opts = _resolve(args, _GEN_DEFAULTS)
    specs = data.default_domain_specs(
        n_domains=opts["domains"],
        n_classes=opts["classes"],
        dim=opts["dim"],
        seed=opts["seed"],
        mean_scale=opts["mean_scale"],
        noise_scale=opts["noise_scale"],
        center_scale=opts["center_scale"],
    )
    corpus = data.build_corpus(
        specs,
        n_tasks=opts["tasks"],
        n_way=opts["n_way"],
        k_shot=opts["k_shot"],
        seed=opts["seed"],
    )
    data.write_corpus(corpus, args.out, binary=opts["binary"])
    print(f"wrote {len(corpus.tasks)} tasks to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = {
    "epochs": 50,
    "batch_size": 64,
    "learning_rate": 1e-3,
    "tau": 0.99,
    "wd_weight": 0.8,
    "seed": 0,
    "hidden_dim": 32,
    "out_dim": 8,
    **_SOLVER_DEFAULTS,
}


def _cmd_train(args) -> int:
    opts = _resolve(args, _TRAIN_DEFAULTS)
    corpus = data.read_corpus(args.corpus)
    in_dim = corpus.tasks[0].dim if corpus.tasks else 16
    cfg = training.TrainConfig(
        batch_size=opts["batch_size"],
        epochs=opts["epochs"],
        wd_weight=opts["wd_weight"],
        tau=opts["tau"],
        learning_rate=opts["learning_rate"],
        seed=opts["seed"],
        encoder_dims=(in_dim, opts["hidden_dim"], opts["out_dim"]),
        solver=_solver_from(opts),
        checkpoint_path=args.out,
        log_path=args.log,
    )
    target, log = training.train(corpus.tasks, cfg)
    if not log.records:
        print(f"wrote initial checkpoint to {args.out}")
    else:
        first = log.records[0].mean_loss
        last = log.records[-1].mean_loss
        print(
            f"trained {cfg.epochs} epochs: mean loss {first:.6f} -> {last:.6f}; "
            f"checkpoint {args.out}"
        )
    return 0


# ---------------------------------------------------------------------------
# dist / stats
# ---------------------------------------------------------------------------

_DIST_DEFAULTS = {"wd_weight": 0.8, "threads": None, **_SOLVER_DEFAULTS}


def _cmd_dist(args) -> int:
    opts = _resolve(args, _DIST_DEFAULTS)
    tasks_a = data.read_corpus(args.tasks_a).tasks
    tasks_b = data.read_corpus(args.tasks_b).tasks if args.tasks_b else tasks_a
    extractor = load_checkpoint(args.checkpoint) if args.checkpoint else None
    threads = opts["threads"] if opts["threads"] is not None else _default_threads()
    matrix = selection.pairwise_matrix(
        tasks_a,
        tasks_b,
        extractor,
        wd_weight=opts["wd_weight"],
        cfg=_solver_from(opts),
        threads=threads,
    )
    selection.save_distance_matrix(matrix, args.out)
    if args.csv:
        selection.distance_matrix_to_csv(matrix, args.csv)
    print(f"wrote {matrix.values.shape[0]}x{matrix.values.shape[1]} matrix to {args.out}")
    return 0


_STATS_DEFAULTS = {"bins": 20}


def _cmd_stats(args) -> int:
    opts = _resolve(args, _STATS_DEFAULTS)
    matrix = selection.load_distance_matrix(args.matrix)
    row_groups = col_groups = None
    if args.tasks_a:
        tags_a = {t.task_id: t.domain_tag or "?" for t in data.read_corpus(args.tasks_a).tasks}
        tags_b = tags_a
        if args.tasks_b:
            tags_b = {
                t.task_id: t.domain_tag or "?" for t in data.read_corpus(args.tasks_b).tasks
            }
        row_groups = [tags_a[i] for i in matrix.row_ids]
        col_groups = [tags_b[i] for i in matrix.col_ids]
    stats = analysis.distance_stats(
        matrix, row_groups=row_groups, col_groups=col_groups, bins=opts["bins"]
    )
    avg, mx, mn = stats.overall
    print(f"overall avg {avg:.6f} max {mx:.6f} min {mn:.6f}")
    for (ga, gb), (avg, mx, mn) in sorted(stats.blocks.items()):
        print(f"{ga} vs {gb}: avg {avg:.6f} max {mx:.6f} min {mn:.6f}")
    if args.hist:
        with open(args.hist, "w") as fh:
            json.dump(
                {
                    "counts": stats.hist_counts.tolist(),
                    "edges": stats.hist_edges.tolist(),
                },
                fh,
                indent=2,
            )
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------

_SELECT_DEFAULTS = {"wd_weight": 0.8, **_SOLVER_DEFAULTS}


def _cmd_select(args) -> int:
    opts = _resolve(args, _SELECT_DEFAULTS)
    sources_corpus = data.read_corpus(args.sources)
    target_corpus = (
        data.read_corpus(args.target) if args.target else sources_corpus
    )
    target = target_corpus.by_id(args.target_id)
    sources = [t for t in sources_corpus.tasks if t.task_id != target.task_id]
    if not sources:
        raise ValueError("no candidate sources after excluding the target")
    extractor = load_checkpoint(args.checkpoint) if args.checkpoint else None
    scores = selection.score_sources(
        target, sources, extractor, wd_weight=opts["wd_weight"], cfg=_solver_from(opts)
    )
    result = selection.select_top_m(scores, args.m)
    result.target_task_id = target.task_id
    for tid, dist in result.ranked:
        print(f"{tid}\t{dist!r}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result.to_dict(), fh, indent=2)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

_PROBE_DEFAULTS = {
    "pairs": 200,
    "n_way": 5,
    "train_per_class": 20,
    "seed": 0,
    "bins": 20,
    **_SOLVER_DEFAULTS,
}


def _cmd_probe(args) -> int:
    opts = _resolve(args, _PROBE_DEFAULTS)
    corpus = data.read_corpus(args.corpus)
    samplers = data.samplers_from_manifest(corpus.manifest)
    sampler = samplers[sorted(samplers)[0]]
    pairs, class_ids = analysis.make_probe_pairs(
        sampler, n_way=opts["n_way"], n_pairs=opts["pairs"], seed=opts["seed"]
    )
    extractor = load_checkpoint(args.checkpoint) if args.checkpoint else None
    feats, labels = analysis.reference_samples(
        sampler, class_ids, per_class=opts["train_per_class"], seed=opts["seed"] + 1
    )
    if extractor is not None:
        from .encoder import forward

        feats = forward(extractor, feats)
    probe = analysis.train_probe(feats, labels, n_classes=opts["n_way"])
    report = analysis.theorem1_probe(
        pairs, probe, extractor, cfg=_solver_from(opts), bins=opts["bins"]
    )
    print(f"spearman_rho {report.spearman_rho:.4f} over {len(report.entries)} pairs")
    if args.out:
        report.to_csv(args.out)
    if args.hist:
        report.hist_to_json(args.hist)
    return 0


# ---------------------------------------------------------------------------
# compare-curriculum
# ---------------------------------------------------------------------------

_CURRICULUM_DEFAULTS = {
    "m": 20,
    "seeds": 1,
    "seed": 0,
    "probe_epochs": 15,
    "queries_per_class": 20,
    "wd_weight": 0.8,
}


def _cmd_compare_curriculum(args) -> int:
    opts = _resolve(args, _CURRICULUM_DEFAULTS)
    corpus = data.read_corpus(args.corpus)
    samplers = data.samplers_from_manifest(corpus.manifest)
    extractor = load_checkpoint(args.checkpoint) if args.checkpoint else None
    rng = np.random.default_rng(opts["seed"])
    reports = []
    for trial in range(opts["seeds"]):
        target = corpus.tasks[int(rng.integers(len(corpus.tasks)))]
        cfg = analysis.CurriculumConfig(
            m=opts["m"],
            probe_epochs=opts["probe_epochs"],
            queries_per_class=opts["queries_per_class"],
            wd_weight=opts["wd_weight"],
            seed=opts["seed"] + trial,
        )
        reports.append(
            analysis.selection_vs_random_curriculum(
                corpus, target, extractor, samplers, cfg
            )
        )
    loss_wins = sum(r.selected.final_loss < r.random.final_loss for r in reports)
    std_wins = sum(r.selected.loss_std < r.random.loss_std for r in reports)
    print(
        f"selected wins final loss {loss_wins}/{len(reports)}, "
        f"loss std {std_wins}/{len(reports)}"
    )
    for r in reports:
        print(
            f"target {r.target_task_id}: selected loss {r.selected.final_loss:.4f} "
            f"(std {r.selected.loss_std:.4f}, acc {r.selected.accuracy:.3f}) vs "
            f"random {r.random.final_loss:.4f} "
            f"(std {r.random.loss_std:.4f}, acc {r.random.accuracy:.3f})"
        )
    if args.out:
        payload = [
            {
                "target_task_id": r.target_task_id,
                "selected": vars(r.selected),
                "random": vars(r.random),
            }
            for r in reports
        ]
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otts",
        description="Transport-distance task selection: generate synthetic "
        "task corpora, train the encoder, and rank source tasks by "
        "similarity to a target.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-domain task corpus")
    p.add_argument("--out", required=True, help="corpus path (.jsonl)")
    p.add_argument("--domains", type=int, help="number of domains")
    p.add_argument("--classes", type=int, help="classes per domain")
    p.add_argument("--dim", type=int, help="feature dimension")
    p.add_argument("--tasks", type=int, help="number of tasks")
    p.add_argument("--n-way", type=int, help="classes per task")
    p.add_argument("--k-shot", type=int, help="samples per class")
    p.add_argument("--seed", type=int, help="generation seed")
    p.add_argument("--mean-scale", type=float, help="class-mean spread")
    p.add_argument("--noise-scale", type=float, help="within-class spread")
    p.add_argument("--center-scale", type=float, help="domain-centre spread")
    p.add_argument("--binary", action="store_const", const=True,
                   help="write the single-file binary format")
    _add_common(p)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train the encoder on a 2-shot task corpus")
    p.add_argument("--corpus", required=True, help="task corpus path")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="JSONL epoch log path")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", type=int, help="tasks per batch")
    p.add_argument("--learning-rate", type=float, help="Adam learning rate")
    p.add_argument("--tau", type=float, help="EMA decay rate in (0,1)")
    p.add_argument("--wd-weight", type=float, help="feature-term weight in (0,1)")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--hidden-dim", type=int, help="encoder hidden width")
    p.add_argument("--out-dim", type=int, help="encoder output dimension")
    _add_solver_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("dist", help="pairwise distance matrix between task lists")
    p.add_argument("--tasks-a", required=True, help="row task corpus")
    p.add_argument("--tasks-b", help="column task corpus (default: rows)")
    p.add_argument("--checkpoint", help="encoder checkpoint (default: raw features)")
    p.add_argument("--out", required=True, help="binary matrix output path")
    p.add_argument("--csv", help="also export CSV")
    p.add_argument("--wd-weight", type=float, help="feature-term weight")
    p.add_argument("--threads", type=int, help=f"worker threads (env {_THREADS_ENV})")
    _add_solver_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_dist)

    p = sub.add_parser("stats", help="summaries of a distance matrix")
    p.add_argument("--matrix", required=True, help="binary matrix path")
    p.add_argument("--tasks-a", help="row corpus, for per-domain blocks")
    p.add_argument("--tasks-b", help="column corpus, for per-domain blocks")
    p.add_argument("--hist", help="write histogram JSON here")
    p.add_argument("--bins", type=int, help="histogram bins")
    _add_common(p)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("select", help="rank sources by similarity to a target task")
    p.add_argument("--sources", required=True, help="source task corpus")
    p.add_argument("--target", help="target task corpus (default: sources)")
    p.add_argument("--target-id", type=int, required=True, help="target task id")
    p.add_argument("--m", type=int, required=True, help="number of tasks to select")
    p.add_argument("--checkpoint", help="encoder checkpoint (default: raw features)")
    p.add_argument("--out", help="write the selection as JSON")
    p.add_argument("--wd-weight", type=float, help="feature-term weight")
    _add_solver_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("probe", help="distance vs classifier-likelihood-gap probe")
    p.add_argument("--corpus", required=True, help="corpus whose manifest seeds the domains")
    p.add_argument("--checkpoint", help="encoder checkpoint (default: raw features)")
    p.add_argument("--pairs", type=int, help="number of task pairs")
    p.add_argument("--n-way", type=int, help="classes per task")
    p.add_argument("--train-per-class", type=int, help="probe training samples per class")
    p.add_argument("--seed", type=int, help="pair-generation seed")
    p.add_argument("--out", help="write per-pair CSV here")
    p.add_argument("--hist", help="write distance histogram JSON here")
    p.add_argument("--bins", type=int, help="histogram bins")
    _add_solver_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser(
        "compare-curriculum",
        help="selected vs random source tasks for probe-classifier training",
    )
    p.add_argument("--corpus", required=True, help="task corpus path")
    p.add_argument("--checkpoint", help="encoder checkpoint (default: raw features)")
    p.add_argument("--m", type=int, help="tasks per training arm")
    p.add_argument("--seeds", type=int, help="number of seeded trials")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--probe-epochs", type=int, help="probe training epochs")
    p.add_argument("--queries-per-class", type=int, help="held-out queries per class")
    p.add_argument("--wd-weight", type=float, help="feature-term weight")
    p.add_argument("--out", help="write JSON report here")
    _add_common(p)
    p.set_defaults(func=_cmd_compare_curriculum)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: reproducible experiments emitted as CSV/JSON.

Every subcommand is deterministic given --seed and embeds its resolved
configuration (including the RNG algorithm and seed) in its output: JSON
files carry a "config" object, CSV files a leading "# {...}" comment line.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
divergence.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import logit_cache
from .calibration import reliability_from_scores
from .distributions import RNG_ALGORITHM, make_rng, softmax, zipf
from .errors import CacheError, DivergenceError
from .sparsify import SparseTarget, random_sampling, rounds_for_unique, top_k, unique_token_curve
from .toytrain import (
    KD_SCHEMES,
    SchemeSpec,
    TrainConfig,
    forward,
    get_batch,
    gradient_similarity,
    make_task,
    paper_scale_config,
    train,
)

EXIT_OK = 0
EXIT_DATA_ERROR = 3
EXIT_DIVERGED = 4

CACHE_SCHEMES = {
    "topk-linear": logit_cache.SCHEME_TOPK_LINEAR,
    "topk-ratio": logit_cache.SCHEME_TOPK_RATIO,
    "rs-counts": logit_cache.SCHEME_RS_COUNTS,
}


def _config_dict(args, **extra) -> dict:
    cfg = {"seed": getattr(args, "seed", None), "rng": RNG_ALGORITHM}
    cfg.update(extra)
    return cfg


def _write_csv(path, config: dict, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# zipf-targets


def cmd_zipf_targets(args) -> int:
    t = zipf(args.vocab_size)
    raw = top_k(t, args.k, normalize=False)
    kept_mass = raw.weight_sum
    topk_normalized = np.zeros(t.size)
    topk_normalized[raw.token_ids] = raw.weights / kept_mass
    # Residual granted to the reference label, averaged over labels drawn
    # from the distribution itself.
    naive = raw.to_dense() + t * (1.0 - kept_mass)

    acc = np.zeros(t.size)
    total = 0
    for rep in range(args.repeats):
        rng = make_rng(args.seed + rep)
        for _ in range(args.rounds):
            target = random_sampling(t, args.samples, 1.0, rng=rng)
            acc[target.token_ids] += target.weights
            total += 1
    rs_mean = acc / total

    config = _config_dict(args, command="zipf-targets", vocab_size=args.vocab_size,
                          k=args.k, samples=args.samples, rounds=args.rounds,
                          repeats=args.repeats)
    rows = [
        (i, repr(float(t[i])), repr(float(topk_normalized[i])),
         repr(float(naive[i])), repr(float(rs_mean[i])))
        for i in range(t.size)
    ]
    _write_csv(args.out, config, ("token_index", "ground_truth", "topk_normalized",
                                  "naive_fix", "random_sampling_mean"), rows)
    print(f"wrote {t.size} rows to {args.out}; head token: truth={t[0]:.6f} "
          f"topk_norm={topk_normalized[0]:.6f} rs_mean={rs_mean[0]:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-toy


def _resolve_train_config(args) -> tuple[TrainConfig, int, int, float]:
    if args.paper_scale:
        base = paper_scale_config()
        classes, dim = 1024, 128
    else:
        base = TrainConfig()
        classes, dim = 128, 32
    if args.classes is not None:
        classes = args.classes
    if args.dim is not None:
        dim = args.dim
    config = TrainConfig(
        num_rounds=args.train_rounds if args.train_rounds is not None else base.num_rounds,
        batch_size=args.batch_size if args.batch_size is not None else base.batch_size,
        lr=args.lr if args.lr is not None else base.lr,
        hidden_teacher=args.hidden_teacher if args.hidden_teacher is not None else base.hidden_teacher,
        hidden_student=args.hidden_student if args.hidden_student is not None else base.hidden_student,
        eval_batches=args.eval_batches if args.eval_batches is not None else base.eval_batches,
        eval_batch_size=base.eval_batch_size,
        n_bins=getattr(args, "bins", 10),
        eval_interval=getattr(args, "eval_interval", 0),
    )
    return config, classes, dim, args.sigma


def _scheme_from_args(args) -> SchemeSpec:
    return SchemeSpec(args.scheme, k=args.k, sample_rounds=args.rounds,
                      temperature=args.temperature, top_p=args.top_p)


def cmd_train_toy(args) -> int:
    config, classes, dim, sigma = _resolve_train_config(args)
    scheme = _scheme_from_args(args)

    runs = []
    for rep in range(args.repeats):
        seed = args.seed + rep
        rng = make_rng(seed)
        task_rng, teacher_rng, model_rng = rng.spawn(3)
        task = make_task(classes, dim, sigma, task_rng)
        teacher = None
        if scheme.name in KD_SCHEMES:
            teacher = train(SchemeSpec("teacher-ce"), task, config, rng=teacher_rng).model
        result = train(scheme, task, config, rng=model_rng, teacher=teacher)
        runs.append({
            "seed": seed,
            "accuracy": result.accuracy,
            "ece": result.report.ece,
            "history": result.history,
            "report": result.report.to_json_dict(seed=seed),
        })

    config_dict = _config_dict(
        args, command="train-toy", scheme=scheme.label, classes=classes, dim=dim,
        sigma=sigma, train_rounds=config.num_rounds, batch_size=config.batch_size,
        lr=config.lr, hidden_teacher=config.hidden_teacher,
        hidden_student=config.hidden_student, eval_batches=config.eval_batches,
        eval_batch_size=config.eval_batch_size, bins=config.n_bins,
        repeats=args.repeats, paper_scale=args.paper_scale,
    )
    record = {
        "command": "train-toy",
        "config": config_dict,
        "runs": runs,
        "mean_accuracy": float(np.mean([r["accuracy"] for r in runs])),
        "mean_ece": float(np.mean([r["ece"] for r in runs])),
    }
    _write_json(args.out, record)
    report_path = Path(args.out).with_suffix(".report.json")
    _write_json(report_path, {"config": config_dict, **runs[0]["report"]})
    print(f"{scheme.label}: accuracy {100 * record['mean_accuracy']:.2f}%, "
          f"ECE {100 * record['mean_ece']:.3f}% "
          f"({args.repeats} run(s); record {args.out}, report {report_path})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-sim


def cmd_grad_sim(args) -> int:
    config, classes, dim, sigma = _resolve_train_config(args)
    rng = make_rng(args.seed)
    task_rng, teacher_rng, student_rng, batch_rng, measure_rng = rng.spawn(5)
    task = make_task(classes, dim, sigma, task_rng)
    teacher = train(SchemeSpec("teacher-ce"), task, config, rng=teacher_rng).model
    student = train(SchemeSpec("fullkd"), task, config, rng=student_rng,
                    teacher=teacher).model
    batch = get_batch(task, config.batch_size, batch_rng)

    sample_rounds = args.rounds
    if sample_rounds is None:
        teacher_probs = softmax(forward(teacher, batch[0]))
        sample_rounds = rounds_for_unique(teacher_probs, float(min(args.k)))
    schemes = [SchemeSpec("fullkd")]
    schemes += [SchemeSpec("topk", k=k) for k in args.k]
    schemes += [SchemeSpec("random-sampling", sample_rounds=sample_rounds,
                           temperature=args.temperature)]
    rows = gradient_similarity(teacher, student, task, schemes, batch,
                               rng=measure_rng, repeats=args.repeats)

    config_dict = _config_dict(
        args, command="grad-sim", classes=classes, dim=dim, sigma=sigma,
        train_rounds=config.num_rounds, batch_size=config.batch_size, lr=config.lr,
        hidden_teacher=config.hidden_teacher, hidden_student=config.hidden_student,
        k=list(args.k), rounds=sample_rounds, temperature=args.temperature,
        repeats=args.repeats,
    )
    _write_csv(args.out, config_dict, ("scheme", "angle_degrees", "norm_ratio"),
               [(r.scheme, repr(float(r.angle_degrees)), repr(float(r.norm_ratio)))
                for r in rows])
    for r in rows:
        print(f"{r.scheme:>24}: angle {r.angle_degrees:7.3f} deg, norm ratio {r.norm_ratio:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# unique-curve


def cmd_unique_curve(args) -> int:
    t = zipf(args.vocab_size)
    rng = make_rng(args.seed)
    curve = unique_token_curve(t, args.rounds, args.repeats, rng=rng)
    log_rounds = np.log([n for n, _ in curve])
    log_unique = np.log([u for _, u in curve])
    fit = stats.linregress(log_rounds, log_unique)
    config = _config_dict(args, command="unique-curve", vocab_size=args.vocab_size,
                          rounds=list(args.rounds), repeats=args.repeats,
                          loglog_slope=fit.slope, loglog_intercept=fit.intercept,
                          r_squared=fit.rvalue ** 2)
    _write_csv(args.out, config, ("n_rounds", "mean_unique_tokens"),
               [(n, repr(u)) for n, u in curve])
    print(f"log-log fit: slope {fit.slope:.4f}, R^2 {fit.rvalue ** 2:.5f} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# cache pack/unpack


def _targets_from_json(payload: dict) -> tuple[list[SparseTarget], int]:
    vocab_size = int(payload["vocab_size"])
    targets = [
        SparseTarget.from_entries(item["token_ids"], item["weights"], vocab_size,
                                  str(item.get("scheme", "dense")))
        for item in payload["targets"]
    ]
    return targets, vocab_size


def cmd_cache_pack(args) -> int:
    payload = json.loads(Path(args.input).read_text())
    targets, vocab_size = _targets_from_json(payload)
    scheme_id = CACHE_SCHEMES[args.scheme]
    if scheme_id == logit_cache.SCHEME_RS_COUNTS:
        if args.rounds is None:
            raise ValueError("--rounds (sampling rounds N) is required for rs-counts")
        param = args.rounds
    else:
        if args.k is None:
            raise ValueError("--k is required for the Top-K cache schemes")
        param = args.k
    blob = logit_cache.encode(targets, scheme_id, param, vocab_size=vocab_size)
    Path(args.out).write_bytes(blob)
    print(f"packed {len(targets)} position(s), {len(blob)} bytes -> {args.out}")
    return EXIT_OK


def cmd_cache_unpack(args) -> int:
    blob = Path(args.input).read_bytes()
    header = logit_cache.parse_header(blob)
    targets = logit_cache.decode(blob)
    payload = {
        "config": _config_dict(args, command="cache-unpack", input=str(args.input)),
        "vocab_size": header.vocab_size,
        "scheme_id": header.scheme_id,
        "param": header.param,
        "targets": [
            {"token_ids": t.token_ids.tolist(), "weights": t.weights.tolist(),
             "scheme": t.scheme}
            for t in targets
        ],
    }
    _write_json(args.out, payload)
    print(f"unpacked {len(targets)} position(s) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ece


def cmd_ece(args) -> int:
    payload = json.loads(Path(args.input).read_text())
    probs = np.asarray(payload["probs"], dtype=np.float64)
    labels = np.asarray(payload["labels"], dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError("expected 'probs' as [N, V] and 'labels' as [N]")
    conf = probs.max(axis=1)
    hit = probs.argmax(axis=1) == labels
    report = reliability_from_scores(conf, hit, args.bins)
    config = _config_dict(args, command="ece", input=str(args.input), bins=args.bins)
    _write_json(args.out, {"config": config, **report.to_json_dict(seed=args.seed)})
    print(f"ECE {100 * report.ece:.4f}% over {report.n_samples} samples "
          f"({args.bins} bins) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_task_flags(sub) -> None:
    sub.add_argument("--classes", type=int, default=None, help="number of classes")
    sub.add_argument("--dim", type=int, default=None, help="input dimensionality")
    sub.add_argument("--sigma", type=float, default=1.5, help="base noise scale")
    sub.add_argument("--hidden-teacher", type=int, default=None)
    sub.add_argument("--hidden-student", type=int, default=None)
    sub.add_argument("--lr", type=float, default=None)
    sub.add_argument("--train-rounds", type=int, default=None, help="training steps")
    sub.add_argument("--batch-size", type=int, default=None)
    sub.add_argument("--eval-batches", type=int, default=None)
    sub.add_argument("--paper-scale", action="store_true",
                     help="use the original toy-experiment constants")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsekd",
                                     description="Sparse knowledge-distillation experiments")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("zipf-targets", help="sparse-target curves on a Zipf teacher (CSV)")
    p.add_argument("--vocab-size", type=int, default=100_000)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--samples", type=int, default=22, help="draws per sampling round")
    p.add_argument("--rounds", type=int, default=1000, help="independent sampling rounds")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_zipf_targets)

    p = subs.add_parser("train-toy", help="train one scheme on the synthetic task (JSON)")
    p.add_argument("--scheme", required=True,
                   choices=["teacher-ce", "student-ce", "fullkd", "topk",
                            "random-sampling", "ghost", "naive-fix", "label-smoothing"])
    p.add_argument("--k", type=int, default=None, help="kept tokens for Top-K style schemes")
    p.add_argument("--top-p", type=float, default=None,
                   help="nucleus mass for the topk scheme (k becomes the cap)")
    p.add_argument("--rounds", type=int, default=None, help="sampling rounds for random-sampling")
    p.add_argument("--temperature", type=float, default=1.0, help="proposal temperature")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--eval-interval", type=int, default=0,
                   help="steps between interim evaluations (0 = final only)")
    p.add_argument("--repeats", type=int, default=1, help="independent runs, seeds seed+i")
    _add_task_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = subs.add_parser("grad-sim", help="gradient angle/norm vs dense distillation (CSV)")
    p.add_argument("--k", type=int, nargs="+", default=[12],
                   help="Top-K sizes to compare")
    p.add_argument("--rounds", type=int, default=None,
                   help="sampling rounds (default: match expected unique tokens to min k)")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--repeats", type=int, default=10,
                   help="random-sampling measurements to average")
    _add_task_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grad_sim)

    p = subs.add_parser("unique-curve", help="unique tokens vs sampling rounds (CSV)")
    p.add_argument("--vocab-size", type=int, default=100_000)
    p.add_argument("--rounds", type=int, nargs="+", default=[5, 10, 20, 50, 100, 200])
    p.add_argument("--repeats", type=int, default=30, help="repetitions per round count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unique_curve)

    p = subs.add_parser("cache-pack", help="pack JSON sparse targets into the binary cache")
    p.add_argument("input", help="JSON file: {vocab_size, targets: [{token_ids, weights}]}")
    p.add_argument("--scheme", required=True, choices=sorted(CACHE_SCHEMES))
    p.add_argument("--k", type=int, default=None, help="K recorded for Top-K schemes")
    p.add_argument("--rounds", type=int, default=None, help="sampling rounds N for rs-counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cache_pack)

    p = subs.add_parser("cache-unpack", help="decode a binary cache back to JSON targets")
    p.add_argument("input")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cache_unpack)

    p = subs.add_parser("ece", help="expected calibration error of stored predictions (JSON)")
    p.add_argument("input", help="JSON file: {probs: [N x V], labels: [N]}")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ece)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CacheError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``gdfo <subcommand> ...``.

Files produced by one step feed the next::

    gdfo gen-task --seed 0 --out task.json
    gdfo pretrain-teacher --task task.json --out teacher.ckpt --embeddings-out embed.ckpt
    gdfo serve --teacher teacher.ckpt --budget 20000 &          # prints endpoint=HOST:PORT
    export GDFO_ENDPOINT=HOST:PORT
    gdfo distill --task task.json --embeddings embed.ckpt --out student.ckpt
    gdfo train --task task.json --embeddings embed.ckpt --student student.ckpt --out state.ckpt
    gdfo infer --task task.json --student student.ckpt --state state.ckpt

``experiment`` and ``alpha-sweep`` run everything in-process and write
CSV tables plus PNG figures to ``--out``. Summary rows are also printed to
stdout as CSV. ``grid --set episode.alpha=0.25,0.5 --set distill.lr=0.01,0.05``
scores every combination on the dev split.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from gdfo import checkpoint, trainer
from gdfo.bench import experiment
from gdfo.bench.config import ExperimentConfig, load_config
from gdfo.bench.tasks import TEMPLATE, generate_task, load_split
from gdfo.blackbox import SocketHandle, serve
from gdfo.distill import DISTILL_CSV_FIELDS, run_distillation
from gdfo.errors import CheckpointError, ConfigError, GDFOError
from gdfo.models import load_params, pretrain_teacher, save_params
from gdfo.promptspace import prompt_from_table

log = logging.getLogger("gdfo")


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _seeded(args, seed: int) -> ExperimentConfig:
    return _config(args).for_seed(seed)


def _load_embeddings(path) -> np.ndarray:
    ckpt = checkpoint.load(path, kind="embeddings")
    if "embed" not in ckpt.tensors:
        raise CheckpointError(f"{path} holds no embedding table")
    return ckpt.tensors["embed"]


def _kv(**items) -> None:
    for k, v in items.items():
        print(f"{k}={v}")


def cmd_config(args) -> int:
    sys.stdout.write(_config(args).to_yaml())
    return 0


def cmd_gen_task(args) -> int:
    cfg = _seeded(args, args.seed)
    bundle = generate_task(cfg.task)
    bundle.save(args.out)
    s = bundle.split
    _kv(task=args.out, train=len(s.train), dev=len(s.dev), test=len(s.test),
        bayes_accuracy=f"{bundle.bayes_accuracy:.4f}")
    return 0


def cmd_pretrain_teacher(args) -> int:
    spec, split = load_split(args.task)
    cfg = _seeded(args, spec.seed)
    bundle = generate_task(spec)
    if bundle.split.train.instances != split.train.instances:
        raise GDFOError(f"{args.task} does not match its own spec; regenerate it with gen-task")
    teacher = pretrain_teacher(bundle.corpus, cfg.teacher)
    digest = save_params(teacher, args.out)
    checkpoint.save(args.embeddings_out, "embeddings", {"vocab_size": teacher.vocab_size},
                    {"embed": teacher.embeddings})
    _kv(teacher=args.out, checksum=digest, embeddings=args.embeddings_out)
    return 0


def cmd_serve(args) -> int:
    teacher = load_params(args.teacher)
    service = serve(teacher, bind=args.bind, budget=args.budget, background=False)
    _kv(endpoint=service.endpoint, budget=args.budget, checksum=teacher.checksum())
    sys.stdout.flush()
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.shutdown()
    return 0


def cmd_distill(args) -> int:
    spec, split = load_split(args.task)
    cfg = _seeded(args, spec.seed)
    dcfg = cfg.distill if args.lam is None else type(cfg.distill)(**{**cfg.distill.__dict__, "lam": args.lam})
    embeddings = _load_embeddings(args.embeddings)
    student = experiment.make_student(cfg, embeddings, spec.label_word_ids, spec.prefix_len)
    with SocketHandle(args.endpoint) as handle:
        result = run_distillation(handle, student, split.train.inputs, split.train.labels, dcfg, embeddings,
                                  csv_path=args.csv)
    digest = save_params(student, args.out)
    last = result.history[-1] if result.history else {}
    _kv(student=args.out, checksum=digest, teacher_calls=result.teacher_calls,
        **{k: f"{last[k]:.4f}" for k in DISTILL_CSV_FIELDS[1:] if k in last})
    return 0


def cmd_train(args) -> int:
    spec, split = load_split(args.task)
    cfg = _seeded(args, spec.seed)
    ecfg = cfg.episode if args.alpha is None else type(cfg.episode)(**{**cfg.episode.__dict__, "alpha": args.alpha})
    embeddings = _load_embeddings(args.embeddings)
    student = load_params(args.student)
    p0 = prompt_from_table(embeddings, ecfg.n_prompt_tokens, spec.seed)
    state = trainer.init_state(ecfg, p0)
    with SocketHandle(args.endpoint) as handle:
        trainer.train(state, split.train.instances, split.train.labels, handle, student, TEMPLATE,
                      csv_path=args.csv)
    digest = trainer.save_state(state, args.out)
    _kv(state=args.out, checksum=digest, generations=state.step, api_calls_used=state.api_calls_used,
        best_teacher_ce=f"{state.best_loss:.6f}")
    return 0


def cmd_infer(args) -> int:
    spec, split = load_split(args.task)
    data = getattr(split, args.split)
    student = load_params(args.student)
    state = trainer.load_state(args.state)
    with SocketHandle(args.endpoint) as handle:
        acc, preds = trainer.evaluate(state, data.instances, data.labels, handle, student, TEMPLATE)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("index", "label", "prediction"))
            w.writerows(zip(range(len(preds)), data.labels.tolist(), preds.tolist()))
    _kv(split=args.split, n=len(preds), accuracy=f"{acc:.4f}")
    return 0


def _print_summary(results) -> None:
    w = csv.DictWriter(sys.stdout, fieldnames=experiment.SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in experiment.summarize(results):
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})


def _seed_list(text: str | None):
    return None if text is None else [int(s) for s in text.split(",") if s.strip()]


def cmd_experiment(args) -> int:
    cfg = _config(args)
    presets = args.presets.split(",") if args.presets else experiment.PRESETS
    results = experiment.run_experiment(cfg, presets, _seed_list(args.seeds), out_dir=args.out,
                                        plot=not args.no_plot)
    _print_summary(results)
    return 0


def cmd_alpha_sweep(args) -> int:
    cfg = _config(args)
    values = [float(a) for a in args.alphas.split(",")]
    results = experiment.alpha_sweep(cfg, values, _seed_list(args.seeds), out_dir=args.out,
                                     plot=not args.no_plot)
    _print_summary(results)
    return 0


def _grid_axes(items) -> dict:
    axes = {}
    for item in items or ():
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(f"--set expects section.field=v1,v2,..., got {item!r}")
        axes[key.strip()] = [yaml.safe_load(v) for v in values.split(",")]
    if not axes:
        raise ConfigError("grid needs at least one --set axis")
    return axes


def cmd_grid(args) -> int:
    rows = experiment.grid_search(_config(args), _grid_axes(args.set), args.preset, _seed_list(args.seeds),
                                  out_dir=args.out)
    w = csv.DictWriter(sys.stdout, fieldnames=experiment.GRID_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdfo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML config file (defaults are used when omitted)")
        p.set_defaults(fn=fn)
        return p

    def endpoint(p):
        p.add_argument("--endpoint", help="HOST:PORT of a running service (default: $GDFO_ENDPOINT)")

    add("config", cmd_config, "print the effective configuration as YAML")

    p = add("gen-task", cmd_gen_task, "generate a synthetic task and its k-shot split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("pretrain-teacher", cmd_pretrain_teacher, "pre-train and freeze the teacher")
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings-out", required=True, help="where to export the public embedding table")

    p = add("serve", cmd_serve, "serve a teacher checkpoint over a local socket")
    p.add_argument("--teacher", required=True)
    p.add_argument("--bind", default="127.0.0.1:0")
    p.add_argument("--budget", type=int, required=True)

    p = add("distill", cmd_distill, "distill the served teacher into a fresh student")
    p.add_argument("--task", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--lam", type=float)
    endpoint(p)

    p = add("train", cmd_train, "joint prompt training against the served teacher")
    p.add_argument("--task", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--alpha", type=float)
    endpoint(p)

    p = add("infer", cmd_infer, "classify a split with a trained state (one call per instance)")
    p.add_argument("--task", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--out", help="per-instance predictions CSV")
    endpoint(p)

    for name, fn, help_ in (("experiment", cmd_experiment, "run presets over seeds"),
                            ("alpha-sweep", cmd_alpha_sweep, "sweep the balancing weight alpha")):
        p = add(name, fn, help_)
        p.add_argument("--seeds", help="comma-separated seeds (default: from config)")
        p.add_argument("--out", help="output directory for CSV and PNG files")
        p.add_argument("--no-plot", action="store_true")
        if name == "experiment":
            p.add_argument("--presets", help=f"comma-separated subset of {','.join(experiment.PRESETS)}")
        else:
            p.add_argument("--alphas", default="0,0.25,0.5,0.75,1")

    p = add("grid", cmd_grid, "score config combinations on the dev split")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=V1,V2",
                   help="one grid axis; repeat for a cartesian product")
    p.add_argument("--preset", default="gdfo", choices=experiment.PRESETS)
    p.add_argument("--seeds", help="comma-separated seeds (default: from config)")
    p.add_argument("--out", help="output directory for grid.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except GDFOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

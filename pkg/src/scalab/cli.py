"""``scalab`` command line: gen, train, eval, inspect.

Exit codes: 0 success, 1 I/O or file-format error, 2 usage error,
3 training aborted on a non-finite value.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as D
from . import evaluation as E
from .attention import ConfigError
from .configfile import ConfigFileError, load_config_file
from .model import CheckpointError, load_checkpoint, model_forward, save_checkpoint
from .train import ArrayData, TrainingAborted, train_run

EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


def _fail(msg: str, code: int) -> int:
    print(f"scalab: error: {msg}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scalab", description="Sparse-coding attention laboratory.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset file")
    g.add_argument("--kind", choices=("panel", "symbolic"), required=True)
    g.add_argument("--rule", choices=sorted(D.PANEL_RULES), default="a", help="panel rule template")
    g.add_argument("--split", choices=("train", "test"), default="train", help="symbolic combo split")
    g.add_argument("--holdout", type=float, default=0.25, help="fraction of rule combos held out")
    g.add_argument("--split-seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--sigma", choices=("softmax", "prox"))

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", choices=("psnr", "accuracy", "sparsity"), required=True)
    e.add_argument("--out", help="CSV path (default: <ckpt dir>/<metric>.csv)")

    i = sub.add_parser("inspect", help="dump attention maps and a panel montage for one task")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--task-index", type=int, required=True)
    i.add_argument("--out-dir", required=True)
    return p


def cmd_gen(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    if args.kind == "panel":
        tasks = D.gen_panel_dataset(args.rule, args.count, args.seed)
        D.save_dataset(tasks, args.out, kind="panel")
        print(f"wrote {len(tasks)} panel tasks (rule {args.rule}) to {args.out}")
        return 0
    try:
        train, test = D.split_rule_combos(D.all_rule_combos(), args.holdout, args.split_seed)
    except D.DataError as exc:
        raise UsageError(str(exc)) from exc
    combos = train if args.split == "train" else test
    tasks = D.gen_symbolic_dataset(combos, args.count, args.seed)
    D.save_dataset(tasks, args.out, kind="symbolic")
    print(f"rule combos: {len(train)} train / {len(test)} test")
    print(f"wrote {len(tasks)} symbolic tasks from the {args.split} split to {args.out}")
    return 0


def _arrays(tasks, model_cfg, token_mode="pixels") -> ArrayData:
    if model_cfg.task_kind == "panel":
        x, y = D.panel_arrays(tasks, token_mode)
        return ArrayData(x, targets=y)
    x, labels = D.symbolic_arrays(tasks)
    return ArrayData(x, labels=labels)


def _load_tasks(path, expected_kind: str):
    kind = D.dataset_kind(path)
    if kind != expected_kind:
        raise UsageError(f"{path} holds {kind} tasks but the model expects {expected_kind} tasks")
    return D.load_dataset(path)


def cmd_train(args) -> int:
    try:
        model_cfg, train_cfg, _ = load_config_file(args.config)
        if args.sigma:
            model_cfg = replace(model_cfg, sca=replace(model_cfg.sca, sigma=args.sigma))
    except (ConfigFileError, ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if train_cfg is None:
        from .train import TrainConfig

        train_cfg = TrainConfig()
    data = _arrays(_load_tasks(args.data, model_cfg.task_kind), model_cfg, train_cfg.token_mode)
    if len(data) == 0:
        raise UsageError("training dataset is empty")
    eval_data = None
    if args.eval_data:
        eval_data = _arrays(_load_tasks(args.eval_data, model_cfg.task_kind), model_cfg, train_cfg.token_mode)
    os.makedirs(args.out, exist_ok=True)
    ckpt, rows = train_run(model_cfg, train_cfg, data, eval_data, log_path=os.path.join(args.out, "metrics.csv"))
    save_checkpoint(ckpt, os.path.join(args.out, "model.ckpt"))
    print(f"final train loss {rows[-1]['train_loss']!r} after {ckpt.epoch} epochs ({ckpt.adam_step} steps)")
    return 0


def _checkpoint_and_tasks(args):
    ckpt = load_checkpoint(args.ckpt)
    tasks = _load_tasks(args.data, ckpt.model_config.task_kind)
    return ckpt, tasks


def cmd_eval(args) -> int:
    ckpt, tasks = _checkpoint_and_tasks(args)
    cfg = ckpt.model_config
    mode = ckpt.train_config.token_mode if ckpt.train_config is not None else "pixels"
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), f"{args.metrics}.csv")
    if not tasks:
        raise UsageError("evaluation dataset is empty")
    try:
        if args.metrics == "psnr":
            if cfg.task_kind != "panel":
                raise E.EvalError("psnr needs a panel checkpoint")
            x, y = D.panel_arrays(tasks, mode)
            cov = E.psnr_coverage(ckpt.params, cfg, x, y)
            rows = [(f"coverage@{t:g}", v) for t, v in cov.items()]
            rows.append(("target_mse", E.target_mse(ckpt.params, cfg, x, y)))
            E.write_table_csv(("metric", "value"), rows, out)
            print(", ".join(f"{k}={v:.4f}" for k, v in rows))
        elif args.metrics == "accuracy":
            acc = E.accuracy(ckpt.params, cfg, tasks)
            E.write_table_csv(("metric", "value"), [("accuracy", acc)], out)
            print(f"accuracy={acc:.4f}")
        else:
            x = D.panel_arrays(tasks, mode)[0] if cfg.task_kind == "panel" else D.symbolic_arrays(tasks)[0]
            table = E.sparsity_sweep(ckpt.params, cfg, x)
            E.write_table_csv(("xi", "sparsity"), table, out)
            print(", ".join(f"xi={xi:g}:{s:.4f}" for xi, s in table))
    except E.EvalError as exc:
        raise UsageError(str(exc)) from exc
    return 0


def _symbolic_image(grid, predicted) -> np.ndarray:
    g = np.array(grid, dtype=np.float64)
    g[2, 2] = predicted
    # one row per sequence, steps side by side, features as 1-pixel columns
    return (g.reshape(3, 12) / (D.MODULUS - 1)).clip(0, 1)


def cmd_inspect(args) -> int:
    ckpt, tasks = _checkpoint_and_tasks(args)
    if not 0 <= args.task_index < len(tasks):
        raise UsageError(f"task index {args.task_index} out of range [0, {len(tasks)})")
    cfg = ckpt.model_config
    task = tasks[args.task_index]
    mode = ckpt.train_config.token_mode if ckpt.train_config is not None else "pixels"
    if cfg.task_kind == "panel":
        x = D.tokenize_panels(task, mode, mask_target=True)
    else:
        x = D.tokenize_symbolic(task)
    out, traces = model_forward(x, ckpt.params, cfg)
    paths = E.dump_attention(traces, args.out_dir)
    pgm = os.path.join(args.out_dir, "panels.pgm")
    if cfg.task_kind == "panel":
        panels = task.panels.astype(np.float64).copy()
        panels[8] = np.clip(D.panel_from_tokens(out[32:36]), 0.0, 1.0)
        E.export_panel_pgm(panels, pgm, grid=True)
    else:
        pred = out[-1].reshape(D.N_FEATURES, -1).argmax(axis=1)
        E.write_pgm(_symbolic_image(task.grid, pred), pgm)
    print(f"wrote {len(paths)} attention CSVs and {pgm}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def _limit_threads():
    try:
        n = int(os.environ.get("SCA_THREADS", "1"))
    except ValueError:
        n = 1
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(max(1, n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads()
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except TrainingAborted as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except (OSError, D.DatasetFormatError, CheckpointError, ConfigFileError) as exc:
        return _fail(str(exc), EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())

"""Metrics and exports: PSNR, PSNR coverage, accuracy, sparsity sweeps, CSV/PGM dumps."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import replace

import numpy as np

from .attention import sparsity_ratio
from .data import panel_from_tokens, symbolic_arrays
from .model import ModelConfig, model_forward

PSNR_CAP = 99.0
DEFAULT_THRESHOLDS = (20.0, 30.0, 40.0)
DEFAULT_XI_GRID = (0.003, 0.01, 0.03, 0.1, 0.3)


class EvalError(ValueError):
    pass


def psnr(pred, target) -> float:
    """PSNR in dB for images in [0, 1]; ``pred`` is clamped first, exact matches give 99 dB."""
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise EvalError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def coverage(psnrs, thresholds=DEFAULT_THRESHOLDS) -> dict[float, float]:
    """Fraction of values strictly above each threshold."""
    psnrs = np.asarray(psnrs, dtype=np.float64)
    if psnrs.size == 0:
        raise EvalError("no samples")
    return {float(t): float(np.mean(psnrs > t)) for t in thresholds}


def _forward_batched(inputs, params, config: ModelConfig, batch_size=256):
    outs = []
    for s in range(0, len(inputs), batch_size):
        out, _ = model_forward(inputs[s:s + batch_size], params, config)
        outs.append(out)
    return np.concatenate(outs)


def predict_target_panels(params, config: ModelConfig, inputs) -> np.ndarray:
    """Model predictions for the masked final panel, as ``(count, 8, 8)`` images."""
    out = _forward_batched(inputs, params, config)
    first = (config.sca.tasks - 1) * config.sca.tokens_per_task
    return np.stack([panel_from_tokens(o[first:first + 4]) for o in out])


def target_psnrs(params, config: ModelConfig, inputs, targets) -> np.ndarray:
    preds = predict_target_panels(params, config, inputs)
    first = (config.sca.tasks - 1) * config.sca.tokens_per_task
    truth = [panel_from_tokens(t[first:first + 4]) for t in targets]
    return np.array([psnr(p, t) for p, t in zip(preds, truth)])


def psnr_coverage(params, config: ModelConfig, inputs, targets, thresholds=DEFAULT_THRESHOLDS):
    if config.task_kind != "panel":
        raise EvalError("PSNR coverage needs a panel regression model")
    if len(inputs) == 0:
        raise EvalError("empty dataset")
    return coverage(target_psnrs(params, config, inputs, targets), thresholds)


def target_mse(params, config: ModelConfig, inputs, targets) -> float:
    """Mean squared error of the clamped target-panel prediction."""
    preds = predict_target_panels(params, config, inputs)
    first = (config.sca.tasks - 1) * config.sca.tokens_per_task
    truth = np.stack([panel_from_tokens(t[first:first + 4]) for t in targets])
    return float(np.mean((np.clip(preds, 0.0, 1.0) - truth) ** 2))


def accuracy_from_logits(logits, labels) -> float:
    """``logits``: (count, features, classes).  A task is correct only if every feature is."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EvalError("empty test set")
    pred = np.argmax(logits, axis=-1)  # first maximum wins ties
    return float(np.mean(np.all(pred == labels, axis=-1)))


def symbolic_logits(params, config: ModelConfig, inputs, n_features: int = 4) -> np.ndarray:
    out = _forward_batched(inputs, params, config)
    last = out[:, -1, :]
    return last.reshape(len(out), n_features, -1)


def accuracy(params, config: ModelConfig, tasks) -> float:
    if config.task_kind != "symbolic":
        raise EvalError("accuracy needs a symbolic classification model")
    if len(tasks) == 0:
        raise EvalError("empty test set")
    inputs, labels = symbolic_arrays(tasks)
    return accuracy_from_logits(symbolic_logits(params, config, inputs), labels)


def sparsity_sweep(params, config: ModelConfig, inputs, xi_grid=DEFAULT_XI_GRID, batch_size=256):
    """Mean exact-zero fraction of thresholded coefficients at each threshold, without retraining."""
    if config.sca.sigma != "prox":
        raise EvalError("sparsity sweep needs a prox (soft-threshold) model")
    if len(inputs) == 0:
        raise EvalError("empty dataset")
    rows = []
    for xi in xi_grid:
        cfg = replace(config, sca=replace(config.sca, xi=float(xi)))
        p = dict(params)
        for k in p:
            if k.endswith(".xi"):
                p[k] = np.full_like(p[k], float(xi))
        ratios = []
        for s in range(0, len(inputs), batch_size):
            _, traces = model_forward(inputs[s:s + batch_size], p, cfg)
            for trace in traces:
                for alpha in trace.coefficients_pre:
                    a = alpha.reshape((-1,) + alpha.shape[-2:])
                    ratios.extend(sparsity_ratio(m) for m in a)
        rows.append((float(xi), float(np.mean(ratios))))
    return rows


# --- CSV -------------------------------------------------------------------

def write_matrix_csv(matrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in np.asarray(matrix):
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_table_csv(header, rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def dump_attention(traces, out_dir, item: int = 0) -> list[str]:
    """One CSV per layer, head and stage (``pre``/``post`` transfer)."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for layer, trace in enumerate(traces):
        for head, (pre, post) in enumerate(zip(trace.coefficients_pre, trace.coefficients_post)):
            for stage, mat in (("pre", pre), ("post", post)):
                m = mat[item] if mat.ndim == 3 else mat
                path = os.path.join(out_dir, f"layer{layer}_head{head}_{stage}.csv")
                write_matrix_csv(m, path)
                paths.append(path)
    return paths


# --- PGM -------------------------------------------------------------------

def montage(panels, cols: int = 3, gap: int = 0, fill: float = 0.5) -> np.ndarray:
    """Tile equally sized images row by row, ``gap`` pixels of ``fill`` between them."""
    panels = np.asarray(panels, dtype=np.float64)
    n, h, w = panels.shape
    rows = -(-n // cols)
    out = np.full((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap), fill)
    for i, p in enumerate(panels):
        r, c = divmod(i, cols)
        out[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = p
    return out


def write_pgm(image, path) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise EvalError("PGM export needs a 2-D image")
    if img.min() < 0 or img.max() > 1:
        raise EvalError("pixel values must lie in [0, 1]")
    data = np.rint(255.0 * img).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise EvalError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise EvalError("PGM data is truncated")
    return pixels.reshape(h, w) / float(maxval)


def export_panel_pgm(panels, path, grid: bool = False, gap: int = 0) -> None:
    """Write one panel, or with ``grid`` a 3x3 montage of nine panels."""
    panels = np.asarray(panels, dtype=np.float64)
    write_pgm(montage(panels, 3, gap) if grid else panels, path)

"""Adam training loop with seeded shuffling, CSV metric logs and resumable checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .model import Checkpoint, ModelConfig, init_model, model_forward

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse-full", "mse-target-only", "cross-entropy")
NO_DECAY = ("lambda", "xi")


class TrainingAborted(RuntimeError):
    """Raised when the loss (or any intermediate) becomes non-finite."""

    def __init__(self, epoch: int, batch: int, loss: float, detail: str = ""):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        msg = f"non-finite loss at epoch {epoch}, batch {batch}: {loss}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    shuffle_seed: int = 0
    loss: str = "mse-full"
    token_mode: str = "pixels"
    eval_every: int = 0
    max_grad_norm: float | None = None
    # fixed step budget for streamed data (one pass over a generator)
    steps: int | None = None

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate < 0:
            raise ValueError("epochs and batch_size must be positive, learning_rate non-negative")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.token_mode not in ("pixels", "onehot"):
            raise ValueError("token_mode must be 'pixels' or 'onehot'")
        if self.steps is not None and self.steps <= 0:
            raise ValueError("steps must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update with decoupled weight decay; returns ``(params, state)``."""
    t = state.step + 1
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise nx.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay > 0 and not name.endswith(NO_DECAY):
            update = update + lr * config.weight_decay * p
        new_params[name] = p - update
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, t)


def clip_gradients(grads, max_norm: float):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    f = max_norm / total
    return {k: g * f for k, g in grads.items()}


# --- data sources ------------------------------------------------------------

@dataclass
class ArrayData:
    """Fixed dataset: masked ``inputs`` with regression ``targets`` or class ``labels``."""

    inputs: np.ndarray
    targets: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx):
        y = self.targets[idx] if self.targets is not None else self.labels[idx]
        return self.inputs[idx], y


@dataclass
class StreamData:
    """Unbounded source; ``make_batch(step)`` must be a pure function of the step index."""

    make_batch: Callable[[int], tuple]


def target_mask(config: ModelConfig, width: int) -> np.ndarray:
    s = config.sca
    mask = np.zeros((s.n_tokens, width))
    mask[(s.tasks - 1) * s.tokens_per_task:] = 1.0
    return mask


def batch_loss(params, x, y, model_config: ModelConfig, loss_kind: str):
    out, _ = model_forward(x, params, model_config)
    if loss_kind == "cross-entropy":
        # logits of the final token, one row of classes per feature
        sel = _select_row(out, nx.value_of(out).shape[-2] - 1, y.shape[-1])
        return nx.cross_entropy_loss(sel, y.reshape(-1))
    mask = target_mask(model_config, y.shape[-1]) if loss_kind == "mse-target-only" else None
    return nx.mse_loss(out, y, mask)


def _select_row(out, row: int, n_feat: int):
    ov = nx.value_of(out)
    batch_shape = ov.shape[:-2]
    width = ov.shape[-1]
    classes = width // n_feat
    sel = ov[..., row, :].reshape(batch_shape + (n_feat, classes))

    def back(g):
        full = np.zeros_like(ov)
        full[..., row, :] = g.reshape(batch_shape + (width,))
        return (full,)

    return nx.record("select_row", (out,), sel, back)


def loss_and_grads(params, x, y, model_config, loss_kind):
    graph = nx.Graph()
    leaves = graph.leaves(params)
    loss = batch_loss(leaves, x, y, model_config, loss_kind)
    grads = nx.backward(loss)
    graph.release()
    return float(loss.value[0, 0]), grads


def evaluate_loss(params, data: ArrayData, model_config, loss_kind, batch_size=512) -> float:
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        x, y = data.batch(idx)
        val = float(batch_loss(params, x, y, model_config, loss_kind)[0, 0])
        total += val * len(idx)
        count += len(idx)
    return total / count


# --- metric log ----------------------------------------------------------------

class MetricLog:
    """Append-only CSV with the run config echoed as ``#`` comment lines."""

    def __init__(self, path=None, header_text: str = "", columns=("epoch", "step", "train_loss")):
        self.path = path
        self.columns = list(columns)
        self.rows: list[dict] = []
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                for line in header_text.splitlines():
                    fh.write(f"# {line}\n")
                fh.write(",".join(self.columns) + "\n")

    @staticmethod
    def _fmt(v) -> str:
        return repr(float(v)) if isinstance(v, float) else str(v)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8", newline="") as fh:
                fh.write(",".join(self._fmt(row.get(c, "")) for c in self.columns) + "\n")


def _epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch])).permutation(n)


def _guard(loss: float, epoch: int, batch: int):
    if not math.isfinite(loss) or loss < 0:
        raise TrainingAborted(epoch, batch, loss)


def train_run(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data: ArrayData | StreamData,
    eval_data: ArrayData | None = None,
    log_path=None,
    resume: Checkpoint | None = None,
    stop_epoch: int | None = None,
    evaluator: Callable[[dict], dict] | None = None,
    metric_names: tuple = (),
):
    """Train and return ``(checkpoint, metric_rows)``.

    Fixed data is visited in a seeded permutation per epoch (last partial batch
    kept).  Stream data runs ``train_config.steps`` batches as a single epoch.
    ``resume`` continues from a checkpoint's epoch; ``stop_epoch`` ends early
    (used to cut a run in two).
    """
    from .configfile import dump_config

    loss_kind = train_config.loss
    if resume is not None:
        params = {k: v.copy() for k, v in resume.params.items()}
        state = AdamState(dict(resume.adam_m), dict(resume.adam_v), resume.adam_step)
        first_epoch = resume.epoch
    else:
        params = init_model(model_config, train_config.seed)
        state = AdamState.zeros_like(params)
        first_epoch = 0

    columns = ["epoch", "step", "train_loss"]
    if eval_data is not None:
        columns.append("eval_loss")
    columns += list(metric_names)
    log_file = MetricLog(log_path, dump_config(model_config, train_config), columns)

    final_epoch = 1 if isinstance(data, StreamData) else train_config.epochs
    last_epoch = final_epoch if stop_epoch is None else min(stop_epoch, final_epoch)
    if not isinstance(data, StreamData) and len(data) == 0:
        raise ValueError("training data is empty")

    for epoch in range(first_epoch, last_epoch):
        if isinstance(data, StreamData):
            batches = ((b, data.make_batch(b)) for b in range(train_config.steps or 1))
        else:
            order = _epoch_order(len(data), train_config.shuffle_seed, epoch)
            bs = train_config.batch_size
            batches = ((b, data.batch(order[s:s + bs])) for b, s in enumerate(range(0, len(data), bs)))
        total, seen = 0.0, 0
        for b, (x, y) in batches:
            try:
                loss, grads = loss_and_grads(params, x, y, model_config, loss_kind)
            except nx.NonFiniteError as exc:
                raise TrainingAborted(epoch + 1, b, float("nan"), str(exc)) from exc
            _guard(loss, epoch + 1, b)
            if train_config.max_grad_norm is not None:
                grads = clip_gradients(grads, train_config.max_grad_norm)
            params, state = adam_step(params, grads, state, train_config)
            for k in params:
                if k.endswith(".xi"):
                    # projected step: the threshold stays non-negative
                    params[k] = np.maximum(params[k], 0.0)
            total += loss * len(x)
            seen += len(x)
        row = {"epoch": epoch + 1, "step": state.step, "train_loss": total / seen}
        due = train_config.eval_every and (epoch + 1) % train_config.eval_every == 0
        # the cadence ignores stop_epoch so a split run logs exactly what an unbroken one does
        if due or epoch + 1 == final_epoch:
            if eval_data is not None:
                row["eval_loss"] = evaluate_loss(params, eval_data, model_config, loss_kind)
            if evaluator is not None:
                row.update(evaluator(params))
        log.debug("epoch %d loss %.6g", epoch + 1, row["train_loss"])
        log_file.append(row)

    ckpt = Checkpoint(
        model_config=model_config,
        params=params,
        train_config=train_config,
        adam_m=state.m,
        adam_v=state.v,
        adam_step=state.step,
        seed=train_config.seed,
        epoch=last_epoch,
    )
    return ckpt, log_file.rows


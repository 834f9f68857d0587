"""Sparse-coding attention block.

Each head decomposes the tokens over an encoding dictionary
``phi(X) = W_qk X^T`` to get an ``N x N`` coefficient matrix, optionally
sparsifies it with soft-thresholding, lets the target task's coefficients
borrow from the context tasks (``alpha_L + sum_i lambda_i alpha_i``), and
decodes against ``psi(X) = X W_vo``.  With softmax coefficients and the
transfer disabled this is ordinary multi-head attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import value_of

SIGMA_KINDS = ("softmax", "prox")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SCAConfig:
    d: int = 16
    heads: int = 1
    tasks: int = 9
    tokens_per_task: int = 4
    sigma: str = "prox"
    xi: float = 0.03
    xi_learnable: bool = False
    transfer: bool = True
    phi_relu: bool = False
    psi_relu: bool = False
    scale_logits: bool = False
    rms_norm: bool = False
    rms_eps: float = 1e-6
    per_head_lambda: bool = False
    factored: bool = True

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.tasks < 2:
            raise ConfigError("need at least one context task and one target task")
        if self.tokens_per_task <= 0:
            raise ConfigError("tokens_per_task must be positive")
        if self.sigma not in SIGMA_KINDS:
            raise ConfigError(f"sigma must be one of {SIGMA_KINDS}, got {self.sigma!r}")
        if self.sigma == "prox" and not self.xi >= 0:
            raise ConfigError("xi must be non-negative")
        if self.rms_eps <= 0:
            raise ConfigError("rms_eps must be positive")

    @property
    def n_tokens(self) -> int:
        return self.tasks * self.tokens_per_task

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class AttentionTrace:
    """Per-head coefficient maps (values only) captured during a forward pass."""

    coefficients_pre: list[np.ndarray] = field(default_factory=list)
    coefficients_post: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def init_sca_params(config: SCAConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in uniform projections, zero transfer weights, threshold at ``config.xi``."""
    d, k = config.d, config.head_dim
    bound = 1.0 / math.sqrt(d)
    params = {}
    for h in range(config.heads):
        if config.factored:
            for name in ("wq", "wk", "wv", "wo"):
                params[f"{name}.{h}"] = rng.uniform(-bound, bound, size=(d, k))
        else:
            params[f"wqk.{h}"] = rng.uniform(-bound, bound, size=(d, d))
            params[f"wvo.{h}"] = rng.uniform(-bound, bound, size=(d, d))
    if config.transfer:
        rows = config.heads if config.per_head_lambda else 1
        params["lambda"] = np.zeros((rows, config.tasks - 1))
    if config.sigma == "prox" and config.xi_learnable:
        params["xi"] = np.full((1, 1), float(config.xi))
    return params


def combined_weights(params, config: SCAConfig, head: int) -> tuple[np.ndarray, np.ndarray]:
    """``(W_qk, W_vo)`` for one head as plain ``d x d`` arrays."""
    if config.factored:
        wq, wk, wv, wo = (value_of(params[f"{n}.{head}"]) for n in ("wq", "wk", "wv", "wo"))
        return wq @ wk.T, wv @ wo.T
    return value_of(params[f"wqk.{head}"]), value_of(params[f"wvo.{head}"])


def _check_tokens(x, config: SCAConfig):
    shape = value_of(x).shape
    if shape[-2:] != (config.n_tokens, config.d):
        raise nx.ShapeError(f"expected tokens of shape ({config.n_tokens}, {config.d}), got {shape}")


def _threshold(params, config: SCAConfig):
    if config.xi_learnable:
        if "xi" not in params:
            raise ConfigError("learnable threshold requested but params carry no 'xi'")
        return params["xi"]
    if config.xi is None:
        raise ConfigError("prox coefficients need a threshold")
    return config.xi


def encode_coefficients(x, params, config: SCAConfig, head: int):
    _check_tokens(x, config)
    if config.phi_relu or not config.factored:
        if config.factored:
            wqk = nx.matmul(params[f"wq.{head}"], nx.transpose(params[f"wk.{head}"]))
        else:
            wqk = params[f"wqk.{head}"]
        phi = nx.matmul(wqk, nx.transpose(x))
        if config.phi_relu:
            phi = nx.relu(phi)
        logits = nx.matmul(x, phi)
    else:
        # X (Wq Wk^T X^T) regrouped as (X Wq)(X Wk)^T
        q = nx.matmul(x, params[f"wq.{head}"])
        k = nx.matmul(x, params[f"wk.{head}"])
        logits = nx.matmul(q, nx.transpose(k))
    if config.scale_logits:
        logits = nx.scale(logits, 1.0 / math.sqrt(config.head_dim))
    if config.sigma == "softmax":
        return nx.row_softmax(logits)
    return nx.soft_threshold(logits, _threshold(params, config))


def transfer_coefficients(alpha, lam, config: SCAConfig, head: int = 0):
    """Add ``sum_i lambda_i alpha_i`` to the target row block; context blocks pass through.

    ``lam`` is a ``(rows, tasks - 1)`` matrix; with several rows, row ``head`` is used.
    """
    av, lv = value_of(alpha), value_of(lam)
    L, n = config.tasks, config.tokens_per_task
    if lv.shape[-1] != L - 1:
        raise nx.ShapeError(f"expected {L - 1} transfer weights, got {lv.shape[-1]}")
    if av.shape[-2] != L * n:
        raise nx.ShapeError(f"coefficients have {av.shape[-2]} rows, expected {L * n}")
    row = head if lv.shape[0] > 1 else 0
    weights = lv[row]
    blocks = av.reshape(av.shape[:-2] + (L, n, av.shape[-1]))
    ctx = blocks[..., : L - 1, :, :]
    out = av.copy()
    out[..., (L - 1) * n :, :] = blocks[..., L - 1, :, :] + np.tensordot(weights, ctx, axes=([0], [-3]))

    def back(g):
        g_target = g[..., (L - 1) * n :, :]
        ga = g.copy()
        gb = ga.reshape(blocks.shape)
        gb[..., : L - 1, :, :] += weights[:, None, None] * g_target[..., None, :, :]
        per_task = (ctx * g_target[..., None, :, :]).sum(axis=(-1, -2))
        gl = np.zeros_like(lv)
        gl[row] = per_task.reshape(-1, L - 1).sum(axis=0)
        return ga, gl

    return nx.record("transfer", (alpha, lam), out, back)


def decode_output(alpha_post, x, params, config: SCAConfig, head: int):
    _check_tokens(x, config)
    if value_of(alpha_post).shape[-1] != config.n_tokens:
        raise nx.ShapeError("coefficient columns must match token count")
    if config.factored:
        psi = nx.matmul(nx.matmul(x, params[f"wv.{head}"]), nx.transpose(params[f"wo.{head}"]))
    else:
        psi = nx.matmul(x, params[f"wvo.{head}"])
    if config.psi_relu:
        psi = nx.relu(psi)
    return nx.matmul(alpha_post, psi)


def sca_forward(x, params, config: SCAConfig):
    """Sum over heads of decode(transfer(encode(x))); returns ``(z, trace)``."""
    trace = AttentionTrace()
    outs = []
    for h in range(config.heads):
        alpha = encode_coefficients(x, params, config, h)
        post = transfer_coefficients(alpha, params["lambda"], config, h) if config.transfer else alpha
        out = decode_output(post, x, params, config, h)
        trace.coefficients_pre.append(value_of(alpha))
        trace.coefficients_post.append(value_of(post))
        trace.outputs.append(value_of(out))
        outs.append(out)
    z = outs[0] if len(outs) == 1 else nx.add_n(outs)
    if config.rms_norm:
        z = nx.rms_normalize(z, config.rms_eps)
    return z, trace


def reference_mha(x, params, config: SCAConfig) -> np.ndarray:
    """Plain-loop multi-head softmax attention, ``sum_h softmax(X W_qk X^T) X W_vo``.

    Deliberately shares nothing with :func:`sca_forward`; used as an oracle.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if d != config.d:
        raise nx.ShapeError(f"token width {d} != d={config.d}")
    k = config.head_dim
    out = [[0.0] * d for _ in range(n)]
    for h in range(config.heads):
        if config.factored:
            wq, wk, wv, wo = (np.asarray(params[f"{s}.{h}"]) for s in ("wq", "wk", "wv", "wo"))
            wqk = [[sum(wq[a, c] * wk[b, c] for c in range(k)) for b in range(d)] for a in range(d)]
            wvo = [[sum(wv[a, c] * wo[b, c] for c in range(k)) for b in range(d)] for a in range(d)]
        else:
            wqk = np.asarray(params[f"wqk.{h}"]).tolist()
            wvo = np.asarray(params[f"wvo.{h}"]).tolist()
        xw = [[sum(x[i, a] * wqk[a][b] for a in range(d)) for b in range(d)] for i in range(n)]
        scores = [[sum(xw[i][b] * x[j, b] for b in range(d)) for j in range(n)] for i in range(n)]
        values = [[sum(x[j, a] * wvo[a][b] for a in range(d)) for b in range(d)] for j in range(n)]
        for i in range(n):
            top = max(scores[i])
            e = [math.exp(s - top) for s in scores[i]]
            total = sum(e)
            for j in range(n):
                p = e[j] / total
                for b in range(d):
                    out[i][b] += p * values[j][b]
    return np.array(out)


def sparsity_ratio(alpha) -> float:
    a = np.asarray(value_of(alpha))
    return float(np.count_nonzero(a == 0.0)) / a.size


def head_lambda(params, config: SCAConfig, head: int) -> np.ndarray:
    lv = np.asarray(value_of(params["lambda"]))
    return lv[head if lv.shape[0] > 1 else 0]



def fit_transfer_weights(context_coeffs, target_coeffs) -> np.ndarray:
    """Least-squares transfer weights: ``argmin ||sum_i w_i c_i - target||``.

    ``context_coeffs`` has one flattened coefficient block per row.
    """
    a = np.asarray(context_coeffs, dtype=np.float64).reshape(len(context_coeffs), -1).T
    b = np.asarray(target_coeffs, dtype=np.float64).reshape(-1)
    return np.linalg.lstsq(a, b, rcond=None)[0]

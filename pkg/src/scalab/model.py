"""Token embedding, stacked attention blocks and a linear readout."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .attention import ConfigError, SCAConfig, init_sca_params, sca_forward

TASK_KINDS = ("panel", "symbolic")


@dataclass(frozen=True)
class ModelConfig:
    sca: SCAConfig = field(default_factory=SCAConfig)
    layers: int = 1
    input_dim: int = 16
    use_ffn: bool = False
    ffn_hidden: int | None = None
    use_positional: bool = False
    readout_dim: int = 16
    task_kind: str = "panel"
    # None: residual connections exactly when there is more than one layer
    residual: bool | None = None
    embed_projection: bool = True
    readout_projection: bool = True
    readout_bias: bool = True
    zero_masked_positions: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.input_dim <= 0 or self.readout_dim <= 0:
            raise ConfigError("input_dim and readout_dim must be positive")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"task_kind must be one of {TASK_KINDS}")
        if not self.embed_projection and self.input_dim != self.sca.d:
            raise ConfigError("identity embedding needs input_dim == d")
        if not self.readout_projection and self.readout_dim != self.sca.d:
            raise ConfigError("identity readout needs readout_dim == d")
        if self.ffn_hidden is not None and self.ffn_hidden <= 0:
            raise ConfigError("ffn_hidden must be positive")

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 4 * self.sca.d

    @property
    def use_residual(self) -> bool:
        return self.layers > 1 if self.residual is None else self.residual

    @property
    def n_tokens(self) -> int:
        return self.sca.n_tokens


def toy_panel_config(sigma: str = "prox", transfer: bool = True, **overrides) -> ModelConfig:
    """One attention layer on raw 16-pixel quadrant tokens, no FFN."""
    sca = SCAConfig(d=16, heads=1, tasks=9, tokens_per_task=4, sigma=sigma, xi=0.03, transfer=transfer)
    return replace(ModelConfig(sca=sca, layers=1, input_dim=16, readout_dim=16, task_kind="panel"), **overrides)


def symbolic_config(sigma: str = "prox", transfer: bool = True, layers: int = 2, d: int = 64, heads: int = 4,
                    **overrides) -> ModelConfig:
    sca = SCAConfig(d=d, heads=heads, tasks=3, tokens_per_task=3, sigma=sigma, xi=0.03, transfer=transfer,
                    scale_logits=True)
    base = ModelConfig(sca=sca, layers=layers, input_dim=32, use_ffn=True, use_positional=True,
                       readout_dim=32, task_kind="symbolic")
    return replace(base, **overrides)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic parameters for ``(config, seed)``; insertion order is the canonical order."""
    rng = np.random.default_rng(seed)
    d = config.sca.d
    params: dict[str, np.ndarray] = {}
    if config.embed_projection:
        params["embed.w"] = _uniform(rng, config.input_dim, (config.input_dim, d))
    if config.use_positional:
        params["embed.pos"] = _uniform(rng, d, (config.n_tokens, d))
    for layer in range(config.layers):
        for name, value in init_sca_params(config.sca, rng).items():
            params[f"layers.{layer}.attn.{name}"] = value
        if config.use_ffn:
            params[f"layers.{layer}.ffn.w1"] = _uniform(rng, d, (d, config.hidden))
            params[f"layers.{layer}.ffn.b1"] = np.zeros((1, config.hidden))
            params[f"layers.{layer}.ffn.w2"] = _uniform(rng, config.hidden, (config.hidden, d))
            params[f"layers.{layer}.ffn.b2"] = np.zeros((1, d))
    if config.readout_projection:
        params["readout.w"] = _uniform(rng, d, (d, config.readout_dim))
        if config.readout_bias:
            params["readout.b"] = np.zeros((1, config.readout_dim))
    return params


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count of scalar parameters produced by :func:`init_model`."""
    s = config.sca
    d, hid = s.d, config.hidden
    attn = 4 * d * s.head_dim * s.heads if s.factored else 2 * d * d * s.heads
    if s.transfer:
        attn += (s.heads if s.per_head_lambda else 1) * (s.tasks - 1)
    if s.sigma == "prox" and s.xi_learnable:
        attn += 1
    ffn = (d * hid + hid + hid * d + d) if config.use_ffn else 0
    total = config.layers * (attn + ffn)
    if config.embed_projection:
        total += config.input_dim * d
    if config.use_positional:
        total += config.n_tokens * d
    if config.readout_projection:
        total += d * config.readout_dim + (config.readout_dim if config.readout_bias else 0)
    return total


def layer_params(params, layer: int, part: str = "attn") -> dict:
    prefix = f"layers.{layer}.{part}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def embed_tokens(raw, params, config: ModelConfig, position_mask=None):
    """Project raw tokens to width ``d`` and add positions.

    ``position_mask`` (``N x 1`` of 0/1) zeroes the positional vectors of
    masked tokens when ``zero_masked_positions`` is set.
    """
    if nx.value_of(raw).shape[-1] != config.input_dim:
        raise nx.ShapeError(f"raw token width {nx.value_of(raw).shape[-1]} != input_dim {config.input_dim}")
    x = nx.matmul(raw, params["embed.w"]) if config.embed_projection else raw
    if config.use_positional:
        pos = params["embed.pos"]
        if config.zero_masked_positions and position_mask is not None:
            pos = nx.hadamard(pos, np.broadcast_to(position_mask, nx.value_of(pos).shape).copy())
        x = nx.add(x, pos)
    return x


def _ffn(x, p):
    h = nx.relu(nx.add(nx.matmul(x, p["w1"]), p["b1"]))
    return nx.add(nx.matmul(h, p["w2"]), p["b2"])


def model_forward(raw, params, config: ModelConfig, position_mask=None):
    """Returns ``(outputs, traces)`` with one :class:`AttentionTrace` per layer."""
    if nx.value_of(raw).shape[-2] != config.n_tokens:
        raise nx.ShapeError(f"expected {config.n_tokens} tokens, got {nx.value_of(raw).shape[-2]}")
    x = embed_tokens(raw, params, config, position_mask)
    traces = []
    for layer in range(config.layers):
        z, trace = sca_forward(x, layer_params(params, layer), config.sca)
        traces.append(trace)
        x = nx.add(x, z) if config.use_residual else z
        if config.use_ffn:
            f = _ffn(x, layer_params(params, layer, "ffn"))
            x = nx.add(x, f) if config.use_residual else f
    if config.readout_projection:
        x = nx.matmul(x, params["readout.w"])
        if config.readout_bias:
            x = nx.add(x, params["readout.b"])
    return x, traces


# --- checkpoint file -------------------------------------------------------

CHECKPOINT_MAGIC = b"SCA1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Model config, parameters and optimizer state needed to resume a run."""

    model_config: ModelConfig
    params: dict[str, np.ndarray]
    train_config: object = None
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    seed: int = 0
    epoch: int = 0


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = _pack_str(name) + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    from .configfile import dump_config

    meta = {"checkpoint.seed": ckpt.seed, "checkpoint.epoch": ckpt.epoch, "checkpoint.adam_step": ckpt.adam_step}
    text = dump_config(ckpt.model_config, ckpt.train_config, extra=meta)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_str(text)]
    for name, arr in ckpt.params.items():
        chunks.append(_tensor_bytes(f"param/{name}", arr))
    for name, arr in ckpt.adam_m.items():
        chunks.append(_tensor_bytes(f"adam_m/{name}", arr))
    for name, arr in ckpt.adam_v.items():
        chunks.append(_tensor_bytes(f"adam_v/{name}", arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    from .configfile import parse_config

    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    model_cfg, train_cfg, extra = parse_config(r.string(), allow_extra=("checkpoint.",))
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    while r.pos < len(r.data):
        full = r.string()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        kind, _, name = full.partition("/")
        if kind not in groups:
            raise CheckpointError(f"unknown tensor group {kind!r}")
        groups[kind][name] = arr
    return Checkpoint(
        model_config=model_cfg,
        params=groups["param"],
        train_config=train_cfg,
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        adam_step=int(extra.get("checkpoint.adam_step", 0)),
        seed=int(extra.get("checkpoint.seed", 0)),
        epoch=int(extra.get("checkpoint.epoch", 0)),
    )

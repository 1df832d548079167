"""Spatial-temporal graph convolution encoder.

Each block is ``spatial_gcn -> BN -> ReLU -> temporal_conv -> BN -> dropout``,
added to a residual branch and passed through a ReLU. Performers are encoded
as independent streams sharing all weights and batch-norm statistics, then
stacked back into a (B, D, T', U, M) feature map.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor
from .topology import SAMPLING_STRATEGIES, SkeletonGraph, TopologySet, build_topology

DEFAULT_CHANNELS = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
DEFAULT_STRIDES = (1, 1, 1, 1, 2, 1, 1, 2, 1, 1)


class ConfigError(ContractError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    strides: tuple[int, ...] = DEFAULT_STRIDES
    in_channels: int = 3
    kernel_groups: int = 1
    sampling_strategy: str = "both"
    dropout: float = 0.5
    batch_norm: bool = True
    input_norm: bool = True
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ConfigError("channels and strides must be non-empty and of equal length")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigError("temporal strides must be 1 or 2")
        if self.sampling_strategy not in SAMPLING_STRATEGIES:
            raise ConfigError(f"unknown sampling strategy {self.sampling_strategy!r}")
        if self.kernel_groups < 1:
            raise ConfigError("kernel_groups must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def out_frames(self, frames: int) -> int:
        for s in self.strides:
            frames = -(-frames // s)
        return frames

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d


def expand_topology(topo: TopologySet, kernel_groups: int) -> np.ndarray:
    """(K_S, U, U) normalised matrices, each family repeated per kernel group."""
    return np.concatenate([topo.normalized] * kernel_groups, axis=0)


def init_encoder_params(config: EncoderConfig, topo: TopologySet, rng: np.random.Generator) -> tuple[dict, dict]:
    """Parameters (name -> Tensor) and batch-norm buffers (name -> ndarray)."""
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    k = topo.k * config.kernel_groups
    u = topo.raw.shape[1]

    def bn(name, shape):
        params[f"{name}.gamma"] = Tensor(np.ones(shape), requires_grad=True)
        params[f"{name}.beta"] = Tensor(np.zeros(shape), requires_grad=True)
        buffers[f"{name}.mean"] = np.zeros(shape, dtype=T.default_dtype())
        buffers[f"{name}.var"] = np.ones(shape, dtype=T.default_dtype())

    if config.input_norm:
        bn("data_bn", (config.in_channels, u))
    c_in = config.in_channels
    for i, (c_out, stride) in enumerate(zip(config.channels, config.strides)):
        p = f"block{i}"
        params[f"{p}.gcn.W"] = Tensor(rng.normal(0, np.sqrt(2.0 / (c_in * k)), (k, c_out, c_in)), requires_grad=True)
        params[f"{p}.gcn.E"] = Tensor(np.ones((k, u, u)), requires_grad=True)
        params[f"{p}.gcn.b"] = Tensor(np.zeros(c_out), requires_grad=True)
        params[f"{p}.tcn.W"] = Tensor(rng.normal(0, np.sqrt(2.0 / (3 * c_out)), (c_out, c_out, 3)), requires_grad=True)
        params[f"{p}.tcn.b"] = Tensor(np.zeros(c_out), requires_grad=True)
        if config.batch_norm:
            bn(f"{p}.bn1", (c_out,))
            bn(f"{p}.bn2", (c_out,))
        if config.residual and i > 0 and (c_in != c_out or stride != 1):
            params[f"{p}.res.W"] = Tensor(rng.normal(0, np.sqrt(2.0 / c_in), (c_out, c_in)), requires_grad=True)
            params[f"{p}.res.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            if config.batch_norm:
                bn(f"{p}.res.bn", (c_out,))
        c_in = c_out
    return params, buffers


def spatial_gcn(f_in: Tensor, adjacency: np.ndarray, W: Tensor, E: Tensor, b: Tensor | None = None) -> Tensor:
    """``sum_k W_k (f_in x (A_k * E_k))`` applied at every frame.

    ``f_in`` is (N, C', T, U); ``adjacency`` and ``E`` are (K, U, U) with row =
    receiving joint; ``W`` is (K, C'', C'). Returns (N, C'', T, U).
    """
    if W.shape[0] != adjacency.shape[0] or E.shape != adjacency.shape:
        raise ConfigError(
            f"{adjacency.shape[0]} adjacency matrices but W has {W.shape[0]} and E has shape {E.shape}"
        )
    masked = T.mul(Tensor(adjacency), E)
    out = T.graph_conv(f_in, masked, W)
    if b is not None:
        out = out + T.reshape(b, (1, -1, 1, 1))
    return out


def temporal_conv(f_in: Tensor, W: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Width-3 convolution along time, padding 1 (see :func:`alcagcn.tensor.conv_time`)."""
    return T.conv_time(f_in, W, b, stride)


class _Ctx:
    def __init__(self, params, buffers, training, rng):
        self.params = params
        self.buffers = buffers
        self.training = training
        self.rng = rng

    def bn(self, x: Tensor, name: str, axes) -> Tensor:
        return T.batch_norm(
            x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], axes,
            self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"], self.training,
        )


def encode_streams(x: np.ndarray | Tensor, config: EncoderConfig, adjacency: np.ndarray, params: dict,
                   buffers: dict, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Encode a stack of single-performer streams (N, C, T, U) -> (N, D, T', U)."""
    ctx = _Ctx(params, buffers, training, rng)
    h = T.as_tensor(x)
    if config.input_norm:
        h = ctx.bn(h, "data_bn", (0, 2))
    c_in = config.in_channels
    for i, (c_out, stride) in enumerate(zip(config.channels, config.strides)):
        p = f"block{i}"
        y = spatial_gcn(h, adjacency, params[f"{p}.gcn.W"], params[f"{p}.gcn.E"], params[f"{p}.gcn.b"])
        if config.batch_norm:
            y = ctx.bn(y, f"{p}.bn1", (0, 2, 3))
        y = T.relu(y)
        y = temporal_conv(y, params[f"{p}.tcn.W"], params[f"{p}.tcn.b"], stride)
        if config.batch_norm:
            y = ctx.bn(y, f"{p}.bn2", (0, 2, 3))
        y = T.dropout(y, config.dropout, rng, training)
        if config.residual and i > 0:
            if f"{p}.res.W" in params:
                r = h[:, :, ::stride] if stride > 1 else h
                r = T.conv1x1(r, params[f"{p}.res.W"], params[f"{p}.res.b"])
                if config.batch_norm:
                    r = ctx.bn(r, f"{p}.res.bn", (0, 2, 3))
            else:
                r = h
            y = y + r
        h = T.relu(y)
        c_in = c_out
    return h


def encode(x: np.ndarray, performer_mask: np.ndarray, config: EncoderConfig, adjacency: np.ndarray,
           params: dict, buffers: dict, training: bool = False, rng: np.random.Generator | None = None,
           skip_absent: bool = True) -> Tensor:
    """Encode preprocessed sequences.

    ``x`` is (B, C, T, U, M) and ``performer_mask`` (B, M). Each performer is
    encoded as its own stream; absent performers are skipped (their features
    are zero) unless ``skip_absent`` is false. Returns (B, D, T', U, M).
    """
    x = np.asarray(x)
    if x.ndim != 5 or x.shape[1] != config.in_channels or x.shape[3] != adjacency.shape[1]:
        raise ContractError(f"expected input (B, {config.in_channels}, T, {adjacency.shape[1]}, M), got {x.shape}")
    b, c, t, u, m = x.shape
    streams = x.transpose(0, 4, 1, 2, 3).reshape(b * m, c, t, u)
    valid = np.asarray(performer_mask, dtype=bool).reshape(b * m)
    if not skip_absent:
        valid = np.ones_like(valid)
    if not valid.any():
        raise ContractError("no performer present in the batch")
    rows = np.flatnonzero(valid)
    h = encode_streams(streams[rows].astype(T.default_dtype()), config, adjacency, params, buffers, training, rng)
    if len(rows) != b * m:
        h = T.scatter_rows(h, rows, b * m)
    d, t2 = h.shape[1], h.shape[2]
    h = T.reshape(h, (b, m, d, t2, u))
    return T.transpose(h, (0, 2, 3, 4, 1))


def count_parameters(params: dict, prefix: str = "") -> int:
    return int(sum(p.data.size for k, p in params.items() if k.startswith(prefix)))

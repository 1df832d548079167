"""The full metric learner: encoder, comparing-unit pooling and attention head.

Checkpoint layout (little endian)::

    b"ALCK" | u16 version | u32 config length | config JSON
    u32 entry count
    per entry: u16 name length | name | u8 kind (0 param, 1 buffer) | u8 itemsize (4/8)
               u8 ndim | u32 dims... | payload
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, encode, expand_topology, init_encoder_params
from .representation import CONSTRAINTS, DIVISIONS, adl_transform, global_embedding, init_adl_params, pool_units
from .tensor import ContractError, Tensor
from .topology import SkeletonGraph, build_topology, ntu_graph

CKPT_MAGIC = b"ALCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    d_emb: int = 256
    division: str = "both"
    constraints: str = "full"
    head_scale: float = 1.0
    skip_absent: bool = True

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig(**self.encoder))
        if self.division not in DIVISIONS:
            raise ContractError(f"unknown division {self.division!r}")
        if self.constraints not in CONSTRAINTS:
            raise ContractError(f"unknown constraints {self.constraints!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_ablation(self, sampling_strategy: str | None = None, division: str | None = None,
                      constraints: str | None = None) -> "ModelConfig":
        enc = self.encoder if sampling_strategy is None else replace(self.encoder, sampling_strategy=sampling_strategy)
        return replace(self, encoder=enc, division=division or self.division,
                       constraints=constraints or self.constraints)


class Model:
    """Parameters, batch-norm buffers and the forward pass to representations G'."""

    def __init__(self, config: ModelConfig, graph: SkeletonGraph | None = None, seed: int = 0):
        self.config = config
        self.graph = graph or ntu_graph()
        self.topology = build_topology(self.graph, config.encoder.sampling_strategy)
        self.adjacency = expand_topology(self.topology, config.encoder.kernel_groups)
        rng = np.random.default_rng(seed)
        self.params, self.buffers = init_encoder_params(config.encoder, self.topology, rng)
        self.params.update(init_adl_params(config.encoder.out_channels, config.d_emb, rng, config.head_scale))
        self.extra: dict[str, Tensor] = {}

    # -- forward ---------------------------------------------------------------
    def encode(self, x: np.ndarray, performer_mask: np.ndarray, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        return encode(x, performer_mask, self.config.encoder, self.adjacency, self.params, self.buffers,
                      training, rng, self.config.skip_absent)

    def represent(self, x: np.ndarray, performer_mask: np.ndarray, training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
        """Representations G' (B, J, D) and unit validity (B, J) for preprocessed inputs."""
        f = self.encode(x, performer_mask, training, rng)
        G, unit_mask = pool_units(f, self.graph, self.config.division, performer_mask)
        f_glob = None if self.config.constraints == "no_global" else global_embedding(f, performer_mask)
        return adl_transform(G, unit_mask, f_glob, self.params, self.config.constraints), unit_mask

    def represent_numpy(self, x: np.ndarray, performer_mask: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode representations, computed in chunks without recording gradients."""
        outs, masks = [], []
        with T.no_grad():
            for lo in range(0, len(x), batch_size):
                g, m = self.represent(x[lo:lo + batch_size], performer_mask[lo:lo + batch_size], training=False)
                outs.append(g.data)
                masks.append(m)
        return np.concatenate(outs), np.concatenate(masks)

    # -- parameter management ----------------------------------------------------
    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.extra)
        return out

    def zero_grad(self) -> None:
        for p in self.trainable().values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param:{k}": v.data.copy() for k, v in self.trainable().items()}
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, arr in state.items():
            kind, name = key.split(":", 1)
            if kind == "param":
                target = self.params.get(name)
                if target is None:
                    target = self.extra.get(name)
                if target is None:
                    self.extra[name] = Tensor(arr.copy(), requires_grad=True)
                    continue
                if target.shape != arr.shape:
                    raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {target.shape}")
                target.data[...] = arr
            elif kind == "buffer":
                self.buffers[name][...] = arr
            else:
                raise CheckpointError(f"unknown state entry {key!r}")

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def dumps_checkpoint(model: Model, extra_meta: dict | None = None) -> bytes:
    meta = {"model": model.config.to_dict(), "graph": model.graph.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(blob)), blob]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for key in sorted(state):
        arr = np.ascontiguousarray(state[key])
        kind, name = key.split(":", 1)
        itemsize = 8 if arr.dtype == np.float64 else 4
        arr = arr.astype("<f8" if itemsize == 8 else "<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BBB", 0 if kind == "param" else 1, itemsize, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_checkpoint(blob: bytes) -> tuple[Model, dict]:
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not an ALCA checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    version, n = struct.unpack_from("<HI", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(body[off:off + n].decode())
    off += n
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + ln].decode()
        off += ln
        kind, itemsize, ndim = struct.unpack_from("<BBB", body, off)
        off += 3
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dtype = "<f8" if itemsize == 8 else "<f4"
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype=dtype, count=size, offset=off).reshape(shape).copy()
        off += itemsize * size
        state[f"{'param' if kind == 0 else 'buffer'}:{name}"] = arr
    config = ModelConfig.from_dict(meta["model"])
    graph = SkeletonGraph.from_dict(meta["graph"])
    model = Model(config, graph)
    model.load_state(state)
    return model, meta


def save_checkpoint(model: Model, path: str | Path, extra_meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(model, extra_meta))


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    return loads_checkpoint(Path(path).read_bytes())

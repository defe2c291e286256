"""Fusion -> encoder -> decoder -> bare-conv-head network.

Two single-channel inputs (offline MFLPD and offline nodal power) each pass
through their own conv+BN+ReLU branch; the branch outputs are concatenated and
fed to a three-stage encoder whose max-pools record argmax offsets. The
decoder mirrors the encoder, unpooling with those offsets innermost-first, and
a final convolution without normalization or activation emits the corrected
MFLPD array at the input resolution.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .engine import (
    BatchNormState,
    PoolIndices,
    Tensor,
    as_dtype,
    batchnorm,
    concat_channels,
    conv3d,
    max_unpool3d,
    maxpool3d,
    relu,
)
from .errors import ConfigError, DimensionError, FormatError

MAGIC = b"NBNWGT01"
WEIGHTS_FORMAT_VERSION = 1
N_STAGES = 3
TOTAL_STAGE_CONVS = 7


@dataclass
class ModelConfig:
    in_shape: tuple = (32, 32, 16)
    fusion_channels: int = 8
    fusion_convs: int = 2
    stage_channels: tuple = (16, 32, 64)
    stage_convs: tuple = (2, 2, 3)
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        self.in_shape = tuple(int(v) for v in self.in_shape)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        self.stage_convs = tuple(int(v) for v in self.stage_convs)

    def violations(self) -> list[str]:
        bad = []
        if len(self.in_shape) != 3:
            bad.append(f"in_shape must have 3 extents, got {self.in_shape}")
        elif any(n <= 0 or n % 2 ** N_STAGES for n in self.in_shape):
            bad.append(f"in_shape extents must be positive multiples of 8, got {self.in_shape}")
        if len(self.stage_channels) != N_STAGES:
            bad.append(f"stage_channels must have {N_STAGES} entries")
        if len(self.stage_convs) != N_STAGES:
            bad.append(f"stage_convs must have {N_STAGES} entries")
        if sum(self.stage_convs) != TOTAL_STAGE_CONVS:
            bad.append(f"sum(stage_convs) must be {TOTAL_STAGE_CONVS}, got {sum(self.stage_convs)}")
        if any(n < 1 for n in self.stage_convs):
            bad.append("every stage needs at least one conv")
        if any(c < 1 for c in self.stage_channels):
            bad.append("stage_channels must be positive")
        if self.fusion_channels < 1 or self.fusion_convs < 1:
            bad.append("fusion_channels and fusion_convs must be >= 1")
        if self.dtype not in ("f32", "f64"):
            bad.append(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")
        return bad

    def validate(self) -> None:
        bad = self.violations()
        if bad:
            raise ConfigError("invalid ModelConfig: " + "; ".join(bad))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("in_shape", "stage_channels", "stage_convs"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class ConvBlock:
    """conv3d -> batchnorm -> relu."""

    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState = field(repr=False)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        y = conv3d(x, self.weight, self.bias)
        return relu(batchnorm(y, self.gamma, self.beta, self.bn, mode))


class BiasCorrectionModel:
    def __init__(self, config: ModelConfig, fusion_a, fusion_b, encoder, decoder,
                 head_weight: Tensor, head_bias: Tensor):
        self.config = config
        self.fusion_a: list[ConvBlock] = fusion_a
        self.fusion_b: list[ConvBlock] = fusion_b
        self.encoder: list[list[ConvBlock]] = encoder
        # decoder[s] mirrors encoder[s]; runs from s = N_STAGES-1 down to 0
        self.decoder: list[list[ConvBlock]] = decoder
        self.head_weight = head_weight
        self.head_bias = head_bias

    def _blocks(self):
        for i, blk in enumerate(self.fusion_a):
            yield f"fusion_a.{i}", blk
        for i, blk in enumerate(self.fusion_b):
            yield f"fusion_b.{i}", blk
        for s, stage in enumerate(self.encoder):
            for i, blk in enumerate(stage):
                yield f"encoder.{s}.{i}", blk
        for s, stage in enumerate(self.decoder):
            for i, blk in enumerate(stage):
                yield f"decoder.{s}.{i}", blk

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors in a fixed order."""
        out = {}
        for name, blk in self._blocks():
            out[f"{name}.conv.weight"] = blk.weight
            out[f"{name}.conv.bias"] = blk.bias
            out[f"{name}.bn.gamma"] = blk.gamma
            out[f"{name}.bn.beta"] = blk.beta
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, blk in self._blocks():
            out[f"{name}.bn.running_mean"] = blk.bn.running_mean
            out[f"{name}.bn.running_var"] = blk.bn.running_var
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and running statistic."""
        sd = {k: p.data.copy() for k, p in self.parameters().items()}
        sd.update({k: v.copy() for k, v in self.buffers().items()})
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        expected = list(params) + list(self.buffers())
        for name in expected:
            if name not in sd:
                raise DimensionError(f"state dict is missing {name}")
        for name, p in params.items():
            if sd[name].shape != p.shape:
                raise DimensionError(f"parameter {name}: shape {sd[name].shape} != {p.shape}")
            p.data[...] = sd[name]
        for name, blk in self._blocks():
            blk.bn.running_mean = np.array(sd[f"{name}.bn.running_mean"], dtype=blk.weight.dtype)
            blk.bn.running_var = np.array(sd[f"{name}.bn.running_var"], dtype=blk.weight.dtype)

    def fuse(self, mflpd_off, np_off, mode: str = "train") -> Tensor:
        a, b = self._inputs(mflpd_off, np_off)
        for blk in self.fusion_a:
            a = blk(a, mode)
        for blk in self.fusion_b:
            b = blk(b, mode)
        return concat_channels(a, b)

    def forward(self, mflpd_off, np_off, mode: str = "train",
                index_hook: Callable[[int, PoolIndices], PoolIndices] | None = None) -> Tensor:
        """Predict online MFLPD, shape (N, 1, H, W, D).

        ``index_hook(stage, indices)`` may replace the pool indices of a stage
        before the decoder consumes them; it exists for inspection and tests.
        """
        x = self.fuse(mflpd_off, np_off, mode)
        pools: list[tuple[PoolIndices, tuple]] = []
        for s, stage in enumerate(self.encoder):
            for blk in stage:
                x = blk(x, mode)
            shape = x.shape
            x, idx = maxpool3d(x)
            if index_hook is not None:
                idx = index_hook(s, idx)
            pools.append((idx, shape))
        for s in reversed(range(len(self.decoder))):
            idx, shape = pools.pop()
            x = max_unpool3d(x, idx, shape)
            for blk in self.decoder[s]:
                x = blk(x, mode)
        return conv3d(x, self.head_weight, self.head_bias)

    __call__ = forward

    def _inputs(self, mflpd_off, np_off) -> tuple[Tensor, Tensor]:
        dt = self.head_weight.dtype
        a = mflpd_off if isinstance(mflpd_off, Tensor) else Tensor(mflpd_off, dtype=dt)
        b = np_off if isinstance(np_off, Tensor) else Tensor(np_off, dtype=dt)
        for name, t in (("mflpd_off", a), ("np_off", b)):
            if t.ndim != 5 or t.shape[1] != 1:
                raise DimensionError(f"{name} must be (N,1,H,W,D), got {t.shape}")
        if a.shape != b.shape:
            raise DimensionError(f"input shapes differ: {a.shape} vs {b.shape}")
        for ax, n in zip("HWD", a.shape[2:]):
            if n % 2 ** N_STAGES:
                raise DimensionError(f"axis {ax} extent {n} is not divisible by 8")
        return a, b


def _kaiming_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(2.0) * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_model(config: ModelConfig | None = None) -> BiasCorrectionModel:
    """Construct and deterministically initialize a model from ``config``."""
    config = config or ModelConfig()
    config.validate()
    dt = as_dtype(config.dtype)
    rng = np.random.default_rng(config.seed)

    def block(cin, cout):
        return ConvBlock(
            weight=Tensor(_kaiming_uniform(rng, (cout, cin, 3, 3, 3), dt), requires_grad=True),
            bias=Tensor(np.zeros(cout, dt), requires_grad=True),
            gamma=Tensor(np.ones(cout, dt), requires_grad=True),
            beta=Tensor(np.zeros(cout, dt), requires_grad=True),
            bn=BatchNormState.initialized(cout, dt),
        )

    fc = config.fusion_channels
    fusion = []
    for _ in range(2):
        fusion.append([block(1 if i == 0 else fc, fc) for i in range(config.fusion_convs)])

    stage_in = [2 * fc] + list(config.stage_channels[:-1])
    encoder = []
    for s, (c, n) in enumerate(zip(config.stage_channels, config.stage_convs)):
        encoder.append([block(stage_in[s] if i == 0 else c, c) for i in range(n)])
    decoder = [None] * N_STAGES
    for s in reversed(range(N_STAGES)):
        c, n = config.stage_channels[s], config.stage_convs[s]
        decoder[s] = [block(c, stage_in[s] if i == n - 1 else c) for i in range(n)]

    head_w = Tensor(_kaiming_uniform(rng, (1, stage_in[0], 3, 3, 3), dt), requires_grad=True)
    head_b = Tensor(np.zeros(1, dt), requires_grad=True)
    model = BiasCorrectionModel(config, fusion[0], fusion[1], encoder, decoder, head_w, head_b)
    _check_mirror(model)
    return model


def _check_mirror(model: BiasCorrectionModel) -> None:
    enc = [(b.in_channels, b.out_channels) for st in model.encoder for b in st]
    dec = [(b.in_channels, b.out_channels) for st in reversed(model.decoder) for b in st]
    if len(enc) != len(dec) or [tuple(reversed(p)) for p in reversed(enc)] != dec:
        raise ConfigError(f"decoder {dec} does not mirror encoder {enc}")
    if model.head_weight.shape[0] != 1:
        raise ConfigError("head must emit exactly one channel")


def _manifest(model: BiasCorrectionModel) -> tuple[list[dict], list[np.ndarray]]:
    entries, blobs = [], []
    offset = 0
    tensors = [(k, "param", p.data) for k, p in model.parameters().items()]
    tensors += [(k, "buffer", v) for k, v in model.buffers().items()]
    for name, kind, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        entries.append({
            "name": name, "kind": kind, "shape": list(arr.shape),
            "dtype": "f32" if arr.dtype == np.float32 else "f64",
            "offset": offset, "nbytes": arr.nbytes,
        })
        blobs.append(arr)
        offset += arr.nbytes
    return entries, blobs


def save_weights(model: BiasCorrectionModel, path) -> None:
    """Write the binary weights file.

    Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header
    (format version, config, ordered manifest), then raw little-endian blobs
    in manifest order. Offsets in the manifest are relative to the first blob.
    """
    entries, blobs = _manifest(model)
    header = json.dumps(
        {"format_version": WEIGHTS_FORMAT_VERSION, "config": model.config.to_dict(),
         "params": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in blobs:
            fh.write(arr.tobytes())


def read_weights_file(path) -> tuple[ModelConfig, list[dict], dict[str, np.ndarray]]:
    """Parse and fully validate a weights file without building a model."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a weights file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    if header.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    try:
        config = ModelConfig.from_dict(header["config"])
        entries = header["params"]
    except (KeyError, TypeError, ConfigError) as e:
        raise FormatError(f"{path}: bad header ({e})") from None
    body = raw[16 + hlen:]
    total = sum(e["nbytes"] for e in entries)
    if len(body) != total:
        raise FormatError(f"{path}: expected {total} blob bytes, found {len(body)}")
    arrays = {}
    for e in entries:
        dt = np.dtype("<f4") if e["dtype"] == "f32" else np.dtype("<f8")
        n = int(np.prod(e["shape"]))
        if n * dt.itemsize != e["nbytes"]:
            raise FormatError(f"{path}: manifest entry {e['name']} is inconsistent")
        arr = np.frombuffer(body, dtype=dt, count=n, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return config, entries, arrays


def load_weights(path) -> BiasCorrectionModel:
    """Rebuild the model described by a weights file."""
    config, _, arrays = read_weights_file(path)
    model = build_model(config)
    _assign(model, arrays)
    return model


def load_weights_into(model: BiasCorrectionModel, path) -> None:
    """Load a weights file into an existing model, checking every shape first."""
    _, _, arrays = read_weights_file(path)
    _assign(model, arrays)


def _assign(model: BiasCorrectionModel, arrays: dict[str, np.ndarray]) -> None:
    expected = {k: p.shape for k, p in model.parameters().items()}
    expected.update({k: v.shape for k, v in model.buffers().items()})
    for name, shape in expected.items():
        if name not in arrays:
            raise DimensionError(f"weights file lacks parameter {name}")
        if arrays[name].shape != shape:
            raise DimensionError(
                f"parameter {name}: file has shape {arrays[name].shape}, model expects {shape}")
    extra = set(arrays) - set(expected)
    if extra:
        raise DimensionError(f"weights file has unexpected parameter {sorted(extra)[0]}")
    dt = model.head_weight.dtype
    model.load_state_dict({k: v.astype(dt) for k, v in arrays.items()})

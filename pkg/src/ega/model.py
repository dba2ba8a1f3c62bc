"""The CAM network with a main and an auxiliary batch-norm branch.

Convolution and head weights are shared; every batch-norm layer keeps two
independent sets of affine parameters and running statistics. Clean data
goes through ``Branch.MAIN``, adversarial data through ``Branch.AUX``.
Only the main branch is used at inference.
"""

from __future__ import annotations

import contextlib
import enum
import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fileio import atomic_write
from .errors import CheckpointFormatError, ConfigError, DimensionError, LabelError

CHECKPOINT_MAGIC = b"EGA1"
CHECKPOINT_VERSION = 1


class Branch(str, enum.Enum):
    MAIN = "main"
    AUX = "auxiliary"


@dataclass(frozen=True)
class ArchConfig:
    """Architecture descriptor.

    ``stages`` lists conv widths per stage; a 2x2 max-pool separates
    consecutive stages. Every conv is 3x3/pad 1 followed by BN and ReLU.
    """

    num_classes: int = 5
    input_size: int = 64
    in_channels: int = 3
    stages: Tuple[Tuple[int, ...], ...] = ((32, 32), (64, 64), (128,))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(w) for w in s) for s in self.stages))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.stages or any(not s for s in self.stages):
            raise ConfigError("every stage needs at least one conv layer")
        if self.input_size % self.pool_factor:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by pooling factor {self.pool_factor}")

    @property
    def pool_factor(self) -> int:
        return 2 ** (len(self.stages) - 1)

    @property
    def feature_size(self) -> int:
        return self.input_size // self.pool_factor

    @property
    def num_features(self) -> int:
        return self.stages[-1][-1]

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(w for s in self.stages for w in s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{**d, "stages": tuple(tuple(s) for s in d["stages"])})


@dataclass
class ForwardOutput:
    logits: Tensor
    features: Tensor
    branch: Branch


@dataclass
class CamMap:
    """Class activation maps for a batch: ``values`` is N x H' x W'."""

    values: Tensor
    class_index: np.ndarray
    target_size: Tuple[int, int] = (64, 64)

    @property
    def source_size(self) -> Tuple[int, int]:
        return tuple(self.values.shape[-2:])


class EgaModel:
    def __init__(self, arch: ArchConfig, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]):
        self.arch = arch
        self.params = params
        self.buffers = buffers

    # -- parameter access -------------------------------------------------
    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily exclude all parameters from differentiation."""
        flags = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for k, p in self.params.items():
                p.requires_grad = flags[k]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.params.items()}
        state.update(self.buffers)
        return dict(sorted(state.items()))

    def clone(self) -> "EgaModel":
        params = {k: Tensor(p.data.copy(), requires_grad=p.requires_grad, dtype=p.dtype)
                  for k, p in self.params.items()}
        return EgaModel(self.arch, params, {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "EgaModel":
        params = {k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, dtype=dtype)
                  for k, p in self.params.items()}
        return EgaModel(self.arch, params, {k: v.astype(dtype) for k, v in self.buffers.items()})

    def branch_state(self, branch: Branch) -> Dict[str, np.ndarray]:
        tag = f".{branch.value}."
        return {k: v for k, v in self.state_dict().items() if tag in k}

    def reset_auxiliary(self, value: Optional[float] = None):
        """Overwrite auxiliary BN state: copy of main, or a constant."""
        for k in list(self.params) + list(self.buffers):
            if f".{Branch.AUX.value}." not in k:
                continue
            src = k.replace(f".{Branch.AUX.value}.", f".{Branch.MAIN.value}.")
            store = self.params[k].data if k in self.params else self.buffers[k]
            ref = self.params[src].data if src in self.params else self.buffers[src]
            store[...] = ref if value is None else value

    # -- computation ------------------------------------------------------
    def batch_norm(self, x: Tensor, layer: int, branch: Branch, mode: str, update_stats: bool = True) -> Tensor:
        prefix = f"bn{layer}.{Branch(branch).value}"
        return ad.batch_norm(
            x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"],
            self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"],
            training=(mode == "train"), update_stats=update_stats, layout="NHWC")

    def forward(self, x, branch: Branch = Branch.MAIN, mode: str = "eval", update_stats: bool = True) -> ForwardOutput:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        branch = Branch(branch)
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.params["head.weight"].dtype)
        a = self.arch
        if x.ndim != 4 or x.shape[1:] != (a.in_channels, a.input_size, a.input_size):
            raise DimensionError(
                f"expected batch N x {a.in_channels} x {a.input_size} x {a.input_size}, got {x.shape}")
        # NHWC inside the backbone; features are handed back as NCHW.
        h = ad.transpose(x, (0, 2, 3, 1))
        layer = 0
        for si, stage in enumerate(a.stages):
            if si:
                h = ad.max_pool2(h, layout="NHWC")
            for _ in stage:
                h = ad.conv2d(h, self.params[f"conv{layer}.weight"], None, stride=1, pad=1, layout="NHWC")
                h = self.batch_norm(h, layer, branch, mode, update_stats)
                h = ad.relu(h)
                layer += 1
        logits = ad.linear(ad.global_avg_pool(h, layout="NHWC"), self.params["head.weight"], self.params["head.bias"])
        return ForwardOutput(logits=logits, features=ad.transpose(h, (0, 3, 1, 2)), branch=branch)

    __call__ = forward


def build_model(arch: Optional[ArchConfig] = None, seed: Optional[int] = None) -> EgaModel:
    """He-normal conv/head init from the seed; BN gamma=1, beta=0; aux BN copies main."""
    arch = arch or ArchConfig()
    if seed is not None:
        arch = ArchConfig(**{**arch.__dict__, "seed": seed})
    rng = np.random.default_rng(arch.seed)
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    cin = arch.in_channels
    for i, width in enumerate(arch.widths):
        fan_in = cin * 9
        w = rng.standard_normal((width, cin, 3, 3)) * np.sqrt(2.0 / fan_in)
        params[f"conv{i}.weight"] = Tensor(w.astype(np.float32), requires_grad=True)
        for br in Branch:
            params[f"bn{i}.{br.value}.gamma"] = Tensor(np.ones(width, np.float32), requires_grad=True)
            params[f"bn{i}.{br.value}.beta"] = Tensor(np.zeros(width, np.float32), requires_grad=True)
            buffers[f"bn{i}.{br.value}.running_mean"] = np.zeros(width, np.float32)
            buffers[f"bn{i}.{br.value}.running_var"] = np.ones(width, np.float32)
        cin = width
    k = arch.num_features
    head = rng.standard_normal((arch.num_classes, k)) * np.sqrt(2.0 / k)
    params["head.weight"] = Tensor(head.astype(np.float32), requires_grad=True)
    params["head.bias"] = Tensor(np.zeros(arch.num_classes, np.float32), requires_grad=True)
    return EgaModel(arch, params, buffers)


def compute_cam(output: ForwardOutput, model: EgaModel, class_index) -> CamMap:
    """CAM_c(h, w) = sum_k a_k^c f_k(h, w), without the head bias.

    ``class_index`` is an int (same class for the batch) or one index per
    sample. The result stays differentiable when the features are.
    """
    feats = output.features
    n, k = feats.shape[:2]
    idx = np.broadcast_to(np.asarray(class_index), (n,))
    C = model.arch.num_classes
    if not np.issubdtype(idx.dtype, np.integer) or idx.min() < 0 or idx.max() >= C:
        raise LabelError(f"class index must be in [0, {C}), got {np.asarray(class_index).tolist()}")
    weights = ad.take_rows(model.params["head.weight"], idx).reshape(n, k, 1, 1)
    values = ad.tsum(ad.mul(weights, feats), axis=1)
    size = model.arch.input_size
    return CamMap(values=values, class_index=np.array(idx, dtype=np.int64), target_size=(size, size))


# -- checkpoint I/O --------------------------------------------------------

def encode_checkpoint(arch: ArchConfig, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    desc = json.dumps({"arch": arch.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode_checkpoint(blob: bytes) -> Tuple[ArchConfig, Dict[str, np.ndarray], dict]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"checkpoint truncated at offset {pos} (need {n} bytes, have {len(blob) - pos})")
        out = blob[pos:pos + n]
        pos += n
        return out

    magic = take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    (dlen,) = struct.unpack("<I", take(4))
    at = pos
    try:
        desc = json.loads(take(dlen).decode("utf-8"))
        arch = ArchConfig.from_dict(desc["arch"])
    except CheckpointFormatError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"malformed descriptor block at offset {at}: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise CheckpointFormatError(f"trailing bytes after offset {pos}")
    return arch, arrays, desc.get("meta", {})


def save_checkpoint(model: EgaModel, path, meta: Optional[dict] = None,
                    extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    arrays = dict(model.state_dict())
    if extra:
        arrays.update(extra)
    atomic_write(path, encode_checkpoint(model.arch, arrays, meta))


def model_from_arrays(arch: ArchConfig, arrays: Dict[str, np.ndarray]) -> EgaModel:
    template = build_model(arch)
    for name, p in template.params.items():
        if name in arrays:
            if arrays[name].shape != p.shape:
                raise CheckpointFormatError(f"record {name} has shape {arrays[name].shape}, expected {p.shape}")
            p.data = arrays[name].copy()
    for name, buf in template.buffers.items():
        if name in arrays:
            if arrays[name].shape != buf.shape:
                raise CheckpointFormatError(f"record {name} has shape {arrays[name].shape}, expected {buf.shape}")
            template.buffers[name] = arrays[name].copy()
    missing = [k for k in template.state_dict() if k not in arrays]
    if any(f".{Branch.AUX.value}." not in k for k in missing):
        raise CheckpointFormatError(f"checkpoint lacks records {missing}")
    if missing:
        template.reset_auxiliary()
    return template


def read_checkpoint(path) -> Tuple[EgaModel, dict, Dict[str, np.ndarray]]:
    """Load a checkpoint with its metadata and any non-model records."""
    with open(path, "rb") as f:
        blob = f.read()
    arch, arrays, meta = decode_checkpoint(blob)
    model = model_from_arrays(arch, arrays)
    known = set(model.state_dict())
    return model, meta, {k: v for k, v in arrays.items() if k not in known}


def load_checkpoint(path) -> EgaModel:
    return read_checkpoint(path)[0]

"""Named parameter collections, the Adam optimizer, and binary
parameter checkpoints.

ParamSet keeps insertion order, so flattening, checkpoints, and
federated averaging all agree on one canonical parameter layout.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericsError

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-/]+$")

CHECKPOINT_MAGIC = b"gnodeformer-params v1\n"


class ParamSet:
    """Ordered name -> Tensor map with a canonical flat layout."""

    def __init__(self, items: dict[str, Tensor] | None = None):
        self._items: dict[str, Tensor] = {}
        if items:
            for name, tensor in items.items():
                self.add(name, tensor)

    def add(self, name: str, tensor: Tensor):
        if not _NAME_RE.match(name):
            raise ConfigError(f"bad parameter name {name!r}")
        if name in self._items:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._items[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()

    def count(self) -> int:
        """Total scalar entries across all parameters."""
        return sum(t.data.size for t in self._items.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._items.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=t.requires_grad))
        return out

    def flatten(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._items.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """New ParamSet with this set's names/shapes and data from vec."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.count(),):
            raise ConfigError(
                f"flat vector has {vec.shape}, parameter count is {self.count()}"
            )
        out = ParamSet()
        offset = 0
        for name, t in self._items.items():
            size = t.data.size
            chunk = vec[offset : offset + size].reshape(t.data.shape).copy()
            out.add(name, Tensor(chunk, requires_grad=t.requires_grad))
            offset += size
        return out


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate {self.lr} must be positive")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name}={b} outside [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")


@dataclass
class OptimizerState:
    config: AdamConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            config=self.config,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
        )


def init_optimizer(params: ParamSet, config: AdamConfig) -> OptimizerState:
    state = OptimizerState(config=config)
    for name, tensor in params.items():
        state.m[name] = np.zeros_like(tensor.data)
        state.v[name] = np.zeros_like(tensor.data)
    return state


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: OptimizerState):
    """One in-place Adam update with bias correction; epsilon is added
    after the square root. Weight decay is decoupled from the moments.

    All gradients are validated before anything mutates, so a rejected
    step leaves parameters and state untouched.
    """
    cfg = state.config
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            raise ConfigError(f"missing gradient for parameter {name!r}")
        if g.shape != tensor.data.shape:
            raise ConfigError(
                f"gradient shape {g.shape} != parameter shape {tensor.data.shape} "
                f"for {name!r}"
            )
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for {name!r}; step aborted")

    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.lr * cfg.weight_decay * tensor.data
        tensor.data -= update
    return params, state


# ---------------------------------------------------------------------------
# Checkpoints: magic line, entry count, then per entry a text line
# "name rows cols" followed by rows*cols little-endian float64 bytes.
# ---------------------------------------------------------------------------


def save_checkpoint(params: ParamSet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"{len(params)}\n".encode())
        for name, tensor in params.items():
            rows, cols = tensor.data.shape
            fh.write(f"{name} {rows} {cols}\n".encode())
            fh.write(tensor.data.astype("<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> ParamSet:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CHECKPOINT_MAGIC:
            raise DataError(
                f"{path}: not a parameter checkpoint (header {magic!r})"
            )
        try:
            n_entries = int(fh.readline())
        except ValueError as exc:
            raise DataError(f"{path}: bad entry count") from exc
        params = ParamSet()
        for _ in range(n_entries):
            header = fh.readline().decode()
            parts = header.split()
            if len(parts) != 3:
                raise DataError(f"{path}: malformed entry header {header!r}")
            name, rows, cols = parts[0], int(parts[1]), int(parts[2])
            nbytes = rows * cols * 8
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise DataError(f"{path}: truncated data for {name!r}")
            data = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
            params.add(name, Tensor(data, requires_grad=True))
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after last entry")
    return params

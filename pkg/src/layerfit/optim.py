"""In-house Adam over named parameter blocks, with moment persistence.

Parameter arrays are updated in place so that model objects holding the same
storage see every step.  Gradients arrive as a name-keyed dict; blocks
without a gradient are left untouched (their moments do not decay either, so
skipping a block is equivalent to not owning it that step).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

_MAGIC = b"HMOP"
_VERSION = 1


class OptimError(RuntimeError):
    pass


@dataclass
class OptimState:
    """Named parameter blocks plus per-block Adam moments and learning rates."""

    params: dict
    lrs: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.lrs:
                raise OptimError(f"block {name!r} has no learning rate")
            self.m.setdefault(name, np.zeros_like(p, dtype=np.float64))
            self.v.setdefault(name, np.zeros_like(p, dtype=np.float64))
            if self.m[name].shape != p.shape or self.v[name].shape != p.shape:
                raise OptimError(f"moment shape mismatch for block {name!r}")
        if self.step < 0:
            raise OptimError("step must be non-negative")


def adam_step(state: OptimState, grads: dict) -> OptimState:
    """One Adam update (bias-corrected) over the blocks present in ``grads``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, g in grads.items():
        if name not in state.params:
            raise OptimError(f"gradient for unknown block {name!r}")
        p = state.params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise OptimError(f"gradient shape {g.shape} != param shape {p.shape} "
                             f"for block {name!r}")
        bad = ~np.isfinite(g)
        if bad.any():
            idx = int(np.flatnonzero(bad.ravel())[0])
            raise OptimError(f"non-finite gradient in block {name!r} at flat index {idx}")
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= state.lrs[name] * (m / c1) / (np.sqrt(v / c2) + EPS)
    return state


def save_optim(path, state: OptimState) -> None:
    """Write step and per-block moments so a resumed run continues exactly."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQQ", _VERSION, state.step, len(state.params)))
        for name in state.params:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            shape = state.params[name].shape
            fh.write(struct.pack("<B", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}Q", *shape))
            fh.write(np.ascontiguousarray(state.m[name], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(state.v[name], dtype="<f8").tobytes())


def load_optim(path, state: OptimState) -> OptimState:
    """Restore moments and step into ``state`` (blocks must match by name/shape)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise OptimError(f"{path}: bad magic {raw[:4]!r}")
    version, step, count = struct.unpack_from("<IQQ", raw, 4)
    if version != _VERSION:
        raise OptimError(f"{path}: unsupported version {version}")
    off = 4 + 20
    seen = set()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + ln].decode()
        off += ln
        (nd,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}Q", raw, off)
        off += 8 * nd
        n = int(np.prod(shape, dtype=np.int64)) if nd else 1
        m = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        v = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        if name not in state.params:
            raise OptimError(f"{path}: unknown block {name!r}")
        if state.params[name].shape != tuple(shape):
            raise OptimError(f"{path}: block {name!r} shape {tuple(shape)} does not "
                             f"match params {state.params[name].shape}")
        state.m[name] = m.copy()
        state.v[name] = v.copy()
        seen.add(name)
    missing = set(state.params) - seen
    if missing:
        raise OptimError(f"{path}: missing moments for blocks {sorted(missing)}")
    state.step = step
    return state

"""Per-frame non-rigid displacement fields: a small MLP, fully in-house.

Each field maps a canonical point plus a per-frame latent code to a 3D
displacement. Points enter through a sinusoidal frequency encoding; hidden
layers use softplus; the final layer starts at exactly zero so a fresh
field is the identity map. Displacements pass through a smooth norm clamp
(``m tanh(|d|/m) d/|d|``) so stage-2 refinement cannot tear the mesh.

Forward and backward passes are written out by hand against the cached
activations; gradients cover the network parameters, the latent codes, and
the input points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODELS_MAGIC = b"HMNR"
LATENTS_MAGIC = b"HMLT"
IO_VERSION = 1


class ModelError(ValueError):
    """Invalid field configuration or checkpoint."""


def _encode(points: np.ndarray, octaves: int) -> np.ndarray:
    """Frequency features: the point itself plus sin/cos at doubling rates."""
    feats = [points]
    for o in range(octaves):
        w = 2.0 ** o
        feats.append(np.sin(w * points))
        feats.append(np.cos(w * points))
    return np.concatenate(feats, axis=1)


def _encode_backward(points: np.ndarray, octaves: int, d_feat: np.ndarray) -> np.ndarray:
    d_points = d_feat[:, :3].copy()
    col = 3
    for o in range(octaves):
        w = 2.0 ** o
        d_points += d_feat[:, col:col + 3] * (w * np.cos(w * points))
        col += 3
        d_points += d_feat[:, col:col + 3] * (-w * np.sin(w * points))
        col += 3
    return d_points


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@dataclass(eq=False)
class NonRigidGrads:
    """Gradient blocks returned by a backward pass."""

    d_weights: list
    d_biases: list
    d_latent: np.ndarray
    d_points: np.ndarray


@dataclass(eq=False)
class NonRigidField:
    """Displacement MLP with one latent code per frame.

    ``weights[i]`` has shape (fan_in, fan_out); the last layer is created
    all-zero so the initial displacement is identically zero everywhere.
    """

    weights: list
    biases: list
    latents: np.ndarray
    octaves: int = 6
    clamp: float = 0.05
    _caches: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, n_frames: int, seed: int, octaves: int = 6, latent_dim: int = 16,
               hidden: int = 128, n_hidden_layers: int = 3, clamp: float = 0.05) -> "NonRigidField":
        rng = np.random.default_rng(seed)
        in_dim = 3 * (1 + 2 * octaves) + latent_dim
        dims = [in_dim] + [hidden] * n_hidden_layers + [3]
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            if b == 3 and a == dims[-2]:
                weights.append(np.zeros((a, b)))
            else:
                weights.append(rng.normal(0.0, np.sqrt(2.0 / a), (a, b)))
            biases.append(np.zeros(b))
        return cls(weights, biases, np.zeros((n_frames, latent_dim)), octaves, clamp)

    @property
    def n_frames(self) -> int:
        return len(self.latents)

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]

    def forward(self, points: np.ndarray, frame: int):
        """Displaced points for one frame; returns (points + clamp(net), cache)."""
        if not 0 <= frame < self.n_frames:
            raise ModelError(f"frame {frame} has no latent code (have {self.n_frames})")
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        enc = _encode(points, self.octaves)
        h = self.latents[frame]
        z = np.concatenate([enc, np.broadcast_to(h, (len(points), len(h)))], axis=1)
        pre, post = [], [z]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = post[-1] @ w + b
            pre.append(a)
            post.append(_softplus(a) if i < len(self.weights) - 1 else a)
        raw = post[-1]
        r = np.linalg.norm(raw, axis=1)
        m = self.clamp
        safe = np.maximum(r, 1e-12)
        scale = np.where(r > 1e-12, m * np.tanh(safe / m) / safe, 1.0)
        disp = scale[:, None] * raw
        cache = (points, frame, pre, post, raw, r, scale)
        return points + disp, cache

    def backward(self, cache, d_out: np.ndarray) -> NonRigidGrads:
        """Backprop gradients on the displaced points through the field."""
        points, frame, pre, post, raw, r, scale = cache
        d_out = np.asarray(d_out, dtype=np.float64)
        m = self.clamp
        # displacement d = s(r) raw with s = m tanh(r/m)/r
        safe = np.maximum(r, 1e-12)
        sech2 = 1.0 / np.cosh(safe / m) ** 2
        ds_dr = np.where(r > 1e-12, (sech2 * safe - m * np.tanh(safe / m)) / safe ** 2, 0.0)
        vdot = np.sum(raw * d_out, axis=1)
        d_raw = scale[:, None] * d_out + np.where(
            r > 1e-12, ds_dr * vdot / safe, 0.0)[:, None] * raw
        d_weights = [np.zeros_like(w) for w in self.weights]
        d_biases = [np.zeros_like(b) for b in self.biases]
        grad = d_raw
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                grad = grad * _sigmoid(pre[i])
            d_weights[i] = post[i].T @ grad
            d_biases[i] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        enc_dim = 3 * (1 + 2 * self.octaves)
        d_latent = grad[:, enc_dim:].sum(axis=0)
        d_points = _encode_backward(points, self.octaves, grad[:, :enc_dim]) + d_out
        return NonRigidGrads(d_weights, d_biases, d_latent, d_points)

    def param_blocks(self) -> list:
        """Mutable views of every trainable array except the latents."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


# -- checkpoint IO -------------------------------------------------------


def save_models(path: str | Path, fields: dict) -> None:
    """Write named displacement networks: shapes and 64-bit parameters."""
    with open(path, "wb") as fh:
        fh.write(MODELS_MAGIC)
        fh.write(np.uint32(IO_VERSION).tobytes())
        fh.write(np.uint32(len(fields)).tobytes())
        for name, f in sorted(fields.items()):
            tag = name.encode("ascii")
            fh.write(np.uint32(len(tag)).tobytes())
            fh.write(tag)
            fh.write(np.uint32(f.octaves).tobytes())
            fh.write(np.float64(f.clamp).tobytes())
            fh.write(np.uint32(len(f.weights)).tobytes())
            for w, b in zip(f.weights, f.biases):
                fh.write(np.uint64(w.shape[0]).tobytes())
                fh.write(np.uint64(w.shape[1]).tobytes())
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_models(path: str | Path) -> dict:
    """Read networks back; latents are restored separately."""
    data = Path(path).read_bytes()
    if data[:4] != MODELS_MAGIC:
        raise ModelError(f"{path}: byte 0: bad magic {data[:4]!r}")
    off = 4
    version = int(np.frombuffer(data, "<u4", 1, off)[0]); off += 4
    if version != IO_VERSION:
        raise ModelError(f"{path}: unsupported version {version}")
    count = int(np.frombuffer(data, "<u4", 1, off)[0]); off += 4
    out = {}
    for _ in range(count):
        tlen = int(np.frombuffer(data, "<u4", 1, off)[0]); off += 4
        name = data[off:off + tlen].decode("ascii"); off += tlen
        octaves = int(np.frombuffer(data, "<u4", 1, off)[0]); off += 4
        clamp = float(np.frombuffer(data, "<f8", 1, off)[0]); off += 8
        n_layers = int(np.frombuffer(data, "<u4", 1, off)[0]); off += 4
        weights, biases = [], []
        for _ in range(n_layers):
            rows = int(np.frombuffer(data, "<u8", 1, off)[0]); off += 8
            cols = int(np.frombuffer(data, "<u8", 1, off)[0]); off += 8
            weights.append(np.frombuffer(data, "<f8", rows * cols, off).reshape(rows, cols).copy())
            off += 8 * rows * cols
            biases.append(np.frombuffer(data, "<f8", cols, off).copy())
            off += 8 * cols
        out[name] = NonRigidField(weights, biases, np.zeros((0, 1)), octaves, clamp)
    return out


def save_latents(path: str | Path, latents: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(LATENTS_MAGIC)
        fh.write(np.uint32(IO_VERSION).tobytes())
        fh.write(np.uint32(len(latents)).tobytes())
        for name, arr in sorted(latents.items()):
            tag = name.encode("ascii")
            fh.write(np.uint32(len(tag)).tobytes())
            fh.write(tag)
            fh.write(np.uint64(arr.shape[0]).tobytes())
            fh.write(np.uint64(arr.shape[1]).tobytes())
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_latents(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != LATENTS_MAGIC:
        raise ModelError(f"{path}: byte 0: bad magic {data[:4]!r}")
    off = 4
    version = int(np.frombuffer(data, "<u4", 1, off)[0]); off += 4
    if version != IO_VERSION:
        raise ModelError(f"{path}: unsupported version {version}")
    count = int(np.frombuffer(data, "<u4", 1, off)[0]); off += 4
    out = {}
    for _ in range(count):
        tlen = int(np.frombuffer(data, "<u4", 1, off)[0]); off += 4
        name = data[off:off + tlen].decode("ascii"); off += tlen
        rows = int(np.frombuffer(data, "<u8", 1, off)[0]); off += 8
        cols = int(np.frombuffer(data, "<u8", 1, off)[0]); off += 8
        out[name] = np.frombuffer(data, "<f8", rows * cols, off).reshape(rows, cols).copy()
        off += 8 * rows * cols
    return out

"""E(2)-invariant local spatial-attention denoiser.

Each layer encodes every (spot, neighbour) direction vector in the four PCA
frames of the spot's neighbourhood and averages the encodings, scores the
neighbours with an MLP over query, key, pair encoding and expression
difference, aggregates values and pair encodings, and reads an expression
estimate off the updated spot state.  The final prediction is the mean of the
per-layer estimates.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import autodiff as ad
from .core.nn import LEAKY_SLOPE, init_mlp, kaiming_uniform
from .data_io import checksum64
from .errors import (
    BadMagicError,
    ChecksumError,
    ContractError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from .spatial import SlideGeometry, build_geometry

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    n_genes: int
    d_in: int
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    k: int = 8
    dropout: float = 0.2
    time_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("n_genes", "d_in", "layers", "heads", "hidden", "k", "time_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ContractError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        if self.time_dim % 2:
            raise ContractError("time_dim must be even")


def time_embed(t: float, dim: int) -> np.ndarray:
    """Sinusoids at ``dim/2`` geometric frequencies spanning [1, 1000]."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"time must lie in [0, 1], got {t}")
    half = dim // 2
    freqs = 1000.0 ** (np.arange(half) / (half - 1)) if half > 1 else np.ones(1)
    angle = 2.0 * np.pi * freqs * t
    return np.concatenate([np.sin(angle), np.cos(angle)])


# -- FLOP accounting ---------------------------------------------------------------

_flops = [None]


@contextmanager
def count_flops():
    """Count multiply-add FLOPs of dense products issued by the forward pass."""
    box = {"flops": 0}
    prev, _flops[0] = _flops[0], box
    try:
        yield box
    finally:
        _flops[0] = prev


def _mm(a, b):
    if _flops[0] is not None:
        sa, sb = np.shape(a.value if isinstance(a, ad.Tensor) else a), np.shape(b.value if isinstance(b, ad.Tensor) else b)
        _flops[0]["flops"] += 2 * sa[0] * sa[1] * sb[1]
    return ad.matmul(a, b)


def _linear(x, p, name):
    return _mm(x, p[name + ".w"]) + p[name + ".b"]


def _mlp2(x, p, name):
    h = ad.leaky_relu(_linear(x, p, name + ".0"), LEAKY_SLOPE)
    return _linear(h, p, name + ".1")


class Denoiser:
    """Parameters plus forward pass. ``params`` maps names to float64 arrays."""

    def __init__(self, config: DenoiserConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()
        self._check_params()

    # -- parameters ---------------------------------------------------------

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, g, h = cfg.hidden, cfg.n_genes, cfg.heads
        p: dict[str, np.ndarray] = {}

        def mlp(name, widths):
            for i, (w, b) in enumerate(init_mlp(rng, widths)):
                p[f"{name}.{i}.w"], p[f"{name}.{i}.b"] = w, b

        mlp("input", [cfg.d_in + cfg.time_dim, d, d])
        for layer in range(cfg.layers):
            pre = f"layer{layer}"
            for proj in ("q", "k", "v"):
                mlp(f"{pre}.{proj}", [d, d])
                p[f"{pre}.{proj}.w"] = p.pop(f"{pre}.{proj}.0.w")
                p[f"{pre}.{proj}.b"] = p.pop(f"{pre}.{proj}.0.b")
            mlp(f"{pre}.pair", [2, d, d])
            # first score layer acts on [query | key | pair | expr-diff]; its
            # weight is stored as the four row blocks of that concatenation
            fan_in = 3 * d + g
            block = kaiming_uniform(rng, fan_in, d)
            p[f"{pre}.score.0.wq"] = block[:d]
            p[f"{pre}.score.0.wk"] = block[d : 2 * d]
            p[f"{pre}.score.0.wc"] = block[2 * d : 3 * d]
            p[f"{pre}.score.0.wy"] = block[3 * d :]
            p[f"{pre}.score.0.b"] = np.zeros(d)
            p[f"{pre}.score.1.w"] = kaiming_uniform(rng, d, h)
            p[f"{pre}.score.1.b"] = np.zeros(h)
            mlp(f"{pre}.agg", [2 * d, d, d])
            mlp(f"{pre}.head", [d, d, g])
        return p

    def _check_params(self):
        expected = param_shapes(self.config)
        got = {k: np.shape(v) for k, v in self.params.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            raise ShapeError(f"parameter mismatch: missing={missing} extra={extra} wrong_shape={wrong}")

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "Denoiser":
        return Denoiser(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- forward ------------------------------------------------------------

    def geometry(self, coords) -> SlideGeometry:
        return build_geometry(coords, self.config.k)

    def forward(
        self,
        geometry: SlideGeometry,
        features,
        y_t,
        t: float,
        params: dict | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
        pair_cache: dict | None = None,
        return_layers: bool = False,
    ):
        """Predict clean expression; returns a Tensor when ``params`` are Tensors.

        ``params`` defaults to the model's arrays wrapped as constants, in which
        case nothing is recorded for differentiation. ``pair_cache`` memoises
        the coordinate-only pair encodings across calls on the same slide with
        frozen parameters.
        """
        cfg = self.config
        n, k = geometry.n_spots, geometry.k_eff
        features = np.asarray(features, dtype=np.float64)
        y_t_val = y_t.value if isinstance(y_t, ad.Tensor) else np.asarray(y_t, dtype=np.float64)
        if features.shape != (n, cfg.d_in):
            raise ShapeError(f"features must be ({n}, {cfg.d_in}), got {features.shape}")
        if y_t_val.shape != (n, cfg.n_genes):
            raise ShapeError(f"expression must be ({n}, {cfg.n_genes}), got {y_t_val.shape}")
        if train and cfg.dropout > 0 and rng is None:
            raise ContractError("train mode with dropout needs an rng")
        p = params if params is not None else {name: ad.const(v) for name, v in self.params.items()}

        d, h = cfg.hidden, cfg.heads
        dh = d // h
        flat = geometry.graph.neighbors.reshape(-1)
        temb = np.broadcast_to(time_embed(t, cfg.time_dim), (n, cfg.time_dim))
        z = _mlp2(ad.const(np.concatenate([features, temb], axis=1)), p, "input")
        y = ad.const(y_t)

        outputs = []
        for layer in range(cfg.layers):
            pre = f"layer{layer}"
            cached = pair_cache.get(layer) if pair_cache is not None else None
            if cached is None:
                acc = None
                for g in range(4):
                    hg = ad.leaky_relu(_linear(geometry.projections[g], p, f"{pre}.pair.0"), LEAKY_SLOPE)
                    acc = hg if acc is None else acc + hg
                pair = _linear(acc * 0.25, p, f"{pre}.pair.1")  # (E, d)
                if pair_cache is not None and not pair.requires_grad:
                    pair_cache[layer] = pair
            else:
                pair = cached

            q = _linear(z, p, f"{pre}.q")
            key = _linear(z, p, f"{pre}.k")
            val = _linear(z, p, f"{pre}.v")

            y_proj = _mm(y, p[f"{pre}.score.0.wy"])
            own = _mm(q, p[f"{pre}.score.0.wq"]) + y_proj
            other = _mm(key, p[f"{pre}.score.0.wk"]) - y_proj
            pre_act = (
                ad.reshape(own, (n, 1, d))
                + ad.reshape(ad.take(other, flat), (n, k, d))
                + ad.reshape(_mm(pair, p[f"{pre}.score.0.wc"]), (n, k, d))
                + p[f"{pre}.score.0.b"]
            )
            hidden = ad.leaky_relu(ad.reshape(pre_act, (n * k, d)), LEAKY_SLOPE)
            scores = ad.reshape(_linear(hidden, p, f"{pre}.score.1"), (n, k, h))
            attn = ad.reshape(ad.softmax(scores, axis=1), (n, k, h, 1))

            v_nb = ad.reshape(ad.take(val, flat), (n, k, h, dh))
            c_nb = ad.reshape(pair, (n, k, h, dh))
            agg_v = ad.reshape(ad.sum_axis(attn * v_nb, axis=1), (n, d))
            agg_c = ad.reshape(ad.sum_axis(attn * c_nb, axis=1), (n, d))

            update = _mlp2(ad.concat([agg_v, agg_c], axis=1), p, f"{pre}.agg")
            if train and cfg.dropout > 0:
                keep = (rng.random((n, d)) >= cfg.dropout) / (1.0 - cfg.dropout)
                update = update * keep
            z = update + z
            y = _mlp2(z, p, f"{pre}.head")
            outputs.append(y)

        out = outputs[0]
        for o in outputs[1:]:
            out = out + o
        out = out * (1.0 / len(outputs))
        if return_layers:
            return out, outputs
        return out

    def predict(self, geometry: SlideGeometry, features, y_t, t: float, pair_cache: dict | None = None) -> np.ndarray:
        """Eval-mode prediction as a plain array."""
        return self.forward(geometry, features, y_t, t, pair_cache=pair_cache).value

    def loss_and_grads(self, geometry, features, y_t, t, target, train=True, rng=None):
        """MSE against ``target`` and its gradient for every parameter."""
        tensors = {name: ad.param(v, name) for name, v in self.params.items()}
        pred = self.forward(geometry, features, y_t, t, params=tensors, train=train, rng=rng)
        loss = ad.mse(pred, np.asarray(target, dtype=np.float64))
        by_id = ad.backward(loss, tensors.values())
        return float(loss.value), {name: by_id[id(tt)] for name, tt in tensors.items()}


def denoise(coords, features, y_t, t, model: Denoiser, train_mode: bool = False, rng=None) -> np.ndarray:
    """One-shot convenience wrapper: build geometry and run the network."""
    geo = model.geometry(coords)
    return model.forward(geo, features, y_t, t, train=train_mode, rng=rng).value


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple]:
    d, g, h = cfg.hidden, cfg.n_genes, cfg.heads
    shapes = {
        "input.0.w": (cfg.d_in + cfg.time_dim, d),
        "input.0.b": (d,),
        "input.1.w": (d, d),
        "input.1.b": (d,),
    }
    for layer in range(cfg.layers):
        pre = f"layer{layer}"
        for proj in ("q", "k", "v"):
            shapes[f"{pre}.{proj}.w"] = (d, d)
            shapes[f"{pre}.{proj}.b"] = (d,)
        shapes.update(
            {
                f"{pre}.pair.0.w": (2, d),
                f"{pre}.pair.0.b": (d,),
                f"{pre}.pair.1.w": (d, d),
                f"{pre}.pair.1.b": (d,),
                f"{pre}.score.0.wq": (d, d),
                f"{pre}.score.0.wk": (d, d),
                f"{pre}.score.0.wc": (d, d),
                f"{pre}.score.0.wy": (g, d),
                f"{pre}.score.0.b": (d,),
                f"{pre}.score.1.w": (d, h),
                f"{pre}.score.1.b": (h,),
                f"{pre}.agg.0.w": (2 * d, d),
                f"{pre}.agg.0.b": (d,),
                f"{pre}.agg.1.w": (d, d),
                f"{pre}.agg.1.b": (d,),
                f"{pre}.head.0.w": (d, d),
                f"{pre}.head.0.b": (d,),
                f"{pre}.head.1.w": (d, g),
                f"{pre}.head.1.b": (g,),
            }
        )
    return shapes


# -- checkpoints ---------------------------------------------------------------------
#
# b"SFCK" | u32 version | u32 len, utf-8 JSON config | u32 n_tensors
# | n_tensors x (u32 len, utf-8 name | u32 ndim | u64 dims[ndim] | f64 data)
# | u64 checksum (blake2b-64 of every preceding byte)


def _pstr(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(model: Denoiser, meta: dict | None = None) -> bytes:
    header = {"config": asdict(model.config), "meta": meta or {}}
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        _pstr(json.dumps(header, sort_keys=True)),
        struct.pack("<I", len(model.params)),
    ]
    for name in sorted(model.params):
        arr = np.asarray(model.params[name], dtype="<f8")
        parts += [
            _pstr(name),
            struct.pack("<I", arr.ndim),
            struct.pack(f"<{arr.ndim}Q", *arr.shape),
            arr.tobytes(),
        ]
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum64(body))


def save_checkpoint(model: Denoiser, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, meta))
    return path


def checkpoint_from_bytes(data: bytes) -> tuple[Denoiser, dict]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {data[:4]!r})")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError(f"checkpoint truncated at offset {pos}")
        out = data[pos : pos + n]
        pos += n
        return out

    def string():
        (n,) = struct.unpack("<I", take(4))
        return take(n).decode("utf-8")

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(string())
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        name = string()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    body_end = pos
    (stored,) = struct.unpack("<Q", take(8))
    if pos != len(data) or checksum64(data[:body_end]) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    model = Denoiser(DenoiserConfig(**header["config"]), params)
    return model, header.get("meta", {})


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())

"""Desk-scale models standing in for a pretrained encoder.

Two architectures share the same interface (a named parameter dict plus
``forward``/``loss``): a small post-norm transformer block stack and a
plain MLP.  Inputs are continuous feature sequences; there is no
embedding table, only a dense input projection.  Constrained layers are
the six matmul weights inside each transformer block (query, key, value,
attention output, and the two feed-forward weights); the input
projection and the classifier head stay dense, and biases and norm
parameters are never constrained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    Tensor,
    cross_entropy_loss,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean_over,
    mse_loss,
    reshape,
    softmax,
    transpose,
)

CHECKPOINT_MAGIC = b"NXMW0001"


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "transformer"  # "transformer" | "mlp"
    blocks: int = 2
    hidden: int = 32
    heads: int = 2
    ffn_multiple: int = 4
    feature_dim: int = 16
    seq_len: int = 8
    out_dim: int = 1
    objective: str = "regression"  # "regression" | "classification"

    def __post_init__(self):
        if self.kind not in ("transformer", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.objective not in ("regression", "classification"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.kind == "transformer" and self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        for name in ("blocks", "hidden", "heads", "ffn_multiple", "feature_dim", "seq_len", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def compatible_with_group(self, n: int) -> bool:
        """Whether the constrained weights' input dimensions divide the group size."""
        return self.hidden % n == 0 and (self.hidden * self.ffn_multiple) % n == 0


def _init_weight(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    return rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)


class ToyTransformer:
    """Post-norm encoder stack over continuous token features.

    forward: (batch, seq, feature_dim) -> (batch, out_dim), mean-pooled
    over the sequence before the classifier.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.kind != "transformer":
            raise ValueError("config.kind must be 'transformer'")
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.hidden
        f = config.ffn_multiple * d
        params: dict[str, Tensor] = {}

        def param(name, data):
            params[name] = Tensor(data, requires_grad=True, name=name)

        param("input.weight", _init_weight(rng, d, config.feature_dim))
        param("input.bias", np.zeros(d))
        for b in range(config.blocks):
            p = f"block{b}"
            for sub in ("q", "k", "v", "out"):
                param(f"{p}.attn.{sub}.weight", _init_weight(rng, d, d))
                param(f"{p}.attn.{sub}.bias", np.zeros(d))
            param(f"{p}.ln1.gain", np.ones(d))
            param(f"{p}.ln1.offset", np.zeros(d))
            param(f"{p}.ffn.w1.weight", _init_weight(rng, f, d))
            param(f"{p}.ffn.w1.bias", np.zeros(f))
            param(f"{p}.ffn.w2.weight", _init_weight(rng, d, f))
            param(f"{p}.ffn.w2.bias", np.zeros(d))
            param(f"{p}.ln2.gain", np.ones(d))
            param(f"{p}.ln2.offset", np.zeros(d))
        param("classifier.weight", _init_weight(rng, config.out_dim, d))
        param("classifier.bias", np.zeros(config.out_dim))
        self.params = params

    def forward(self, x: np.ndarray) -> Tensor:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != cfg.feature_dim:
            raise ValueError(f"expected (batch, seq, {cfg.feature_dim}) input, got {x.shape}")
        batch, seq, _ = x.shape
        heads, dh = cfg.heads, cfg.hidden // cfg.heads
        p = self.params
        h = linear(Tensor(x), p["input.weight"], p["input.bias"])
        for b in range(cfg.blocks):
            pre = f"block{b}"

            def split(t):
                return transpose(reshape(t, (batch, seq, heads, dh)), (0, 2, 1, 3))

            q = split(linear(h, p[f"{pre}.attn.q.weight"], p[f"{pre}.attn.q.bias"]))
            k = split(linear(h, p[f"{pre}.attn.k.weight"], p[f"{pre}.attn.k.bias"]))
            v = split(linear(h, p[f"{pre}.attn.v.weight"], p[f"{pre}.attn.v.bias"]))
            scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
            context = matmul(softmax(scores), v)
            merged = reshape(transpose(context, (0, 2, 1, 3)), (batch, seq, cfg.hidden))
            attn_out = linear(merged, p[f"{pre}.attn.out.weight"], p[f"{pre}.attn.out.bias"])
            h = layer_norm(h + attn_out, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.offset"])
            ffn = linear(
                gelu(linear(h, p[f"{pre}.ffn.w1.weight"], p[f"{pre}.ffn.w1.bias"])),
                p[f"{pre}.ffn.w2.weight"],
                p[f"{pre}.ffn.w2.bias"],
            )
            h = layer_norm(h + ffn, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.offset"])
        pooled = mean_over(h, axis=1)
        return linear(pooled, p["classifier.weight"], p["classifier.bias"])

    def loss(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        out = self.forward(x)
        if self.config.objective == "regression":
            return mse_loss(out, y)
        return cross_entropy_loss(out, y)


class ToyMLP:
    """Flatten-then-dense stack; hidden layer weights are the constrained set."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.kind != "mlp":
            raise ValueError("config.kind must be 'mlp'")
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.hidden
        in_dim = config.seq_len * config.feature_dim
        params: dict[str, Tensor] = {}

        def param(name, data):
            params[name] = Tensor(data, requires_grad=True, name=name)

        param("input.weight", _init_weight(rng, d, in_dim))
        param("input.bias", np.zeros(d))
        for b in range(config.blocks):
            param(f"hidden{b}.weight", _init_weight(rng, d, d))
            param(f"hidden{b}.bias", np.zeros(d))
        param("classifier.weight", _init_weight(rng, config.out_dim, d))
        param("classifier.bias", np.zeros(config.out_dim))
        self.params = params

    def forward(self, x: np.ndarray) -> Tensor:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != cfg.seq_len * cfg.feature_dim:
            raise ValueError(f"expected flattened width {cfg.seq_len * cfg.feature_dim}, got {x.shape}")
        p = self.params
        h = gelu(linear(Tensor(x), p["input.weight"], p["input.bias"]))
        for b in range(cfg.blocks):
            h = gelu(linear(h, p[f"hidden{b}.weight"], p[f"hidden{b}.bias"]))
        return linear(h, p["classifier.weight"], p["classifier.bias"])

    def loss(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        out = self.forward(x)
        if self.config.objective == "regression":
            return mse_loss(out, y)
        return cross_entropy_loss(out, y)


def build_model(config: ModelConfig, seed: int = 0):
    return ToyTransformer(config, seed) if config.kind == "transformer" else ToyMLP(config, seed)


@dataclass(frozen=True)
class LayerPolicy:
    """Which named weight tensors the sparsity constraint applies to."""

    flags: dict[str, bool] = field(default_factory=dict)

    def is_constrained(self, name: str) -> bool:
        return self.flags.get(name, False)

    @property
    def constrained_names(self) -> tuple[str, ...]:
        return tuple(name for name, on in self.flags.items() if on)


_TRANSFORMER_CONSTRAINED = (".attn.q.weight", ".attn.k.weight", ".attn.v.weight",
                            ".attn.out.weight", ".ffn.w1.weight", ".ffn.w2.weight")


def _constrained_by_default(name: str) -> bool:
    if name.startswith("block") and name.endswith(_TRANSFORMER_CONSTRAINED):
        return True
    return name.startswith("hidden") and name.endswith(".weight")


def build_policy(model, overrides: dict[str, bool] | None = None) -> LayerPolicy:
    """Default policy: constrain the in-block matmul weights only.

    The input projection, classifier, biases, and norm parameters stay
    unconstrained.  Overrides may flip any 2-D weight (including the
    classifier); flipping a vector parameter is rejected because only
    matmul weights have a grouped input dimension.
    """
    flags = {name: _constrained_by_default(name) for name in model.params}
    for name, on in (overrides or {}).items():
        if name not in flags:
            raise ValueError(f"override names unknown tensor {name!r}")
        if on and model.params[name].data.ndim != 2:
            raise ValueError(f"cannot constrain non-matrix tensor {name!r}")
        flags[name] = bool(on)
    return LayerPolicy(flags)


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors: magic, u32 count, then per tensor
    (sorted by name) u16 name length, name bytes, u32 rank, u64 dims,
    row-major float64 payload; little-endian throughout."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic; not a checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        n_values = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=n_values, offset=offset).reshape(dims).copy()
        offset += 8 * n_values
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return params


def load_state(model, state: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into the model's parameters, shape-checked."""
    missing = set(model.params) - set(state)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
    for name, p in model.params.items():
        arr = np.asarray(state[name], dtype=np.float64)
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} != {p.data.shape}")
        p.data = arr.copy()


def clone_config(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)

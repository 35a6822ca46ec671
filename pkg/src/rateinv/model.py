"""Embedding network: dilated temporal convolutions with statistics pooling,
a channel-attention decomposition of the pooled embedding into identity- and
rate-related halves, classification heads, and the per-branch cosine mapping.

Everything is plain NumPy with hand-written backward passes; every gradient
here is checked against central finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import DataError, TooShortError

KERNELS = (5, 3, 3)
DILATIONS = (1, 2, 3)

DECOMPOSITION_MODES = ("attention", "projection", "identity")


@dataclass(frozen=True)
class ModelConfig:
    n_speakers: int
    feat_dim: int = 40
    channels: int = 64
    embed_dim: int = 128
    map_dim: int = 64
    bottleneck_ratio: int = 4
    n_rates: int = 3
    decomposition: str = "attention"
    pool_eps: float = 1e-8
    norm_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speaker classes")
        if self.decomposition not in DECOMPOSITION_MODES:
            raise ValueError(f"decomposition must be one of {DECOMPOSITION_MODES}")
        if self.embed_dim % self.bottleneck_ratio != 0:
            raise ValueError("embed_dim must be divisible by bottleneck_ratio")

    @property
    def receptive_field(self) -> int:
        return 1 + sum((k - 1) * d for k, d in zip(KERNELS, DILATIONS))


def param_groups(config: ModelConfig) -> dict[str, tuple[str, ...]]:
    """Names of the parameter arrays in each freezable group."""
    if config.decomposition == "attention":
        decomp = ("att_w1", "att_b1", "att_w2", "att_b2")
    elif config.decomposition == "projection":
        decomp = ("branch_id_w", "branch_id_b", "branch_rate_w", "branch_rate_b")
    else:
        decomp = ()
    return {
        "encoder": (
            "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
            "proj_w", "proj_b",
        ),
        "attention": decomp,
        "id_head": ("id_w",),
        "rate_head": ("rate_w", "rate_b"),
        "cosine_map": ("map_id_w", "map_id_b", "map_rate_w", "map_rate_b"),
    }


@dataclass
class ModelParams:
    """Named parameter arrays plus per-group trainability flags."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        groups = param_groups(self.config)
        for group in groups:
            self.trainable.setdefault(group, True)
        expected = {name for names in groups.values() for name in names}
        if set(self.arrays) != expected:
            missing = expected - set(self.arrays)
            extra = set(self.arrays) - expected
            raise ValueError(f"parameter arrays mismatch (missing {missing}, extra {extra})")

    def group_of(self) -> dict[str, str]:
        return {
            name: group
            for group, names in param_groups(self.config).items()
            for name in names
        }

    def names_in(self, groups: Iterable[str]) -> list[str]:
        table = param_groups(self.config)
        return [name for g in groups for name in table[g]]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.arrays.items()},
            dict(self.trainable),
        )

    def renorm_id_head(self, eps: float = 1e-12) -> None:
        w = self.arrays["id_w"]
        w /= np.maximum(np.linalg.norm(w, axis=0, keepdims=True), eps)


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Fan-in-scaled uniform init; id-head columns start unit-norm."""
    rng = np.random.default_rng(seed)
    c, d, dp = config.channels, config.embed_dim, config.map_dim
    f = config.feat_dim
    r = config.bottleneck_ratio
    arrays = {
        "conv1_w": _uniform_init(rng, KERNELS[0] * f, (KERNELS[0], f, c)),
        "conv1_b": np.zeros(c),
        "conv2_w": _uniform_init(rng, KERNELS[1] * c, (KERNELS[1], c, c)),
        "conv2_b": np.zeros(c),
        "conv3_w": _uniform_init(rng, KERNELS[2] * c, (KERNELS[2], c, c)),
        "conv3_b": np.zeros(c),
        "proj_w": _uniform_init(rng, 2 * c, (2 * c, d)),
        "proj_b": np.zeros(d),
        "id_w": _uniform_init(rng, d, (d, config.n_speakers)),
        "rate_w": _uniform_init(rng, d, (d, config.n_rates)),
        "rate_b": np.zeros(config.n_rates),
        "map_id_w": _uniform_init(rng, d, (d, dp)),
        "map_id_b": np.zeros(dp),
        "map_rate_w": _uniform_init(rng, d, (d, dp)),
        "map_rate_b": np.zeros(dp),
    }
    if config.decomposition == "attention":
        arrays["att_w1"] = _uniform_init(rng, d, (d, d // r))
        arrays["att_b1"] = np.zeros(d // r)
        arrays["att_w2"] = _uniform_init(rng, d // r, (d // r, d))
        arrays["att_b2"] = np.zeros(d)
    elif config.decomposition == "projection":
        arrays["branch_id_w"] = _uniform_init(rng, d, (d, d))
        arrays["branch_id_b"] = np.zeros(d)
        arrays["branch_rate_w"] = _uniform_init(rng, d, (d, d))
        arrays["branch_rate_b"] = np.zeros(d)
    params = ModelParams(config, arrays)
    params.renorm_id_head()
    return params


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int) -> np.ndarray:
    k = w.shape[0]
    span = (k - 1) * dilation
    t_out = x.shape[0] - span
    y = np.tile(b, (t_out, 1))
    for tap in range(k):
        start = tap * dilation
        y += x[start : start + t_out] @ w[tap]
    return y


def _conv_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, dilation: int):
    k = w.shape[0]
    t_out = dy.shape[0]
    dw = np.empty_like(w)
    dx = np.zeros_like(x)
    for tap in range(k):
        start = tap * dilation
        dw[tap] = x[start : start + t_out].T @ dy
        dx[start : start + t_out] += dy @ w[tap].T
    return dx, dw, dy.sum(axis=0)


def stats_pool(h: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Concatenate per-channel mean and (epsilon-floored) population std."""
    mean = h.mean(axis=0)
    dev = h - mean
    std = np.sqrt((dev * dev).mean(axis=0) + eps)
    return np.concatenate([mean, std])


def _stats_pool_forward(h: np.ndarray, eps: float):
    mean = h.mean(axis=0)
    dev = h - mean
    std = np.sqrt((dev * dev).mean(axis=0) + eps)
    return np.concatenate([mean, std]), (dev, std)


def _stats_pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    dev, std = cache
    t, c = dev.shape
    dmean = dout[:c]
    dstd = dout[c:]
    return dmean / t + dev * (dstd / (t * std))


def encode_forward(frames: np.ndarray, params: ModelParams):
    """Frame-level convolutions, statistics pooling, affine projection."""
    cfg = params.config
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.feat_dim:
        raise DataError(f"expected (T, {cfg.feat_dim}) features, got {x.shape}")
    if x.shape[0] < cfg.receptive_field:
        raise TooShortError(
            f"{x.shape[0]} frames is fewer than the receptive field ({cfg.receptive_field})"
        )
    a = params.arrays
    acts = [x]
    pre = []
    h = x
    for i, (k, d) in enumerate(zip(KERNELS, DILATIONS), start=1):
        z = _conv_forward(h, a[f"conv{i}_w"], a[f"conv{i}_b"], d)
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    pooled, pool_cache = _stats_pool_forward(h, cfg.pool_eps)
    phi = pooled @ a["proj_w"] + a["proj_b"]
    return phi, (acts, pre, pooled, pool_cache)


def encode_backward(dphi: np.ndarray, cache, params: ModelParams) -> dict[str, np.ndarray]:
    acts, pre, pooled, pool_cache = cache
    a = params.arrays
    grads = {
        "proj_w": np.outer(pooled, dphi),
        "proj_b": dphi.copy(),
    }
    dh = _stats_pool_backward(dphi @ a["proj_w"].T, pool_cache)
    for i in range(len(KERNELS), 0, -1):
        dz = dh * (pre[i - 1] > 0)
        dh, dw, db = _conv_backward(dz, acts[i - 1], a[f"conv{i}_w"], DILATIONS[i - 1])
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
    return grads


def encode(frames: np.ndarray, params: ModelParams) -> np.ndarray:
    """Utterance embedding (the pre-decomposition vector)."""
    phi, _ = encode_forward(frames, params)
    return phi


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------

@dataclass
class Decomposition:
    """Split of an embedding into identity- and rate-related parts."""

    x_id: np.ndarray
    x_rate: np.ndarray
    sigma: np.ndarray | None = None


def decompose_forward(phi: np.ndarray, params: ModelParams):
    """Mode-dependent branch split. In attention mode the gate sigma satisfies
    x_id + x_rate == phi exactly; projection mode uses two independent affine
    branches; identity mode passes phi through as x_id."""
    a = params.arrays
    mode = params.config.decomposition
    if mode == "attention":
        pre1 = phi @ a["att_w1"] + a["att_b1"]
        hidden = np.maximum(pre1, 0.0)
        z = hidden @ a["att_w2"] + a["att_b2"]
        sigma = _sigmoid(z)
        x_id = (1.0 - sigma) * phi
        x_rate = sigma * phi
        return x_id, x_rate, sigma, (phi, pre1, hidden, sigma)
    if mode == "projection":
        x_id = phi @ a["branch_id_w"] + a["branch_id_b"]
        x_rate = phi @ a["branch_rate_w"] + a["branch_rate_b"]
        return x_id, x_rate, None, (phi,)
    x_id = phi.copy()
    x_rate = np.zeros_like(phi)
    return x_id, x_rate, None, (phi,)


def decompose_backward(dx_id: np.ndarray, dx_rate: np.ndarray, cache, params: ModelParams):
    a = params.arrays
    mode = params.config.decomposition
    if mode == "attention":
        phi, pre1, hidden, sigma = cache
        dsigma = phi * (dx_rate - dx_id)
        dphi = dx_id * (1.0 - sigma) + dx_rate * sigma
        dz = dsigma * sigma * (1.0 - sigma)
        dhidden = dz @ a["att_w2"].T
        dpre1 = dhidden * (pre1 > 0)
        grads = {
            "att_w2": np.outer(hidden, dz),
            "att_b2": dz,
            "att_w1": np.outer(phi, dpre1),
            "att_b1": dpre1,
        }
        dphi = dphi + dpre1 @ a["att_w1"].T
        return dphi, grads
    if mode == "projection":
        (phi,) = cache
        grads = {
            "branch_id_w": np.outer(phi, dx_id),
            "branch_id_b": dx_id.copy(),
            "branch_rate_w": np.outer(phi, dx_rate),
            "branch_rate_b": dx_rate.copy(),
        }
        dphi = dx_id @ a["branch_id_w"].T + dx_rate @ a["branch_rate_w"].T
        return dphi, grads
    return dx_id.copy(), {}


def attention_decompose(phi: np.ndarray, params: ModelParams) -> Decomposition:
    """Gate the embedding: x_rate = sigma(phi) * phi, x_id = (1 - sigma) * phi."""
    x_id, x_rate, sigma, _ = decompose_forward(np.asarray(phi, dtype=np.float64), params)
    return Decomposition(x_id=x_id, x_rate=x_rate, sigma=sigma)


# ---------------------------------------------------------------------------
# cosine mapping and heads
# ---------------------------------------------------------------------------

def cosine_map(x_id: np.ndarray, x_rate: np.ndarray, params: ModelParams):
    """Independent affine map per branch; normalization happens in the loss."""
    a = params.arrays
    u = x_id @ a["map_id_w"] + a["map_id_b"]
    v = x_rate @ a["map_rate_w"] + a["map_rate_b"]
    return u, v


def cosine_map_backward(du: np.ndarray, dv: np.ndarray, x_id: np.ndarray, x_rate: np.ndarray, params: ModelParams):
    a = params.arrays
    grads = {
        "map_id_w": np.outer(x_id, du),
        "map_id_b": du.copy(),
        "map_rate_w": np.outer(x_rate, dv),
        "map_rate_b": dv.copy(),
    }
    dx_id = du @ a["map_id_w"].T
    dx_rate = dv @ a["map_rate_w"].T
    return dx_id, dx_rate, grads


def id_logits(x_id: np.ndarray, params: ModelParams) -> np.ndarray:
    """Cosine similarity of the normalized embedding to each class column."""
    cos, _ = id_logits_forward(x_id, params)
    return cos


def _normalize(x: np.ndarray, eps: float):
    norm = float(np.linalg.norm(x))
    scale = max(norm, eps)
    return x / scale, norm, scale


def id_logits_forward(x_id: np.ndarray, params: ModelParams):
    eps = params.config.norm_eps
    w = params.arrays["id_w"]
    if w.shape[0] != x_id.shape[0]:
        raise DataError(f"id head expects dim {w.shape[0]}, got {x_id.shape[0]}")
    xn, xnorm, xscale = _normalize(x_id, eps)
    col_norms = np.linalg.norm(w, axis=0)
    col_scales = np.maximum(col_norms, eps)
    wn = w / col_scales
    cos = xn @ wn
    return cos, (xn, xnorm, xscale, wn, col_norms, col_scales, cos)


def id_logits_backward(dcos: np.ndarray, cache):
    xn, xnorm, xscale, wn, col_norms, col_scales, cos = cache
    dxn = wn @ dcos
    if xnorm >= xscale:
        dx = (dxn - np.dot(xn, dxn) * xn) / xscale
    else:
        # below the epsilon floor the normalization is a fixed 1/eps scaling
        dx = dxn / xscale
    live = (col_norms >= col_scales).astype(float)
    dw = (xn[:, None] - (live * cos) * wn) * (dcos / col_scales)
    return dx, {"id_w": dw}


def rate_logits(x_rate: np.ndarray, params: ModelParams) -> np.ndarray:
    """Affine map to one logit per rate class."""
    a = params.arrays
    if a["rate_w"].shape[0] != x_rate.shape[0]:
        raise DataError(
            f"rate head expects dim {a['rate_w'].shape[0]}, got {x_rate.shape[0]}"
        )
    return x_rate @ a["rate_w"] + a["rate_b"]


def rate_logits_backward(dlogits: np.ndarray, x_rate: np.ndarray, params: ModelParams):
    grads = {"rate_w": np.outer(x_rate, dlogits), "rate_b": dlogits.copy()}
    dx_rate = dlogits @ params.arrays["rate_w"].T
    return dx_rate, grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, metadata: dict | None = None) -> None:
    """Write all arrays as f32 (npz container) plus a JSON metadata block."""
    meta = dict(metadata or {})
    meta["config"] = {
        "n_speakers": params.config.n_speakers,
        "feat_dim": params.config.feat_dim,
        "channels": params.config.channels,
        "embed_dim": params.config.embed_dim,
        "map_dim": params.config.map_dim,
        "bottleneck_ratio": params.config.bottleneck_ratio,
        "n_rates": params.config.n_rates,
        "decomposition": params.config.decomposition,
    }
    meta["trainable"] = params.trainable
    payload = {k: v.astype(np.float32) for k, v in params.arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"][()]))
        arrays = {
            k: data[k].astype(np.float64) for k in data.files if k != "__meta__"
        }
    config = ModelConfig(**meta.pop("config"))
    trainable = meta.pop("trainable")
    return ModelParams(config, arrays, dict(trainable)), meta

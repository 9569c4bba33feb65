"""Minimal neural substrate: parameter tensors with gradient slots, dense and
gated-recurrent layers, Gaussian reparameterization, Adam, finite-difference
gradient checking, and a named-tensor checkpoint format.

Everything is float64 numpy with hand-written backward passes. Layers follow a
``forward(...) -> (output, cache)`` / ``backward(cache, dout) -> din``
convention; parameter gradients accumulate into the owning :class:`Tensor`
until the next :func:`adam_step`, so a recurrent cell can be unrolled and
backpropagated one cached step at a time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit as sigmoid

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0

CHECKPOINT_MAGIC = b"IRC1"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file: bad magic, bad version, or truncated payload."""


class Tensor:
    """A parameter array with a same-shaped gradient slot."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class ParamStore:
    """Named parameter tensors plus Adam moment buffers and a step counter."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value)
        self.params[name] = tensor
        self.moment1[name] = np.zeros_like(tensor.value)
        self.moment2[name] = np.zeros_like(tensor.value)
        return tensor

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad.fill(0.0)

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self.params.values())

    def assert_finite(self) -> None:
        for name, t in self.params.items():
            if not np.all(np.isfinite(t.value)):
                raise FloatingPointError(f"non-finite values in parameter {name!r}")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)}, "
                             f"unexpected={sorted(extra)}")
        for name, value in state.items():
            tensor = self.params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != tensor.value.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{value.shape} vs {tensor.value.shape}")
            tensor.value[...] = value


def fan_in_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine layer y = x @ W + b with fan-in uniform W and zero b."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator):
        self.W = store.add(f"{name}.W", fan_in_uniform(rng, n_in, (n_in, n_out)))
        self.b = store.add(f"{name}.b", np.zeros(n_out))

    def forward(self, x: np.ndarray):
        return x @ self.W.value + self.b.value, x

    def backward(self, cache: np.ndarray, dout: np.ndarray) -> np.ndarray:
        self.W.grad += cache.T @ dout
        self.b.grad += dout.sum(axis=0)
        return dout @ self.W.value.T


def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * mask


class MLP:
    """Affine stack with ReLU hidden activations and a linear output layer."""

    def __init__(self, store: ParamStore, name: str, sizes, rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.layers = [
            Linear(store, f"{name}.l{i}", sizes[i], sizes[i + 1], rng)
            for i in range(len(sizes) - 1)
        ]

    def forward(self, x: np.ndarray):
        caches = []
        for i, layer in enumerate(self.layers):
            x, lin_cache = layer.forward(x)
            if i < len(self.layers) - 1:
                x, mask = relu(x)
            else:
                mask = None
            caches.append((lin_cache, mask))
        return x, caches

    def backward(self, caches, dout: np.ndarray) -> np.ndarray:
        for layer, (lin_cache, mask) in zip(reversed(self.layers), reversed(caches)):
            if mask is not None:
                dout = relu_backward(mask, dout)
            dout = layer.backward(lin_cache, dout)
        return dout

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            y, _ = self.forward(x[None, :])
            return y[0]
        y, _ = self.forward(x)
        return y


def mlp_forward(mlp: MLP, x) -> np.ndarray:
    """Forward pass through an MLP (no cache kept)."""
    return mlp(x)


class GRUCell:
    """Gated-recurrent update: h' = (1 - z) * h + z * tanh(candidate).

    Gate weights are stored block-fused for speed: ``W`` is (in, 3H) with
    column blocks [update | reset | candidate], ``U`` is (H, 2H) with blocks
    [update | reset], ``Uc`` is the (H, H) candidate recurrence applied to
    the reset-gated hidden state, and ``b`` is the (3H,) fused bias.
    """

    def __init__(self, store: ParamStore, name: str, in_dim: int, hidden_dim: int,
                 rng: np.random.Generator):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        fan = in_dim + hidden_dim
        self.W = store.add(f"{name}.W", fan_in_uniform(rng, fan, (in_dim, 3 * hidden_dim)))
        self.U = store.add(f"{name}.U", fan_in_uniform(rng, fan, (hidden_dim, 2 * hidden_dim)))
        self.Uc = store.add(f"{name}.Uc", fan_in_uniform(rng, fan, (hidden_dim, hidden_dim)))
        self.b = store.add(f"{name}.b", np.zeros(3 * hidden_dim))

    def forward(self, h: np.ndarray, x: np.ndarray):
        hd = self.hidden_dim
        xw = x @ self.W.value + self.b.value
        hu = h @ self.U.value
        z = sigmoid(xw[:, :hd] + hu[:, :hd])
        r = sigmoid(xw[:, hd:2 * hd] + hu[:, hd:])
        rh = r * h
        c = np.tanh(xw[:, 2 * hd:] + rh @ self.Uc.value)
        h_new = (1.0 - z) * h + z * c
        return h_new, (x, h, z, r, c, rh)

    def backward(self, cache, dh_new: np.ndarray):
        x, h, z, r, c, rh = cache
        hd = self.hidden_dim
        dz = dh_new * (c - h)
        dc = dh_new * z
        dh = dh_new * (1.0 - z)

        dc_pre = dc * (1.0 - c * c)
        self.Uc.grad += rh.T @ dc_pre
        drh = dc_pre @ self.Uc.value.T
        dr = drh * h
        dh += drh * r

        dxw = np.empty_like(dh_new, shape=(dh_new.shape[0], 3 * hd))
        dxw[:, :hd] = dz * z * (1.0 - z)
        dxw[:, hd:2 * hd] = dr * r * (1.0 - r)
        dxw[:, 2 * hd:] = dc_pre
        self.W.grad += x.T @ dxw
        self.b.grad += dxw.sum(axis=0)
        self.U.grad += h.T @ dxw[:, :2 * hd]
        dh += dxw[:, :2 * hd] @ self.U.value.T
        dx = dxw @ self.W.value.T
        return dh, dx


def gru_step(cell: GRUCell, hidden, x) -> np.ndarray:
    """One recurrent update (no cache kept); accepts 1-D or batched input."""
    hidden = np.asarray(hidden, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if hidden.ndim == 1:
        h_new, _ = cell.forward(hidden[None, :], x[None, :])
        return h_new[0]
    h_new, _ = cell.forward(hidden, x)
    return h_new


@dataclass(frozen=True)
class GaussianHead:
    """Diagonal-Gaussian parameters with log-sigma clamped to a fixed range.

    ``clip_mask`` is 1 where the raw log-sigma was inside the clamp, so
    gradients pass through only there.
    """

    mu: np.ndarray
    log_sigma: np.ndarray
    clip_mask: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "GaussianHead":
        """Split a (..., 2k) raw encoder output into mu and clamped log-sigma."""
        k = raw.shape[-1] // 2
        if raw.shape[-1] != 2 * k:
            raise ValueError("raw head output must have an even last dimension")
        mu = raw[..., :k]
        ls_raw = raw[..., k:]
        log_sigma = np.clip(ls_raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        mask = ((ls_raw >= LOG_SIGMA_MIN) & (ls_raw <= LOG_SIGMA_MAX)).astype(np.float64)
        return cls(mu=mu, log_sigma=log_sigma, clip_mask=mask)


def make_gaussian_head(mu, log_sigma) -> GaussianHead:
    """Build a head directly from mu/log-sigma (clamped), mostly for tests."""
    mu = np.asarray(mu, dtype=np.float64)
    ls_raw = np.asarray(log_sigma, dtype=np.float64)
    log_sigma = np.clip(ls_raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    mask = ((ls_raw >= LOG_SIGMA_MIN) & (ls_raw <= LOG_SIGMA_MAX)).astype(np.float64)
    return GaussianHead(mu=mu, log_sigma=log_sigma, clip_mask=mask)


def reparam_sample(head: GaussianHead, rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> np.ndarray:
    """z = mu + sigma * eps with eps ~ N(0, 1) (or injected)."""
    if eps is None:
        if rng is None:
            raise ValueError("need either an rng or injected noise")
        eps = rng.standard_normal(head.mu.shape)
    return head.mu + head.sigma * eps


def kl_to_standard_normal(head: GaussianHead):
    """Closed-form KL(N(mu, sigma) || N(0, 1)), summed over the latent axis."""
    sigma_sq = np.exp(2.0 * head.log_sigma)
    per_dim = 0.5 * (head.mu ** 2 + sigma_sq - 1.0 - 2.0 * head.log_sigma)
    return per_dim.sum(axis=-1)


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected adaptive-moment update; gradients are zeroed afterward.

    Tensors whose gradient is identically zero are left untouched (values and
    moments), so a zero-gradient step is a parameter no-op for any state.
    """
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, tensor in store.params.items():
        g = tensor.grad
        if not g.any():
            continue
        m = store.moment1[name]
        v = store.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        tensor.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        g.fill(0.0)
    return store


@dataclass(frozen=True)
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    entries: tuple[GradCheckEntry, ...]
    rel_tol: float

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def failures(self) -> tuple[GradCheckEntry, ...]:
        return tuple(e for e in self.entries if e.rel_err >= self.rel_tol)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(loss_fn, store: ParamStore, rng: np.random.Generator,
               rel_tol: float = 1e-4, h: float = 1e-4,
               coords_per_param: int = 4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must be deterministic (any sampling noise frozen), return the
    scalar loss, and accumulate gradients into ``store`` as a side effect.
    """
    store.zero_grad()
    loss_fn()
    analytic = {name: t.grad.copy().reshape(-1) for name, t in store.params.items()}
    entries = []
    for name, tensor in store.params.items():
        flat = tensor.value.reshape(-1)
        n = min(coords_per_param, flat.size)
        picks = rng.choice(flat.size, size=n, replace=False)
        for i in picks:
            i = int(i)
            saved = flat[i]
            flat[i] = saved + h
            store.zero_grad()
            plus = float(loss_fn())
            flat[i] = saved - h
            store.zero_grad()
            minus = float(loss_fn())
            flat[i] = saved
            numeric = (plus - minus) / (2.0 * h)
            ana = float(analytic[name][i])
            rel = abs(ana - numeric) / max(abs(ana) + abs(numeric), 1e-8)
            entries.append(GradCheckEntry(name, i, ana, numeric, rel))
    store.zero_grad()
    return GradCheckReport(entries=tuple(entries), rel_tol=rel_tol)


def _pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_hash: str = "") -> None:
    """Write a named-tensor container (name, shape, f32 payload)."""
    hash_bytes = config_hash.encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        _pack_u32(CHECKPOINT_VERSION),
        _pack_u32(len(hash_bytes)),
        hash_bytes,
        _pack_u32(len(tensors)),
    ]
    for name, value in tensors.items():
        name_bytes = name.encode("utf-8")
        value = np.asarray(value)
        parts.append(_pack_u32(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_pack_u32(value.ndim))
        for d in value.shape:
            parts.append(_pack_u32(d))
        parts.append(value.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Read a checkpoint container; returns (name -> f32 array, config hash)."""
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointFormatError(
                f"truncated checkpoint: wanted {n} bytes at offset {off}"
            )
        out = blob[off:off + n]
        off += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes: not a checkpoint file")
    version = u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    config_hash = take(u32()).decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
    if off != len(blob):
        raise CheckpointFormatError(f"{len(blob) - off} unexpected trailing bytes")
    return tensors, config_hash

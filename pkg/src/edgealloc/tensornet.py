"""Small dense-network core with hand-written reverse-mode gradients.

Everything here works on float64 numpy arrays with a leading batch axis.
Randomness is never drawn internally except at parameter initialization,
which takes an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 2.0
SQUASH_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

CKPT_MAGIC = b"EARL-CKPT-1\n"


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class CheckpointFormatError(ValueError):
    pass


class Module:
    """Anything owning an ordered list of named parameter arrays.

    ``version`` is bumped on every in-place parameter change so that
    forward caches can be recognised as stale.
    """

    def __init__(self) -> None:
        self.params: list[np.ndarray] = []
        self.names: list[str] = []
        self.version = 0

    def touch(self) -> None:
        self.version += 1

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy_from(self, other: "Module") -> None:
        for dst, src in zip(self.params, other.params):
            if dst.shape != src.shape:
                raise ContractError(f"shape mismatch {dst.shape} vs {src.shape}")
            dst[...] = src
        self.touch()

    def state(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        return [(prefix + n, p) for n, p in zip(self.names, self.params)]


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class MlpCache:
    version: int
    inputs: list[np.ndarray]   # input to each layer
    pre: list[np.ndarray]      # pre-activation of each layer
    out: np.ndarray


class Mlp(Module):
    """ReLU hidden layers, identity or tanh output.

    Weights are stored as (d_in, d_out) so a batch ``x`` of shape (B, d_in)
    maps to ``x @ W + b``.
    """

    def __init__(self, layer_dims: Sequence[int], rng: np.random.Generator | None = None,
                 output_activation: str = "identity"):
        super().__init__()
        if len(layer_dims) < 2:
            raise ContractError("an Mlp needs at least input and output widths")
        if output_activation not in ("identity", "tanh"):
            raise ContractError(f"unknown output activation {output_activation!r}")
        self.layer_dims = [int(d) for d in layer_dims]
        self.output_activation = output_activation
        rng = rng if rng is not None else np.random.default_rng(0)
        for k, (d_in, d_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            bound = 1.0 / np.sqrt(d_in)
            self.params.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            self.params.append(np.zeros(d_out))
            self.names += [f"W{k}", f"b{k}"]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.layer_dims[0]:
            raise ContractError(f"input width {x.shape[-1]} != {self.layer_dims[0]}")
        inputs, pre = [], []
        h = x
        for k in range(self.n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            inputs.append(h)
            z = h @ W + b
            pre.append(z)
            if k < self.n_layers - 1:
                h = relu(z)
            elif self.output_activation == "tanh":
                h = np.tanh(z)
            else:
                h = z
        cache = MlpCache(self.version, inputs, pre, h)
        return (h[0] if squeeze else h), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: MlpCache, grad_out: np.ndarray,
                 need_params: bool = True) -> tuple[list[np.ndarray] | None, np.ndarray]:
        """Gradients of ``sum(out * grad_out)`` w.r.t. parameters and input.

        ``need_params=False`` returns ``None`` for the parameter gradients.
        """
        if cache.version != self.version:
            raise ContractError("stale forward cache: parameters changed since forward")
        g = np.asarray(grad_out, dtype=np.float64)
        squeeze = g.ndim == 1
        if squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for k in reversed(range(self.n_layers)):
            z = cache.pre[k]
            if k == self.n_layers - 1:
                if self.output_activation == "tanh":
                    g = g * (1.0 - cache.out ** 2)
            else:
                g = g * (z > 0.0)
            if need_params:
                grads[2 * k] = cache.inputs[k].T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k].T
        return (grads if need_params else None), (g[0] if squeeze else g)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> None:
    """In-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and Adam accumulators differ in length")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Binds an AdamState to one or more modules."""

    def __init__(self, modules: Sequence[Module], lr: float):
        self.modules = list(modules)
        self.lr = lr
        self.state = AdamState.like(self.params)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for mod in self.modules for p in mod.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr)
        for mod in self.modules:
            mod.touch()

    def named_state(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        out = [(f"{prefix}.step", np.array(float(self.state.step)))]
        out += [(f"{prefix}.m{k}", m) for k, m in enumerate(self.state.m)]
        out += [(f"{prefix}.v{k}", v) for k, v in enumerate(self.state.v)]
        return out


def soft_update(target: Module, online: Module, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise."""
    for t, p in zip(target.params, online.params):
        t[...] = tau * p + (1.0 - tau) * t
    target.touch()


# ---------------------------------------------------------------------------
# Squashed Gaussian head


@dataclass
class GaussianHead:
    mu: np.ndarray
    log_sigma: np.ndarray
    raw_log_sigma: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    @classmethod
    def from_output(cls, out: np.ndarray) -> "GaussianHead":
        k = out.shape[-1] // 2
        raw = out[..., k:]
        return cls(out[..., :k], np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX), raw)


@dataclass
class SquashCache:
    head: GaussianHead
    noise: np.ndarray
    sigma: np.ndarray
    action: np.ndarray


def squashed_sample(head: GaussianHead, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray, SquashCache]:
    """Reparameterized tanh-Gaussian sample and its log-density.

    Returns ``(action_raw, log_prob, cache)``; ``log_prob`` sums over the
    last axis.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != head.mu.shape:
        raise ContractError(f"noise shape {noise.shape} != mean shape {head.mu.shape}")
    sigma = np.exp(head.log_sigma)
    u = head.mu + sigma * noise
    a = np.tanh(u)
    logp = (-0.5 * noise ** 2 - head.log_sigma - _HALF_LOG_2PI
            - np.log(1.0 - a ** 2 + SQUASH_EPS)).sum(axis=-1)
    return a, logp, SquashCache(head, noise, sigma, a)


def squashed_backward(cache: SquashCache, grad_action: np.ndarray,
                      grad_logp: np.ndarray) -> np.ndarray:
    """Chain ``dL/da`` and ``dL/dlogp`` back to the raw network output.

    The returned array has the layout of the policy output, ``[mu | log_sigma]``.
    """
    a, s, xi = cache.action, cache.sigma, cache.noise
    one_m = 1.0 - a ** 2
    glp = np.asarray(grad_logp, dtype=np.float64)[..., None]
    dlogp_du = 2.0 * a * one_m / (one_m + SQUASH_EPS)
    du = grad_action * one_m + glp * dlogp_du
    dmu = du
    dls = du * s * xi - glp
    raw = cache.head.raw_log_sigma
    if raw is not None:
        dls = dls * ((raw >= LOG_SIGMA_MIN) & (raw <= LOG_SIGMA_MAX))
    return np.concatenate([dmu, dls], axis=-1)


# ---------------------------------------------------------------------------
# Finite-difference gradient check


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"over {self.n_checked} coords (tol {self.tolerance:g})")


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], float], arrays: Sequence[np.ndarray], analytic: Sequence[np.ndarray],
               tolerance: float = 1e-3, h: float = 1e-5, floor: float = 1e-6,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               name: str = "grad_check", kink: Callable[[], object] | None = None,
               candidates: Sequence[np.ndarray | None] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f`` evaluates the scalar with the current contents of ``arrays``; each
    array is perturbed in place and restored. At most ``max_coords`` randomly
    chosen coordinates per array are probed. If ``kink`` is given it returns
    a hashable activation signature; probes whose +h and -h signatures
    differ straddle a ReLU/clip kink and are skipped. ``candidates`` optionally
    restricts each array to a set of flat indices.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    worst_err, worst, n = 0.0, (), 0
    for ai, (arr, grad) in enumerate(zip(arrays, analytic)):
        if arr.shape != np.shape(grad):
            raise ContractError(f"gradient shape {np.shape(grad)} != array shape {arr.shape}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ContractError("grad_check needs contiguous arrays to perturb in place")
        gflat = np.asarray(grad).reshape(-1)
        idx = np.arange(flat.size)
        if candidates is not None and candidates[ai] is not None:
            idx = np.asarray(candidates[ai])
        if max_coords is not None and idx.size > max_coords:
            idx = rng.choice(idx, size=max_coords, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            fp = f()
            sp = kink() if kink else None
            flat[j] = orig - h
            fm = f()
            sm = kink() if kink else None
            flat[j] = orig
            if kink is not None and sp != sm:
                continue
            num = (fp - fm) / (2.0 * h)
            err = float(relative_error(gflat[j], num, floor))
            n += 1
            if err > worst_err:
                worst_err, worst = err, (ai, int(j), float(gflat[j]), float(num))
    return GradCheckReport(name, worst_err, n, tolerance, worst)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str | Path, entries: Sequence[tuple[str, np.ndarray]],
                    meta: dict | None = None) -> None:
    """Write ``EARL-CKPT-1``: magic line, u64 LE manifest length, JSON
    manifest, then the arrays as contiguous little-endian float64."""
    manifest = {"meta": meta or {},
                "arrays": [{"name": n, "shape": list(np.shape(a))} for n, a in entries]}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointFormatError(f"{path}: not an EARL-CKPT-1 file")
    off = len(CKPT_MAGIC)
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    manifest = json.loads(data[off:off + n])
    off += n
    arrays = {}
    for item in manifest["arrays"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(data):
            raise CheckpointFormatError(f"{path}: truncated at {item['name']}")
        arrays[item["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - off} trailing bytes")
    return manifest["meta"], arrays


def assign_state(entries: Sequence[tuple[str, np.ndarray]], arrays: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into live parameter arrays, checking names and shapes."""
    for name, dst in entries:
        if name not in arrays:
            raise CheckpointFormatError(f"checkpoint lacks {name}")
        src = arrays[name]
        if src.shape != dst.shape:
            raise CheckpointFormatError(f"{name}: shape {src.shape} != expected {dst.shape}")
        dst[...] = src

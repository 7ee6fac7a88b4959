"""Neural building blocks on the autodiff substrate.

Modules hold named parameter tensors and expose a deterministic forward pass.
Initialization is Kaiming-uniform for weights and zeros for biases unless a
layer opts into zero initialization (prediction heads do, so an untrained head
emits its bias-determined constant).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Container of named parameters and submodules.

    Parameters are registered with :meth:`param`; submodules are discovered by
    attribute scan in insertion order, which keeps parameter naming and
    optimizer state deterministic across runs.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, array: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=requires_grad)
        t.requires_grad = requires_grad
        self._params[name] = t
        return t

    def _submodules(self) -> Iterable[tuple[str, "Module"]]:
        for attr, value in self.__dict__.items():
            if attr == "_params":
                continue
            if isinstance(value, Module):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for sub_name, sub in self._submodules():
            yield from sub.named_parameters(prefix + sub_name + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            w = np.zeros((out_features, in_features), dtype=np.float32)
        else:
            w = kaiming_uniform(rng, (out_features, in_features), in_features)
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = self.param(
            "weight", kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = self.param("bias", np.zeros(out_channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size ** 3
        self.weight = self.param(
            "weight",
            kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size, kernel_size), fan_in))
        self.bias = self.param("bias", np.zeros(out_channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.param("gain", np.ones(dim, dtype=np.float32))
        self.bias = self.param("bias", np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class MLP(Module):
    """Stack of linear layers; hidden activations default to LeakyReLU(0.01).

    ``sizes`` lists every layer width including input and output. The final
    layer can be zero-initialized so the untrained head is constant.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = "leaky_relu", zero_init_last: bool = False):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.activation = activation
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng,
                   zero_init=(zero_init_last and i == len(sizes) - 2))
            for i in range(len(sizes) - 1)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x) if self.activation == "relu" else ad.leaky_relu(x, 0.01)
        return x


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int):
    """Multi-head scaled dot-product attention on pre-projected streams.

    q: (B, Lq, D), k/v: (B, Lk, D); D must divide by ``heads``. Returns the
    concatenated head outputs (B, Lq, D) and attention weights (B, H, Lq, Lk).
    """
    B, Lq, D = q.shape
    Lk = k.shape[1]
    if D % heads != 0:
        raise ValueError(f"model dim {D} not divisible by {heads} heads")
    hd = D // heads

    def split(t: Tensor, L: int) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, L, heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q, Lq), split(k, Lk), split(v, Lk)
    scores = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, vh)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, Lq, D))
    return out, weights


class MultiHeadAttention(Module):
    """Projected multi-head attention: softmax(QK^T/sqrt(d_h))V per head,
    heads concatenated and passed through an output projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.proj_q = Linear(dim, dim, rng)
        self.proj_k = Linear(dim, dim, rng)
        self.proj_v = Linear(dim, dim, rng)
        self.proj_out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        out, weights = scaled_dot_attention(self.proj_q(q), self.proj_k(k), self.proj_v(v), self.heads)
        self.last_weights = weights.data
        return self.proj_out(out)


# -- optimizer ------------------------------------------------------------------

def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict,
              lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected adaptive-moment update, in place on ``params``.

    ``state`` holds ``t`` plus per-parameter first/second moment buffers and is
    created on first call.
    """
    b1, b2 = betas
    if "t" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state["m"][i]
        v = state["v"][i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return params, state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state,
                  lr=self.lr, betas=self.betas, eps=self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- checkpoint I/O ---------------------------------------------------------------

_CKPT_MAGIC = b"XCKPT1"


def save_checkpoint(path, named_arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write named tensors plus JSON metadata to a deterministic binary archive."""
    names = list(named_arrays.keys())
    header = {
        "tensors": [
            {"name": n, "shape": list(named_arrays[n].shape), "dtype": str(named_arrays[n].dtype)}
            for n in names
        ],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(named_arrays[n]).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(6)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for rec in header["tensors"]:
            shape = tuple(rec["shape"])
            dtype = np.dtype(rec["dtype"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError(f"checkpoint truncated at tensor {rec['name']!r}")
            arrays[rec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return arrays, header.get("meta", {})


# -- gradient verification ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _fd_slope(fn: Callable[[], float], buf: np.ndarray, flat_index: int, h: float) -> float:
    orig = buf.flat[flat_index]
    buf.flat[flat_index] = orig + h
    up = fn()
    buf.flat[flat_index] = orig - h
    down = fn()
    buf.flat[flat_index] = orig
    return (up - down) / (2.0 * h)


def grad_check(module: Module | None, inputs: Sequence[np.ndarray],
               forward: Callable[[Sequence[Tensor]], Tensor] | None = None,
               h: float = 1e-3, tolerance: float = 1e-3, seed: int = 0,
               max_elements_per_tensor: int | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    Checks every parameter tensor of ``module`` and every entry of
    ``inputs``. The scalar objective is the forward output contracted with a
    fixed random projection. Computation runs in float64; the per-tensor
    relative error is ``max |a - n| / max(|a|, |n|, 0.01 * scale, 1e-8)``
    where ``scale`` is the larger infinity norm of the two gradients.
    Elements over tolerance are re-measured at h/4 and h/16 so
    finite-difference kinks (ReLU boundaries) are not reported as gradient
    defects; genuine defects persist across h.

    ``max_elements_per_tensor`` caps the probed elements per tensor (a
    seeded random subset once a tensor exceeds the cap); small tensors are
    always checked exhaustively.
    """
    if forward is None:
        if module is None:
            raise ValueError("grad_check needs a module or an explicit forward function")
        forward = lambda ts: module(*ts)  # noqa: E731

    params = list(module.named_parameters()) if module is not None else []
    saved = [p.data for _, p in params]
    for _, p in params:
        p.data = p.data.astype(np.float64)
    input_tensors = [Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True) for x in inputs]
    for t in input_tensors:
        t.requires_grad = True

    rng = np.random.default_rng(seed)
    projection: dict[str, np.ndarray] = {}

    def objective() -> Tensor:
        out = forward(input_tensors)
        if "p" not in projection:
            projection["p"] = rng.standard_normal(out.shape)
        return ad.sum_(out * Tensor(projection["p"]))

    def objective_value() -> float:
        with_tape = objective()
        return float(with_tape.data)

    loss = objective()
    for _, p in params:
        p.grad = None
    for t in input_tensors:
        t.grad = None
    loss.backward()

    targets: list[tuple[str, np.ndarray, np.ndarray]] = []
    for name, p in params:
        targets.append((name, p.data, p.grad if p.grad is not None else np.zeros_like(p.data)))
    for i, t in enumerate(input_tensors):
        targets.append((f"input{i}", t.data, t.grad if t.grad is not None else np.zeros_like(t.data)))

    report = GradCheckReport(max_rel_err=0.0, tolerance=tolerance)
    pick_rng = np.random.default_rng(seed + 9973)
    for name, buf, analytic in targets:
        if max_elements_per_tensor is not None and buf.size > max_elements_per_tensor:
            probe = np.sort(pick_rng.choice(buf.size, max_elements_per_tensor, replace=False))
        else:
            probe = np.arange(buf.size)
        numeric = np.zeros(len(probe))
        for n_i, idx in enumerate(probe):
            numeric[n_i] = _fd_slope(objective_value, buf, int(idx), h)
        a_probe = analytic.ravel()[probe]
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        denom = np.maximum(np.maximum(np.abs(a_probe), np.abs(numeric)), max(1e-8, 0.01 * scale))
        rel = np.abs(a_probe - numeric) / denom
        rel = np.where(np.isfinite(rel), rel, np.inf)   # NaN gradients must fail loudly
        for n_i in np.flatnonzero(rel >= tolerance):
            best = rel[n_i]
            for hh in (h / 4, h / 16, h / 64, h / 1024):
                n2 = _fd_slope(objective_value, buf, int(probe[n_i]), hh)
                a = a_probe[n_i]
                d = max(abs(a), abs(n2), max(1e-8, 0.01 * scale))
                best = min(best, abs(a - n2) / d)
                if best < tolerance:
                    break
            rel[n_i] = best
        worst = float(rel.max(initial=0.0))
        report.per_tensor[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
        if worst >= tolerance:
            report.failures.append(name)

    for (_, p), orig in zip(params, saved):
        p.data = orig
        p.grad = None
    return report

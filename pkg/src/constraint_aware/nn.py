"""Policy and value networks with hand-written reverse-mode gradients.

Both networks are tanh MLPs with the same trunk shape and no shared weights.
All parameters live in one flat float64 vector; :class:`PolicyNet` knows the
offsets of every weight matrix and bias inside it.

Layout of the flat vector::

    policy trunk (W, b) * len(hidden), policy mean head (W, b), log_std,
    value trunk  (W, b) * len(hidden), value head (W, b)
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CAPW"
FORMAT_VERSION = 1
INIT_LOG_STD = float(np.log(0.3))


class NonFiniteParams(ValueError):
    pass


class WeightsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int = 6
    hidden: tuple[int, ...] = (256, 256)
    action_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or self.action_dim <= 0 or not self.hidden:
            raise ValueError(f"invalid network dims {self}")
        if any(h <= 0 for h in self.hidden):
            raise ValueError(f"invalid hidden sizes {self.hidden}")


@dataclass
class Forward:
    mean: np.ndarray
    log_std: np.ndarray
    value: np.ndarray
    # per-network list of (layer input, layer output after tanh)
    cache: dict = field(repr=False, default_factory=dict)


class PolicyNet:
    """Gaussian policy head plus scalar value head over a shared input."""

    def __init__(self, spec: MlpSpec | None = None):
        self.spec = spec or MlpSpec()
        self._layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        off = 0

        def add(name, shape):
            nonlocal off
            self._layout[name] = (off, shape)
            off += int(np.prod(shape))

        dims = [self.spec.input_dim, *self.spec.hidden]
        for net, out_dim in (("pi", self.spec.action_dim), ("v", 1)):
            for i in range(len(self.spec.hidden)):
                add(f"{net}.W{i}", (dims[i + 1], dims[i]))
                add(f"{net}.b{i}", (dims[i + 1],))
            add(f"{net}.Wout", (out_dim, dims[-1]))
            add(f"{net}.bout", (out_dim,))
            if net == "pi":
                add("log_std", (self.spec.action_dim,))
        self.n_params = off

    def names(self) -> list[str]:
        return list(self._layout)

    def slice(self, name: str) -> slice:
        off, shape = self._layout[name]
        return slice(off, off + int(np.prod(shape)))

    def views(self, params: np.ndarray) -> dict[str, np.ndarray]:
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} params, got {params.shape}")
        return {n: params[self.slice(n)].reshape(shape) for n, (_, shape) in self._layout.items()}

    def policy_mask(self) -> np.ndarray:
        """Boolean mask of parameters that feed the policy head."""
        m = np.zeros(self.n_params, dtype=bool)
        for n in self._layout:
            if not n.startswith("v."):
                m[self.slice(n)] = True
        return m

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        params = np.zeros(self.n_params)
        w = self.views(params)
        for name in self._layout:
            if ".W" not in name:
                continue
            rows, cols = w[name].shape
            if name == "pi.Wout":
                gain = 0.01
            elif rows > cols:
                # widening layer: unit-norm rows, so tanh units start outside
                # their linear range and products of inputs are reachable
                gain = math.sqrt(rows / cols)
            else:
                gain = 1.0
            w[name][...] = _orthogonal(w[name].shape, gain, rng)
        w["log_std"][...] = INIT_LOG_STD
        return params

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def forward(self, params: np.ndarray, states: np.ndarray) -> Forward:
        if not np.all(np.isfinite(params)):
            raise NonFiniteParams("parameter vector contains non-finite values")
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        w = self.views(params)
        cache = {}
        outs = {}
        for net in ("pi", "v"):
            h = x
            acts = [x]
            for i in range(len(self.spec.hidden)):
                h = np.tanh(h @ w[f"{net}.W{i}"].T + w[f"{net}.b{i}"])
                acts.append(h)
            cache[net] = acts
            outs[net] = h @ w[f"{net}.Wout"].T + w[f"{net}.bout"]
        return Forward(mean=outs["pi"], log_std=w["log_std"].copy(), value=outs["v"][:, 0], cache=cache)

    def backward(
        self,
        params: np.ndarray,
        fwd: Forward,
        d_mean: np.ndarray | None = None,
        d_log_std: np.ndarray | None = None,
        d_value: np.ndarray | None = None,
    ) -> np.ndarray:
        """Gradient of a scalar loss given its partials w.r.t. the outputs.

        ``d_mean`` is ``(N, action_dim)``, ``d_value`` is ``(N,)`` and
        ``d_log_std`` is ``(action_dim,)``; missing partials are zero.
        """
        w = self.views(params)
        grad = np.zeros(self.n_params)
        g = self.views(grad)
        if d_log_std is not None:
            g["log_std"][...] = d_log_std
        for net, up in (("pi", d_mean), ("v", None if d_value is None else np.asarray(d_value)[:, None])):
            if up is None:
                continue
            acts = fwd.cache[net]
            dh = np.atleast_2d(up)
            g[f"{net}.Wout"][...] = dh.T @ acts[-1]
            g[f"{net}.bout"][...] = dh.sum(axis=0)
            dh = dh @ w[f"{net}.Wout"]
            for i in reversed(range(len(self.spec.hidden))):
                dz = dh * (1.0 - acts[i + 1] ** 2)
                g[f"{net}.W{i}"][...] = dz.T @ acts[i]
                g[f"{net}.b{i}"][...] = dz.sum(axis=0)
                if i:
                    dh = dz @ w[f"{net}.W{i}"]
        return grad


def _orthogonal(shape, gain, rng):
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Adam:
    """Adam with bias correction; updates the parameter array in place."""

    def __init__(self, n: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m *= self.b1
        self.m += (1.0 - self.b1) * grad
        self.v *= self.b2
        self.v += (1.0 - self.b2) * grad * grad
        m_hat = self.m / (1.0 - self.b1**self.t)
        v_hat = self.v / (1.0 - self.b2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def save_weights(path: str | Path, net: PolicyNet, params: np.ndarray, meta: dict | None = None) -> Path:
    """Write the binary weights file and its ``.meta.json`` sidecar."""
    path = Path(path)
    spec = net.spec
    dims = [spec.input_dim, len(spec.hidden), *spec.hidden, spec.action_dim]
    header = MAGIC + struct.pack(f"<I{len(dims)}I", FORMAT_VERSION, *dims)
    header += struct.pack("<Q", net.n_params)
    path.write_bytes(header + np.asarray(params, dtype="<f8").tobytes())
    sidecar = {
        "format": "CAPW",
        "version": FORMAT_VERSION,
        "spec": {"input_dim": spec.input_dim, "hidden": list(spec.hidden), "action_dim": spec.action_dim},
        "n_params": net.n_params,
    }
    sidecar.update(meta or {})
    meta_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_weights(path: str | Path) -> tuple[PolicyNet, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {raw[:4]!r}")
    try:
        off = 4
        version, input_dim, n_hidden = struct.unpack_from("<III", raw, off)
        off += 12
        if version != FORMAT_VERSION:
            raise WeightsFormatError(f"{path}: unsupported version {version}")
        hidden = struct.unpack_from(f"<{n_hidden}I", raw, off)
        off += 4 * n_hidden
        (action_dim,) = struct.unpack_from("<I", raw, off)
        off += 4
        (n_params,) = struct.unpack_from("<Q", raw, off)
        off += 8
    except struct.error as e:
        raise WeightsFormatError(f"{path}: truncated header") from e
    net = PolicyNet(MlpSpec(input_dim, tuple(hidden), action_dim))
    if n_params != net.n_params or len(raw) - off != 8 * n_params:
        raise WeightsFormatError(f"{path}: parameter count mismatch")
    params = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    if not np.all(np.isfinite(params)):
        raise NonFiniteParams(f"{path}: non-finite parameters")
    return net, params

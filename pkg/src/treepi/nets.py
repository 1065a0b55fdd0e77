"""Small function approximators with hand-derived reverse-mode gradients.

All parameters of a network live in one flat float64 vector described by a
shape manifest, so snapshotting, target syncing, Adam, and checkpointing are
plain array operations. Networks are elu MLPs with optional layer
normalization after the first linear layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .core import RngStream

LN_EPS = 1e-5


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_inv(y: float) -> float:
    """x such that softplus(x) == y (y > 0)."""
    if y <= 0:
        raise ValueError("softplus is strictly positive")
    return float(np.log(np.expm1(y))) if y < 30 else float(y)


def _ln_forward(z: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = z.mean(axis=-1, keepdims=True)
    var = np.mean((z - mu) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv_std
    return g * xhat + b, (xhat, inv_std)

def _ln_backward(dout: np.ndarray, g: np.ndarray, pack):
    xhat, inv_std = pack
    dg = (dout * xhat).sum(axis=0) if dout.ndim == 2 else dout * xhat
    db = dout.sum(axis=0) if dout.ndim == 2 else dout
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dz = inv_std * (dxhat - m1 - xhat * m2)
    return dz, dg, db


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    layer_norm: bool = True

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ValueError("need at least one hidden layer")
        if min((self.in_dim, self.out_dim) + self.hidden) < 1:
            raise ValueError("all widths must be >= 1")


class Mlp:
    """elu MLP over a flat parameter vector; forward caches what backward needs."""

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        widths = (spec.in_dim,) + spec.hidden + (spec.out_dim,)
        self.manifest: list[tuple[str, tuple[int, ...]]] = []
        for i in range(len(widths) - 1):
            self.manifest.append((f"W{i}", (widths[i + 1], widths[i])))
            self.manifest.append((f"b{i}", (widths[i + 1],)))
            if i == 0 and spec.layer_norm:
                self.manifest.append(("ln_g", (widths[1],)))
                self.manifest.append(("ln_b", (widths[1],)))
        self._offsets = {}
        total = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            self._offsets[name] = (total, total + size, shape)
            total += size
        self.n_params = total
        self.n_linears = len(widths) - 1

    def view(self, params: np.ndarray, name: str) -> np.ndarray:
        lo, hi, shape = self._offsets[name]
        return params[lo:hi].reshape(shape)

    def bind(self, params: np.ndarray) -> "BoundMlp":
        """Pre-slice the layer views for repeated inference on fixed params."""
        return BoundMlp(self, params)

    def init(self, rng: RngStream, final_scale: float = 1.0) -> np.ndarray:
        params = np.zeros(self.n_params)
        for i in range(self.n_linears):
            w = self.view(params, f"W{i}")
            fan_in = w.shape[1]
            scale = 1.0 / np.sqrt(fan_in)
            if i == self.n_linears - 1:
                scale *= final_scale
            w[...] = scale * rng.normal(w.shape)
        if self.spec.layer_norm:
            self.view(params, "ln_g")[...] = 1.0
        return params

    def forward(self, params: np.ndarray, x: np.ndarray):
        if not np.all(np.isfinite(params)):
            raise ValueError("non-finite parameters")
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if not np.all(np.isfinite(h)):
            raise ValueError("non-finite input")
        if h.shape[-1] != self.spec.in_dim:
            raise ValueError(f"input dim {h.shape[-1]} != {self.spec.in_dim}")
        caches = []
        for i in range(self.n_linears):
            w = self.view(params, f"W{i}")
            b = self.view(params, f"b{i}")
            z = h @ w.T + b
            ln_pack = None
            u = z
            if i == 0 and self.spec.layer_norm:
                u, ln_pack = _ln_forward(z, self.view(params, "ln_g"),
                                         self.view(params, "ln_b"))
            if i < self.n_linears - 1:
                out = elu(u)
            else:
                out = u
            caches.append((h, u, ln_pack))
            h = out
        y = h[0] if single else h
        return y, (caches, single)

    def backward(self, params: np.ndarray, cache, dy: np.ndarray):
        """Exact reverse pass; returns (flat param grad, input grad)."""
        caches, single = cache
        dy = np.asarray(dy, dtype=np.float64)
        dh = dy[None, :] if single else dy
        if dh.shape[-1] != self.spec.out_dim:
            raise ValueError("output-gradient shape mismatch")
        grads = np.zeros(self.n_params)
        for i in reversed(range(self.n_linears)):
            h_in, u, ln_pack = caches[i]
            du = dh if i == self.n_linears - 1 else dh * elu_grad(u)
            if i == 0 and self.spec.layer_norm:
                dz, dg, db_ln = _ln_backward(du, self.view(params, "ln_g"), ln_pack)
                self.view(grads, "ln_g")[...] += dg
                self.view(grads, "ln_b")[...] += db_ln
            else:
                dz = du
            w = self.view(params, f"W{i}")
            self.view(grads, f"W{i}")[...] += dz.T @ h_in
            self.view(grads, f"b{i}")[...] += dz.sum(axis=0)
            dh = dz @ w
        dx = dh[0] if single else dh
        return grads, dx


class BoundMlp:
    """Inference-only view of an Mlp with fixed parameters.

    Produces bit-identical outputs to Mlp.forward (same operations in the same
    order) without cache construction or per-call validation; used in search
    inner loops where the same parameters are applied many times.
    """

    __slots__ = ("spec", "n_linears", "layers", "ln")

    def __init__(self, mlp: Mlp, params: np.ndarray):
        self.spec = mlp.spec
        self.n_linears = mlp.n_linears
        # views into `params` (parameter updates replace arrays, never mutate)
        self.layers = [(mlp.view(params, f"W{i}").T, mlp.view(params, f"b{i}"))
                       for i in range(mlp.n_linears)]
        self.ln = ((mlp.view(params, "ln_g"), mlp.view(params, "ln_b"))
                   if mlp.spec.layer_norm else None)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        for i, (wt, b) in enumerate(self.layers):
            z = h @ wt + b
            if i == 0 and self.ln is not None:
                n = z.shape[-1]
                mu = np.add.reduce(z, -1, keepdims=True) / n
                d = z - mu
                var = np.add.reduce(d * d, -1, keepdims=True) / n
                z = self.ln[0] * (d / np.sqrt(var + LN_EPS)) + self.ln[1]
            if i < self.n_linears - 1:
                z = np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
            h = z
        return h


# ---------------------------------------------------------------------------
# Diagonal Gaussian policy head.
# ---------------------------------------------------------------------------

LOG_2PI = float(np.log(2.0 * np.pi))


class GaussianPolicyNet:
    """MLP trunk with fused mean / pre-variance heads.

    Covariance is diag(softplus(pre_variance)): strictly positive for every
    parameter value, no clamping.
    """

    def __init__(self, feat_dim: int, action_dim: int, hidden: tuple[int, ...],
                 layer_norm: bool = True):
        self.action_dim = action_dim
        self.mlp = Mlp(MlpSpec(feat_dim, hidden, 2 * action_dim, layer_norm))
        self.n_params = self.mlp.n_params

    def init(self, rng: RngStream, init_var: float = 1.0) -> np.ndarray:
        params = self.mlp.init(rng, final_scale=0.01)
        last = self.mlp.n_linears - 1
        b = self.mlp.view(params, f"b{last}")
        b[self.action_dim:] = softplus_inv(init_var)
        return params

    def dist(self, params: np.ndarray, feats: np.ndarray):
        """Returns (mean, var, cache); batched when feats is 2-D."""
        y, cache = self.mlp.forward(params, feats)
        mean = y[..., :self.action_dim]
        pre_var = y[..., self.action_dim:]
        return mean, softplus(pre_var), (cache, pre_var)

    def dist_backward(self, params: np.ndarray, dist_cache, dmean: np.ndarray,
                      dvar: np.ndarray):
        cache, pre_var = dist_cache
        dy = np.concatenate([dmean, dvar * sigmoid(pre_var)], axis=-1)
        return self.mlp.backward(params, cache, dy)

    def sample_n(self, params: np.ndarray, feats: np.ndarray, n: int, rng: RngStream):
        """Draw n actions at one state; returns (actions (n, A), log-densities (n,))."""
        mean, var, _ = self.dist(params, np.asarray(feats, dtype=np.float64))
        std = np.sqrt(var)
        z = rng.normal((n, self.action_dim))
        actions = mean[None, :] + std[None, :] * z
        logps = self._logp(mean[None, :], var[None, :], actions)
        return actions, logps

    @staticmethod
    def _logp(mean: np.ndarray, var: np.ndarray, actions: np.ndarray) -> np.ndarray:
        d = actions - mean
        return -0.5 * np.sum(d * d / var + np.log(var) + LOG_2PI, axis=-1)

    def log_prob(self, params: np.ndarray, feats: np.ndarray, actions: np.ndarray):
        feats = np.asarray(feats, dtype=np.float64)
        mean, var, _ = self.dist(params, feats)
        return self._logp(mean, var, np.asarray(actions, dtype=np.float64))

    def weighted_logp_backward(self, params: np.ndarray, feats: np.ndarray,
                               actions: np.ndarray, weights: np.ndarray):
        """Gradients of sum_b weights_b * log pi(a_b | feats_b).

        Returns (logps, d_params, d_feats).
        """
        feats = np.asarray(feats, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        single = feats.ndim == 1
        if single:
            feats = feats[None, :]
            actions = actions[None, :]
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        mean, var, dc = self.dist(params, feats)
        logps = self._logp(mean, var, actions)
        d = actions - mean
        dmean = w * d / var
        dvar = w * 0.5 * (d * d / (var * var) - 1.0 / var)
        dparams, dfeats = self.dist_backward(params, dc, dmean, dvar)
        if single:
            return logps[0], dparams, dfeats[0]
        return logps, dparams, dfeats


def gaussian_kl(mean_p: np.ndarray, var_p: np.ndarray, mean_q: np.ndarray,
                var_q: np.ndarray) -> np.ndarray:
    """KL(N(mean_p, diag var_p) || N(mean_q, diag var_q)) in nats, per row."""
    var_p = np.asarray(var_p, dtype=np.float64)
    var_q = np.asarray(var_q, dtype=np.float64)
    if np.any(var_p <= 0) or np.any(var_q <= 0):
        raise ValueError("variances must be strictly positive")
    d = np.asarray(mean_p) - np.asarray(mean_q)
    return 0.5 * np.sum(np.log(var_q / var_p) + (var_p + d * d) / var_q - 1.0, axis=-1)


def gaussian_kl_backward(mean_p, var_p, mean_q, var_q, upstream=1.0):
    """Gradients of upstream * KL(p || q) wrt all four inputs."""
    d = mean_p - mean_q
    dmean_q = upstream * (mean_q - mean_p) / var_q
    dvar_q = upstream * 0.5 * (1.0 / var_q - (var_p + d * d) / (var_q * var_q))
    dmean_p = upstream * d / var_q
    dvar_p = upstream * 0.5 * (1.0 / var_q - 1.0 / var_p)
    return dmean_p, dvar_p, dmean_q, dvar_q


# ---------------------------------------------------------------------------
# Adam and target synchronization.
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float) -> "AdamState":
        return cls(lr=lr, m=np.zeros_like(params), v=np.zeros_like(params))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; mutates `state`, returns new params."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter / gradient / moment shape mismatch")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def target_sync(source: np.ndarray, target: np.ndarray) -> None:
    """Bit-exact copy of source into target (same manifest length)."""
    if source.shape != target.shape:
        raise ValueError("manifest mismatch between source and target")
    np.copyto(target, source)


# ---------------------------------------------------------------------------
# Checkpoint format: magic, JSON manifest header, flat little-endian float64.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TPCKPT01"


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()]
    header = json.dumps({"version": 1, "arrays": entries, "meta": meta}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode())
        if header.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        return arrays, header["meta"]

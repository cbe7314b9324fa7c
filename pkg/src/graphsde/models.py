"""Permutation-equivariant partial-score networks.

``ScoreModelX`` estimates the node-feature partial score from a stack of
GCN layers; ``ScoreModelA`` estimates the adjacency partial score from
graph multi-head attention blocks over adjacency-power channels. Both
divide their raw output by the marginal std of their component's SDE,
which is the only time conditioning they receive.

All inputs are batched: ``X[B,N,F]``, ``A[B,N,N]``, ``mask[B,N]``.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sde import SdeSpec, marginal_std

ParamMap = Mapping[str, Tensor]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Module:
    """Named float64 parameters plus a forward pass over ``Tensor`` views of them."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def _linear(self, rng, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        self.params[f"{name}.W"] = _glorot(rng, fan_in, fan_out)
        if bias:
            self.params[f"{name}.b"] = np.zeros(fan_out)

    def tensors(self, params: ParamMap | None = None) -> dict[str, Tensor]:
        if params is not None:
            return dict(params)
        return {k: Tensor(v, _check=False) for k, v in self.params.items()}

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def linear(x: Tensor, p: ParamMap, name: str) -> Tensor:
    y = ad.matmul(x, p[f"{name}.W"])
    b = p.get(f"{name}.b")
    return y if b is None else ad.add(y, b)


def _mask_rows(H: Tensor, mask: np.ndarray) -> Tensor:
    return ad.mul(H, mask[..., :, None])


def _pair_mask(mask: np.ndarray) -> np.ndarray:
    return mask[..., :, None] * mask[..., None, :]


def gcn_layer(H, A, mask: np.ndarray, W, act: str = "elu", b=None) -> Tensor:
    """``act(D^-1/2 (A + I) D^-1/2 H W)`` restricted to active nodes.

    Degrees are clipped below at 1 so noisy (possibly negative) weights
    cannot produce a non-positive degree.
    """
    H, A = ad.as_tensor(H), ad.as_tensor(A)
    mask = np.asarray(mask, dtype=float)
    if A.shape[-1] != A.shape[-2] or H.shape[-2] != A.shape[-1]:
        raise ad.ShapeMismatch(f"gcn_layer: H {H.shape} vs A {A.shape}")
    eye = np.eye(A.shape[-1]) * mask[..., :, None]
    A_hat = ad.add(A, eye)
    deg = ad.clip_min(ad.sum(A_hat, axis=-1), 1.0)
    d = ad.mul(ad.power(deg, -0.5), mask)
    norm = ad.mul(ad.mul(A_hat, ad.reshape(d, d.shape + (1,))), ad.reshape(d, d.shape[:-1] + (1, d.shape[-1])))
    out = ad.matmul(ad.matmul(norm, H), W)
    if b is not None:
        out = ad.add(out, b)
    return _mask_rows(ad.activation(out, act), mask)


def adjacency_channels(A, mask: np.ndarray, powers: int) -> Tensor:
    """``[A, A^2, ..., A^P]`` stacked on a trailing channel axis.

    Each power is divided by ``max(1, max|A^p|)`` per graph; the scale is
    treated as a constant for differentiation.
    """
    A = ad.as_tensor(A)
    chans = []
    cur = A
    for p in range(1, powers + 1):
        if p > 1:
            cur = ad.matmul(cur, A)
        scale = np.maximum(1.0, np.abs(cur.data).max(axis=(-1, -2), keepdims=True))
        chans.append(ad.reshape(ad.mul(cur, 1.0 / scale), cur.shape + (1,)))
    E = ad.concat_last_dim(chans)
    return ad.mul(E, _pair_mask(np.asarray(mask, dtype=float))[..., None])


def gmh_block(H, E, mask: np.ndarray, p: ParamMap, name: str, heads: int, act: str = "elu"):
    """Graph multi-head attention over node features and edge channels.

    Per input channel and head, dot-product logits ``Q K^T / sqrt(d_h)`` are
    symmetrized and fed, together with the incoming edge channels, to an
    edge-wise MLP producing the new edge channels. Nodes are updated by
    aggregating ``H W_V`` with row-softmaxed new edge channels (averaged
    over channels). Returns ``(H', E')``.
    """
    H, E = ad.as_tensor(H), ad.as_tensor(E)
    mask = np.asarray(mask, dtype=float)
    B, N = H.shape[0], H.shape[1]
    c_in = E.shape[-1]
    WQ, WK = p[f"{name}.Wq"], p[f"{name}.Wk"]
    d_out = WQ.shape[1] // c_in
    if WQ.shape[1] % c_in or d_out % heads:
        raise ad.ShapeMismatch(f"{name}: query width {WQ.shape[1]} incompatible with {c_in} channels, {heads} heads")
    dh = d_out // heads
    G = c_in * heads

    def split(x):
        return ad.transpose(ad.reshape(x, (B, N, G, dh)), (0, 2, 1, 3))

    Q = split(ad.matmul(H, WQ))
    K = split(ad.matmul(H, WK))
    L = ad.scalar_mul(ad.matmul(Q, ad.transpose(K)), 1.0 / np.sqrt(dh))
    L = ad.scalar_mul(ad.add(L, ad.transpose(L)), 0.5)
    L = ad.transpose(L, (0, 2, 3, 1))
    feats = ad.concat_last_dim([L, E])
    hid = ad.activation(linear(feats, p, f"{name}.e1"), act)
    E_new = linear(hid, p, f"{name}.e2")
    pm = _pair_mask(mask)
    E_new = ad.mul(E_new, pm[..., None])

    V = ad.matmul(H, p[f"{name}.Wv"])
    c_out = E_new.shape[-1]
    logits = ad.transpose(E_new, (0, 3, 1, 2))
    col_off = (mask[:, None, None, :] == 0)
    att = ad.row_softmax(ad.masked_fill(logits, col_off, -1e9))
    agg = ad.matmul(att, ad.reshape(V, (B, 1, N, V.shape[-1])))
    H_new = ad.scalar_mul(ad.sum(agg, axis=1), 1.0 / c_out)
    H_new = _mask_rows(ad.activation(H_new, act), mask)
    return H_new, E_new


def _std_of(spec: SdeSpec, t, batch: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=float), (batch,))
    return np.asarray(marginal_std(spec, t), dtype=float).reshape(batch)


class ScoreModelX(Module):
    """GCN stack, concatenated layer outputs, row-wise tanh MLP."""

    def __init__(self, F: int, hidden: int = 32, layers: int = 3, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = {"F": F, "hidden": hidden, "layers": layers}
        self.F, self.hidden, self.layers = F, hidden, layers
        dim = F
        for i in range(layers):
            self._linear(rng, f"gcn{i}", dim, hidden)
            dim = hidden
        cat = F + layers * hidden
        self._linear(rng, "mlp0", cat, 2 * hidden)
        self._linear(rng, "mlp1", 2 * hidden, F)

    def raw(self, X, A, mask, params: ParamMap | None = None) -> Tensor:
        p = self.tensors(params)
        mask = np.asarray(mask, dtype=float)
        hs = [ad.as_tensor(X)]
        for i in range(self.layers):
            hs.append(gcn_layer(hs[-1], A, mask, p[f"gcn{i}.W"], "elu", p[f"gcn{i}.b"]))
        h = ad.concat_last_dim(hs)
        h = ad.tanh(linear(h, p, "mlp0"))
        return _mask_rows(linear(h, p, "mlp1"), mask)

    def __call__(self, X, A, mask, t, spec: SdeSpec, params: ParamMap | None = None) -> Tensor:
        return score_x_forward(self, X, A, mask, t, spec, params)


class ScoreModelA(Module):
    """GMH blocks over ``[A, ..., A^P]`` interleaved with GCN node updates."""

    def __init__(self, F: int, hidden: int = 32, blocks: int = 5, powers: int = 2, heads: int = 4,
                 c_hidden: int = 8, c_final: int = 4, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = {"F": F, "hidden": hidden, "blocks": blocks, "powers": powers, "heads": heads,
                       "c_hidden": c_hidden, "c_final": c_final}
        self.F, self.hidden, self.blocks, self.powers, self.heads = F, hidden, blocks, powers, heads
        dim = F
        c_in = powers
        total_c = powers
        for i in range(blocks):
            c_out = c_final if i == blocks - 1 else c_hidden
            name = f"gmh{i}"
            self.params[f"{name}.Wq"] = _glorot(rng, dim, hidden * c_in)
            self.params[f"{name}.Wk"] = _glorot(rng, dim, hidden * c_in)
            self.params[f"{name}.Wv"] = _glorot(rng, dim, hidden)
            self._linear(rng, f"{name}.e1", c_in * heads + c_in, 2 * c_out)
            self._linear(rng, f"{name}.e2", 2 * c_out, c_out)
            self._linear(rng, f"gcn{i}", hidden, hidden)
            dim = hidden
            c_in = c_out
            total_c += c_out
        self._linear(rng, "mlp0", total_c, 2 * hidden)
        self._linear(rng, "mlp1", 2 * hidden, 1)

    def raw(self, X, A, mask, params: ParamMap | None = None) -> Tensor:
        p = self.tensors(params)
        mask = np.asarray(mask, dtype=float)
        A = ad.as_tensor(A)
        E = adjacency_channels(A, mask, self.powers)
        H = ad.as_tensor(X)
        edges = [E]
        for i in range(self.blocks):
            H_att, E = gmh_block(H, E, mask, p, f"gmh{i}", self.heads)
            H = gcn_layer(H_att, A, mask, p[f"gcn{i}.W"], "elu", p[f"gcn{i}.b"])
            edges.append(E)
        h = ad.tanh(linear(ad.concat_last_dim(edges), p, "mlp0"))
        S = ad.reshape(linear(h, p, "mlp1"), A.shape)
        S = ad.scalar_mul(ad.add(S, ad.transpose(S)), 0.5)
        off = _pair_mask(mask) * (1.0 - np.eye(A.shape[-1]))
        return ad.mul(S, off)

    def __call__(self, X, A, mask, t, spec: SdeSpec, params: ParamMap | None = None) -> Tensor:
        return score_a_forward(self, X, A, mask, t, spec, params)


def score_x_forward(model: ScoreModelX, X, A, mask, t, spec: SdeSpec, params: ParamMap | None = None) -> Tensor:
    raw = model.raw(X, A, mask, params)
    std = _std_of(spec, t, raw.shape[0])
    return ad.mul(raw, (1.0 / std)[:, None, None])


def score_a_forward(model: ScoreModelA, X, A, mask, t, spec: SdeSpec, params: ParamMap | None = None) -> Tensor:
    raw = model.raw(X, A, mask, params)
    std = _std_of(spec, t, raw.shape[0])
    return ad.mul(raw, (1.0 / std)[:, None, None])


def model_jacobian_norm(model: Module, X, A, mask, t, spec: SdeSpec, probes: int,
                        rng: np.random.Generator) -> float:
    """Squared Frobenius norm of the model Jacobian w.r.t. ``(X_t, A_t)``."""
    mask = np.asarray(mask, dtype=float)
    return ad.jacobian_frobenius_sq(lambda x, a: model(x, a, mask, t, spec), [X, A], probes, rng)


def build_models(F: int, x_cfg: Mapping | None = None, a_cfg: Mapping | None = None,
                 rng: np.random.Generator | None = None) -> tuple[ScoreModelX, ScoreModelA]:
    rng = rng if rng is not None else np.random.default_rng(0)
    mx = ScoreModelX(F, rng=rng, **dict(x_cfg or {}))
    ma = ScoreModelA(F, rng=rng, **dict(a_cfg or {}))
    return mx, ma

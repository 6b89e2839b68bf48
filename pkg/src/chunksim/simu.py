"""Future-context simulation: a GRU encoder with state carried across chunks
and a per-position affine predictor.

The predictor maps the top-layer GRU state ``h`` at a chunk's last real
frame to ``N`` future frames, ``x_i = h @ A[:, i, :] + b[i]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, absolute, is_grad_enabled, matmul


@dataclass
class SimuConfig:
    d_gru: int = 64
    layers: int = 2
    n_future: int = 40
    d_mel: int = 80

    def __post_init__(self):
        for field in ("d_gru", "layers", "n_future", "d_mel"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")


@dataclass
class SimState:
    """Per-layer hidden vectors, each (B, d_gru)."""

    hidden: list

    @classmethod
    def zeros(cls, cfg: SimuConfig, batch: int = 1, dtype=np.float64):
        return cls([np.zeros((batch, cfg.d_gru), dtype=dtype) for _ in range(cfg.layers)])

    @property
    def top(self) -> np.ndarray:
        return self.hidden[-1]


def init_params(cfg: SimuConfig, rng, dtype=np.float64) -> dict:
    p = {}
    H = cfg.d_gru
    bound = 1.0 / np.sqrt(H)
    for layer in range(cfg.layers):
        d_in = cfg.d_mel if layer == 0 else H
        pre = f"simu.gru{layer}."
        p[pre + "w_x"] = rng.uniform(-bound, bound, (d_in, 3 * H))
        p[pre + "w_h"] = rng.uniform(-bound, bound, (H, 3 * H))
        p[pre + "b_x"] = np.zeros(3 * H)
        p[pre + "b_h"] = np.zeros(3 * H)
    p["simu.pred.A"] = rng.normal(0.0, 0.1 / np.sqrt(H), (H, cfg.n_future, cfg.d_mel))
    p["simu.pred.b"] = np.zeros((cfg.n_future, cfg.d_mel))
    return {k: v.astype(dtype) for k, v in p.items()}


def _sig(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def gru_layer(x: Tensor, h0, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor) -> Tensor:
    """One GRU layer over (B, T, d_in), returning all states (B, T, H).

    Gate order in the packed weights is (reset, update, candidate); the state
    update is ``h_t = (1 - z) * h_{t-1} + z * n``.  ``h0`` may be an array or
    a Tensor (its gradient is propagated).
    """
    xd = x.data
    B, T, _ = xd.shape
    H = w_h.shape[0]
    h0t = h0 if isinstance(h0, Tensor) else Tensor(h0)
    if h0t.shape != (B, H):
        raise ValueError(f"initial state shape {h0t.shape} != {(B, H)}")
    if xd.shape[2] != w_x.shape[0]:
        raise ValueError(f"input dim {xd.shape[2]} != {w_x.shape[0]}")
    wx, wh, bx, bh = w_x.data, w_h.data, b_x.data, b_h.data
    out = np.empty((B, T, H), dtype=xd.dtype)
    keep = is_grad_enabled()
    if keep:
        r_s = np.empty_like(out)
        z_s = np.empty_like(out)
        n_s = np.empty_like(out)
        ghn_s = np.empty_like(out)
    h = h0t.data
    for t in range(T):
        gx = xd[:, t] @ wx + bx
        gh = h @ wh + bh
        r = _sig(gx[:, :H] + gh[:, :H])
        z = _sig(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        h = (1.0 - z) * h + z * n
        out[:, t] = h
        if keep:
            r_s[:, t], z_s[:, t], n_s[:, t], ghn_s[:, t] = r, z, n, gh[:, 2 * H:]

    def backward(g):
        dgx = np.empty((B, T, 3 * H), dtype=g.dtype)
        dgh = np.empty_like(dgx)
        dh = np.zeros((B, H), dtype=g.dtype)
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            r, z, n, ghn = r_s[:, t], z_s[:, t], n_s[:, t], ghn_s[:, t]
            hp = out[:, t - 1] if t > 0 else h0t.data
            dn = dh * z * (1.0 - n * n)
            dz = dh * (n - hp) * z * (1.0 - z)
            dr = dn * ghn * r * (1.0 - r)
            dgx[:, t, :H] = dr
            dgx[:, t, H:2 * H] = dz
            dgx[:, t, 2 * H:] = dn
            dgh[:, t, :H] = dr
            dgh[:, t, H:2 * H] = dz
            dgh[:, t, 2 * H:] = dn * r
            dh = dh * (1.0 - z) + dgh[:, t] @ wh.T
        hprev = np.concatenate([h0t.data[:, None], out[:, :-1]], axis=1)
        fx = dgx.reshape(-1, 3 * H)
        fh = dgh.reshape(-1, 3 * H)
        return (
            dgx @ wx.T,
            dh,
            xd.reshape(-1, xd.shape[2]).T @ fx,
            hprev.reshape(-1, H).T @ fh,
            fx.sum(axis=0),
            fh.sum(axis=0),
        )

    return Tensor._make(out, (x, h0t, w_x, w_h, b_x, b_h), backward)


def encode_sequence(params: dict, x: Tensor, state: SimState | None = None, cfg: SimuConfig | None = None):
    """Run the stacked GRU over (B, T, d_mel).

    Returns ``(top_states, per_layer_outputs)``; the final state of layer
    ``l`` is ``per_layer_outputs[l][:, -1]``.
    """
    layers = sum(1 for k in params if k.startswith("simu.gru") and k.endswith(".w_x"))
    B = x.shape[0]
    H = params["simu.gru0.w_h"].shape[0]
    outs = []
    h = x
    for layer in range(layers):
        pre = f"simu.gru{layer}."
        h0 = state.hidden[layer] if state is not None else np.zeros((B, H), dtype=x.data.dtype)
        h = gru_layer(h, h0, params[pre + "w_x"], params[pre + "w_h"], params[pre + "b_x"], params[pre + "b_h"])
        outs.append(h)
    return h, outs


def gru_encode_chunk(frames: np.ndarray, state: SimState, params: dict) -> SimState:
    """Advance ``state`` over a block of REAL frames (T, d_mel) for one stream."""
    frames = np.asarray(frames)
    if frames.shape[0] == 0:
        return SimState([h.copy() for h in state.hidden])
    d_in = params["simu.gru0.w_x"].shape[0]
    if frames.ndim != 2 or frames.shape[1] != d_in:
        raise ValueError(f"frames must be (T, {d_in}), got {frames.shape}")
    _, outs = encode_sequence(params, Tensor(frames[None]), state)
    return SimState([o.data[:, -1].copy() for o in outs])


def predict_future(h, params: dict) -> Tensor:
    """Simulate N future frames from top-layer states h (..., d_gru) -> (..., N, d_mel)."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    A, b = params["simu.pred.A"], params["simu.pred.b"]
    H, N, d = A.shape
    lead = h.shape[:-1]
    flat = h.reshape((-1, H))
    y = matmul(flat, A.reshape((H, N * d))) + b.reshape((N * d,))
    return y.reshape(lead + (N, d))


def simu_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean absolute error over valid entries; 0 when nothing is valid.

    ``pred`` and ``target`` are (..., N, d); ``mask`` is (..., N).
    """
    target = np.asarray(target)
    mask = np.asarray(mask, dtype=bool)
    if tuple(pred.shape) != target.shape or target.shape[:-1] != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    count = int(mask.sum()) * target.shape[-1]
    weight = np.broadcast_to(mask[..., None], target.shape).astype(pred.data.dtype)
    err = absolute(pred - target.astype(pred.data.dtype)) * weight
    if count == 0:
        return err.sum() * 0.0
    return err.sum() / count

"""LSTM cell, bidirectional sequencing and the scan-level classifier.

The cell follows the usual three-gate logic: input, output and forget
gates squash affine maps of (x_t, h_prev) through sigmoids, the candidate
state through tanh, then c_t = f*c_prev + i*g and h_t = o*tanh(c_t).
Everything is batched: x_t is (B,d), states are (B,H).

The scan-level classifier runs a frozen embedding over each slice, a
BiLSTM over the resulting feature sequence, and two heads: one affine map
shared across positions for per-slice logits, one affine map over the
concatenated sequence output for the whole-scan logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import Backbone, Linear
from .ops import Parameter

GATES = ("i", "o", "f", "c")


@dataclass
class QNetConfig:
    hidden: int = 32          # per direction
    seq_len: int = 8          # slices per scan
    num_classes: int = 2


class LstmParams:
    """Input weights W_* (H,d), recurrent weights U_* (H,H), biases b_* (H)
    for the four gate/candidate maps. Forget-gate bias starts at 1."""

    def __init__(self, rng, input_dim, hidden, dtype=np.float32):
        self.input_dim = input_dim
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)

        def u(*shape):
            return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))

        for g in GATES:
            setattr(self, f"w_{g}", u(hidden, input_dim))
            setattr(self, f"u_{g}", u(hidden, hidden))
            setattr(self, f"b_{g}", u(hidden))
        self.b_f.value[...] = 1.0

    def named_parameters(self, prefix=""):
        out = []
        for kind in ("w", "u", "b"):
            for g in GATES:
                name = f"{kind}_{g}"
                out.append((f"{prefix}.{name}" if prefix else name, getattr(self, name)))
        return out


def lstm_step(x_t, h_prev, c_prev, p: LstmParams):
    """One cell update. Returns (h_t, c_t, cache)."""
    if x_t.shape[1] != p.input_dim or h_prev.shape[1] != p.hidden:
        raise ops.DimensionError(
            f"lstm_step: got x {x_t.shape}, h {h_prev.shape} for d={p.input_dim}, H={p.hidden}")
    i = ops.sigmoid(x_t @ p.w_i.value.T + h_prev @ p.u_i.value.T + p.b_i.value)
    o = ops.sigmoid(x_t @ p.w_o.value.T + h_prev @ p.u_o.value.T + p.b_o.value)
    f = ops.sigmoid(x_t @ p.w_f.value.T + h_prev @ p.u_f.value.T + p.b_f.value)
    g = np.tanh(x_t @ p.w_c.value.T + h_prev @ p.u_c.value.T + p.b_c.value)
    c_t = f * c_prev + i * g
    tc = np.tanh(c_t)
    h_t = o * tc
    cache = (x_t, h_prev, c_prev, i, o, f, g, tc)
    return h_t, c_t, cache


def lstm_step_backward(dh, dc_in, cache, p: LstmParams):
    """Backprop one step. Accumulates parameter grads, returns (dx, dh_prev, dc_prev)."""
    x_t, h_prev, c_prev, i, o, f, g, tc = cache
    do = dh * tc
    dc = dc_in + dh * o * (1 - tc * tc)
    da = {
        "i": dc * g * i * (1 - i),
        "o": do * o * (1 - o),
        "f": dc * c_prev * f * (1 - f),
        "c": dc * i * (1 - g * g),
    }
    dc_prev = dc * f
    dx = np.zeros_like(x_t)
    dh_prev = np.zeros_like(h_prev)
    for gate in GATES:
        d = da[gate]
        getattr(p, f"w_{gate}").grad += d.T @ x_t
        getattr(p, f"u_{gate}").grad += d.T @ h_prev
        getattr(p, f"b_{gate}").grad += d.sum(axis=0)
        dx += d @ getattr(p, f"w_{gate}").value
        dh_prev += d @ getattr(p, f"u_{gate}").value
    return dx, dh_prev, dc_prev


def lstm_sequence_forward(x, p: LstmParams):
    """x: (B,T,d) -> outputs (B,T,H) with zero initial state, plus caches."""
    b, t, _ = x.shape
    h = np.zeros((b, p.hidden), dtype=x.dtype)
    c = np.zeros((b, p.hidden), dtype=x.dtype)
    outs = np.empty((b, t, p.hidden), dtype=x.dtype)
    caches = []
    for step in range(t):
        h, c, cache = lstm_step(x[:, step], h, c, p)
        outs[:, step] = h
        caches.append(cache)
    return outs, caches


def lstm_sequence_backward(dout, caches, p: LstmParams):
    """Backprop through time. dout: (B,T,H) upstream on every h_t."""
    b, t, hdim = dout.shape
    dh_next = np.zeros((b, hdim), dtype=dout.dtype)
    dc_next = np.zeros((b, hdim), dtype=dout.dtype)
    dx = None
    for step in reversed(range(t)):
        dxt, dh_next, dc_next = lstm_step_backward(
            dout[:, step] + dh_next, dc_next, caches[step], p)
        if dx is None:
            dx = np.empty((b, t, dxt.shape[1]), dtype=dout.dtype)
        dx[:, step] = dxt
    return dx


def bilstm_forward(x, fwd: LstmParams, bwd: LstmParams):
    """x: (B,T,d) -> (B,T,2H). Row t is [h_fwd(t) || h_bwd(t)] where the
    backward pass consumes x in reverse order and is re-reversed to align."""
    out_f, caches_f = lstm_sequence_forward(x, fwd)
    out_b_rev, caches_b = lstm_sequence_forward(x[:, ::-1], bwd)
    out_b = out_b_rev[:, ::-1]
    return np.concatenate([out_f, out_b], axis=2), (caches_f, caches_b)


def bilstm_backward(dy, cache, fwd: LstmParams, bwd: LstmParams):
    caches_f, caches_b = cache
    hdim = fwd.hidden
    dx_f = lstm_sequence_backward(np.ascontiguousarray(dy[:, :, :hdim]), caches_f, fwd)
    dx_b = lstm_sequence_backward(np.ascontiguousarray(dy[:, ::-1, hdim:]), caches_b, bwd)
    return dx_f + dx_b[:, ::-1]


def pad_scan(slices: np.ndarray, seq_len: int):
    """Repeat the last slice up to seq_len. Returns (padded, valid mask)."""
    t = slices.shape[0]
    if t > seq_len:
        raise ValueError(f"scan has {t} slices, expected at most {seq_len}")
    mask = np.zeros(seq_len, dtype=bool)
    mask[:t] = True
    if t == seq_len:
        return slices, mask
    reps = np.repeat(slices[-1:], seq_len - t, axis=0)
    return np.concatenate([slices, reps], axis=0), mask


def masked_cross_entropy(logits, labels, mask):
    """Mean CE over valid positions. logits (B,T,K), labels (B,), mask (B,T)."""
    b, t, k = logits.shape
    flat = logits.reshape(b * t, k)
    probs = ops.softmax(flat)
    lab = np.repeat(np.asarray(labels), t)
    mflat = np.asarray(mask, dtype=bool).reshape(b * t)
    n_valid = int(mflat.sum())
    nll = -np.log(np.maximum(probs[np.arange(b * t), lab], 1e-30))
    loss = float(nll[mflat].sum() / n_valid)
    d = probs
    d[np.arange(b * t), lab] -= 1.0
    d *= mflat[:, None] / n_valid
    return loss, d.reshape(b, t, k).astype(logits.dtype, copy=False)


class QNet:
    """Frozen embedding -> BiLSTM -> shared image head + scan head."""

    def __init__(self, backbone: Backbone, cfg: QNetConfig, seed: int, dtype=np.float32):
        self.backbone = backbone
        self.backbone.set_frozen(True)
        self.cfg = cfg
        d = backbone.cfg.feature_dim
        rng = np.random.default_rng([seed, 2])
        self.lstm_f = LstmParams(rng, d, cfg.hidden, dtype=dtype)
        self.lstm_b = LstmParams(rng, d, cfg.hidden, dtype=dtype)
        self.image_head = Linear(rng, 2 * cfg.hidden, cfg.num_classes, dtype=dtype)
        self.scan_head = Linear(rng, cfg.seq_len * 2 * cfg.hidden, cfg.num_classes, dtype=dtype)

    def embed_scans(self, scans: np.ndarray) -> np.ndarray:
        """(B,T,C,H,W) -> (B,T,d) through the frozen backbone, inference mode."""
        b, t = scans.shape[:2]
        flat = scans.reshape(b * t, *scans.shape[2:])
        feat, _ = self.backbone.forward(flat, train=False)
        return feat.reshape(b, t, -1)

    def forward_embedded(self, emb: np.ndarray):
        """(B,T,d) -> (image_logits (B,T,K), scan_logits (B,K), cache)."""
        b, t, _ = emb.shape
        if t != self.cfg.seq_len:
            raise ValueError(f"expected sequences of length {self.cfg.seq_len}, got {t}")
        seq, c_bi = bilstm_forward(emb, self.lstm_f, self.lstm_b)
        flat = seq.reshape(b * t, -1)
        img_logits, c_img = self.image_head.forward(flat)
        scan_in = seq.reshape(b, -1)
        scan_logits, c_scan = self.scan_head.forward(scan_in)
        cache = (c_bi, c_img, c_scan, seq.shape)
        return img_logits.reshape(b, t, -1), scan_logits, cache

    def forward(self, scans: np.ndarray):
        emb = self.embed_scans(scans)
        img, scan, cache = self.forward_embedded(emb)
        return img, scan, cache

    def backward(self, d_img, d_scan, cache):
        """Backprop into the heads and BiLSTM; the embedding is frozen and
        receives no gradient."""
        c_bi, c_img, c_scan, seq_shape = cache
        b, t, two_h = seq_shape
        d_seq = self.image_head.backward(d_img.reshape(b * t, -1), c_img).reshape(seq_shape)
        d_seq = d_seq + self.scan_head.backward(d_scan, c_scan).reshape(seq_shape)
        return bilstm_backward(d_seq, c_bi, self.lstm_f, self.lstm_b)

    def trainable_parameters(self):
        out = self.lstm_f.named_parameters("lstm_f")
        out += self.lstm_b.named_parameters("lstm_b")
        out += self.image_head.named_parameters("image_head")
        out += self.scan_head.named_parameters("scan_head")
        return out

    def named_parameters(self):
        return self.backbone.named_parameters() + self.trainable_parameters()

    def named_state(self):
        return self.backbone.named_state()

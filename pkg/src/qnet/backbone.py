"""Residual convolutional embedding network.

Topology: 7x7 stride-2 stem conv -> BN -> ReLU -> 3x3 stride-2 max-pool,
then 8 two-conv residual blocks with stride-2 channel-doubling
down-sampling entering blocks 3, 5 and 7 (1-indexed), then global average
pooling to a feature vector. Widths default to the desk scale (8..64);
the reference scale (64..512) is reachable through the config.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import Parameter


@dataclass
class BackboneConfig:
    stem_width: int = 8
    width_schedule: tuple = (8, 16, 32, 64)
    block_count: int = 8
    stem_kernel: int = 7
    block_kernel: int = 3
    input_channels: int = 3

    def validate(self):
        ws = tuple(self.width_schedule)
        if len(ws) != 4 or any(ws[i + 1] != 2 * ws[i] for i in range(3)):
            raise ValueError(f"width_schedule must strictly double over 4 stages, got {ws}")
        if self.stem_width != ws[0]:
            raise ValueError("stem_width must equal width_schedule[0]")
        if self.block_count != 8:
            raise ValueError("block_count is fixed at 8")
        return self

    @property
    def feature_dim(self) -> int:
        return self.width_schedule[3]


def kaiming_conv(rng, out_ch, in_ch, k, dtype):
    std = np.sqrt(2.0 / (in_ch * k * k))
    return rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(dtype)


def uniform_linear(rng, out_dim, in_dim, dtype):
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
    b = rng.uniform(-bound, bound, size=out_dim).astype(dtype)
    return w, b


class Conv2d:
    def __init__(self, rng, in_ch, out_ch, k, stride=1, pad=0, dtype=np.float32):
        self.weight = Parameter(kaiming_conv(rng, out_ch, in_ch, k, dtype))
        self.stride = stride
        self.pad = pad

    def forward(self, x):
        return ops.conv2d_forward(x, self.weight.value, self.stride, self.pad)

    def backward(self, dy, cache):
        dx, dw = ops.conv2d_backward(dy, cache, self.weight.value)
        self.weight.grad += dw
        return dx

    def named_parameters(self, prefix=""):
        return [(prefix + ".weight", self.weight)]

    def named_state(self, prefix=""):
        return []


class BatchNorm2d:
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.collecting = False
        self._sum = None

    def forward(self, x, train):
        if train and self.collecting:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            self._sum += x.sum(axis=(0, 2, 3), dtype=np.float64)
            self._sumsq += (x.astype(np.float64) ** 2).sum(axis=(0, 2, 3))
            self._count += n
        return ops.batchnorm2d_forward(x, self.gamma.value, self.beta.value,
                                       self.running_mean, self.running_var, train)

    def backward(self, dy, cache):
        dx, dgamma, dbeta = ops.batchnorm2d_backward(dy, cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx

    def start_collecting(self):
        c = self.running_mean.shape[0]
        self._sum = np.zeros(c, dtype=np.float64)
        self._sumsq = np.zeros(c, dtype=np.float64)
        self._count = 0
        self.collecting = True

    def finish_collecting(self):
        # install population statistics of the whole pass
        mean = self._sum / self._count
        var = self._sumsq / self._count - mean ** 2
        self.running_mean[...] = mean.astype(self.running_mean.dtype)
        self.running_var[...] = np.maximum(var, 0.0).astype(self.running_var.dtype)
        self.collecting = False
        self._sum = None

    def named_parameters(self, prefix=""):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]

    def named_state(self, prefix=""):
        return [(prefix + ".running_mean", self.running_mean),
                (prefix + ".running_var", self.running_var)]


class Linear:
    def __init__(self, rng, in_dim, out_dim, dtype=np.float32):
        w, b = uniform_linear(rng, out_dim, in_dim, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(b)

    def forward(self, x):
        return ops.linear_forward(x, self.weight.value, self.bias.value)

    def backward(self, dy, cache):
        dx, dw, db = ops.linear_backward(dy, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def named_parameters(self, prefix=""):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]

    def named_state(self, prefix=""):
        return []


class ResBlock:
    """Two 3x3 conv+BN layers with an additive skip.

    A down-sampling block halves H and W (stride-2 first conv) and doubles
    channels; its skip path is then a 1x1 stride-2 conv followed by BN.
    Only the first conv is followed by a ReLU; a second ReLU follows the
    addition.
    """

    def __init__(self, rng, in_ch, out_ch, k=3, downsample=False, dtype=np.float32):
        stride = 2 if downsample else 1
        if not downsample and in_ch != out_ch:
            raise ValueError("channel change requires a downsample block")
        self.conv1 = Conv2d(rng, in_ch, out_ch, k, stride=stride, pad=k // 2, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(rng, out_ch, out_ch, k, stride=1, pad=k // 2, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        if downsample:
            self.proj = Conv2d(rng, in_ch, out_ch, 1, stride=2, pad=0, dtype=dtype)
            self.bn_proj = BatchNorm2d(out_ch, dtype=dtype)
        else:
            self.proj = None
            self.bn_proj = None

    def forward(self, x, train):
        a1, c_conv1 = self.conv1.forward(x)
        n1, c_bn1 = self.bn1.forward(a1, train)
        r1, c_relu1 = ops.activation_forward(n1, "relu")
        a2, c_conv2 = self.conv2.forward(r1)
        n2, c_bn2 = self.bn2.forward(a2, train)
        if self.proj is not None:
            skip, c_proj = self.proj.forward(x)
            skip, c_bnp = self.bn_proj.forward(skip, train)
        else:
            skip, c_proj, c_bnp = x, None, None
        y, c_relu2 = ops.activation_forward(n2 + skip, "relu")
        cache = (c_conv1, c_bn1, c_relu1, c_conv2, c_bn2, c_proj, c_bnp, c_relu2)
        return y, cache

    def backward(self, dy, cache):
        c_conv1, c_bn1, c_relu1, c_conv2, c_bn2, c_proj, c_bnp, c_relu2 = cache
        dsum = ops.activation_backward(dy, c_relu2)
        dn2 = self.bn2.backward(dsum, c_bn2)
        dr1 = self.conv2.backward(dn2, c_conv2)
        dn1 = ops.activation_backward(dr1, c_relu1)
        da1 = self.bn1.backward(dn1, c_bn1)
        dx = self.conv1.backward(da1, c_conv1)
        if self.proj is not None:
            dskip = self.bn_proj.backward(dsum, c_bnp)
            dx = dx + self.proj.backward(dskip, c_proj)
        else:
            dx = dx + dsum
        return dx

    def _children(self):
        kids = [("conv1", self.conv1), ("bn1", self.bn1),
                ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.proj is not None:
            kids += [("proj", self.proj), ("bn_proj", self.bn_proj)]
        return kids

    def named_parameters(self, prefix=""):
        out = []
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}.{name}"))
        return out

    def named_state(self, prefix=""):
        out = []
        for name, child in self._children():
            out.extend(child.named_state(f"{prefix}.{name}"))
        return out


class Backbone:
    """Stem + 8 residual blocks + GAP. Output dim is width_schedule[3]."""

    def __init__(self, cfg: BackboneConfig, seed: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        w0, w1, w2, w3 = cfg.width_schedule
        self.stem_conv = Conv2d(rng, cfg.input_channels, w0, cfg.stem_kernel,
                                stride=2, pad=cfg.stem_kernel // 2, dtype=dtype)
        self.stem_bn = BatchNorm2d(w0, dtype=dtype)
        plan = [  # (in, out, downsample); down-sampling enters blocks 3, 5, 7
            (w0, w0, False), (w0, w0, False),
            (w0, w1, True), (w1, w1, False),
            (w1, w2, True), (w2, w2, False),
            (w2, w3, True), (w3, w3, False),
        ]
        self.blocks = [ResBlock(rng, i, o, cfg.block_kernel, d, dtype=dtype)
                       for i, o, d in plan]

    def forward(self, x, train):
        """Slice batch (B,C,H,W) -> (features (B,d), cache).

        The cache's last entry holds the pre-GAP feature maps, which the
        CAM computation reuses.
        """
        if x.shape[1] != self.cfg.input_channels:
            raise ops.DimensionError(
                f"backbone expects {self.cfg.input_channels} channels, got {x.shape[1]}")
        if x.shape[2] < 32 or x.shape[3] < 32:
            raise ops.DimensionError("input spatial size too small for 5 stride-2 stages")
        a, c_conv = self.stem_conv.forward(x)
        n, c_bn = self.stem_bn.forward(a, train)
        r, c_relu = ops.activation_forward(n, "relu")
        p, c_pool = ops.maxpool2d_forward(r, k=3, stride=2, pad=1)
        block_caches = []
        h = p
        for blk in self.blocks:
            h, c = blk.forward(h, train)
            block_caches.append(c)
        feat, c_gap = ops.gap_forward(h)
        cache = (c_conv, c_bn, c_relu, c_pool, block_caches, c_gap, h)
        return feat, cache

    def backward(self, dfeat, cache):
        c_conv, c_bn, c_relu, c_pool, block_caches, c_gap, _ = cache
        d = ops.gap_backward(dfeat, c_gap)
        for blk, c in zip(reversed(self.blocks), reversed(block_caches)):
            d = blk.backward(d, c)
        d = ops.maxpool2d_backward(d, c_pool)
        d = ops.activation_backward(d, c_relu)
        d = self.stem_bn.backward(d, c_bn)
        return self.stem_conv.backward(d, c_conv)

    def feature_maps(self, x):
        """Pre-GAP maps (B,d,h',w') in inference mode."""
        _, cache = self.forward(x, train=False)
        return cache[6]

    def _children(self):
        kids = [("stem_conv", self.stem_conv), ("stem_bn", self.stem_bn)]
        kids += [(f"blocks.{i}", b) for i, b in enumerate(self.blocks)]
        return kids

    def named_parameters(self, prefix="backbone"):
        out = []
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}.{name}"))
        return out

    def named_state(self, prefix="backbone"):
        out = []
        for name, child in self._children():
            out.extend(child.named_state(f"{prefix}.{name}"))
        return out

    def bn_layers(self):
        layers = [self.stem_bn]
        for blk in self.blocks:
            layers += [blk.bn1, blk.bn2]
            if blk.bn_proj is not None:
                layers.append(blk.bn_proj)
        return layers

    def set_frozen(self, frozen: bool):
        for _, p in self.named_parameters():
            p.frozen = frozen


class Stage1Model:
    """Backbone plus the image-level classification head.

    The head is what makes this a slice classifier; dropping it leaves the
    embedding used by the scan-level model.
    """

    def __init__(self, cfg: BackboneConfig, seed: int, num_classes: int = 2,
                 dtype=np.float32):
        self.backbone = Backbone(cfg, seed, dtype=dtype)
        rng = np.random.default_rng([seed, 1])
        self.head = Linear(rng, cfg.feature_dim, num_classes, dtype=dtype)

    def forward(self, x, train):
        feat, c_bb = self.backbone.forward(x, train)
        logits, c_head = self.head.forward(feat)
        return logits, (c_bb, c_head)

    def backward(self, dlogits, cache):
        c_bb, c_head = cache
        dfeat = self.head.backward(dlogits, c_head)
        return self.backbone.backward(dfeat, c_bb)

    def named_parameters(self):
        return self.backbone.named_parameters() + self.head.named_parameters("head")

    def named_state(self):
        return self.backbone.named_state()


def build_backbone(cfg: BackboneConfig, seed: int, dtype=np.float32) -> Backbone:
    return Backbone(cfg, seed, dtype=dtype)


def embed_image(x: np.ndarray, backbone: Backbone) -> np.ndarray:
    """GAP feature vectors (B,d) for a slice batch, inference mode."""
    feat, _ = backbone.forward(x, train=False)
    return feat

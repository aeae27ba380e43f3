"""CNN*, VINN and VINNA segmentation networks built from competitive dense blocks.

All three variants share one layout::

    pre-IDB -> T1 -> IDB -> pool -> CDB ... -> pool -> bottleneck
    bottleneck -> unpool -> CDB ... -> T1^-1 -> concat(pre-IDB skip) -> post-CDB -> 1x1 conv

``T1`` is max pooling for CNN*, a scale-only resampling onto the internal
lattice for VINN, and the full rotation/translation/scale resampling for
VINNA.  Its reverse consumes the context recorded on the way down.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
from torch import nn

from . import nnops
from .geometry import GridSpec
from .loss import LossValue, composite_loss
from .sampler import FeatureMap, LatentAug, transform_feature_map

__all__ = [
    "CHECKPOINT_MAGIC",
    "CompetitiveBlock",
    "LatentTransformContext",
    "NetworkConfig",
    "SegNet",
    "forward_equivariance_probe",
    "load_checkpoint",
    "loss_and_gradients",
    "save_checkpoint",
]

Variant = Literal["CNN*", "VINN", "VINNA"]
Plane = Literal["axial", "coronal", "sagittal"]
VARIANTS = ("CNN*", "VINN", "VINNA")


@dataclass(frozen=True)
class NetworkConfig:
    variant: Variant = "VINNA"
    depth: int = 5
    channels: tuple[int, ...] = (16, 32, 32, 32, 32)
    num_classes: int = 10
    res_inner: float = 0.8
    plane: Plane = "axial"
    in_channels: int = 1
    convs_per_block: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if len(self.channels) != self.depth or min(self.channels) < 1:
            raise ValueError(f"need {self.depth} positive channel widths, got {self.channels}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.res_inner <= 0:
            raise ValueError("res_inner must be > 0")
        if self.convs_per_block < 2:
            raise ValueError("convs_per_block must be >= 2")
        if self.plane not in ("axial", "coronal", "sagittal"):
            raise ValueError(f"unknown plane {self.plane!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()

    @classmethod
    def from_json(cls, text: str) -> NetworkConfig:
        return cls(**json.loads(text))


class Conv(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, gen: torch.Generator):
        super().__init__()
        w, b = nnops.init_conv(c_out, c_in, k, gen)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(b)

    def forward(self, x):
        return nnops.conv2d(x, self.weight, self.bias)


class BatchNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        state = nnops.BatchNormState(self.gamma, self.beta, self.running_mean, self.running_var)
        return nnops.batch_norm(x, state, self.training)


class PReLU(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.a = nn.Parameter(torch.full((channels,), nnops.PRELU_INIT))

    def forward(self, x):
        return nnops.prelu(x, self.a)


class CompetitiveBlock(nn.Module):
    """Repeated (activation -> 3x3 conv -> BN) units joined by maxout.

    ``kind="input"`` (pre-IDB / IDB) normalizes the raw input with BN and
    uses BN instead of PReLU ahead of the first convolution.  When the input
    width differs from the block width the first unit has no local skip.
    """

    def __init__(self, c_in: int, c_out: int, convs: int, kind: str, gen: torch.Generator):
        super().__init__()
        self.kind = kind
        self.c_in, self.c_out = c_in, c_out
        self.acts = nn.ModuleList(
            [BatchNorm(c_in) if kind == "input" else PReLU(c_in)] + [PReLU(c_out) for _ in range(convs - 1)]
        )
        self.convs = nn.ModuleList([Conv(c_in, c_out, 3, gen)] + [Conv(c_out, c_out, 3, gen) for _ in range(convs - 1)])
        self.bns = nn.ModuleList([BatchNorm(c_out) for _ in range(convs)])

    def forward(self, x):
        h = x
        for i, (act, conv, bn) in enumerate(zip(self.acts, self.convs, self.bns)):
            y = bn(conv(act(h)))
            h = y if (i == 0 and self.c_in != self.c_out) else nnops.maxout(h, y)
        return h


@dataclass
class LatentTransformContext:
    """What the first transition recorded for its reverse."""

    augs: list[LatentAug]
    native_extent: tuple[int, int]
    native_res: float
    consumed: bool = False


def _as_aug_list(aug, n: int) -> list[LatentAug] | None:
    if aug is None:
        return None
    if isinstance(aug, LatentAug):
        return [aug] * n
    augs = list(aug)
    if len(augs) != n:
        raise ValueError(f"{len(augs)} augmentations for a batch of {n}")
    return augs


class SegNet(nn.Module):
    """Encoder/decoder of competitive dense blocks with a configurable first transition."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        ch = cfg.channels
        k = cfg.convs_per_block
        enc = [CompetitiveBlock(cfg.in_channels, ch[0], k, "input", gen)]
        enc.append(CompetitiveBlock(ch[0], ch[1], k, "input", gen))
        for lvl in range(2, cfg.depth):
            enc.append(CompetitiveBlock(ch[lvl - 1], ch[lvl], k, "dense", gen))
        self.encoder = nn.ModuleList(enc)
        self.bottleneck = CompetitiveBlock(ch[-1], ch[-1], k, "dense", gen)
        dec = []
        for lvl in range(1, cfg.depth):
            # Output width matches the level above so its pool indices fit.
            dec.append(CompetitiveBlock(ch[lvl], ch[lvl - 1], k, "dense", gen))
        self.decoder = nn.ModuleList(dec)
        self.post = CompetitiveBlock(2 * ch[0], ch[0], k, "dense", gen)
        self.classifier = Conv(ch[0], cfg.num_classes, 1, gen)
        self.last_context: LatentTransformContext | None = None

    # -- transitions -------------------------------------------------------

    def _latent_augs(self, aug, n: int) -> list[LatentAug]:
        augs = _as_aug_list(aug, n)
        if self.cfg.variant == "CNN*":
            if augs is not None and any(a != LatentAug() for a in augs):
                raise ValueError("CNN* has no internal transform path; aug must be identity or None")
            return []
        if augs is None:
            return [LatentAug()] * n
        if self.cfg.variant == "VINN":
            return [LatentAug(alpha=a.alpha) for a in augs]
        return augs

    def latent_extent(self, extent: tuple[int, int], res: float) -> tuple[int, int]:
        h, w = extent
        if self.cfg.variant == "CNN*":
            return (h + h % 2) // 2, (w + w % 2) // 2
        spec = GridSpec.from_resolutions(h, w, res, self.cfg.res_inner)
        return spec.h_inner, spec.w_inner

    def check_extent(self, extent: tuple[int, int], res: float) -> None:
        need = 2 ** self.cfg.depth
        lh, lw = self.latent_extent(extent, res)
        if min(lh, lw) < need:
            raise ValueError(
                f"input {extent} at {res} mm gives latent extent {(lh, lw)}; depth {self.cfg.depth} needs >= {need}"
            )

    def _down(self, h, res, augs, context_sink):
        if self.cfg.variant == "CNN*":
            z, idx = nnops.maxpool2(h)
            return z, idx
        ctx = LatentTransformContext(augs, (h.shape[2], h.shape[3]), res)
        v = transform_feature_map(FeatureMap(h, res), augs, self.cfg.res_inner, "forward")
        context_sink.append(ctx)
        return v.data, None

    def _up(self, z, idx, extent, ctx: LatentTransformContext | None):
        if self.cfg.variant == "CNN*":
            return nnops.index_unpool2(z, idx, extent)
        if ctx is None or ctx.consumed:
            raise RuntimeError("inverse transition without a fresh transform context")
        ctx.consumed = True
        out = transform_feature_map(
            FeatureMap(z, self.cfg.res_inner), ctx.augs, self.cfg.res_inner, "inverse",
            native_extent=ctx.native_extent, native_res=ctx.native_res,
        )
        return out.data

    # -- forward -----------------------------------------------------------

    def logits(self, x: torch.Tensor, res: float, aug=None, *, zero_latent_path: bool = False) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (n, {self.cfg.in_channels}, h, w) input, got {tuple(x.shape)}")
        extent = (x.shape[2], x.shape[3])
        self.check_extent(extent, res)
        augs = self._latent_augs(aug, x.shape[0])

        contexts: list[LatentTransformContext] = []
        skip0 = self.encoder[0](x)
        z, idx0 = self._down(skip0, res, augs, contexts)
        self.last_context = contexts[0] if contexts else None

        skips, pools = [], []
        for block in self.encoder[1:]:
            h = block(z)
            skips.append(h)
            z, idx = nnops.maxpool2(h)
            pools.append(idx)
        z = self.bottleneck(z)
        for lvl in range(len(skips) - 1, -1, -1):
            skip = skips[lvl]
            up = nnops.index_unpool2(z, pools[lvl], (skip.shape[2], skip.shape[3]))
            z = self.decoder[lvl](nnops.maxout(up, skip))

        up = self._up(z, idx0, extent, self.last_context)
        if zero_latent_path:
            up = torch.zeros_like(up)
        z = self.post(torch.cat([skip0, up], dim=1))
        return self.classifier(z)

    def forward(self, x: torch.Tensor, res: float, aug=None) -> torch.Tensor:
        """Per-pixel class probabilities at the input extent."""
        return nnops.softmax_channels(self.logits(x, res, aug))

    @torch.no_grad()
    def predict(self, x: torch.Tensor, res: float, batch: int = 16) -> torch.Tensor:
        was = self.training
        self.eval()
        out = torch.cat([self(x[i : i + batch], res) for i in range(0, x.shape[0], batch)])
        self.train(was)
        return out


def forward_equivariance_probe(net: SegNet, x: torch.Tensor, res: float, aug: LatentAug):
    """Eval-mode probabilities with ``aug`` applied internally and with identity parameters."""
    was = net.training
    net.eval()
    with torch.no_grad():
        with_aug = net(x, res, aug)
        reference = with_aug if aug == LatentAug() else net(x, res, None)
    net.train(was)
    return with_aug, reference


def loss_and_gradients(
    net: SegNet,
    x: torch.Tensor,
    res: float,
    onehot: torch.Tensor,
    weights: torch.Tensor,
    aug=None,
) -> tuple[LossValue, dict[str, torch.Tensor]]:
    """Composite loss of one batch and the gradient of every trainable parameter."""
    if onehot.shape[2:] != x.shape[2:] or weights.shape[1:] != x.shape[2:]:
        raise ValueError("labels/weights extent does not match the batch")
    params = [p for p in net.parameters() if p.requires_grad]
    probs = net(x, res, aug)
    value = composite_loss(probs, onehot, weights, check=False)
    grads = torch.autograd.grad(value.total, params)
    names = [n for n, p in net.named_parameters() if p.requires_grad]
    return value, dict(zip(names, grads))


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"LSEGCKPT"
CHECKPOINT_VERSION = 1


def _state_items(net: SegNet):
    for name, t in net.state_dict().items():
        yield name, t


def save_checkpoint(net: SegNet, path: str | Path, extra: dict | None = None) -> None:
    """Binary layout (all little-endian)::

        8s  magic "LSEGCKPT"
        u32 format version
        32s sha256 of the canonical config JSON
        u32 config JSON length, then the JSON bytes (utf-8)
        u32 extra JSON length, then the JSON bytes
        u32 record count
        per record: u16 name length, name (utf-8), u8 ndim, ndim x u32 dims,
                    prod(dims) float32 values in row-major order
    """
    cfg_json = net.cfg.to_json().encode()
    extra_json = json.dumps(extra or {}, sort_keys=True).encode()
    items = list(_state_items(net))
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(net.cfg.digest())
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    buf.write(struct.pack("<I", len(extra_json)))
    buf.write(extra_json)
    buf.write(struct.pack("<I", len(items)))
    for name, t in items:
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[SegNet, dict]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("truncated checkpoint")
        out = bytes(view[pos : pos + n])
        pos += n
        return out

    if take(8) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    digest = take(32)
    (n,) = struct.unpack("<I", take(4))
    cfg = NetworkConfig.from_json(take(n).decode())
    if cfg.digest() != digest:
        raise ValueError("config digest mismatch")
    (n,) = struct.unpack("<I", take(4))
    extra = json.loads(take(n).decode())
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (nd,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{nd}I", take(4 * nd))
        size = int(math.prod(shape))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    net = SegNet(cfg)
    net.load_state_dict(state)
    return net, extra

"""General Encoder, per-task decoders and the auxiliary projection heads."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import (
    BatchNorm3d,
    Conv3d,
    InstanceNorm3d,
    KernelKind,
    KernelSpec,
    LeakyReLU,
    MaxPool3d,
    Module,
    NearestUpsample,
    ReLU,
    Sequential,
    SoftmaxOverChannels,
    checksum,
)
from .nn.tensor import check_finite, read_tensor, write_tensor

DEFAULT_WIDTHS = (8, 16, 32, 64)


class ConvBlock(Module):
    """conv (one kernel kind) -> batch norm -> ReLU.

    P3D chains its two convolutions before the single norm/nonlinearity.
    """

    def __init__(self, kind, cin, cout, rng=None):
        super().__init__()
        self.spec = KernelSpec(kind, cin, cout)
        self.kind = self.spec.kind
        convs = [Conv3d(ci, co, k, rng=rng) for ci, co, k in self.spec.conv_shapes()]
        self.body = Sequential(*convs, BatchNorm3d(cout), ReLU())

    @property
    def convs(self) -> list[Conv3d]:
        return self.body.layers[:-2]

    @property
    def norm(self) -> BatchNorm3d:
        return self.body.layers[-2]

    def forward(self, x, train=True):
        return self.body(x, train)

    def backward(self, grad):
        return self.body.backward(grad)

    def conv_weight_count(self) -> int:
        return sum(c.params["weight"].size for c in self.convs)


class Encoder(Module):
    """Levels of conv -> instance norm -> leaky ReLU, max-pooled between levels."""

    def __init__(self, widths=DEFAULT_WIDTHS, in_channels=1, seed=0):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("encoder needs at least 2 levels")
        rng = np.random.default_rng(seed)
        self.widths = tuple(int(w) for w in widths)
        self.in_channels = in_channels
        self.blocks = []
        cin = in_channels
        for w in self.widths:
            self.blocks.append(Sequential(Conv3d(cin, w, (3, 3, 3), rng=rng), InstanceNorm3d(w), LeakyReLU(0.01)))
            cin = w
        self.blocks[0].layers[0].needs_input_grad = False
        self.pools = [MaxPool3d(2) for _ in self.widths[1:]]

    @property
    def levels(self) -> int:
        return len(self.widths)

    def forward(self, x, train=True) -> list[np.ndarray]:
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                x = self.pools[i - 1](x, train)
            x = block(x, train)
            feats.append(x)
        return feats

    def backward(self, grads: Sequence[np.ndarray | None]) -> None:
        carry = None
        for i in reversed(range(self.levels)):
            g = grads[i]
            if carry is not None:
                g = carry if g is None else g + carry
            if g is None:
                carry = None
                continue
            g = self.blocks[i].backward(g)
            carry = self.pools[i - 1].backward(g) if i else None


class Decoder(Module):
    """Upsample + skip-concat decoding path ending in a projection head.

    ``blocks[0]`` is the deepest decoding block.  The output has
    ``n_classes + 1`` channels, background first.
    """

    def __init__(self, widths, n_classes, blocks, rng=None):
        super().__init__()
        self.widths = tuple(widths)
        self.n_classes = n_classes
        if len(blocks) != len(self.widths) - 1:
            raise ValueError(f"decoder needs {len(self.widths) - 1} blocks, got {len(blocks)}")
        self.blocks = list(blocks)
        self.ups = [NearestUpsample(2) for _ in self.blocks]
        self.head = Conv3d(self.widths[0], n_classes + 1, (1, 1, 1), rng=rng)
        self.softmax = SoftmaxOverChannels()

    @property
    def kinds(self) -> list[KernelKind | None]:
        return [getattr(b, "kind", None) for b in self.blocks]

    def block_io(self, i: int) -> tuple[int, int]:
        level = len(self.widths) - 2 - i
        deeper = self.widths[level + 1]
        return deeper + self.widths[level], self.widths[level]

    def forward(self, feats, train=True, return_block_inputs=False):
        x = feats[-1]
        inputs = []
        self._skip_channels = []
        for i, block in enumerate(self.blocks):
            level = len(self.widths) - 2 - i
            up = self.ups[i](x, train)
            x = np.concatenate([up, feats[level]], axis=1)
            inputs.append(x)
            self._skip_channels.append(up.shape[1])
            x = check_finite(block.forward(x, train), f"decoder block {i}")
        logits = self.head(x, train)
        probs = self.softmax(logits, train)
        return (probs, inputs) if return_block_inputs else probs

    def backward(self, grad_probs) -> list[np.ndarray | None]:
        g = self.softmax.backward(grad_probs)
        g = self.head.backward(g)
        grads: list[np.ndarray | None] = [None] * len(self.widths)
        for i in reversed(range(len(self.blocks))):
            level = len(self.widths) - 2 - i
            g = self.blocks[i].backward(g)
            c = self._skip_channels[i]
            grads[level] = g[:, c:]
            g = self.ups[i].backward(g[:, :c])
        grads[-1] = g
        return grads

    def block_conv_weight_count(self) -> int:
        return sum(b.conv_weight_count() for b in self.blocks)


class ProjectionHead(Module):
    """FCN8-like head: per-level 1x1x1 projections upsampled to full size and summed."""

    def __init__(self, widths, n_out, rng):
        super().__init__()
        self.projs = [Conv3d(w, n_out, (1, 1, 1), rng=rng) for w in widths]
        self.ups = [NearestUpsample(2 ** i) for i in range(len(widths))]
        self.softmax = SoftmaxOverChannels()
        self.n_out = n_out

    def forward(self, feats, train=True):
        logits = None
        for f, proj, up in zip(feats, self.projs, self.ups):
            z = up(proj(f, train), train)
            logits = z if logits is None else logits + z
        return self.softmax(logits, train)

    def backward(self, grad_probs):
        g = self.softmax.backward(grad_probs)
        return [proj.backward(up.backward(g)) for proj, up in zip(self.projs, self.ups)]


class AuxHeads(Module):
    def __init__(self, widths, n_bodyparts, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.bodypart = ProjectionHead(widths, n_bodyparts, rng)
        self.anomaly = ProjectionHead(widths, 2, rng)

    def forward(self, feats, train=True):
        return self.bodypart.forward(feats, train), self.anomaly.forward(feats, train)


def build_encoder(widths=DEFAULT_WIDTHS, seed=0, in_channels=1) -> Encoder:
    return Encoder(widths, in_channels=in_channels, seed=seed)


def build_decoder(encoder_or_widths, n_classes: int, kernel_kinds, seed=0) -> Decoder:
    """Fresh decoder for ``n_classes`` foreground classes (+ background)."""
    widths = encoder_or_widths.widths if isinstance(encoder_or_widths, Encoder) else tuple(encoder_or_widths)
    kinds = [KernelKind.parse(k) for k in kernel_kinds]
    if len(kinds) != len(widths) - 1:
        raise ValueError(f"expected {len(widths) - 1} kernel kinds, got {len(kinds)}")
    if n_classes < 1:
        raise ValueError("decoder needs at least one foreground class")
    rng = np.random.default_rng(seed)
    blocks = []
    for i, kind in enumerate(kinds):
        level = len(widths) - 2 - i
        blocks.append(ConvBlock(kind, widths[level + 1] + widths[level], widths[level], rng=rng))
    return Decoder(widths, n_classes, blocks, rng=rng)


def attach_aux_heads(encoder: Encoder, n_bodyparts: int = 4, seed=0) -> AuxHeads:
    return AuxHeads(encoder.widths, n_bodyparts, seed=seed)


def freeze(network: Module) -> Module:
    return network.freeze()


def network_checksum(network: Module) -> str:
    state = network.state_dict()
    return checksum(state[k] for k in state)


def check_divisible(shape, levels) -> None:
    f = 2 ** (levels - 1)
    if any(s % f for s in shape):
        raise ValueError(f"volume extents {tuple(shape)} must be divisible by {f}")


def as_batch(volume: np.ndarray) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float32)
    if v.ndim == 3:
        v = v[None, None]
    elif v.ndim == 4:
        v = v[:, None]
    return v


def forward_segment(encoder: Encoder, decoder: Decoder, volume) -> np.ndarray:
    """Per-class probabilities (N, K+1, D, H, W) in eval mode."""
    x = as_batch(volume)
    check_divisible(x.shape[2:], encoder.levels)
    return decoder.forward(encoder.forward(x, train=False), train=False)


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"CSCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def describe(network: Module) -> dict:
    if isinstance(network, Encoder):
        return {"type": "encoder", "widths": list(network.widths), "in_channels": network.in_channels,
                "frozen": network.frozen}
    if isinstance(network, Decoder):
        return {"type": "decoder", "widths": list(network.widths), "n_classes": network.n_classes,
                "kinds": [b.kind.value for b in network.blocks], "frozen": network.frozen}
    if isinstance(network, AuxHeads):
        return {"type": "aux", "widths": [p.cin for p in network.bodypart.projs],
                "n_bodyparts": network.bodypart.n_out, "frozen": network.frozen}
    raise TypeError(f"cannot checkpoint {type(network).__name__}")


def rebuild(manifest: dict) -> Module:
    kind = manifest["type"]
    if kind == "encoder":
        return Encoder(manifest["widths"], in_channels=manifest["in_channels"])
    if kind == "decoder":
        return build_decoder(manifest["widths"], manifest["n_classes"], manifest["kinds"])
    if kind == "aux":
        return AuxHeads(manifest["widths"], manifest["n_bodyparts"])
    raise CheckpointError(f"unknown network type {kind!r}")


def checkpoint_bytes(network: Module, extra: dict | None = None) -> bytes:
    state = network.state_dict()
    manifest = describe(network)
    manifest["tensors"] = list(state)
    manifest["checksum"] = network_checksum(network)
    manifest["extra"] = extra or {}
    body = io.BytesIO()
    head = json.dumps(manifest, sort_keys=True).encode()
    body.write(CKPT_MAGIC)
    body.write(struct.pack("<II", CKPT_VERSION, len(head)))
    body.write(head)
    for name in state:
        write_tensor(body, state[name])
    payload = body.getvalue()
    return payload + hashlib.sha256(payload).digest()


def save_network(path: str | Path, network: Module, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(network, extra))


def load_network(path: str | Path) -> tuple[Module, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<II", payload[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(payload[12:12 + hlen])
    fh = io.BytesIO(payload[12 + hlen:])
    state = {name: read_tensor(fh) for name in manifest["tensors"]}
    net = rebuild(manifest)
    net.load_state_dict(state)
    if manifest.get("frozen"):
        net.freeze()
    if network_checksum(net) != manifest["checksum"]:
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    return net, manifest.get("extra", {})

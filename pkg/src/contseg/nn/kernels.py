"""The four convolution kernel flavors searched per decoding block."""
from __future__ import annotations

import enum
from dataclasses import dataclass


class KernelKind(str, enum.Enum):
    PROJECTION = "projection"
    CONV2D = "conv2d"
    P3D = "p3d"
    CONV3D = "conv3d"

    @classmethod
    def parse(cls, value: "str | KernelKind") -> "KernelKind":
        if isinstance(value, KernelKind):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown kernel kind {value!r}") from None


# Fixed order used for NAS candidate branches and arch-weight rows.
KERNEL_KINDS = (KernelKind.PROJECTION, KernelKind.CONV2D, KernelKind.P3D, KernelKind.CONV3D)

# Kernel shapes are (depth, height, width); "3x3x1" is in-plane, so depth is 1.
KERNEL_SHAPES = {
    KernelKind.PROJECTION: [(1, 1, 1)],
    KernelKind.CONV2D: [(1, 3, 3)],
    KernelKind.P3D: [(1, 3, 3), (3, 1, 1)],
    KernelKind.CONV3D: [(3, 3, 3)],
}


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind
    in_channels: int
    out_channels: int

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind.parse(self.kind))
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")

    def conv_shapes(self) -> list[tuple[int, int, tuple[int, int, int]]]:
        """(cin, cout, kernel) for each chained convolution.

        The P3D intermediate width is ``out_channels``.
        """
        shapes = KERNEL_SHAPES[self.kind]
        out = []
        cin = self.in_channels
        for k in shapes:
            out.append((cin, self.out_channels, k))
            cin = self.out_channels
        return out


def kernel_param_count(spec: KernelSpec, bias: bool = False) -> int:
    """Weight count of a kernel spec; biases are added only when asked."""
    total = 0
    for cin, cout, (kd, kh, kw) in spec.conv_shapes():
        total += cin * cout * kd * kh * kw
        if bias:
            total += cout
    return total

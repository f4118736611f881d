"""Analytic FLOPs / parameter accounting.

Each layer contributes multiply-accumulates (MACs), other elementwise ops
(bias adds, BN, ReLU, softmax exponentials, residual adds, pooling; one op per
element) and learnable parameters. Reported FLOPs are
``mac_flops * MACs + other`` where ``mac_flops`` is 1 for the ``"mac"``
convention (the one the published ResNet-50 figures use) and 2 for
``"2mac"``. BN running statistics are buffers and are not counted as
parameters.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from ..block import BlockConfig
from ..network import ArchConfig

CONVENTIONS = {"mac": 1, "2mac": 2}


@dataclass
class CostRow:
    name: str
    kind: str
    macs: int
    other: int
    params: int
    out_shape: tuple


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    convention: str = "mac"

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    def row_flops(self, row: CostRow) -> int:
        return CONVENTIONS[self.convention] * row.macs + row.other

    @property
    def flops(self) -> int:
        return sum(self.row_flops(r) for r in self.rows)

    def to_text(self) -> str:
        w = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'layer':<{w}}  {'kind':<10} {'out_shape':<16} {'flops':>14} {'params':>12}"]
        for r in self.rows:
            shape = "x".join(str(s) for s in r.out_shape)
            lines.append(f"{r.name:<{w}}  {r.kind:<10} {shape:<16} {self.row_flops(r):>14,d} {r.params:>12,d}")
        lines.append(
            f"{'total':<{w}}  {'':<10} {'':<16} {self.flops:>14,d} {self.params:>12,d}"
        )
        lines.append(
            f"GFLOPs ({self.convention} convention): {self.flops / 1e9:.3f}   params: {self.params / 1e6:.3f}M"
        )
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["layer", "kind", "out_shape", "macs", "other_ops", "flops", "params"])
        for r in self.rows:
            w.writerow([r.name, r.kind, "x".join(map(str, r.out_shape)), r.macs, r.other, self.row_flops(r), r.params])
        w.writerow(["total", "", "", self.macs, sum(r.other for r in self.rows), self.flops, self.params])
        return buf.getvalue()


class CostCounter:
    """Walks a network description, tracking the (C, H, W) activation shape."""

    def __init__(self, shape: tuple[int, int, int], convention: str = "mac"):
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown FLOPs convention {convention!r}; expected one of {sorted(CONVENTIONS)}")
        self.shape = shape
        self.report = CostReport(convention=convention)

    def _add(self, name, kind, macs=0, other=0, params=0):
        self.report.rows.append(CostRow(name, kind, int(macs), int(other), int(params), self.shape))

    @property
    def elements(self) -> int:
        c, h, w = self.shape
        return c * h * w

    def conv(self, name, cout, k, stride=1, padding=None, groups=1, bias=False):
        c, h, w = self.shape
        if c % groups or cout % groups:
            raise ValueError(f"{name}: groups={groups} must divide {c} and {cout}")
        p = k // 2 if padding is None else padding
        ho, wo = (h + 2 * p - k) // stride + 1, (w + 2 * p - k) // stride + 1
        per_out = k * k * (c // groups)
        self.shape = (cout, ho, wo)
        self._add(name, "conv", per_out * cout * ho * wo, cout * ho * wo if bias else 0, per_out * cout + (cout if bias else 0))

    def bn(self, name):
        self._add(name, "bn", other=self.elements, params=2 * self.shape[0])

    def relu(self, name):
        self._add(name, "relu", other=self.elements)

    def add(self, name):
        self._add(name, "add", other=self.elements)

    def maxpool(self, name, k, stride, padding):
        c, h, w = self.shape
        ho, wo = (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1
        self.shape = (c, ho, wo)
        self._add(name, "maxpool", other=k * k * c * ho * wo)

    def avgpool(self, name, grid=1):
        c, h, w = self.shape
        other = c * h * w
        self.shape = (c, grid, grid)
        self._add(name, "avgpool", other=other)

    def linear(self, name, out, bias=True):
        d = self.elements
        self.shape = (out, 1, 1)
        self._add(name, "linear", d * out, out if bias else 0, d * out + (out if bias else 0))

    def conv_bn(self, name, cout, k, bn_mode, stride=1, groups=1, padding=None):
        self.conv(f"{name}.conv", cout, k, stride, padding, groups, bias=bn_mode == "off")
        if bn_mode != "off":
            self.bn(f"{name}.bn")

    # -- composite blocks ---------------------------------------------------

    def local_attention(self, name, cfg: BlockConfig):
        c, h, w = self.shape
        G, K, cm = cfg.G, cfg.K, cfg.mid_per_mode
        cg = c // G
        hw = h * w
        kk = K * K
        # omega (with bias), nu, u projections
        self._add(f"{name}.omega", "conv", hw * cg * kk * G, hw * kk * G, cg * kk * G + kk * G)
        self._add(f"{name}.nu", "conv", hw * cg * G, 0, cg * G)
        u_bias = cfg.bn_mode == "off"
        self._add(f"{name}.u", "conv", hw * cg * cm * G, hw * cm * G if u_bias else 0, cg * cm * G + (cm * G if u_bias else 0))
        self.shape = (cm * G, h, w)
        if not u_bias:
            self.bn(f"{name}.u.bn")
        # logit add, exp, normalisation per window slot; then the weighted sum
        self._add(f"{name}.softmax", "softmax", other=3 * kk * G * hw)
        self._add(f"{name}.aggregate", "attn", macs=kk * cm * G * hw)

    def mode_attention(self, name, cfg: BlockConfig, src_channels: int):
        c, h, w = self.shape
        G, cm = cfg.G, cfg.mid_per_mode
        hw = h * w
        self._add(f"{name}.mask", "conv", hw * (src_channels // G) * G, 0, (src_channels // G) * G)
        self._add(f"{name}.mask_softmax", "softmax", other=2 * G * hw)
        self._add(f"{name}.modal", "attn", macs=hw * cm * G)
        if cfg.interaction:
            self._add(f"{name}.interaction", "attn", macs=2 * G * G * cm, other=2 * G * G)
        self._add(f"{name}.gating", "attn", macs=hw * cm * G, other=hw * G)
        # Y = r * z, then S + Y
        self._add(f"{name}.context", "attn", macs=hw * cm * G, other=hw * cm * G)

    def residual_block(self, name, cfg: BlockConfig, stride: int = 1):
        c_in, h, w = self.shape
        bn = cfg.bn_mode
        self.conv_bn(f"{name}.conv_in", cfg.mid_channels, 1, bn)
        self.relu(f"{name}.relu_in")
        if cfg.spatial_variant == "local-attn":
            self.local_attention(f"{name}.local", cfg)
        else:
            groups = cfg.G if cfg.spatial_variant == "group-conv3x3" else 1
            self.conv_bn(f"{name}.spatial", cfg.mid_channels, 3, bn, stride=stride, groups=groups)
            self.relu(f"{name}.relu_mid")
        if cfg.mode_attention:
            src = c_in if cfg.mask_source == "block-input" else cfg.mid_channels
            self.mode_attention(f"{name}.mode", cfg, src)
        if cfg.fuse_out:
            self.conv_bn(f"{name}.conv_out", cfg.out_channels, 1, bn)
        main = self.shape
        if c_in != cfg.out_channels or stride != 1:
            self.shape = (c_in, h, w)
            self.conv_bn(f"{name}.shortcut", cfg.out_channels, 1, bn, stride=stride)
            if self.shape != main:
                raise ValueError(f"{name}: shortcut shape {self.shape} != main path {main}")
        self.add(f"{name}.add")
        self.relu(f"{name}.relu_out")


# -- presets ------------------------------------------------------------------

RESNET50_STAGES = ((64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2))


def resnet50(counter: CostCounter, stra: bool = False, last_stride: int = 1, G: int = 4, K: int = 3,
             embed_dim: int = 512, num_classes: int = 0) -> CostReport:
    """ResNet-50 ReID backbone: the last downsampling removed, a 512-D
    reduction layer (linear + BN) after average pooling.

    With ``stra`` the three stage-5 bottlenecks become StRA blocks with
    C_m * G equal to the bottleneck mid width. ``num_classes`` > 0 adds the
    identity classifier.
    """
    counter.conv_bn("stem", 64, 7, "training", stride=2, padding=3)
    counter.relu("stem.relu")
    counter.maxpool("stem.pool", 3, 2, 1)
    for si, (mid, out, blocks, stride) in enumerate(RESNET50_STAGES):
        if si == len(RESNET50_STAGES) - 1:
            stride = last_stride
        for b in range(blocks):
            name = f"layer{si + 1}.{b}"
            s = stride if b == 0 else 1
            cin = counter.shape[0]
            if stra and si == len(RESNET50_STAGES) - 1:
                if s != 1:
                    raise ValueError("StRA blocks keep resolution; use last_stride=1")
                cfg = BlockConfig(cin, mid // G, out, G=G, K=K)
            else:
                cfg = BlockConfig(cin, mid, out, G=1, spatial_variant="conv3x3", mode_attention=False)
            counter.residual_block(name, cfg, stride=s)
    counter.avgpool("gap")
    if embed_dim:
        counter.linear("reduce", embed_dim, bias=False)
        counter.bn("reduce.bn")
    if num_classes:
        counter.linear("classifier", num_classes)
    return counter.report


PRESETS = ("resnet50", "resnet50_stra")


def count_cost(target, input_hw: tuple[int, int] = (256, 128), convention: str = "mac", in_channels: int = 3) -> CostReport:
    """Cost of a named preset or an :class:`ArchConfig`."""
    counter = CostCounter((in_channels, *input_hw), convention)
    if isinstance(target, str):
        if target not in PRESETS:
            raise ValueError(f"unknown preset {target!r}; expected one of {PRESETS}")
        return resnet50(counter, stra=target == "resnet50_stra")
    if not isinstance(target, ArchConfig):
        raise TypeError(f"expected a preset name or ArchConfig, got {type(target).__name__}")
    arch = target
    counter.shape = (arch.in_channels, *input_hw)
    bn_mode = arch.block.get("bn_mode", "training")
    for si, stage in enumerate(arch.stages):
        for r in range(stage.repeat):
            name = f"stage{si}.{r}"
            if stage.kind == "conv":
                counter.conv_bn(name, stage.width, 3, bn_mode, stride=stage.stride if r == 0 else 1, padding=1)
                counter.relu(f"{name}.relu")
            else:
                counter.residual_block(name, arch.block_config(stage.kind, counter.shape[0], stage.width))
    counter.avgpool("head.pool", arch.pool)
    counter.linear("head.linear", arch.num_classes)
    return counter.report

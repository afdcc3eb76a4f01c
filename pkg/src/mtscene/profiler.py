"""Complexity accounting: analytic FLOP counts over a traced forward pass,
parameter totals, and wall-clock throughput.

Conventions (stated in every report): one multiply-accumulate = 2 FLOPs;
normalizations and activations cost 1 FLOP per element; bilinear resampling
costs 8 FLOPs per output element. Counts are analytic, deterministic, and
additive over modules.
"""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import FastAttention
from .backbone import BasicBlock, BottleneckBlock
from .model import JointSceneModel
from .recog_path import ChannelAttention, GatedFusion, RecogPath, SceneClassifier
from .seg_path import LateralFuse, SegPath, SpatialPyramidPool

FLOP_CONVENTION = "MAC=2 FLOPs; norm/act=1 FLOP per element; bilinear=8 per output element"
UPSAMPLE_FLOPS_PER_ELEMENT = 8


class ProfileError(RuntimeError):
    """Raised when the traced model contains an op without a FLOP formula."""


def count_params(model: nn.Module) -> float:
    """Trainable parameters, in millions."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad) / 1e6


def l2_normalize_flops(n: int, c: int) -> int:
    # squares + adds + divides (~3 per element) plus one sqrt per row
    return 3 * n * c + n


def matmul_flops(n: int, inner: int, m: int) -> int:
    return 2 * n * inner * m


def fast_attention_flops(n: int, attn_channels: int, channels: int) -> int:
    """Value-first cost: two (n x c') @ (c' x c)-sized products, linear in n."""
    norm = 2 * l2_normalize_flops(n, attn_channels)
    kv = matmul_flops(attn_channels, n, channels)      # Kh^T @ V
    qkv = matmul_flops(n, attn_channels, channels)     # Qh @ (KhT V)
    scale = n * channels
    return norm + kv + qkv + scale


def fast_attention_oracle_flops(n: int, attn_channels: int, channels: int) -> int:
    """Affinity-first cost: 2 n^2 (c' + c) dominated, quadratic in n."""
    norm = 2 * l2_normalize_flops(n, attn_channels)
    affinity = matmul_flops(n, attn_channels, n)       # Qh @ Kh^T
    av = matmul_flops(n, n, channels)                  # affinity @ V
    scale = n * channels
    return norm + affinity + av + scale


def _numel(t: torch.Tensor) -> int:
    return int(np.prod(t.shape))


def _conv2d_flops(m: nn.Conv2d, inp: torch.Tensor, out: torch.Tensor) -> int:
    kh, kw = m.kernel_size
    cin = m.in_channels // m.groups
    positions = _numel(out)  # B * C_out * H_out * W_out
    flops = 2 * kh * kw * cin * positions
    if m.bias is not None:
        flops += positions
    return flops


def _linear_flops(m: nn.Linear, inp: torch.Tensor, out: torch.Tensor) -> int:
    rows = _numel(out) // m.out_features
    flops = 2 * m.in_features * m.out_features * rows
    if m.bias is not None:
        flops += m.out_features * rows
    return flops


# Leaf modules with closed-form costs.
_LEAF_FORMULAS = {
    nn.Conv2d: _conv2d_flops,
    nn.Linear: _linear_flops,
    nn.BatchNorm2d: lambda m, i, o: _numel(o),
    nn.ReLU: lambda m, i, o: _numel(o),
    nn.Sigmoid: lambda m, i, o: _numel(o),
    nn.MaxPool2d: lambda m, i, o: _numel(i),
    nn.AvgPool2d: lambda m, i, o: _numel(i),
    nn.AdaptiveAvgPool2d: lambda m, i, o: _numel(i),
    nn.AdaptiveMaxPool2d: lambda m, i, o: _numel(i),
    nn.Identity: lambda m, i, o: 0,
    nn.Upsample: lambda m, i, o: UPSAMPLE_FLOPS_PER_ELEMENT * _numel(o),
}


def _fast_attention_extra(m: FastAttention, inp, out) -> int:
    b, c, h, w = inp.shape
    return b * fast_attention_flops(h * w, m.attn_channels, m.channels)


def _lateral_extra(m: LateralFuse, inp, out) -> int:
    # bilinear upsample of the decoder feature plus the elementwise add
    return (UPSAMPLE_FLOPS_PER_ELEMENT + 1) * _numel(out)


def _spp_extra(m: SpatialPyramidPool, inp, out) -> int:
    pools = len(m.grids) * _numel(inp)
    b = inp.shape[0]
    h, w = inp.shape[-2:]
    ups = sum(
        UPSAMPLE_FLOPS_PER_ELEMENT * b * conv.out_channels * h * w
        for conv in m.branches
    )
    return pools + ups


def _block_extra(m, inp, out) -> int:
    return _numel(out)  # the residual add


def _channel_attention_extra(m: ChannelAttention, inp, out) -> int:
    # two global pools + gate sum/sigmoid + channel-wise rescale
    pools = 2 * _numel(inp)
    gate = 2 * inp.shape[0] * inp.shape[1]
    return pools + gate + _numel(out)


def _gated_fusion_extra(m: GatedFusion, inp, out) -> int:
    # sigmoid on the semantic map + Hadamard product
    return 2 * _numel(out.f_a)


def _classifier_extra(m: SceneClassifier, inp, out) -> int:
    gap = _numel(inp)
    logsoftmax = 3 * _numel(out.f)
    return gap + logsoftmax


def _recog_extra(m: RecogPath, inp, out) -> int:
    return _numel(inp)  # argmax / one-hot pass over the stride-4 scores


def _final_upsample_extra(m, inp, out) -> int:
    seg = out.seg_logits if hasattr(out, "seg_logits") else out
    return UPSAMPLE_FLOPS_PER_ELEMENT * _numel(seg)


# Composite modules contributing functional glue on top of their children.
_COMPOSITE_EXTRAS = {
    FastAttention: _fast_attention_extra,
    LateralFuse: _lateral_extra,
    SpatialPyramidPool: _spp_extra,
    BasicBlock: _block_extra,
    BottleneckBlock: _block_extra,
    ChannelAttention: _channel_attention_extra,
    GatedFusion: _gated_fusion_extra,
    SceneClassifier: _classifier_extra,
    RecogPath: _recog_extra,
}


_COMPOSITE_EXTRAS[JointSceneModel] = _final_upsample_extra
_COMPOSITE_EXTRAS[SegPath] = _final_upsample_extra


def _first_tensor(args):
    for a in args:
        if isinstance(a, torch.Tensor):
            return a
    raise ProfileError("hooked module received no tensor input")


def count_flops(model: nn.Module, input_shape: tuple[int, ...]) -> float:
    """Total analytic FLOPs of one forward pass at ``input_shape`` (C, H, W)."""
    return _trace_flops(model, input_shape)[0]


def _trace_flops(model: nn.Module, input_shape) -> tuple[float, dict[str, float]]:
    per_name: dict[str, float] = {}
    handles = []

    def make_hook(name: str, mod: nn.Module):
        def hook(m, args, output):
            flops = 0
            cls = type(m)
            if cls in _COMPOSITE_EXTRAS:
                flops += _COMPOSITE_EXTRAS[cls](m, _first_tensor(args), output)
            elif cls in _LEAF_FORMULAS:
                flops += _LEAF_FORMULAS[cls](m, _first_tensor(args), output)
            elif not list(m.children()):
                if list(m.parameters(recurse=False)) or cls.forward is not nn.Module.forward:
                    raise ProfileError(
                        f"no FLOP formula for op {cls.__name__} at {name!r}"
                    )
            elif cls.forward is not nn.Module.forward and cls not in (
                nn.Sequential, nn.ModuleList,
            ):
                # Custom composite without a registered extra: children are
                # still counted, functional glue is assumed free.
                pass
            per_name[name] = per_name.get(name, 0) + flops

        return hook

    for name, mod in model.named_modules():
        handles.append(mod.register_forward_hook(make_hook(name or "(root)", mod)))
    try:
        model.eval()
        with torch.no_grad():
            model(torch.zeros(1, *input_shape))
    finally:
        for h in handles:
            h.remove()
    return float(sum(per_name.values())), per_name


@dataclass
class ComplexityReport:
    name: str
    input_shape: tuple[int, ...]
    gflops: float
    params_m: float
    per_module: dict[str, dict[str, float]] = field(default_factory=dict)
    fps: float | None = None
    fps_cv: float | None = None
    device: str | None = None
    convention: str = FLOP_CONVENTION

    def to_text(self) -> str:
        lines = [
            f"# complexity report: {self.name}",
            f"# convention: {self.convention}",
            f"input_shape: {'x'.join(str(s) for s in self.input_shape)}",
            f"gflops: {self.gflops:.4f}",
            f"params_m: {self.params_m:.4f}",
        ]
        for mod, vals in self.per_module.items():
            lines.append(
                f"module {mod}: gflops={vals['gflops']:.4f} params_m={vals['params_m']:.4f}"
            )
        if self.fps is not None:
            lines.append(f"fps: {self.fps:.3f} (cv {self.fps_cv:.3f}) on {self.device}")
        return "\n".join(lines) + "\n"


def complexity_report(model: nn.Module, input_shape: tuple[int, ...],
                      name: str = "model") -> ComplexityReport:
    """FLOPs/params totals with a per-top-level-module breakdown that sums
    exactly to the totals (root-level glue reported as its own entry)."""
    total, per_name = _trace_flops(model, input_shape)
    top = {child: 0.0 for child, _ in model.named_children()}
    glue = 0.0
    for qualname, flops in per_name.items():
        head = qualname.split(".")[0]
        if head in top:
            top[head] += flops
        else:
            glue += flops
    per_module = {}
    for child_name, child in model.named_children():
        per_module[child_name] = {
            "gflops": top[child_name] / 1e9,
            "params_m": count_params(child),
        }
    own_params = sum(
        p.numel() for p in model.parameters(recurse=False) if p.requires_grad
    ) / 1e6
    if glue or own_params:
        per_module["(glue)"] = {"gflops": glue / 1e9, "params_m": own_params}
    return ComplexityReport(
        name=name,
        input_shape=tuple(input_shape),
        gflops=total / 1e9,
        params_m=count_params(model),
        per_module=per_module,
    )


def measure_fps(model: nn.Module, input_shape: tuple[int, ...],
                warmup: int = 2, iters: int = 10) -> tuple[float, float, str]:
    """Median single-image forward throughput.

    Returns (fps, coefficient_of_variation, device descriptor). Absolute
    numbers are machine-dependent; only relative comparisons on the same
    device are meaningful.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    model.eval()
    x = torch.zeros(1, *input_shape)
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    mean = statistics.fmean(times)
    cv = (statistics.pstdev(times) / mean) if len(times) > 1 and mean > 0 else 0.0
    device = f"cpu ({platform.machine()}, {torch.get_num_threads()} threads)"
    return 1.0 / median, cv, device

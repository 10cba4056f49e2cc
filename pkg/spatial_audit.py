"""
Spatial Audit - Receptive-Field Geometry and Attention Displacement

Quantifies how far an attention mask drifts when a feature-grid mask is
naively upsampled back onto the input image:

1. displacement_eq1: closed-form displacement of a feature/pixel pair for a
   single conv layer with kernel L and stride S
2. displacement_oracle: the same quantity measured geometrically (true pixel
   position minus naive-upsample position) with exact rationals
3. receptive_field: exact input interval feeding a feature, for any stack
4. naive_upsample_map: the pixel block nearest-neighbour upsampling gives a
   feature column/row
5. overlap_count_map: how many windows cover each pixel (one-to-many problem)
6. audit_report: aggregated verdict for a whole stack

Conventions: L is the kernel size, S the stride, (l_x, l_y) the 0-based pixel
offset inside the feature's L x L window. Multi-layer stacks are reduced to one
effective layer (S = product of strides, L = composed extent). Everything here
is a pure function of immutable specs and safe to call from any thread.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Dict, List, Tuple

import numpy as np

from models import ConvStackSpec, DisplacementResult, GeometryError, ReceptiveField, Verdict

# ============================================================================
# Stack geometry
# ============================================================================


def feature_sizes(spec: ConvStackSpec) -> List[Tuple[int, int]]:
    """
    Per-layer output (width, height), validating the stack on the way.

    Raises:
        GeometryError: non-positive sizes, kernel larger than the current
            extent, or a stride below one
    """
    if spec.input_width < 1 or spec.input_height < 1:
        raise GeometryError(f"input must be positive, got {spec.input_width}x{spec.input_height}")
    if not spec.layers:
        raise GeometryError("conv stack has no layers")
    width, height = spec.input_width, spec.input_height
    sizes = []
    for index, (kernel, stride) in enumerate(spec.layers):
        if stride < 1 or kernel < 1:
            raise GeometryError(f"layer {index}: kernel and stride must be >= 1 (got {kernel}x{stride})")
        if kernel > width or kernel > height:
            raise GeometryError(
                f"layer {index}: kernel {kernel} exceeds the current extent {width}x{height}"
            )
        width = (width - kernel) // stride + 1
        height = (height - kernel) // stride + 1
        sizes.append((width, height))
    return sizes


def effective_layer(spec: ConvStackSpec) -> Tuple[int, int]:
    """Collapse a stack into one (kernel, stride) pair with the same window geometry."""
    extent, stride_product = 1, 1
    for kernel, stride in reversed(spec.layers):
        extent = (extent - 1) * stride + kernel
        stride_product *= stride
    return extent, stride_product


def effective_spec(spec: ConvStackSpec) -> ConvStackSpec:
    return ConvStackSpec((effective_layer(spec),), spec.input_width, spec.input_height)


def _single_layer(spec: ConvStackSpec, op: str) -> Tuple[int, int]:
    if not spec.is_single_layer:
        raise GeometryError(f"{op} takes a single-layer spec; reduce the stack with effective_spec()")
    feature_sizes(spec)
    return spec.layers[0]


# ============================================================================
# Displacement
# ============================================================================


def _displacement_axis(coord: int, offset: int, kernel: int, stride: int, extent: int) -> float:
    scale = 1.0 / (1.0 + (stride - kernel) / extent)
    return coord * stride * (1.0 - scale) + offset * (1.0 - (stride / kernel) * scale)


def displacement_eq1(spec: ConvStackSpec, m: int, n: int, l_x: int, l_y: int) -> DisplacementResult:
    """
    Closed-form displacement between a feature's upsampled attention and its
    true input pixels.

        D_x = mS(1 - 1/(1 + (S-L)/W_I)) + l_x(1 - (S/L) * 1/(1 + (S-L)/W_I))

    and the same along y with n, l_y and H_I. Real division throughout.

    Raises:
        GeometryError: multi-layer spec, W_I + S - L <= 0 (degenerate divisor),
            or coordinates outside the feature map / window
    """
    if not spec.is_single_layer:
        raise GeometryError("displacement_eq1 takes a single-layer spec; reduce the stack with effective_spec()")
    kernel, stride = spec.layers[0]
    if spec.input_width + stride - kernel <= 0:
        raise GeometryError("degenerate divisor: W_I + S - L must be positive")
    if spec.input_height + stride - kernel <= 0:
        raise GeometryError("degenerate divisor: H_I + S - L must be positive")
    (feat_w, feat_h), = feature_sizes(spec)
    if not (0 <= m < feat_w and 0 <= n < feat_h):
        raise GeometryError(f"feature ({m}, {n}) outside the {feat_w}x{feat_h} feature map")
    if not (0 <= l_x < kernel and 0 <= l_y < kernel):
        raise GeometryError(f"window offset ({l_x}, {l_y}) outside [0, {kernel})")

    return DisplacementResult(
        m=m,
        n=n,
        l_x=l_x,
        l_y=l_y,
        d_x=_displacement_axis(m, l_x, kernel, stride, spec.input_width),
        d_y=_displacement_axis(n, l_y, kernel, stride, spec.input_height),
    )


def displacement_oracle(spec: ConvStackSpec, coord: int, offset: int, axis: str = "x") -> Fraction:
    """
    Geometric displacement measured directly, in exact arithmetic.

    The true pixel is ``coord * S + offset``; naive upsampling stretches the
    real-valued feature extent (W_I - L)/S + 1 over the image, placing the same
    sub-window position at ``(coord + offset / L) * W_I / W_F``.
    """
    kernel, stride = _single_layer(spec, "displacement_oracle")
    extent = spec.input_width if axis == "x" else spec.input_height
    feat_extent = Fraction(extent - kernel, stride) + 1
    block = Fraction(extent) / feat_extent
    true_position = coord * stride + offset
    naive_position = (coord + Fraction(offset, kernel)) * block
    return true_position - naive_position


def window_start_oracle(spec: ConvStackSpec, coord: int, axis: str = "x") -> Fraction:
    """``coord * S`` minus the exact (unrounded) naive-upsample block start."""
    return displacement_oracle(spec, coord, 0, axis)


# ============================================================================
# Receptive fields and upsampling blocks
# ============================================================================


def receptive_field(spec: ConvStackSpec, m: int, n: int) -> ReceptiveField:
    """
    Exact input pixels that can influence output feature (m, n).

    Composes start <- start * S and extent <- (extent - 1) * S + L from the
    output layer inward.
    """
    sizes = feature_sizes(spec)
    out_w, out_h = sizes[-1]
    if not (0 <= m < out_w and 0 <= n < out_h):
        raise GeometryError(f"feature ({m}, {n}) outside the {out_w}x{out_h} output grid")
    x_start, y_start, extent = m, n, 1
    for kernel, stride in reversed(spec.layers):
        x_start *= stride
        y_start *= stride
        extent = (extent - 1) * stride + kernel
    return ReceptiveField(x_start, x_start + extent, y_start, y_start + extent)


def _round_half_up(value: Fraction) -> int:
    return math.floor(value + Fraction(1, 2))


def naive_upsample_map(feature_width: int, input_width: int, m: int) -> Tuple[int, int]:
    """
    Half-open pixel block [round(m W_I / W_F), round((m+1) W_I / W_F)) given to
    feature m by nearest-neighbour upsampling (round half up).
    """
    if feature_width < 1 or feature_width > input_width:
        raise GeometryError(f"need 1 <= W_F <= W_I, got W_F={feature_width} W_I={input_width}")
    if not 0 <= m < feature_width:
        raise GeometryError(f"feature index {m} outside [0, {feature_width})")
    start = _round_half_up(Fraction(m * input_width, feature_width))
    end = _round_half_up(Fraction((m + 1) * input_width, feature_width))
    return start, end


def overlap_count_map(spec: ConvStackSpec, axis: str = "x") -> np.ndarray:
    """Number of conv windows [mS, mS + L) covering each pixel along one axis."""
    kernel, stride = _single_layer(spec, "overlap_count_map")
    (feat_w, feat_h), = feature_sizes(spec)
    extent, count = (spec.input_width, feat_w) if axis == "x" else (spec.input_height, feat_h)
    counts = np.zeros(extent, dtype=np.int64)
    for m in range(count):
        counts[m * stride : m * stride + kernel] += 1
    return counts


# ============================================================================
# Report
# ============================================================================


def _sweep(kernel: int, stride: int, extent: int, count: int) -> np.ndarray:
    return np.array(
        [
            abs(_displacement_axis(m, offset, kernel, stride, extent))
            for m in range(count)
            for offset in range(kernel)
        ]
    )


def audit_report(spec: ConvStackSpec) -> Dict:
    """
    Aggregate displacement and overlap statistics for a conv stack.

    Returns:
        Dictionary with the JSON keys ``verdict``, ``max_dx``, ``mean_dx`` and
        ``overlap_histogram`` (pixel count per coverage level, x axis), plus
        ``max_dy``, ``mean_dy``, ``effective_kernel``, ``effective_stride``,
        ``feature_width``, ``feature_height``, ``layers`` and ``input``.
    """
    sizes = feature_sizes(spec)
    feat_w, feat_h = sizes[-1]
    kernel, stride = effective_layer(spec)

    dx = _sweep(kernel, stride, spec.input_width, feat_w)
    dy = _sweep(kernel, stride, spec.input_height, feat_h)
    counts = np.zeros(spec.input_width, dtype=np.int64)
    for m in range(feat_w):
        counts[m * stride : m * stride + kernel] += 1
    values, freq = np.unique(counts, return_counts=True)

    return {
        "verdict": Verdict.PRESERVING if spec.is_non_overlapping else Verdict.NON_PRESERVING,
        "max_dx": float(dx.max()),
        "mean_dx": float(dx.mean()),
        "max_dy": float(dy.max()),
        "mean_dy": float(dy.mean()),
        "overlap_histogram": {str(int(v)): int(f) for v, f in zip(values, freq)},
        "effective_kernel": kernel,
        "effective_stride": stride,
        "feature_width": feat_w,
        "feature_height": feat_h,
        "layers": [list(layer) for layer in spec.layers],
        "input": [spec.input_width, spec.input_height],
    }


# ============================================================================
# Parsing helpers (command-line syntax)
# ============================================================================


def parse_stack(text: str) -> Tuple[Tuple[int, int], ...]:
    """Parse ``"8x4,4x2,3x1"`` into ((8, 4), (4, 2), (3, 1)) as (kernel, stride)."""
    layers = []
    for chunk in text.split(","):
        parts = chunk.strip().lower().split("x")
        if len(parts) != 2 or not all(p.strip().isdigit() for p in parts):
            raise GeometryError(f"malformed layer {chunk!r}; expected KERNELxSTRIDE")
        layers.append((int(parts[0]), int(parts[1])))
    return tuple(layers)


def parse_size(text: str) -> Tuple[int, int]:
    """Parse ``"84x84"`` into (width, height)."""
    parts = text.strip().lower().split("x")
    if len(parts) != 2 or not all(p.strip().isdigit() for p in parts):
        raise GeometryError(f"malformed size {text!r}; expected WIDTHxHEIGHT")
    return int(parts[0]), int(parts[1])


def stack_from_cli(stack: str, size: str) -> ConvStackSpec:
    width, height = parse_size(size)
    return ConvStackSpec(parse_stack(stack), width, height)

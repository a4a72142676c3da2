"""Spatial correlation attention, its long/short-range decomposition, and sSE gating.

Feature maps are torch tensors laid out (B, C, H, W); spatial positions are
vectorized row-major (index i = row * W + col) wherever an attention matrix
is formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class PartitionSpec:
    """Geometry of the long/short-range pixel partition.

    The (padded) map splits into ``p_h x p_w`` contiguous blocks of size
    ``q_h x q_w``; equivalently, striding by (q_h, q_w) yields ``q_h * q_w``
    long-range groups of ``p_h x p_w`` pixels each.
    """

    h: int
    w: int
    p_h: int
    p_w: int

    def __post_init__(self):
        if min(self.h, self.w, self.p_h, self.p_w) < 1:
            raise ValueError("all partition dimensions must be positive")

    @property
    def q_h(self) -> int:
        return -(-self.h // self.p_h)

    @property
    def q_w(self) -> int:
        return -(-self.w // self.p_w)

    @property
    def pad_h(self) -> int:
        return self.p_h * self.q_h - self.h

    @property
    def pad_w(self) -> int:
        return self.p_w * self.q_w - self.w


def _pad(x: torch.Tensor, spec: PartitionSpec) -> torch.Tensor:
    if spec.pad_h == 0 and spec.pad_w == 0:
        return x
    return F.pad(x, (0, spec.pad_w, 0, spec.pad_h))


def long_range_split(x: torch.Tensor, spec: PartitionSpec) -> torch.Tensor:
    """Gather pixels at stride (q_h, q_w) into groups.

    Input (B, C, H, W) is zero-padded to (p_h*q_h, p_w*q_w); output is
    (B, q_h*q_w, C, p_h, p_w) with groups ordered row-major by their (a, b)
    offset, so group (a, b) holds pixels {(a + k*q_h, b + l*q_w)}.
    """
    b, c = x.shape[:2]
    x = _pad(x, spec)
    x = x.reshape(b, c, spec.p_h, spec.q_h, spec.p_w, spec.q_w)
    x = x.permute(0, 3, 5, 1, 2, 4)  # b, a, bcol, c, k, l
    return x.reshape(b, spec.q_h * spec.q_w, c, spec.p_h, spec.p_w)


def long_range_merge(groups: torch.Tensor, spec: PartitionSpec) -> torch.Tensor:
    """Exact inverse of :func:`long_range_split`, padding stripped."""
    b = groups.shape[0]
    c = groups.shape[2]
    x = groups.reshape(b, spec.q_h, spec.q_w, c, spec.p_h, spec.p_w)
    x = x.permute(0, 3, 4, 1, 5, 2)  # b, c, k, a, l, bcol
    x = x.reshape(b, c, spec.p_h * spec.q_h, spec.p_w * spec.q_w)
    return x[:, :, : spec.h, : spec.w]


def short_range_split(x: torch.Tensor, spec: PartitionSpec) -> torch.Tensor:
    """Cut the (padded) map into contiguous q_h x q_w blocks.

    Output is (B, p_h*p_w, C, q_h, q_w) with blocks ordered row-major by
    their block coordinate (k, l).
    """
    b, c = x.shape[:2]
    x = _pad(x, spec)
    x = x.reshape(b, c, spec.p_h, spec.q_h, spec.p_w, spec.q_w)
    x = x.permute(0, 2, 4, 1, 3, 5)  # b, k, l, c, a, bcol
    return x.reshape(b, spec.p_h * spec.p_w, c, spec.q_h, spec.q_w)


def short_range_merge(blocks: torch.Tensor, spec: PartitionSpec) -> torch.Tensor:
    """Exact inverse of :func:`short_range_split`, padding stripped."""
    b = blocks.shape[0]
    c = blocks.shape[2]
    x = blocks.reshape(b, spec.p_h, spec.p_w, c, spec.q_h, spec.q_w)
    x = x.permute(0, 3, 1, 4, 2, 5)  # b, c, k, a, l, bcol
    x = x.reshape(b, c, spec.p_h * spec.q_h, spec.p_w * spec.q_w)
    return x[:, :, : spec.h, : spec.w]


class SpatialCorrelation(nn.Module):
    """Pairwise-position attention with a residual shortcut.

    theta/phi/g embed the input to C/2 channels with 1x1 convolutions; the
    row-softmaxed Gram matrix of the theta/phi embeddings reweights the g
    embedding, and omega lifts the result back to C channels before the
    residual add.
    """

    def __init__(self, channels: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        if channels % 2 != 0:
            raise ValueError(f"channel count must be even, got {channels}")
        inner = channels // 2
        kw = {"kernel_size": 1, "bias": False, "dtype": dtype}
        self.theta = nn.Conv2d(channels, inner, **kw)
        self.phi = nn.Conv2d(channels, inner, **kw)
        self.g = nn.Conv2d(channels, inner, **kw)
        self.omega = nn.Conv2d(inner, channels, **kw)

    def correlation_matrix(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic attention matrix, shape (B, HW, HW)."""
        t = self.theta(x).flatten(2).transpose(1, 2)  # (B, HW, C')
        p = self.phi(x).flatten(2).transpose(1, 2)
        return torch.softmax(t @ p.transpose(1, 2), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.theta.in_channels:
            raise ValueError(
                f"expected {self.theta.in_channels} channels, got {x.shape[1]}"
            )
        b, c, h, w = x.shape
        attn = self.correlation_matrix(x)
        v = self.g(x).flatten(2).transpose(1, 2)  # (B, HW, C')
        y = (attn @ v).transpose(1, 2).reshape(b, c // 2, h, w)
        return self.omega(y) + x


class SSEAttention(nn.Module):
    """Spatial squeeze-and-excitation: gate query features by support features."""

    def __init__(self, support_channels: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.squeeze = nn.Conv2d(support_channels, 1, kernel_size=1, bias=True, dtype=dtype)

    def forward(self, f_q: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        if f_q.shape[-2:] != f_s.shape[-2:]:
            raise ValueError(
                f"spatial sizes differ: query {tuple(f_q.shape[-2:])} "
                f"vs support {tuple(f_s.shape[-2:])}"
            )
        score = torch.sigmoid(self.squeeze(f_s))
        return f_q * score


def _apply_grouped(
    module: SpatialCorrelation,
    x: torch.Tensor,
    spec: PartitionSpec,
    split,
    merge,
) -> torch.Tensor:
    groups = split(x, spec)
    b, n, c, gh, gw = groups.shape
    out = module(groups.reshape(b * n, c, gh, gw))
    return merge(out.reshape(b, n, c, gh, gw), spec)


class EfficientGC(nn.Module):
    """Decomposed global correlation between support and query features.

    The concatenated feature runs through spatial correlation within
    long-range pixel groups, a 1x1 squeeze down to the query width, then
    spatial correlation within contiguous short-range blocks; the result is
    added back onto the query feature.
    """

    def __init__(
        self,
        query_channels: int,
        support_channels: int,
        partition_factors: tuple[int, int] = (4, 4),
        short_stage: bool = True,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        cat = query_channels + support_channels
        self.partition_factors = partition_factors
        self.short_stage = short_stage
        self.long_corr = SpatialCorrelation(cat, dtype=dtype)
        self.alpha = nn.Conv2d(cat, query_channels, kernel_size=1, bias=False, dtype=dtype)
        self.short_corr = SpatialCorrelation(query_channels, dtype=dtype) if short_stage else None

    def forward(self, f_q: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        if f_q.shape[-2:] != f_s.shape[-2:]:
            raise ValueError(
                f"spatial sizes differ: query {tuple(f_q.shape[-2:])} "
                f"vs support {tuple(f_s.shape[-2:])}"
            )
        h, w = f_q.shape[-2:]
        spec = PartitionSpec(h, w, *self.partition_factors)
        f_c = torch.cat([f_s, f_q], dim=1)
        z = _apply_grouped(self.long_corr, f_c, spec, long_range_split, long_range_merge)
        z = self.alpha(z)
        if self.short_corr is not None:
            z = _apply_grouped(self.short_corr, z, spec, short_range_split, short_range_merge)
        return f_q + z


class NaiveGC(nn.Module):
    """Full-map counterpart of :class:`EfficientGC`, for benchmarking."""

    def __init__(
        self,
        query_channels: int,
        support_channels: int,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        cat = query_channels + support_channels
        self.corr = SpatialCorrelation(cat, dtype=dtype)
        self.alpha = nn.Conv2d(cat, query_channels, kernel_size=1, bias=False, dtype=dtype)

    def forward(self, f_q: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        f_c = torch.cat([f_s, f_q], dim=1)
        return f_q + self.alpha(self.corr(f_c))


def spatial_correlation_flops(h: int, w: int, channels: int) -> int:
    """Multiply-adds of one full-map spatial correlation on H x W x C."""
    hw = h * w
    inner = channels // 2
    projections = 3 * hw * channels * inner  # theta, phi, g
    attention = 2 * hw * hw * inner  # Gram matrix + value mix
    lift = hw * inner * channels  # omega
    return projections + attention + lift


def naive_gc_flops(h: int, w: int, query_channels: int, support_channels: int) -> int:
    cat = query_channels + support_channels
    return spatial_correlation_flops(h, w, cat) + h * w * cat * query_channels


def efficient_gc_flops(
    h: int,
    w: int,
    query_channels: int,
    support_channels: int,
    partition_factors: tuple[int, int],
) -> int:
    """Multiply-adds of the decomposed long -> squeeze -> short pipeline."""
    spec = PartitionSpec(h, w, *partition_factors)
    cat = query_channels + support_channels
    long_stage = spec.q_h * spec.q_w * spatial_correlation_flops(spec.p_h, spec.p_w, cat)
    squeeze = h * w * cat * query_channels
    short_stage = spec.p_h * spec.p_w * spatial_correlation_flops(
        spec.q_h, spec.q_w, query_channels
    )
    return long_stage + squeeze + short_stage

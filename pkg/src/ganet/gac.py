"""Geometry-aware convolution: geometric affinities steer aggregation of semantic features.

Feature maps are ``B x C x H x W`` tensors. For every position ``i`` the
output is

    y_i = x_i + OutProj( sum_j A_ij x_j ),    A = norm( phi(G) psi(G)^T )

where ``phi`` and ``psi`` are 1x1 projections of the geometric map ``G`` and
the sum runs over every spatial position.
"""
from __future__ import annotations

import torch
from torch import nn

SOFTMAX_ROW = "softmax-row"
SCALE_BY_N = "scale-by-N"
NORMALIZATIONS = (SOFTMAX_ROW, SCALE_BY_N)


class FusionShapeError(ValueError):
    pass


def _check_pair(semantic: torch.Tensor, geometric: torch.Tensor) -> None:
    if semantic.dim() != 4 or geometric.dim() != 4:
        raise FusionShapeError("feature maps must be B x C x H x W")
    if semantic.shape[0] != geometric.shape[0] or semantic.shape[2:] != geometric.shape[2:]:
        raise FusionShapeError(
            f"semantic {tuple(semantic.shape)} and geometric {tuple(geometric.shape)} differ in batch or spatial size"
        )


def _pointwise(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """1x1 convolution on a flattened ``B x C x N`` map."""
    w = weight.reshape(weight.shape[0], weight.shape[1])
    out = torch.einsum("oc,bcn->bon", w, x)
    if bias is not None:
        out = out + bias[None, :, None]
    return out


def raw_affinity(geometric: torch.Tensor, gac: "GeometryAwareConv") -> torch.Tensor:
    """Unnormalised ``B x N x N`` matrix of phi(G_i) . psi(G_j)."""
    g = geometric.flatten(2)
    phi = _pointwise(g, gac.phi.weight, gac.phi.bias)
    psi = _pointwise(g, gac.psi.weight, gac.psi.bias)
    return torch.bmm(phi.transpose(1, 2), psi)


def normalize_affinity(raw: torch.Tensor, normalization: str = SOFTMAX_ROW) -> torch.Tensor:
    if normalization == SOFTMAX_ROW:
        return torch.softmax(raw, dim=-1)
    if normalization == SCALE_BY_N:
        return raw / raw.shape[-1]
    raise ValueError(f"unknown affinity normalization {normalization!r}; expected one of {NORMALIZATIONS}")


def build_affinity(geometric: torch.Tensor, gac: "GeometryAwareConv", normalization: str | None = None) -> torch.Tensor:
    if geometric.shape[1] != gac.phi.in_channels:
        raise FusionShapeError(
            f"geometric map has {geometric.shape[1]} channels, GAC expects {gac.phi.in_channels}"
        )
    return normalize_affinity(raw_affinity(geometric, gac), normalization or gac.normalization)


def sum_fusion(semantic: torch.Tensor, geometric: torch.Tensor) -> torch.Tensor:
    if semantic.shape != geometric.shape:
        raise FusionShapeError(f"cannot sum {tuple(semantic.shape)} and {tuple(geometric.shape)}")
    return semantic + geometric


class GeometryAwareConv(nn.Module):
    """Non-local fusion whose affinity comes from the geometric embedding only.

    The output projection starts at zero, so a freshly built module is the
    identity on its semantic input.
    """

    def __init__(
        self,
        channels: int,
        embed_channels: int | None = None,
        normalization: str = SOFTMAX_ROW,
        output_projection: bool = True,
    ):
        super().__init__()
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown affinity normalization {normalization!r}")
        embed_channels = embed_channels or max(1, channels // 2)
        self.channels = channels
        self.normalization = normalization
        self.phi = nn.Conv2d(channels, embed_channels, 1)
        self.psi = nn.Conv2d(channels, embed_channels, 1)
        self.out_proj = nn.Conv2d(channels, channels, 1) if output_projection else None
        if self.out_proj is not None:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    def forward(self, semantic: torch.Tensor, geometric: torch.Tensor) -> torch.Tensor:
        _check_pair(semantic, geometric)
        if semantic.shape[1] != self.channels:
            raise FusionShapeError(f"semantic map has {semantic.shape[1]} channels, GAC expects {self.channels}")
        b, c, h, w = semantic.shape
        affinity = build_affinity(geometric, self)
        x = semantic.flatten(2)
        context = torch.bmm(x, affinity.transpose(1, 2))  # B x C x N
        if self.out_proj is not None:
            context = _pointwise(context, self.out_proj.weight, self.out_proj.bias)
        return semantic + context.view(b, c, h, w)


def gac_forward(semantic: torch.Tensor, geometric: torch.Tensor, state: GeometryAwareConv) -> torch.Tensor:
    return state(semantic, geometric)


class SumFusion(nn.Module):
    def forward(self, semantic, geometric):
        return sum_fusion(semantic, geometric)


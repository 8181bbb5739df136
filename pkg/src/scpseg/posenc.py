"""Pixel position encodings.

The four-distance encoding stores, per pixel (i, j), the vector
(i, j, H-i, W-j): the distances to the top, left, bottom and right image
borders. Indices are zero based, so the complements use H-i (not H-1-i) and
the identities s0+s2 = H, s1+s3 = W hold exactly at every pixel.

By default the channels are divided by max(H, W) so a small weight-generating
network sees inputs of order one; the raw integer-valued variant stays
available for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = ["PositionEncoding", "encode_positions", "coord_channels"]


@dataclass(frozen=True)
class PositionEncoding:
    """The (4, H, W) distance tensor plus a flag recording whether it was scaled."""

    s: Tensor
    normalized: bool

    @property
    def shape(self) -> tuple[int, ...]:
        return self.s.shape


def encode_positions(h: int, w: int, normalize: bool = True) -> PositionEncoding:
    """Build the four-distance encoding for an h-by-w image."""
    if h < 1 or w < 1:
        raise ValueError(f"encode_positions needs positive dims, got {h}x{w}")
    ii, jj = np.meshgrid(np.arange(h, dtype=np.int64), np.arange(w, dtype=np.int64), indexing="ij")
    s = np.stack([ii, jj, h - ii, w - jj]).astype(np.float32)
    if normalize:
        s /= float(max(h, w))
    return PositionEncoding(s=Tensor(s), normalized=normalize)


def coord_channels(h: int, w: int) -> Tensor:
    """Two-channel (row, col) coordinates scaled by max(h, w), for coordinate-conv heads."""
    if h < 1 or w < 1:
        raise ValueError(f"coord_channels needs positive dims, got {h}x{w}")
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij")
    return Tensor(np.stack([ii, jj]) / float(max(h, w)))

"""Pixel classifiers over backbone feature maps.

Four families, all bias-free:

* SharedHead     -- one weight matrix applied at every pixel (a 1x1 conv).
* CoordHeadVariant -- the coordinate-convolution comparators: coordinates
  joined to the network input image (BaseF) or to the feature map right
  before the shared 1x1 classifier (BaseB).
* ScpHead        -- the spatially covariant classifier: a small per-pixel
  weight-generating network ``phi`` (1x1 conv -> ReLU -> 1x1 conv -> ReLU ->
  1x1 conv) maps the four-distance position encoding to classifier weights.

ScpHead carries three algebraically related forward forms:

* ``MuSigma``: phi emits a per-pixel mean/scale pair and the feature vector is
  normalized, ``y = w^T (x - mu) / sigma``, before the shared classifier.
* ``PQ``: the substitution p = 1/sigma, q = -mu/sigma gives
  ``y = w^T (x*p + q)``, which also admits the cheaper rearrangement
  ``y = x^T (w*p) + w^T q``. Both evaluation orders are exposed.
* ``Final``: phi emits the per-pixel weights directly and a shared residual
  weight keeps the zero-phi network identical to the plain shared head:
  ``y = (W_ij + w_r)^T x``.

The Final form is the one used for training; the others exist so the
derivation chain can be verified numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .backbone import ConfigError, fan_in_uniform
from .posenc import PositionEncoding
from .tensor import (
    Graph,
    ShapeError,
    Tensor,
    add,
    clamp_min,
    concat_channels,
    conv2d,
    div,
    mul,
    reduce_sum,
    relu,
    reshape,
    slice_channels,
    sub,
    transpose,
)

__all__ = [
    "HeadVariant",
    "ScpForm",
    "CoordKind",
    "SharedHead",
    "PhiNet",
    "ScpHead",
    "CoordHeadVariant",
    "SIGMA_FLOOR",
    "base_forward",
    "phi_forward",
    "scp_forward_final",
    "scp_forward_musigma",
    "scp_forward_pq",
    "normalize_musigma",
    "normalize_pq",
    "normalize_pq_reformulated",
    "coord_head_forward",
    "init_head",
    "head_parameters",
]

SIGMA_FLOOR = 1e-4


class HeadVariant(str, Enum):
    BASE = "base"
    BASE_F = "base_f"
    BASE_B = "base_b"
    SCP_MUSIGMA = "scp_musigma"
    SCP_FINAL = "scp"


class ScpForm(Enum):
    MU_SIGMA = "mu_sigma"
    PQ = "pq"
    FINAL = "final"


class CoordKind(Enum):
    BASE_F = "base_f"
    BASE_B = "base_b"


@dataclass
class SharedHead:
    """Spatially shared linear classifier; w has shape (C, N)."""

    w: Tensor


@dataclass
class PhiNet:
    """Per-pixel weight generator over the 4-channel position encoding."""

    w1: Tensor  # (h, 4, 1, 1)
    w2: Tensor  # (h, h, 1, 1)
    w3: Tensor  # (out, h, 1, 1)

    @property
    def hidden_width(self) -> int:
        return self.w1.shape[0]

    @property
    def out_channels(self) -> int:
        return self.w3.shape[0]


@dataclass
class ScpHead:
    phi: PhiNet
    w_r: Tensor  # (C, N)
    form: ScpForm = ScpForm.FINAL
    sigma_clamp_count: int = field(default=0, compare=False)

    @property
    def in_channels(self) -> int:
        return self.w_r.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w_r.shape[1]


@dataclass
class CoordHeadVariant:
    kind: CoordKind
    head: SharedHead


# ---------------------------------------------------------------------------
# forwards
# ---------------------------------------------------------------------------


def _classifier_kernel(w: Tensor) -> Tensor:
    # (C, N) -> (N, C, 1, 1) so the shared classifier is literally a 1x1 conv.
    c, n = w.shape
    return reshape(transpose(w), (n, c, 1, 1))


def base_forward(head: SharedHead, x: Tensor, graph: Graph | None = None) -> Tensor:
    """y[n,i,j] = sum_c w[c,n] * x[c,i,j]."""
    if x.ndim != 3 or x.shape[0] != head.w.shape[0]:
        raise ShapeError(f"head expects {head.w.shape[0]} channels, got feature map {x.shape}")
    if graph is not None:
        graph.watch(head.w)
    return conv2d(x, _classifier_kernel(head.w), stride=1, padding=0)


def phi_forward(phi: PhiNet, s: PositionEncoding | Tensor, graph: Graph | None = None) -> Tensor:
    """Run the weight generator over every pixel of the position encoding."""
    st = s.s if isinstance(s, PositionEncoding) else s
    if st.ndim != 3 or st.shape[0] != phi.w1.shape[1]:
        raise ShapeError(f"position encoding must have {phi.w1.shape[1]} channels, got {st.shape}")
    if graph is not None:
        graph.watch(phi.w1, phi.w2, phi.w3)
    h = relu(conv2d(st, phi.w1, stride=1, padding=0))
    h = relu(conv2d(h, phi.w2, stride=1, padding=0))
    return conv2d(h, phi.w3, stride=1, padding=0)


def scp_forward_final(head: ScpHead, x: Tensor, s: PositionEncoding | Tensor, graph: Graph | None = None) -> Tensor:
    """Residual form: y_ij = (W_ij + w_r)^T x_ij with W = phi(s)."""
    c, n = head.w_r.shape
    if x.ndim != 3 or x.shape[0] != c:
        raise ShapeError(f"scp head expects {c} feature channels, got {x.shape}")
    wmap = phi_forward(head.phi, s, graph)
    if wmap.shape[0] != n * c:
        raise ShapeError(f"phi emits {wmap.shape[0]} channels, head needs {n * c}")
    if graph is not None:
        graph.watch(head.w_r)
    _, hh, ww = x.shape
    w4 = reshape(wmap, (n, c, hh, ww))
    x4 = reshape(x, (1, c, hh, ww))
    wr4 = reshape(transpose(head.w_r), (n, c, 1, 1))
    return reduce_sum(mul(add(w4, wr4), x4), axis=1)


def normalize_musigma(x: Tensor, mu: Tensor, sigma: Tensor, w: Tensor) -> Tensor:
    """y = w^T (x - mu) / sigma; sigma is assumed already clamped positive."""
    z = div(sub(x, mu), sigma)
    return conv2d(z, _classifier_kernel(w), stride=1, padding=0)


def normalize_pq(x: Tensor, p: Tensor, q: Tensor, w: Tensor) -> Tensor:
    """y = w^T (x*p + q), the numerically safer parameterization."""
    z = add(mul(x, p), q)
    return conv2d(z, _classifier_kernel(w), stride=1, padding=0)


def normalize_pq_reformulated(x: Tensor, p: Tensor, q: Tensor, w: Tensor) -> Tensor:
    """y = x^T (w*p) + w^T q, the rearrangement that folds w into the generated weights."""
    c, n = w.shape
    _, hh, ww = x.shape
    w4 = reshape(transpose(w), (n, c, 1, 1))
    p4 = reshape(p, (1, c, hh, ww))
    q4 = reshape(q, (1, c, hh, ww))
    x4 = reshape(x, (1, c, hh, ww))
    term1 = reduce_sum(mul(mul(w4, p4), x4), axis=1)
    term2 = reduce_sum(mul(w4, q4), axis=1)
    return add(term1, term2)


def _phi_pair(head: ScpHead, x: Tensor, s, graph) -> tuple[Tensor, Tensor]:
    c = head.in_channels
    if x.ndim != 3 or x.shape[0] != c:
        raise ShapeError(f"scp head expects {c} feature channels, got {x.shape}")
    out = phi_forward(head.phi, s, graph)
    if out.shape[0] != 2 * c:
        raise ShapeError(f"phi emits {out.shape[0]} channels, normalization forms need {2 * c}")
    if graph is not None:
        graph.watch(head.w_r)
    return slice_channels(out, 0, c), slice_channels(out, c, 2 * c)


def scp_forward_musigma(head: ScpHead, x: Tensor, s: PositionEncoding | Tensor, graph: Graph | None = None) -> Tensor:
    """Mean/scale form. Scales below SIGMA_FLOOR are clamped; clamps are counted."""
    mu, sigma_raw = _phi_pair(head, x, s, graph)
    head.sigma_clamp_count += int((sigma_raw.data < SIGMA_FLOOR).sum())
    sigma = clamp_min(sigma_raw, SIGMA_FLOOR)
    return normalize_musigma(x, mu, sigma, head.w_r)


def scp_forward_pq(
    head: ScpHead,
    x: Tensor,
    s: PositionEncoding | Tensor,
    graph: Graph | None = None,
    reformulated: bool = False,
) -> Tensor:
    """Scale/offset form; ``reformulated`` selects the rearranged evaluation order."""
    p, q = _phi_pair(head, x, s, graph)
    if reformulated:
        return normalize_pq_reformulated(x, p, q, head.w_r)
    return normalize_pq(x, p, q, head.w_r)


def coord_head_forward(
    variant: CoordHeadVariant,
    x: Tensor,
    coords: Tensor,
    graph: Graph | None = None,
    backbone=None,
) -> Tensor:
    """Coordinate-convolution comparators.

    BaseB: ``x`` is the feature map; coordinates are concatenated to it before
    the shared classifier. BaseF: ``x`` is the raw input image; coordinates
    join the image and the supplied backbone produces the feature map first.
    """
    if coords.ndim != 3 or coords.shape[0] != 2:
        raise ShapeError(f"coords must be (2,H,W), got {coords.shape}")
    if variant.kind is CoordKind.BASE_B:
        return base_forward(variant.head, concat_channels(x, coords), graph)
    if backbone is None:
        raise ConfigError("BaseF forward needs the backbone that consumes the augmented image")
    from .backbone import backbone_forward

    feats = backbone_forward(backbone, concat_channels(x, coords), graph)
    return base_forward(variant.head, feats, graph)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _draw_classifier(rng: np.random.Generator, c: int, n: int) -> Tensor:
    return Tensor(fan_in_uniform(rng, (c, n), c), requires_grad=True)


def init_head(
    kind: HeadVariant,
    c: int,
    n: int,
    h: int = 64,
    seed: int = 0,
    zero_init_phi_last: bool = True,
):
    """Deterministically build a head for ``c`` feature channels and ``n`` classes.

    The classifier weight is always the first draw from the seeded stream, so a
    shared head and an SCP residual weight built from the same seed coincide.
    With ``zero_init_phi_last`` the generator's last layer starts at zero and
    the SCP head's step-0 behaviour is exactly the shared head's.
    """
    if c < 1 or n < 1 or h < 1:
        raise ConfigError(f"head dims must be >= 1, got C={c}, N={n}, h={h}")
    rng = np.random.default_rng(seed)
    if kind is HeadVariant.BASE:
        return SharedHead(w=_draw_classifier(rng, c, n))
    if kind is HeadVariant.BASE_F:
        return CoordHeadVariant(kind=CoordKind.BASE_F, head=SharedHead(w=_draw_classifier(rng, c, n)))
    if kind is HeadVariant.BASE_B:
        return CoordHeadVariant(kind=CoordKind.BASE_B, head=SharedHead(w=_draw_classifier(rng, c + 2, n)))
    out_channels = n * c if kind is HeadVariant.SCP_FINAL else 2 * c
    w_r = _draw_classifier(rng, c, n)
    w1 = Tensor(fan_in_uniform(rng, (h, 4, 1, 1), 4), requires_grad=True)
    w2 = Tensor(fan_in_uniform(rng, (h, h, 1, 1), h), requires_grad=True)
    if zero_init_phi_last:
        w3 = Tensor(np.zeros((out_channels, h, 1, 1), dtype=np.float32), requires_grad=True)
    else:
        w3 = Tensor(fan_in_uniform(rng, (out_channels, h, 1, 1), h), requires_grad=True)
    form = ScpForm.FINAL if kind is HeadVariant.SCP_FINAL else ScpForm.MU_SIGMA
    return ScpHead(phi=PhiNet(w1=w1, w2=w2, w3=w3), w_r=w_r, form=form)


def head_parameters(head) -> dict[str, Tensor]:
    """Named trainable tensors of any head variant."""
    if isinstance(head, SharedHead):
        return {"head.w": head.w}
    if isinstance(head, CoordHeadVariant):
        return {"head.w": head.head.w}
    if isinstance(head, ScpHead):
        return {
            "head.w_r": head.w_r,
            "head.phi.w1": head.phi.w1,
            "head.phi.w2": head.phi.w2,
            "head.phi.w3": head.phi.w3,
        }
    raise TypeError(f"not a head: {type(head).__name__}")

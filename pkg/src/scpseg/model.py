"""Assembly of backbone + classifier head into one trainable segmentation model."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .backbone import BackboneConfig, BackboneParams, ConfigError, backbone_forward, build_backbone
from .heads import (
    CoordHeadVariant,
    CoordKind,
    HeadVariant,
    ScpHead,
    SharedHead,
    base_forward,
    coord_head_forward,
    head_parameters,
    init_head,
    scp_forward_final,
    scp_forward_musigma,
)
from .posenc import coord_channels, encode_positions
from .tensor import Graph, Tensor, concat_channels, load_tensor, save_tensor

__all__ = ["ModelSpec", "SegModel", "build_model", "model_forward", "save_checkpoint", "load_checkpoint"]

MANIFEST_NAME = "manifest.txt"
CONFIG_NAME = "config.txt"


@dataclass(frozen=True)
class ModelSpec:
    head: HeadVariant
    backbone: BackboneConfig
    n_classes: int = 1
    phi_hidden: int = 64
    zero_init_phi_last: bool = True
    posenc_normalize: bool = True

    @property
    def backbone_in_channels(self) -> int:
        # BaseF widens the image by the two coordinate channels.
        extra = 2 if self.head is HeadVariant.BASE_F else 0
        return self.backbone.in_channels + extra


@dataclass
class SegModel:
    spec: ModelSpec
    backbone: BackboneParams
    head: object

    def named_parameters(self) -> dict[str, Tensor]:
        params = {f"backbone.{k}": v for k, v in self.backbone.weights.items()}
        params.update(head_parameters(self.head))
        return params

    def parameter_count(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.named_parameters().values())


def build_model(spec: ModelSpec, seed: int) -> SegModel:
    bb_cfg = replace(spec.backbone, in_channels=spec.backbone_in_channels)
    backbone = build_backbone(bb_cfg, seed)
    head = init_head(
        spec.head,
        c=spec.backbone.feature_channels,
        n=spec.n_classes,
        h=spec.phi_hidden,
        seed=seed,
        zero_init_phi_last=spec.zero_init_phi_last,
    )
    return SegModel(spec=spec, backbone=backbone, head=head)


@lru_cache(maxsize=8)
def _coords(h: int, w: int) -> Tensor:
    return coord_channels(h, w)


@lru_cache(maxsize=8)
def _posenc(h: int, w: int, normalize: bool):
    return encode_positions(h, w, normalize=normalize)


def model_forward(model: SegModel, image: Tensor, graph: Graph | None = None) -> Tensor:
    """Image -> per-class logit map for every head variant."""
    _, h, w = image.shape
    kind = model.spec.head
    if kind is HeadVariant.BASE_F:
        return coord_head_forward(model.head, image, _coords(h, w), graph, backbone=model.backbone)
    feats = backbone_forward(model.backbone, image, graph)
    if kind is HeadVariant.BASE:
        return base_forward(model.head, feats, graph)
    if kind is HeadVariant.BASE_B:
        return coord_head_forward(model.head, feats, _coords(h, w), graph)
    s = _posenc(h, w, model.spec.posenc_normalize)
    if kind is HeadVariant.SCP_FINAL:
        return scp_forward_final(model.head, feats, s, graph)
    if kind is HeadVariant.SCP_MUSIGMA:
        return scp_forward_musigma(model.head, feats, s, graph)
    raise ConfigError(f"unknown head variant {kind}")


# ---------------------------------------------------------------------------
# checkpoints: directory of tensor files + manifest + config echo
# ---------------------------------------------------------------------------


def _spec_to_lines(spec: ModelSpec) -> list[str]:
    return [
        f"head={spec.head.value}",
        f"in_channels={spec.backbone.in_channels}",
        f"n_c={spec.backbone.n_c}",
        f"depth={spec.backbone.depth}",
        f"n_classes={spec.n_classes}",
        f"phi_hidden={spec.phi_hidden}",
        f"zero_init_phi_last={int(spec.zero_init_phi_last)}",
        f"posenc_normalize={int(spec.posenc_normalize)}",
    ]


def spec_from_mapping(kv: dict[str, str]) -> ModelSpec:
    return ModelSpec(
        head=HeadVariant(kv["head"]),
        backbone=BackboneConfig(
            in_channels=int(kv["in_channels"]), n_c=int(kv["n_c"]), depth=int(kv["depth"])
        ),
        n_classes=int(kv["n_classes"]),
        phi_hidden=int(kv["phi_hidden"]),
        zero_init_phi_last=bool(int(kv["zero_init_phi_last"])),
        posenc_normalize=bool(int(kv["posenc_normalize"])),
    )


def save_checkpoint(out_dir: str, model: SegModel) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for name, tensor in model.named_parameters().items():
        rel = name.replace(".", "_") + ".tns"
        save_tensor(os.path.join(out_dir, rel), tensor)
        lines.append(f"{name}\t{rel}")
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, CONFIG_NAME), "w") as f:
        f.write("\n".join(_spec_to_lines(model.spec)) + "\n")


def load_checkpoint(ckpt_dir: str) -> SegModel:
    cfg_path = os.path.join(ckpt_dir, CONFIG_NAME)
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(f"checkpoint config missing: {cfg_path}")
    kv: dict[str, str] = {}
    with open(cfg_path) as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                kv[k] = v
    spec = spec_from_mapping(kv)
    model = build_model(spec, seed=0)
    params = model.named_parameters()
    manifest = os.path.join(ckpt_dir, MANIFEST_NAME)
    with open(manifest) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            name, rel = line.split("\t")
            if name not in params:
                raise ValueError(f"{manifest}: unknown parameter {name!r}")
            loaded = load_tensor(os.path.join(ckpt_dir, rel))
            if loaded.shape != params[name].shape:
                raise ValueError(f"{name}: checkpoint shape {loaded.shape} != model {params[name].shape}")
            params[name].data = loaded.data
    return model

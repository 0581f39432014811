"""Backbone + head assemblies for the two training phases."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone, BackboneConfig
from .heads import DetectionHead, HeadConfig, MIMHead, check_output_size
from .tensor import core as F
from .tensor.core import Tensor, no_grad
from .tensor.nn import Module


# float32 sigmoid saturates to exactly 1.0; keep model confidences strictly below it
_P_MAX = np.nextafter(np.float32(1.0), np.float32(0.0))


class MIMModel(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.head = MIMHead(HeadConfig.for_backbone(cfg), rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        out = self.head(self.backbone(x, mask))
        check_output_size(out, x.shape[-1])
        return out


class DetectorModel(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, prior: float = 0.01,
                 skip: bool = True):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.head = DetectionHead(HeadConfig.for_backbone(cfg, skip=skip), rng, prior=prior)

    def forward(self, x: Tensor) -> Tensor:
        """Per-pixel logits [B, 1, H, W]."""
        out = self.head(self.backbone(x))
        check_output_size(out, x.shape[-1])
        return out

    def probabilities(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Sigmoid heatmaps for a stack of normalised chips [N, H, W]."""
        outs = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                x = Tensor(images[i:i + batch_size, None].astype(np.float32))
                outs.append(np.minimum(F.sigmoid(self(x)).data[:, 0], _P_MAX))
        if not outs:
            return np.zeros((0,) + images.shape[1:], dtype=np.float32)
        return np.concatenate(outs)

    def load_backbone(self, state) -> int:
        """Copy ``backbone.*`` entries from a state dict; returns how many were loaded."""
        sub = {k[len("backbone."):]: v for k, v in state.items() if k.startswith("backbone.")}
        self.backbone.load_state_dict(sub, strict=True)
        return len(sub)

"""Patch feature encoder and the four prediction heads.

The encoder is a small permutation-invariant attention network: a per-point
linear embedding, a stack of residual self-attention blocks over the patch's
points, then concatenated max/mean pooling projected to ``d`` features.

Heads:
    weight   -- sigmoid patch weight w_i
    index    -- linear patch quality index I_i
    classify -- 5 distortion-class logits
    mix      -- 4 logits, softmaxed into the predicted noise mix
"""

from __future__ import annotations

import copy
import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pointcloud import Patch, PipelineConfig, patches_to_array


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    fan_out, fan_in = layer.weight.shape
    a = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen, dtype=torch.float64) * 2 * a - a)
        layer.bias.zero_()


class AttentionBlock(nn.Module):
    def __init__(self, h: int):
        super().__init__()
        self.h = h
        self.query = nn.Linear(h, h)
        self.key = nn.Linear(h, h)
        self.value = nn.Linear(h, h)
        self.out = nn.Linear(h, h)
        self.ff1 = nn.Linear(h, h)
        self.ff2 = nn.Linear(h, h)

    def forward(self, x):
        q, k, v = self.query(x), self.key(x), self.value(x)
        x = x + self.out(F.scaled_dot_product_attention(q, k, v))
        return x + self.ff2(F.relu(self.ff1(x)))


class PatchEncoder(nn.Module):
    def __init__(self, h: int = 64, n_blocks: int = 2, d: int = 64):
        super().__init__()
        self.embed = nn.Linear(3, h)
        self.blocks = nn.ModuleList([AttentionBlock(h) for _ in range(n_blocks)])
        self.pool = nn.Linear(2 * h, d)

    def forward(self, pts):
        """``pts``: (..., s, 3) patch-local coordinates -> (..., d) features."""
        lead = pts.shape[:-2]
        x = self.embed(pts.reshape(-1, *pts.shape[-2:]))
        for blk in self.blocks:
            x = blk(x)
        pooled = torch.cat([x.amax(dim=-2), x.mean(dim=-2)], dim=-1)
        return self.pool(pooled).reshape(*lead, -1)


def head_widths(d: int, out: int) -> list[int]:
    return [d, max(1, d // 2), max(1, d // 8), out]


class MLPHead(nn.Module):
    def __init__(self, d: int, out: int):
        super().__init__()
        sizes = [d] + head_widths(d, out)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class Heads(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = MLPHead(d, 1)
        self.index = MLPHead(d, 1)
        self.classify = MLPHead(d, 5)
        self.mix = MLPHead(d, 4)


class UGDNet(nn.Module):
    """Encoder plus heads; the trainable part of a checkpoint."""

    def __init__(self, h: int = 64, n_blocks: int = 2, d: int = 64, seed: int = 0):
        super().__init__()
        self.h, self.n_blocks, self.d = h, n_blocks, d
        self.encoder = PatchEncoder(h, n_blocks, d)
        self.heads = Heads(d)
        gen = torch.Generator().manual_seed(int(seed) % (2**63))
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                _init_linear(mod, gen)
        # plain attribute, not a registered submodule
        object.__setattr__(self, "_inference", None)

    @classmethod
    def from_config(cls, cfg: PipelineConfig, seed: Optional[int] = None) -> "UGDNet":
        return cls(cfg.h, cfg.n_blocks, cfg.d, cfg.seed if seed is None else seed)

    def shared_layer(self) -> nn.Linear:
        """Last layer shared by every task (used for gradient-norm balancing)."""
        return self.encoder.pool

    def inference_copy(self) -> "UGDNet":
        """A frozen float64 copy used for scoring and prior features."""
        cached = self._inference
        object.__setattr__(self, "_inference", None)
        try:
            net = copy.deepcopy(self)
        finally:
            object.__setattr__(self, "_inference", cached)
        net.double().eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return net

    def invalidate(self) -> None:
        object.__setattr__(self, "_inference", None)

    def inference(self) -> "UGDNet":
        if self._inference is None:
            object.__setattr__(self, "_inference", self.inference_copy())
        return self._inference


# ---------------------------------------------------------------------------
# functional surface


def _patch_tensor(patches, s: Optional[int] = None) -> torch.Tensor:
    if isinstance(patches, Patch):
        arr = patches.points[None]
    elif isinstance(patches, (list, tuple)):
        arr = patches_to_array(patches)
    else:
        arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"patch array must have shape (b, s, 3), got {arr.shape}")
    if s is not None and arr.shape[1] != s:
        raise ValueError(f"patch has {arr.shape[1]} points, expected {s}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))


def encode_patches(net: UGDNet, patches, s: Optional[int] = None, batch: int = 64) -> np.ndarray:
    """Float64 features for a list/array of patches, shape (b, d)."""
    x = _patch_tensor(patches, s)
    inf = net.inference()
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch):
            out.append(inf.encoder(x[i:i + batch]))
    return torch.cat(out).numpy()


def encode_patch(net: UGDNet, patch, s: Optional[int] = None) -> np.ndarray:
    return encode_patches(net, patch, s)[0]


def heads_forward(net: UGDNet, f) -> dict:
    """Evaluate all heads on feature vector(s) ``f`` of dimension d."""
    single = np.ndim(f) == 1
    x = torch.from_numpy(np.atleast_2d(np.asarray(f, dtype=np.float64)))
    if x.shape[-1] != net.d:
        raise ValueError(f"feature dimension {x.shape[-1]} != {net.d}")
    heads = net.inference().heads
    with torch.no_grad():
        out = {
            "w": torch.sigmoid(heads.weight(x))[:, 0].numpy(),
            "I": heads.index(x)[:, 0].numpy(),
            "class_logits": heads.classify(x).numpy(),
            "mix": torch.softmax(heads.mix(x), dim=-1).numpy(),
        }
    if single:
        out = {k: v[0] for k, v in out.items()}
    return out


def pooled_feature(features, weights):
    """Weighted (unnormalised) sum of patch features."""
    if len(features) != len(weights):
        raise ValueError("features and weights must have equal counts")
    return (weights[:, None] * features).sum(0)


def quality_index(indices, weights):
    """Weight-normalised mean of patch quality indices."""
    if len(indices) != len(weights):
        raise ValueError("indices and weights must have equal counts")
    total = weights.sum()
    if float(total) == 0.0:
        raise ValueError("weights sum to zero")
    return (weights * indices).sum() / total

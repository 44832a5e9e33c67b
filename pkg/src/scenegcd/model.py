"""Shared backbone, scene interaction MLP, classifier head, dual-branch forward.

One backbone, one interaction MLP, and one head serve both branches. The
scene feature is a gradient-isolated copy of the original-image feature, so
scene context conditions both branches without training through that path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-12  # guard for the joint normalization in the interaction module

BRANCH_MODES = ("dual", "object_only", "original_only")


@dataclass
class BackboneConfig:
    kind: str = "transformer"  # "transformer" or "conv"
    feature_dim: int = 128
    patch_size: int = 8
    depth: int = 4
    heads: int = 4
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.kind not in ("transformer", "conv"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "transformer":
            h, w = self.input_size
            if h % self.patch_size or w % self.patch_size:
                raise ValueError(
                    f"input size {self.input_size} not divisible by patch {self.patch_size}"
                )
            if self.feature_dim % self.heads:
                raise ValueError("feature_dim must be divisible by heads")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_classes: int = 8
    proj_dim: int = 64
    sa_hidden_dim: int | None = None  # defaults to 2 * feature_dim
    student_temp: float = 0.1
    branch_mode: str = "dual"  # single-branch modes drop the interaction MLP

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.proj_dim <= 0:
            raise ValueError("proj_dim must be positive")
        if self.student_temp <= 0:
            raise ValueError("student_temp must be positive")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}")

    @property
    def uses_interaction(self) -> bool:
        return self.branch_mode == "dual"


@dataclass
class HeadOutput:
    z: torch.Tensor       # (B, proj_dim) unit-norm contrastive projection
    sims: torch.Tensor    # (B, K) raw prototype cosine similarities
    logits: torch.Tensor  # (B, K) sims / student_temp


@dataclass
class FeatureBundle:
    v_x: torch.Tensor  # original-image features
    v_o: torch.Tensor  # object-image features
    v_s: torch.Tensor  # scene features: detached copy of v_x


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PatchTransformer(nn.Module):
    """Small from-scratch patch transformer; the class token is the feature."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d, p = cfg.feature_dim, cfg.patch_size
        h, w = cfg.input_size
        n_patches = (h // p) * (w // p)
        self.patch_embed = nn.Conv2d(3, d, kernel_size=p, stride=p)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, d))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        b = x.shape[0]
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        tokens = tokens + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens[:, 0])


class ConvEncoder(nn.Module):
    """Strided conv stack with group norm; batch-size invariant in all modes."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        widths = [32, 64, 96, 128][: max(2, cfg.depth)]
        layers: list[nn.Module] = []
        c_in = 3
        for c_out in widths:
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                nn.GroupNorm(8, c_out),
                nn.GELU(),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c_in, cfg.feature_dim)

    def forward(self, x):
        h = self.pool(self.features(x)).flatten(1)
        return self.fc(h)


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    return PatchTransformer(cfg) if cfg.kind == "transformer" else ConvEncoder(cfg)


def scene_features(v_x: torch.Tensor) -> torch.Tensor:
    """Scene feature: same values as the image feature, no gradient path."""
    return v_x.detach()


def normalized_concat(v: torch.Tensor, v_scene: torch.Tensor,
                      eps: float = NORM_EPS) -> torch.Tensor:
    """Concatenate two feature batches and normalize each row jointly."""
    if v.shape != v_scene.shape:
        raise ValueError(f"feature shapes differ: {tuple(v.shape)} vs {tuple(v_scene.shape)}")
    u = torch.cat([v, v_scene], dim=-1)
    norm = u.norm(dim=-1, keepdim=True)
    if bool((norm < eps).any()):
        raise ValueError("degenerate input: concatenated feature norm below epsilon")
    return u / norm


class SceneInteraction(nn.Module):
    """MLP over the jointly normalized concatenation of branch and scene features."""

    def __init__(self, feature_dim: int, hidden_dim: int | None = None):
        super().__init__()
        hidden = hidden_dim or 2 * feature_dim
        self.net = nn.Sequential(
            nn.Linear(2 * feature_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, feature_dim),
        )

    def forward(self, v, v_scene):
        return self.net(normalized_concat(v, v_scene))


class ClassifierHead(nn.Module):
    """Projection for contrastive learning plus cosine logits over prototypes.

    The projector is a two-layer MLP (one layer shallower than the usual
    three-layer projection head, compensating for the interaction MLP). The
    classification path normalizes a separate linear embedding against
    unit-norm prototypes and scales by the student temperature.
    """

    def __init__(self, in_dim: int, proj_dim: int, n_classes: int, student_temp: float):
        super().__init__()
        self.proj = nn.Sequential(
            nn.Linear(in_dim, in_dim), nn.GELU(), nn.Linear(in_dim, proj_dim)
        )
        self.cls_embed = nn.Linear(in_dim, proj_dim, bias=False)
        self.prototypes = nn.Parameter(torch.empty(n_classes, proj_dim))
        nn.init.normal_(self.prototypes, std=0.02)
        self.student_temp = student_temp

    def forward(self, h) -> HeadOutput:
        z = F.normalize(self.proj(h), dim=-1)
        embed = F.normalize(self.cls_embed(h), dim=-1)
        protos = F.normalize(self.prototypes, dim=-1)
        sims = embed @ protos.T
        return HeadOutput(z=z, sims=sims, logits=sims / self.student_temp)


class DualBranchModel(nn.Module):
    """Two branches over one parameter set: backbone, interaction MLP, head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = build_backbone(cfg.backbone)
        d = cfg.backbone.feature_dim
        self.interaction = SceneInteraction(d, cfg.sa_hidden_dim) if cfg.uses_interaction else None
        self.head = ClassifierHead(d, cfg.proj_dim, cfg.n_classes, cfg.student_temp)

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        h, w = self.cfg.backbone.input_size
        if images.shape[-2:] != (h, w):
            raise ValueError(f"expected {h}x{w} inputs, got {tuple(images.shape[-2:])}")
        # Inputs arrive in [0, 1]; center and rescale so the patch embedding
        # is not dominated by the DC component.
        return self.backbone((images - 0.5) / 0.25)

    def forward_dual(
        self, x_batch: torch.Tensor, o_batch: torch.Tensor
    ) -> tuple[HeadOutput, HeadOutput, FeatureBundle]:
        if x_batch.shape != o_batch.shape:
            raise ValueError("original and object batches must align")
        v_x = self.backbone_forward(x_batch)
        v_o = self.backbone_forward(o_batch)
        v_s = scene_features(v_x)
        if self.interaction is not None:
            h_x = self.interaction(v_x, v_s)
            h_o = self.interaction(v_o, v_s)
        else:
            h_x, h_o = v_x, v_o
        return self.head(h_x), self.head(h_o), FeatureBundle(v_x=v_x, v_o=v_o, v_s=v_s)

    def eval_branch(self, x_batch: torch.Tensor, o_batch: torch.Tensor) -> HeadOutput:
        """The branch used for prediction; the other branch's output is discarded."""
        origin, obj, _ = self.forward_dual(x_batch, o_batch)
        return origin if self.cfg.branch_mode == "original_only" else obj


def predict(model: DualBranchModel, samples, mask_provider, batch_size: int = 64,
            device: str = "cpu") -> np.ndarray:
    """Argmax class per sample from the evaluation branch, lowest index on ties."""
    from .trainer import object_image_for  # late import avoids a module cycle

    model.eval()
    needs_masks = model.cfg.branch_mode != "original_only"
    preds = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            xs = np.stack([s.image for s in chunk]).astype(np.float32)
            if needs_masks:
                os_ = np.stack([object_image_for(s, mask_provider) for s in chunk])
            else:
                os_ = xs
            x_t = torch.from_numpy(xs).permute(0, 3, 1, 2).to(device)
            o_t = torch.from_numpy(os_).permute(0, 3, 1, 2).to(device)
            out = model.eval_branch(x_t, o_t)
            preds.append(out.logits.cpu().numpy())
    logits = np.concatenate(preds, axis=0)
    return np.argmax(logits, axis=1)  # np.argmax takes the first (lowest) max index

"""
Networks for the two training stages.
Encoder1/Decoder1 separate content from forgery semantics; Encoder2/Decoder2
split forgery semantics into common and unique halves. Backbones are scaled
analogues: an additive-attention block stands in for the transformer content
branch and depthwise-separable stages for the RGB forgery branch.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Set, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .filters import AhfKernel, Mhfe, MhfePyramid
from .gradcore import (
    ContractViolation,
    Conv2d,
    activation,
    group_norm,
    linear,
    pool_resize,
    set_trainable,
)

logger = logging.getLogger(__name__)


class PreconditionError(RuntimeError):
    """Raised when a stage is run without the state it depends on."""
    pass


@dataclass
class ModelConfig:
    """Network sizes and ablation switches."""
    image_size: int = 32
    content_channels: int = 32
    forgery_channels: int = 32
    mhfe_levels: int = 2
    num_methods: int = 2
    base_width: int = 16
    embed_dim: int = 8
    kernel_size: int = 3
    sigma: float = 1.0
    shared_kernels: bool = False
    use_rgb: bool = True
    use_highfreq: bool = True
    use_mhfe: bool = True
    use_mhff: bool = True

    def validate(self) -> "ModelConfig":
        if self.forgery_channels < 2 or self.forgery_channels % 2:
            raise ContractViolation(f"forgery_channels must be even, got {self.forgery_channels}")
        if not 1 <= self.mhfe_levels <= 3:
            raise ContractViolation(f"mhfe_levels must be in [1, 3], got {self.mhfe_levels}")
        stride = max(4, 2 ** self.mhfe_levels)
        if self.image_size < stride or self.image_size % stride:
            raise ContractViolation(
                f"image_size {self.image_size} must be divisible by {stride}"
            )
        if self.content_channels < 4 or self.content_channels % 2:
            raise ContractViolation(f"content_channels must be even and >= 4, got {self.content_channels}")
        if self.num_methods < 1:
            raise ContractViolation(f"num_methods must be >= 1, got {self.num_methods}")
        if self.kernel_size not in (3, 5):
            raise ContractViolation(f"kernel_size must be 3 or 5, got {self.kernel_size}")
        if self.sigma <= 0 or self.base_width < 1 or self.embed_dim < 1:
            raise ContractViolation("sigma, base_width and embed_dim must be positive")
        if not (self.use_rgb or self.use_highfreq):
            raise ContractViolation("use_rgb and use_highfreq cannot both be off")
        return self

    @property
    def fusion_levels(self) -> int:
        """Number of scales at which the high-frequency stream enters the RGB stream."""
        if not (self.use_rgb and self.use_highfreq):
            return 0
        return self.mhfe_levels if self.use_mhfe else 1

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class SemanticBundle1:
    """Stage-1 semantics: content C and all forgery semantics Fa."""
    content: torch.Tensor
    forgery: torch.Tensor


@dataclass
class SemanticBundle2:
    """Stage-2 semantics: unique Fu and common Fc, plus the Fa they came from."""
    unique: torch.Tensor
    common: torch.Tensor
    forgery: torch.Tensor

    def merged(self) -> torch.Tensor:
        return merge_forgery(self.common, self.unique)


def merge_forgery(common: torch.Tensor, unique: torch.Tensor) -> torch.Tensor:
    """Fa = [Fc, Fu] along the channel axis."""
    return torch.cat([common, unique], dim=1)


def split_forgery(forgery: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Inverse of merge_forgery: returns (Fc, Fu), each half of the channels."""
    channels = forgery.shape[1]
    if channels % 2:
        raise ContractViolation(f"Fa must have an even channel count, got {channels}")
    half = channels // 2
    return forgery[:, :half], forgery[:, half:]


class ConvBlock(nn.Module):
    """3x3 conv, group norm, ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm = group_norm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return activation(self.norm(self.conv(x)), "relu")


class SeparableConv(nn.Module):
    """Depthwise 3x3 followed by pointwise 1x1, group norm, ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.depthwise = Conv2d(in_channels, in_channels, 3, stride=stride, padding=1, groups=in_channels)
        self.pointwise = Conv2d(in_channels, out_channels, 1)
        self.norm = group_norm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return activation(self.norm(self.pointwise(self.depthwise(x))), "relu")


class AdditiveAttention(nn.Module):
    """
    Efficient additive attention over the pixels of a feature map.

    Queries are scored by a learned vector, softmax-pooled into one global
    query, which then modulates the keys. Linear in the number of pixels.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.query = Conv2d(channels, channels, 1)
        self.key = Conv2d(channels, channels, 1)
        self.score = Conv2d(channels, 1, 1, bias=False)
        self.proj = Conv2d(channels, channels, 1)
        self.out = Conv2d(channels, channels, 1)
        self.scale = channels ** -0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        query = F.normalize(self.query(h), dim=1)
        key = F.normalize(self.key(h), dim=1)
        scores = self.score(query) * self.scale
        weights = torch.softmax(scores.flatten(2), dim=-1).view_as(scores)
        global_query = (weights * query).sum(dim=(2, 3), keepdim=True)
        mixed = self.proj(global_query * key) + query
        return x + self.out(mixed)


def pag_gate(p: torch.Tensor, q: torch.Tensor, embed_p: nn.Module, embed_q: nn.Module) -> torch.Tensor:
    """Per-pixel gate sigmoid(<embed_p(p), embed_q(q)>), shape N x 1 x H x W."""
    similarity = (embed_p(p) * embed_q(q)).sum(dim=1, keepdim=True)
    return activation(similarity, "sigmoid")


def pag_fuse(p: torch.Tensor, q: torch.Tensor, embed_p: nn.Module, embed_q: nn.Module) -> torch.Tensor:
    """
    Pixel-attention-guided fusion: gate * q + (1 - gate) * p.

    Raises:
        ContractViolation: p and q differ in shape
    """
    if p.shape != q.shape:
        raise ContractViolation(f"Pag fusion needs equal shapes, got {tuple(p.shape)} and {tuple(q.shape)}")
    gate = pag_gate(p, q, embed_p, embed_q)
    return gate * q + (1.0 - gate) * p


class PagFuse(nn.Module):
    """Pag fusion with separate 1x1 embeddings for the two streams."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.embed_p = Conv2d(channels, embed_dim, 1, bias=False)
        self.embed_q = Conv2d(channels, embed_dim, 1, bias=False)

    def forward(self, p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        return pag_fuse(p, q, self.embed_p, self.embed_q)


class ContentBranch(nn.Module):
    """Separable-conv stem to 1/4 scale, then one additive-attention block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        channels = config.content_channels
        self.stem = nn.ModuleList([
            SeparableConv(3, channels // 2, stride=2),
            SeparableConv(channels // 2, channels, stride=2),
        ])
        self.attention = AdditiveAttention(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.stem:
            x = layer(x)
        return self.attention(x)


class ForgeryBranch(nn.Module):
    """
    RGB separable-conv stages with the high-frequency pyramid fused in.

    Stage l runs at scale 1/2^l and is fused with MHFE level l (Pag fusion,
    or addition when MHFF is off). Extra strided stages bring the map to
    1/4 scale before a 1x1 head produces Fa. With use_rgb off the stages
    read Xh instead of X and nothing is fused.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * (level + 1) for level in range(config.mhfe_levels)]

        stages = []
        previous = 3
        for level, width in enumerate(widths):
            stages.append(SeparableConv(previous, width, stride=1 if level == 0 else 2))
            previous = width
        self.stages = nn.ModuleList(stages)

        extra = 2 - (config.mhfe_levels - 1)
        self.downsample = nn.ModuleList(
            SeparableConv(previous, previous, stride=2) for _ in range(max(extra, 0))
        )
        self.head = Conv2d(previous, config.forgery_channels, 1)

        levels = config.fusion_levels
        self.mhfe: Optional[Mhfe] = None
        self.fusions: Optional[nn.ModuleList] = None
        if levels:
            self.mhfe = Mhfe(
                3, widths[:levels],
                kernel_size=config.kernel_size, sigma=config.sigma, shared=config.shared_kernels,
            )
            if config.use_mhff:
                self.fusions = nn.ModuleList(PagFuse(w, config.embed_dim) for w in widths[:levels])

    def forward(self, x: torch.Tensor, xh: torch.Tensor) -> torch.Tensor:
        pyramid: Optional[MhfePyramid] = self.mhfe(xh) if self.mhfe is not None else None
        h = x if self.config.use_rgb else xh
        for level, stage in enumerate(self.stages):
            h = stage(h)
            if pyramid is not None and level < len(pyramid):
                if self.fusions is not None:
                    h = self.fusions[level](h, pyramid[level])
                else:
                    h = h + pyramid[level]
        for layer in self.downsample:
            h = layer(h)
        return self.head(h)


def _check_images(x: torch.Tensor, xh: torch.Tensor, size: int) -> None:
    for name, t in (("X", x), ("Xh", xh)):
        if t.dim() != 4 or tuple(t.shape[1:]) != (3, size, size):
            raise ContractViolation(f"{name} must be N x 3 x {size} x {size}, got {tuple(t.shape)}")
    if x.shape[0] != xh.shape[0]:
        raise ContractViolation("X and Xh batch sizes differ")


class Encoder1(nn.Module):
    """(X, Xh) -> (C, Fa)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.content = ContentBranch(config)
        self.forgery = ForgeryBranch(config)

    def forward(self, x: torch.Tensor, xh: torch.Tensor) -> SemanticBundle1:
        _check_images(x, xh, self.config.image_size)
        return SemanticBundle1(content=self.content(x), forgery=self.forgery(x, xh))


class Decoder1(nn.Module):
    """
    Dual-channel image decoder.

    The content channel uses conv + attention, the forgery channel conv only;
    both are projected to a common width, added, and upsampled back to the
    image size.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        content, forgery = config.content_channels, config.forgery_channels
        width = content
        self.content_conv = ConvBlock(content, content)
        self.content_attention = AdditiveAttention(content)
        self.forgery_conv = ConvBlock(forgery, forgery)
        self.content_proj = Conv2d(content, width, 1)
        self.forgery_proj = Conv2d(forgery, width, 1)
        self.up = nn.ModuleList([ConvBlock(width, width // 2), ConvBlock(width // 2, width // 2)])
        self.to_image = Conv2d(width // 2, 3, 3, padding=1)
        self.content_channels = content
        self.forgery_channels = forgery

    def forward(self, content: torch.Tensor, forgery: torch.Tensor) -> torch.Tensor:
        if content.shape[1] != self.content_channels or forgery.shape[1] != self.forgery_channels:
            raise ContractViolation(
                f"Decoder1 expects {self.content_channels}/{self.forgery_channels} channels, "
                f"got {content.shape[1]}/{forgery.shape[1]}"
            )
        if content.shape[0] != forgery.shape[0] or content.shape[2:] != forgery.shape[2:]:
            raise ContractViolation("C and Fa must share batch and spatial size")
        h = self.content_proj(self.content_attention(self.content_conv(content)))
        h = h + self.forgery_proj(self.forgery_conv(forgery))
        for layer in self.up:
            h = layer(pool_resize(h, "upsample_bilinear", 2))
        return self.to_image(h)


class Disentangler(nn.Module):
    """Conv stack mapping Fa to one half-width semantic map."""

    def __init__(self, channels: int):
        super().__init__()
        self.block = ConvBlock(channels, channels)
        self.final = Conv2d(channels, channels // 2, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.final(self.block(x))


class Encoder2(nn.Module):
    """
    (X, Xh) -> (Fu, Fc) through an embedded copy of Encoder1's forgery branch.

    The embedded branch must be loaded from a stage-1 model before use.
    """

    def __init__(self, config: ModelConfig, freeze_branch: bool = True):
        super().__init__()
        self.config = config
        self.freeze_branch = freeze_branch
        self.branch = ForgeryBranch(config)
        self.unique = Disentangler(config.forgery_channels)
        self.common = Disentangler(config.forgery_channels)
        self.loaded = False

    def load_branch(self, state: Dict[str, torch.Tensor]) -> None:
        """Copy stage-1 forgery-branch weights in and apply the freeze flag."""
        self.branch.load_state_dict(state, strict=True)
        self.mark_loaded()

    def mark_loaded(self) -> None:
        self.loaded = True
        set_trainable(self.branch, not self.freeze_branch)

    def forward(self, x: torch.Tensor, xh: torch.Tensor) -> SemanticBundle2:
        if not self.loaded:
            raise PreconditionError("Encoder2 needs stage-1 forgery-branch weights; load a stage-1 checkpoint first")
        _check_images(x, xh, self.config.image_size)
        forgery = self.branch(x, xh)
        return SemanticBundle2(unique=self.unique(forgery), common=self.common(forgery), forgery=forgery)


class Decoder2(nn.Module):
    """Conv-only dual-channel decoder (Fc, Fu) -> reconstructed Fa, merged by concatenation."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        half = config.forgery_channels // 2
        self.common_path = ConvBlock(half, half)
        self.unique_path = ConvBlock(half, half)
        self.merge = ConvBlock(2 * half, 2 * half)
        self.out = Conv2d(2 * half, 2 * half, 3, padding=1)
        self.half = half

    def forward(self, common: torch.Tensor, unique: torch.Tensor) -> torch.Tensor:
        if common.shape[1] != self.half or unique.shape[1] != self.half:
            raise ContractViolation(
                f"Decoder2 expects {self.half} channels per input, got {common.shape[1]} and {unique.shape[1]}"
            )
        if common.shape[0] != unique.shape[0] or common.shape[2:] != unique.shape[2:]:
            raise ContractViolation("Fc and Fu must share batch and spatial size")
        h = torch.cat([self.common_path(common), self.unique_path(unique)], dim=1)
        return self.out(self.merge(h))


class DetectorHead(nn.Module):
    """Global average pooling followed by a linear layer."""

    def __init__(self, head_id: int, in_channels: int, class_count: int, zero_init: bool = False):
        super().__init__()
        if head_id not in (1, 2, 3):
            raise ContractViolation(f"detector id must be 1, 2 or 3, got {head_id}")
        if class_count < 2:
            raise ContractViolation(f"detector needs at least 2 classes, got {class_count}")
        self.head_id = head_id
        self.class_count = class_count
        self.in_channels = in_channels

        bound = in_channels ** -0.5
        weight = torch.empty(in_channels, class_count)
        bias = torch.empty(class_count)
        if zero_init:
            weight.zero_()
            bias.zero_()
        else:
            weight.uniform_(-bound, bound)
            bias.uniform_(-bound, bound)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return detector_forward(self, features)


def detector_forward(head: DetectorHead, features: torch.Tensor) -> torch.Tensor:
    """Unnormalized N x K logits for a feature map."""
    if features.dim() != 4 or features.shape[1] != head.in_channels:
        raise ContractViolation(
            f"Detector{head.head_id} expects {head.in_channels} channels, got shape {tuple(features.shape)}"
        )
    pooled = pool_resize(features, "global_average_pool")
    return linear(pooled, head.weight, head.bias)


class Stage1Model(nn.Module):
    """Encoder1, Decoder1 and Detector1 (binary, on Fa)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        self.encoder1 = Encoder1(config)
        self.decoder1 = Decoder1(config)
        self.detector1 = DetectorHead(1, config.forgery_channels, 2)


class Stage2Model(nn.Module):
    """Encoder2, Decoder2, Detector2 (method, on Fu) and Detector3 (binary, on Fc)."""

    def __init__(self, config: ModelConfig, freeze_branch: bool = True):
        super().__init__()
        self.config = config.validate()
        half = config.forgery_channels // 2
        self.encoder2 = Encoder2(config, freeze_branch=freeze_branch)
        self.decoder2 = Decoder2(config)
        self.detector2 = DetectorHead(2, half, config.num_methods + 1)
        self.detector3 = DetectorHead(3, half, 2)

    def load_stage1(self, stage1: Stage1Model) -> None:
        """Copy the stage-1 forgery branch into Encoder2."""
        self.encoder2.load_branch(stage1.encoder1.forgery.state_dict())
        logger.info("Copied stage-1 forgery branch into Encoder2")


def trainable_ahf_kernels(module: nn.Module) -> List[AhfKernel]:
    """AHF banks whose weights receive updates (targets of the projection hook)."""
    return [m for m in module.modules() if isinstance(m, AhfKernel) and m.weight.requires_grad]


def parameter_names(module: nn.Module) -> Set[str]:
    return {name for name, _ in module.named_parameters()}

"""
Differentiable dense-array substrate.
Forward primitives, reverse-mode gradients and the SGD step used by every
other module. Tensors are torch tensors; this module adds the shape
contracts, finiteness checks and determinism switches around them.
"""

import logging
from contextlib import contextmanager
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)


ACTIVATIONS = {
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
}

POOL_MODES = {"global_average_pool", "average_pool", "upsample_nearest", "upsample_bilinear"}

# Normalization layers never use more groups than this
MAX_NORM_GROUPS = 8


class ContractViolation(ValueError):
    """Raised when a primitive is called with arguments that break its contract."""
    pass


class NumericFailure(ArithmeticError):
    """Raised when a NaN or Inf value is detected."""
    pass


def seed_everything(seed: int) -> None:
    """
    Seed torch and switch on deterministic kernels.

    Two runs with the same seed and inputs produce bit-identical outputs.
    """
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    logger.debug(f"Seeded torch with {seed}")


@contextmanager
def precision(dtype: torch.dtype = torch.float64) -> Iterator[None]:
    """
    Temporarily change the default floating dtype.

    Training runs in float32; gradient checks run inside `precision(torch.float64)`.
    """
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Raise NumericFailure if x holds any NaN or Inf, otherwise return x."""
    if not bool(torch.isfinite(x).all()):
        raise NumericFailure(f"Non-finite values in {what}")
    return x


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractViolation(message)


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> torch.Tensor:
    """
    2-D convolution over an NCHW batch.

    Args:
        x: Input of shape N x C x H x W
        weight: Kernels of shape O x (C/groups) x k x k, k odd
        bias: Optional per-output-channel bias of shape O
        stride: Step between kernel applications
        padding: Zero padding added to each border
        groups: Number of channel groups (C for depthwise)

    Returns:
        Output of shape N x O x H' x W' with
        H' = floor((H + 2*padding - k) / stride) + 1

    Raises:
        ContractViolation: On any shape or argument mismatch
    """
    _require(x.dim() == 4, f"conv2d expects NCHW input, got shape {tuple(x.shape)}")
    _require(weight.dim() == 4, f"conv2d expects OIkk weights, got shape {tuple(weight.shape)}")
    out_channels, in_per_group, kh, kw = weight.shape
    channels = x.shape[1]
    _require(groups >= 1 and channels % groups == 0, f"{channels} channels not divisible by groups={groups}")
    _require(out_channels % groups == 0, f"{out_channels} output channels not divisible by groups={groups}")
    _require(in_per_group == channels // groups, f"weights expect {in_per_group * groups} input channels, got {channels}")
    _require(kh == kw and kh % 2 == 1, f"kernel must be square with odd size, got {kh}x{kw}")
    _require(padding >= 0 and stride >= 1, f"invalid stride={stride} / padding={padding}")
    if bias is not None:
        _require(tuple(bias.shape) == (out_channels,), f"bias shape {tuple(bias.shape)} != ({out_channels},)")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)


class Conv2d(nn.Conv2d):
    """nn.Conv2d whose forward pass goes through conv2d and its contract checks."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride[0],
                      padding=self.padding[0], groups=self.groups)


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    """Apply relu, sigmoid or tanh elementwise."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ContractViolation(f"Unknown activation '{kind}'. Expected one of {sorted(ACTIVATIONS)}")
    return fn(x)


def pool_resize(x: torch.Tensor, mode: str, factor: int = 2) -> torch.Tensor:
    """
    Pooling and resizing.

    Modes:
        global_average_pool: N x C x H x W -> N x C
        average_pool: factor x factor average pooling, ceil mode
        upsample_nearest / upsample_bilinear: scale H and W by factor.
            A 2-D N x C input is treated as N x C x 1 x 1.

    Raises:
        ContractViolation: Unknown mode or factor < 1
    """
    if mode not in POOL_MODES:
        raise ContractViolation(f"Unknown pool mode '{mode}'. Expected one of {sorted(POOL_MODES)}")
    _require(factor >= 1, f"factor must be >= 1, got {factor}")

    if mode == "global_average_pool":
        _require(x.dim() == 4, f"global_average_pool expects NCHW, got {tuple(x.shape)}")
        return x.mean(dim=(2, 3))

    if x.dim() == 2:
        x = x[:, :, None, None]
    _require(x.dim() == 4, f"{mode} expects NCHW, got {tuple(x.shape)}")

    if mode == "average_pool":
        return F.avg_pool2d(x, kernel_size=factor, stride=factor, ceil_mode=True)
    if x.shape[-2:] == (1, 1):
        # both upsampling modes are a broadcast here; keeps constants exact
        n, c = x.shape[:2]
        return x.expand(n, c, factor, factor).contiguous()
    if mode == "upsample_nearest":
        return F.interpolate(x, scale_factor=factor, mode="nearest")
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """
    Affine map y = xW + b.

    Args:
        x: N x F
        weight: F x K
        bias: K

    Returns:
        N x K
    """
    _require(x.dim() == 2 and weight.dim() == 2, "linear expects 2-D input and weights")
    _require(x.shape[1] == weight.shape[0], f"inner dimensions differ: {x.shape[1]} vs {weight.shape[0]}")
    _require(tuple(bias.shape) == (weight.shape[1],), f"bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
    return x @ weight + bias


def backward(loss: torch.Tensor) -> None:
    """
    Populate .grad on every trainable parameter reachable from loss.

    Raises:
        ContractViolation: loss is not a scalar
        NumericFailure: loss is NaN or Inf
    """
    _require(loss.dim() == 0, f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()


@torch.no_grad()
def sgd_step(params: Iterable[torch.Tensor], lr: float) -> int:
    """
    Plain SGD update w <- w - lr * grad, then clear the gradients.

    Parameters without a gradient (frozen or unreachable) are left untouched.

    Returns:
        Number of parameters updated
    """
    _require(lr > 0, f"learning rate must be positive, got {lr}")
    updated = 0
    for p in params:
        if p.grad is None or not p.requires_grad:
            continue
        p.add_(p.grad, alpha=-lr)
        p.grad = None
        updated += 1
    return updated


def named_trainable(module: nn.Module) -> List[Tuple[str, nn.Parameter]]:
    """List (name, parameter) pairs that will receive updates."""
    return [(name, p) for name, p in module.named_parameters() if p.requires_grad]


def set_trainable(module: nn.Module, trainable: bool) -> None:
    """Freeze or unfreeze every parameter of a module."""
    for p in module.parameters():
        p.requires_grad_(trainable)


def group_norm(channels: int) -> nn.GroupNorm:
    """
    Group normalization with at most eight groups.

    Uses the largest group count <= MAX_NORM_GROUPS that divides channels.
    """
    groups = max(g for g in range(1, MAX_NORM_GROUPS + 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


def snapshot(module: nn.Module) -> Dict[str, torch.Tensor]:
    """Copy every parameter of a module, keyed by name."""
    return {name: p.detach().clone() for name, p in module.named_parameters()}

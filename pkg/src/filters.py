"""
Adaptive high-pass filtering.
Kernel construction from a normalized Gaussian, the projection that keeps the
kernel high-pass after every update, depthwise application, the multi-scale
extraction pyramid and a spectral helper for diagnostics.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .gradcore import ContractViolation, Conv2d, conv2d, pool_resize

logger = logging.getLogger(__name__)


DEFAULT_KERNEL_SIZE = 3
DEFAULT_SIGMA = 1.0
SUPPORTED_KERNEL_SIZES = (3, 5)

# Projection denominators at or below this are treated as degenerate
PROJECTION_EPS = 1e-8


def gaussian_highpass(size: int, sigma: float) -> torch.Tensor:
    """
    Evaluate g = E - G / sum(G) on a size x size grid (float64).

    E is 1 at the center and 0 elsewhere; G is an isotropic Gaussian.
    The result sums to zero for every size and sigma.

    Raises:
        ContractViolation: size even or < 3, or sigma <= 0
    """
    if size < 3 or size % 2 == 0:
        raise ContractViolation(f"AHF kernel size must be odd and >= 3, got {size}")
    if sigma <= 0:
        raise ContractViolation(f"AHF sigma must be positive, got {sigma}")

    radius = size // 2
    offsets = torch.arange(-radius, radius + 1, dtype=torch.float64)
    yy, xx = torch.meshgrid(offsets, offsets, indexing="ij")
    gauss = torch.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    identity = torch.zeros(size, size, dtype=torch.float64)
    identity[radius, radius] = 1.0
    return identity - gauss / gauss.sum()


class AhfKernel(nn.Module):
    """
    Bank of k x k learnable high-pass kernels, one per channel.

    With shared=True a single kernel is broadcast to every channel.
    Weights are stored as (banks, 1, k, k) so they plug straight into a
    depthwise convolution.
    """

    def __init__(
        self,
        channels: int,
        size: int = DEFAULT_KERNEL_SIZE,
        sigma: float = DEFAULT_SIGMA,
        shared: bool = False,
        trainable: bool = True,
    ):
        super().__init__()
        if channels < 1:
            raise ContractViolation(f"AHF needs at least one channel, got {channels}")
        base = gaussian_highpass(size, sigma)
        banks = 1 if shared else channels

        self.channels = channels
        self.size = size
        self.sigma = sigma
        self.shared = shared
        self.weight = nn.Parameter(
            base.to(torch.get_default_dtype()).expand(banks, 1, size, size).clone(),
            requires_grad=trainable,
        )

    @property
    def center(self) -> int:
        return self.size // 2

    def kernel(self, channel: int) -> torch.Tensor:
        """Return the k x k kernel applied to the given channel."""
        if not 0 <= channel < self.channels:
            raise ContractViolation(f"channel {channel} out of range [0, {self.channels})")
        bank = 0 if self.shared else channel
        return self.weight[bank, 0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ahf_apply(self, x)

    def extra_repr(self) -> str:
        return f"channels={self.channels}, size={self.size}, sigma={self.sigma}, shared={self.shared}"


def ahf_init(
    k: int = DEFAULT_KERNEL_SIZE,
    sigma: float = DEFAULT_SIGMA,
    channels: int = 1,
    shared: bool = False,
) -> AhfKernel:
    """
    Build an AHF kernel bank holding the raw Gaussian-derived weights.

    The weights are not yet projected; call ahf_project before use.

    Example:
        >>> kernel = ahf_init(3, 1.0)
        >>> round(float(kernel.kernel(0)[1, 1]), 5)
        0.79582
    """
    return AhfKernel(channels, size=k, sigma=sigma, shared=shared)


@torch.no_grad()
def ahf_project(kernel: AhfKernel) -> AhfKernel:
    """
    Reset each kernel's center to -1 and rescale the rest to sum to 1.

    Non-center weights are divided by (sum(g) - g(0,0)). When that
    denominator is degenerate the non-center weights become uniform
    1 / (k^2 - 1). Projection is done in float64 and written back in place.

    Returns:
        The same kernel, for chaining
    """
    weight = kernel.weight
    banks, size = weight.shape[0], kernel.size
    flat = weight.detach().to(torch.float64).reshape(banks, size * size)
    mid = (size * size) // 2

    denom = flat.sum(dim=1) - flat[:, mid]
    degenerate = denom.abs() <= PROJECTION_EPS
    if bool(degenerate.any()):
        logger.warning(
            f"Degenerate AHF projection in {int(degenerate.sum())} bank(s); "
            f"resetting to uniform surround"
        )

    safe = torch.where(degenerate, torch.ones_like(denom), denom)
    projected = flat / safe[:, None]
    projected[degenerate] = 1.0 / (size * size - 1)
    projected[:, mid] = -1.0

    weight.copy_(projected.reshape(weight.shape).to(weight.dtype))
    return kernel


def ahf_apply(kernel: AhfKernel, x: torch.Tensor) -> torch.Tensor:
    """
    Depthwise high-pass filtering with same-size zero padding.

    Raises:
        ContractViolation: kernel.channels does not match the input channels
    """
    if x.dim() != 4 or x.shape[1] != kernel.channels:
        raise ContractViolation(
            f"AHF expects {kernel.channels} channels, got input shape {tuple(x.shape)}"
        )
    weight = kernel.weight
    if kernel.shared:
        weight = weight.expand(kernel.channels, 1, kernel.size, kernel.size)
    return conv2d(x, weight, None, stride=1, padding=kernel.size // 2, groups=kernel.channels)


def input_highpass(
    channels: int = 3, k: int = DEFAULT_KERNEL_SIZE, sigma: float = DEFAULT_SIGMA
) -> AhfKernel:
    """Fixed, projected, non-trainable AHF that produces the Xh input stream."""
    kernel = ahf_project(AhfKernel(channels, size=k, sigma=sigma, trainable=False))
    return kernel


@dataclass
class MhfePyramid:
    """High-frequency feature maps; level l is at spatial scale 1/2^l."""
    levels: List[torch.Tensor]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.levels[index]

    def shapes(self) -> List[Tuple[int, ...]]:
        return [tuple(level.shape) for level in self.levels]


def mhfe_forward(
    x: torch.Tensor,
    levels: int,
    kernels: Sequence[AhfKernel],
    mixers: Sequence[nn.Conv2d],
) -> MhfePyramid:
    """
    Multi-scale high-frequency extraction.

    Level l applies its own AHF to the input average-pooled l times by 2,
    then a 3x3 mixer convolution.
    """
    if levels < 1:
        raise ContractViolation(f"MHFE needs at least one level, got {levels}")
    if len(kernels) < levels or len(mixers) < levels:
        raise ContractViolation(
            f"MHFE with {levels} levels got {len(kernels)} kernels and {len(mixers)} mixers"
        )

    outputs = []
    current = x
    for level in range(levels):
        if level > 0:
            current = pool_resize(current, "average_pool", 2)
        mixer = mixers[level]
        high = ahf_apply(kernels[level], current)
        outputs.append(conv2d(high, mixer.weight, mixer.bias, stride=1, padding=mixer.padding[0]))
    return MhfePyramid(outputs)


class Mhfe(nn.Module):
    """Multi-scale high-frequency extractor with one AHF bank and mixer per level."""

    def __init__(
        self,
        in_channels: int,
        widths: Sequence[int],
        kernel_size: int = DEFAULT_KERNEL_SIZE,
        sigma: float = DEFAULT_SIGMA,
        shared: bool = False,
    ):
        super().__init__()
        self.kernels = nn.ModuleList(
            ahf_project(ahf_init(kernel_size, sigma, channels=in_channels, shared=shared))
            for _ in widths
        )
        self.mixers = nn.ModuleList(
            Conv2d(in_channels, width, kernel_size=3, padding=1) for width in widths
        )

    @property
    def levels(self) -> int:
        return len(self.kernels)

    def forward(self, x: torch.Tensor) -> MhfePyramid:
        return mhfe_forward(x, self.levels, list(self.kernels), list(self.mixers))


def freq_response(kernel: AhfKernel, channel: int = 0, n: int = 16) -> np.ndarray:
    """
    Magnitude of the n x n DFT of one zero-padded kernel.

    Returns:
        n x n float64 array; the DC bin is [0, 0]
    """
    if n < kernel.size:
        raise ContractViolation(f"grid size n={n} smaller than kernel size {kernel.size}")
    weights = kernel.kernel(channel).detach().to(torch.float64).cpu().numpy()
    padded = np.zeros((n, n), dtype=np.float64)
    padded[: kernel.size, : kernel.size] = weights
    return np.abs(np.fft.fft2(padded))


def write_freq_response(grid: np.ndarray, path: str) -> Path:
    """
    Write a magnitude grid as CSV: header "n=<n>", then one row per grid row.
    """
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"n={grid.shape[0]}"]
    lines.extend(",".join(repr(float(v)) for v in row) for row in grid)
    output_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote {grid.shape[0]}x{grid.shape[1]} frequency response to {output_path}")
    return output_path

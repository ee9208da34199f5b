"""Invertible immunization network.

A single parameter set whose forward pass embeds recovery information into an
image (immunization) and whose algebraic inverse reconstructs the original
content from a rectified attacked image. Built from Haar down-sampling stages,
each followed by a stack of double-side affine coupling layers.
"""

import torch
import torch.nn as nn

from .blocks import sn_conv, warmup_spectral_norm
from .imaging import ShapeError, haar_downsample, haar_upsample


class ResidualSubnet(nn.Module):
    """Five-layer residual conv stack used for the coupling scale/shift branches.

    All five 3x3 layers carry spectral normalization (1-Lipschitz each), with
    an ELU after the first four and a residual connection around the middle
    pair. The output is gated by a scalar gain initialized to zero, so a
    freshly built coupling layer is the identity map and the branch magnitude
    stays proportional to one bounded parameter, keeping float32 inversion
    stable for arbitrary parameter draws.
    """

    def __init__(self, cin: int, cout: int, hidden: int = 32):
        super().__init__()
        self.conv_in = sn_conv(cin, hidden)
        self.conv_mid1 = sn_conv(hidden, hidden)
        self.conv_mid2 = sn_conv(hidden, hidden)
        self.conv_mid3 = sn_conv(hidden, hidden)
        conv = nn.Conv2d(hidden, cout, 3, padding=1, bias=False)
        self.conv_out = nn.utils.spectral_norm(conv)
        self.gain = nn.Parameter(torch.zeros(()))
        self.out_bias = nn.Parameter(torch.zeros(cout, 1, 1))
        self.act = nn.ELU()

    def forward(self, x):
        h = self.act(self.conv_in(x))
        r = self.act(self.conv_mid1(h))
        r = self.act(self.conv_mid2(r))
        h = self.act(self.conv_mid3(r)) + h
        return self.gain * self.conv_out(h) + self.out_bias


class CouplingLayer(nn.Module):
    """Double-side affine coupling: a bijection updating both channel halves.

    Forward, with input split into halves (u1, u2):

        v1 = u1 * exp(clamp * tanh(s2(u2))) + t2(u2)
        v2 = u2 * exp(clamp * tanh(s1(v1))) + t1(v1)

    The tanh bound keeps every scale factor inside [e^-clamp, e^clamp] so the
    inverse stays numerically stable for arbitrary parameter values.
    """

    def __init__(self, channels: int, hidden: int = 32, clamp: float = 1.0):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"coupling layer needs an even channel count; got {channels}")
        half = channels // 2
        self.clamp = clamp
        self.s1 = ResidualSubnet(half, half, hidden)
        self.t1 = ResidualSubnet(half, half, hidden)
        self.s2 = ResidualSubnet(half, half, hidden)
        self.t2 = ResidualSubnet(half, half, hidden)

    def _scale(self, branch, x):
        return torch.exp(self.clamp * torch.tanh(branch(x)))

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        u1, u2 = u.chunk(2, dim=-3)
        v1 = u1 * self._scale(self.s2, u2) + self.t2(u2)
        v2 = u2 * self._scale(self.s1, v1) + self.t1(v1)
        return torch.cat([v1, v2], dim=-3)

    def inverse(self, v: torch.Tensor) -> torch.Tensor:
        v1, v2 = v.chunk(2, dim=-3)
        u2 = (v2 - self.t1(v1)) / self._scale(self.s1, v1)
        u1 = (v1 - self.t2(u2)) / self._scale(self.s2, u2)
        return torch.cat([u1, u2], dim=-3)


class ImmunizerINN(nn.Module):
    """Invertible network over a 4-channel plane (RGB image + one side channel).

    Forward: ``levels`` stages of [Haar down, ``couplings_per_level`` coupling
    layers], then the matching Haar up-sampling chain back to the input shape.
    ``inverse`` retraces the exact algebraic inverse, so
    ``inverse(forward(z)) == z`` holds for any parameter values.

    The forward pass immunizes: channels 0-2 of the output are the protected
    image, channel 3 is the null channel trained toward zero. The inverse pass
    recovers: fed the rectified attacked image plus a zero channel, channels
    0-2 are the reconstruction and channel 3 the recovered edge map.
    """

    IN_CHANNELS = 4

    def __init__(self, levels: int = 3, couplings_per_level: int = 4,
                 hidden: int = 32, clamp: float = 1.0):
        super().__init__()
        self.levels = levels
        self.couplings_per_level = couplings_per_level
        self.hidden = hidden
        self.clamp = clamp
        stages = []
        ch = self.IN_CHANNELS
        for _ in range(levels):
            ch *= 4
            stages.append(nn.ModuleList(
                [CouplingLayer(ch, hidden, clamp) for _ in range(couplings_per_level)]))
        self.stages = nn.ModuleList(stages)
        div = 2 ** levels
        warmup_spectral_norm(self, torch.zeros(1, self.IN_CHANNELS, div, div))

    def arch_meta(self) -> dict:
        return {
            "levels": self.levels,
            "couplings_per_level": self.couplings_per_level,
            "hidden": self.hidden,
            "clamp": self.clamp,
            "in_channels": self.IN_CHANNELS,
        }

    def _check_input(self, z):
        if z.shape[-3] != self.IN_CHANNELS:
            raise ShapeError(f"expected {self.IN_CHANNELS} channels, got {z.shape[-3]}")
        div = 2 ** self.levels
        if z.shape[-2] % div or z.shape[-1] % div:
            raise ShapeError(f"H, W must be divisible by {div}; got {tuple(z.shape[-2:])}")

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        self._check_input(z)
        for stage in self.stages:
            z = haar_downsample(z)
            for layer in stage:
                z = layer(z)
        for _ in range(self.levels):
            z = haar_upsample(z)
        return z

    def inverse(self, z: torch.Tensor) -> torch.Tensor:
        self._check_input(z)
        for _ in range(self.levels):
            z = haar_downsample(z)
        for stage in reversed(self.stages):
            for layer in reversed(stage):
                z = layer.inverse(z)
            z = haar_upsample(z)
        return z


def randomize_parameters(model: ImmunizerINN, seed: int, scale: float = 0.1) -> None:
    """Seeded re-randomization of every parameter, for bijectivity testing.

    Also breaks the zero-initialized coupling outputs, then refreshes the
    spectral-norm power iterations so the Lipschitz normalization reflects the
    new weights (stale estimates would let layer gains blow up and defeat
    float32 inversion).
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g))
    was_training = model.training
    model.train()
    div = 2 ** model.levels
    dummy = torch.zeros(1, model.IN_CHANNELS, div, div)
    with torch.no_grad():
        for _ in range(10):  # one power iteration per forward call
            model(dummy)
    model.train(was_training)


def immunize(model: ImmunizerINN, image: torch.Tensor, edge: torch.Tensor):
    """Protect a single (3, H, W) image given its (1, H, W) edge map.

    Returns (protected image, null channel), both unclamped; clamp and
    quantize at the pipeline boundary before distribution.
    """
    z = torch.cat([image, edge], dim=0).unsqueeze(0)
    out = model(z).squeeze(0)
    return out[:3], out[3:]


def recover(model: ImmunizerINN, rectified: torch.Tensor, null: torch.Tensor | None = None):
    """Reconstruct from a rectified (3, H, W) attacked image and a zero channel.

    Returns (recovered image, recovered edge channel).
    """
    if null is None:
        null = rectified.new_zeros(1, *rectified.shape[-2:])
    z = torch.cat([rectified, null], dim=0).unsqueeze(0)
    out = model.inverse(z).squeeze(0)
    return out[:3], out[3:]

"""Shared network building blocks.

Every network uses spectrally normalized convolutions with ELU activations,
and lossless Haar transforms instead of strided pooling / upsampling.
"""

import torch
import torch.nn as nn

from .imaging import haar_downsample, haar_upsample


class ScaledSNConv(nn.Module):
    """Spectrally normalized conv with a learnable output scale.

    Spectral normalization alone pins every layer's gain at one; deep stacks
    then train impractically slowly because weights can only reorient, never
    grow. The free scalar restores the dynamic range while the normalization
    keeps the conditioning.
    """

    def __init__(self, cin: int, cout: int, kernel: int = 3):
        super().__init__()
        self.conv = nn.utils.spectral_norm(
            nn.Conv2d(cin, cout, kernel, padding=kernel // 2))
        self.scale = nn.Parameter(torch.ones(()))

    def forward(self, x):
        return self.scale * self.conv(x)


def sn_conv(cin: int, cout: int, kernel: int = 3) -> ScaledSNConv:
    return ScaledSNConv(cin, cout, kernel)


@torch.no_grad()
def warmup_spectral_norm(module: nn.Module, example: torch.Tensor, iters: int = 10) -> None:
    """Settle spectral-norm power iterations right after construction.

    A fresh estimate can badly underestimate the true norm, letting a deep
    stack of "normalized" convolutions explode on its first forward passes.
    One train-mode call advances every estimate by one power iteration.
    """
    was_training = module.training
    module.train()
    for _ in range(iters):
        module(example)
    module.train(was_training)


class ConvBlock(nn.Module):
    """Four spectrally normalized 3x3 conv layers with ELU; first maps cin -> cout."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        layers = []
        c = cin
        for _ in range(4):
            layers += [sn_conv(c, cout), nn.ELU()]
            c = cout
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class UShapedNet(nn.Module):
    """U-shaped fully convolutional backbone with eight conv blocks.

    Layout (spatial scale in parentheses, 3-channel input at H x W):

        haar_down (H/2, 12ch)
        b0: 12 -> base            (H/2)   \\
        b1: 4*base -> 2*base      (H/4)    } leading blocks, optionally modulated
        b2: 8*base -> 3*base      (H/8)   /
        b3: 3*base -> 3*base      (H/8, bottleneck)
        b4: up(b3) + skip(b1)     (H/4)
        b5: up(b4) + skip(b0)     (H/2)
        b6, b7: base -> 12        (H/2)
        haar_up -> 3ch            (H)

    The leading three blocks accept per-channel affine modulation pairs
    (a_i, b_i): out_i = a_i * block_i(in_i) + b_i. Inputs need H, W divisible
    by 8.
    """

    def __init__(self, base: int = 32):
        super().__init__()
        if base % 4:
            raise ValueError("base width must be divisible by 4")
        self.base = base
        w0, w1, w2 = base, 2 * base, 3 * base
        self.b0 = ConvBlock(12, w0)
        self.b1 = ConvBlock(4 * w0, w1)
        self.b2 = ConvBlock(4 * w1, w2)
        self.b3 = ConvBlock(w2, w2)
        self.b4 = ConvBlock(w2 // 4 + w1, w1)
        self.b5 = ConvBlock(w1 // 4 + w0, w0)
        self.b6 = ConvBlock(w0, w0)
        self.b7 = ConvBlock(w0, 12)
        warmup_spectral_norm(self, torch.zeros(1, 3, 16, 16))

    @property
    def modulated_widths(self):
        """Output channel counts of the three modulated leading blocks."""
        return (self.base, 2 * self.base, 3 * self.base)

    def forward(self, x: torch.Tensor, mods=None) -> torch.Tensor:
        return self.features_and_output(x, mods)[0]

    def features_and_output(self, x: torch.Tensor, mods=None):
        """Run the backbone on a (B, 3, H, W) batch.

        Returns (out, [e0, e1, e2], d0): the 3-channel image-domain output,
        the three leading block outputs, and the decoder feature at H/2 with
        ``base`` channels (the tap for mask heads, which need more capacity
        than the 3-channel image path carries).

        ``mods``: optional [(a0, b0), (a1, b1), (a2, b2)], each tensor of shape
        (B, C_i) or (C_i,), broadcast over space.
        """
        if x.shape[-2] % 8 or x.shape[-1] % 8:
            raise ValueError(f"UShapedNet needs H, W divisible by 8; got {tuple(x.shape)}")

        def modulate(feat, i):
            if mods is None:
                return feat
            a, b = mods[i]
            return a.view(*a.shape, 1, 1) * feat + b.view(*b.shape, 1, 1)

        e0 = modulate(self.b0(haar_downsample(x)), 0)
        e1 = modulate(self.b1(haar_downsample(e0)), 1)
        e2 = modulate(self.b2(haar_downsample(e1)), 2)
        d2 = self.b3(e2)
        d1 = self.b4(torch.cat([haar_upsample(d2), e1], dim=1))
        d0 = self.b5(torch.cat([haar_upsample(d1), e0], dim=1))
        out = haar_upsample(self.b7(self.b6(d0)))
        return out, [e0, e1, e2], d0

"""Building blocks shared by the generator prior and the domain adapters."""

import math

import torch
import torch.nn.functional as F
from torch import nn


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    """z -> w. A normalized-input MLP as in style-based generators."""

    def __init__(self, dim: int, n_layers: int = 4):
        super().__init__()
        layers = [PixelNorm()]
        for _ in range(n_layers):
            layers += [nn.Linear(dim, dim), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class ModulatedConv(nn.Module):
    """3x3 convolution whose input channels are scaled per sample by an affine
    projection of a style vector, followed by weight demodulation."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.in_ch, self.out_ch = in_ch, out_ch
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.ones_(self.affine.bias)
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, 3, 3) / math.sqrt(in_ch * 9))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x, w):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        style = self.affine(w)  # (n, in_ch)
        # modulate the input instead of the weights: a shared-weight conv is much
        # faster than a per-sample grouped one and gives the same result
        out = F.conv2d(x * style[:, :, None, None], self.weight, padding=1)
        demod = torch.rsqrt(style.pow(2) @ self.weight.pow(2).sum(dim=(2, 3)).t() + 1e-8)
        out = out * demod[:, :, None, None] + self.bias[None, :, None, None]
        return self.act(out)


class ConvDiscriminator(nn.Module):
    """Strided convolutional realism classifier: (N, C, R, R) -> (N,) logits.

    ``n_layers`` stride-2 convolutions, then a linear head on the flattened map.
    With ``minibatch_std`` the head also sees the batch's feature spread, which
    discourages a generator from collapsing to a single mode.
    """

    def __init__(self, resolution: int, in_channels: int = 3, base_channels: int = 32,
                 n_layers: int = 4, max_channels: int = 256, minibatch_std: bool = False):
        super().__init__()
        layers = []
        ch_in, res = in_channels, resolution
        for i in range(n_layers):
            ch_out = min(base_channels * 2**i, max_channels)
            layers += [nn.Conv2d(ch_in, ch_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch_in, res = ch_out, res // 2
        if res < 1:
            raise ValueError(f"resolution {resolution} too small for {n_layers} stride-2 layers")
        self.body = nn.Sequential(*layers)
        self.minibatch_std = minibatch_std
        self.head = nn.Linear((ch_in + int(minibatch_std)) * res * res, 1)

    def forward(self, x):
        h = self.body(x)
        if self.minibatch_std:
            spread = (h.var(dim=0, unbiased=False) + 1e-8).sqrt().mean() if len(h) > 1 else h.new_zeros(())
            h = torch.cat([h, spread.expand(h.shape[0], 1, *h.shape[2:])], dim=1)
        return self.head(h.flatten(1)).squeeze(1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

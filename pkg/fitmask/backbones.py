"""
Convolutional trunks that produce the last-stage feature map phi(I).

Both return NxCxHxW; FitMaskModel.encode moves channels last.
"""

from pathlib import Path
import torch
import torch.nn as nn
from torchvision.models import resnet50
from .config import EncoderConfig
from .errors import ConfigurationError


def _activation(name: str) -> nn.Module:
    return nn.SiLU() if name == 'silu' else nn.ReLU()


class TinyConvNet(nn.Module):
    """
    Four stride-2 conv/bn/act blocks. A 64px input gives a 4x4 grid, 112px gives 7x7.
    """
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        widths = [3, *cfg.stem_widths, cfg.channels]
        blocks = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            blocks += [
                nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                _activation(cfg.activation),
            ]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x)


class ResNetTrunk(nn.Module):
    """
    torchvision ResNet-50 without the average pool and classifier (2048 channels, stride 32).
    """
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        net = resnet50(weights=None)
        if cfg.weights_path:
            load_trunk_weights(net, cfg.weights_path)
        self.trunk = nn.Sequential(*list(net.children())[:-2])

    def forward(self, x):
        return self.trunk(x)


def load_trunk_weights(net: nn.Module, path: str):
    """
    Loads a local ResNet-50 state dict; the classifier head is ignored. Never downloads.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"backbone weights {path} not found")
    state = torch.load(path, map_location='cpu', weights_only=True)
    state = {k: v for k, v in state.items() if not k.startswith('fc.')}
    missing, unexpected = net.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.startswith('fc.')]
    if missing or unexpected:
        raise ConfigurationError(
            f"weights at {path} do not fit resnet50: missing={missing[:5]} unexpected={unexpected[:5]}")


def build_backbone(cfg: EncoderConfig) -> nn.Module:
    if cfg.backbone == 'tiny-conv':
        return TinyConvNet(cfg)
    return ResNetTrunk(cfg)

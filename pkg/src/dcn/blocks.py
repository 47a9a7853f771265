import torch
from torch import nn

BLOCK_KINDS = ("plain_conv", "residual", "squeeze_excite")


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        w = x.mean(dim=(2, 3))
        w = torch.sigmoid(self.fc2(torch.relu(self.fc1(w))))
        return x * w[:, :, None, None]


class ConvBlock(nn.Module):
    """Two 3x3 convolutions; optionally residual and squeeze-excite.

    ``plain_conv`` is conv-bn-relu twice, ``residual`` the basic ResNet
    block, ``squeeze_excite`` the basic block with SE recalibration before
    the shortcut sum.
    """

    def __init__(self, cin, cout, stride=1, kind="squeeze_excite", se_reduction=16):
        super().__init__()
        if kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
        self.kind = kind
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.se = SqueezeExcite(cout, se_reduction) if kind == "squeeze_excite" else None
        self.shortcut = None
        if kind != "plain_conv" and (stride != 1 or cin != cout):
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward_with_hidden(self, x):
        hidden = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(hidden))
        if self.se is not None:
            out = self.se(out)
        if self.kind != "plain_conv":
            out = out + (x if self.shortcut is None else self.shortcut(x))
        return torch.relu(out), hidden

    def forward(self, x):
        return self.forward_with_hidden(x)[0]

    def input_weights(self):
        """Parameters that read the block input directly."""
        ws = [self.conv1.weight]
        if self.shortcut is not None:
            ws.append(self.shortcut[0].weight)
        return ws


def init_weights(module: nn.Module) -> None:
    """He (rectifier-aware) init for convolutions, unit BN, small linears."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)

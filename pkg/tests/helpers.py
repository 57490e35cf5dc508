import torch
import torch.nn as nn

from advpurify.classifier import Classifier
from advpurify.diffusion import EpsilonPredictor


class PixelOracle(nn.Module):
    """Reads the label off the top-left pixel (class 1 iff it is bright).

    With ``flip=True`` it always answers the wrong class.
    """

    input_shape = (1, 32, 32)

    def __init__(self, flip: bool = False):
        super().__init__()
        self.sign = -1.0 if flip else 1.0
        self.dummy = nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x):
        v = (x[:, 0, 0, 0].double() - 0.5) * 50.0 * self.sign
        return torch.stack([-v, v], dim=1) + self.dummy


def oracle_batch(n=20, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = 0.3 + 0.4 * torch.rand(n, 1, 32, 32, generator=gen, dtype=torch.float64)
    y = torch.arange(n) % 2
    x[:, 0, 0, 0] = torch.where(y == 1, 0.9, 0.1).double()
    return x, y


def tiny_classifier(seed=0):
    torch.manual_seed(seed)
    return Classifier(widths=(4, 4, 4), hidden=8).eval()


def tiny_predictor(seed=0):
    torch.manual_seed(seed)
    return EpsilonPredictor(base_width=8).eval()

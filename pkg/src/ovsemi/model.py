import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters


class SegNet(nn.Module):
    """Small fully-convolutional segmenter with growing dilation.

    SiLU activations keep the objective smooth, which the finite-difference
    gradient check relies on.
    """

    def __init__(self, n_classes, width=16, dilations=(1, 2, 4, 8), in_channels=3):
        super().__init__()
        self.n_classes = n_classes
        self.width = width
        self.dilations = tuple(dilations)
        layers = []
        c = in_channels
        for d in self.dilations:
            layers += [nn.Conv2d(c, width, 3, padding=d, dilation=d), nn.SiLU()]
            c = width
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Conv2d(c, n_classes, 1)

    def forward(self, x):
        return self.classifier(self.features(x))

    def reset(self, seed):
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    bound = (6.0 / fan_in) ** 0.5
                    m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=m.weight.dtype) * 2 * bound - bound)
                    m.bias.zero_()
        return self

    def flat_parameters(self):
        return parameters_to_vector(self.parameters()).detach().clone()

    def set_flat_parameters(self, vec):
        vec = torch.as_tensor(vec, dtype=next(self.parameters()).dtype)
        with torch.no_grad():
            vector_to_parameters(vec, self.parameters())

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())


def build_student(n_classes, width=16, dilations=(1, 2, 4, 8), seed=0, dtype=torch.float32):
    return SegNet(n_classes, width, dilations).to(dtype).reset(seed)

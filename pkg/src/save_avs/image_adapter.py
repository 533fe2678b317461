import torch
from torch import nn


class ImageEncoderAdapter(nn.Module):
    """Per-block adapter: channel gating followed by a spatial down/up branch.

    Operates on channels-last token maps ``[B, H, W, C]``. The spatial branch
    halves each side with a stride-2 convolution and restores it with a
    stride-2 transposed convolution, so the grid side must be even.
    """

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.shrink = nn.Linear(dim, hidden)
        self.expand = nn.Linear(hidden, dim)
        self.act = nn.ReLU()
        self.down = nn.Conv2d(dim, dim, kernel_size=3, stride=2, padding=1)
        self.up = nn.ConvTranspose2d(dim, dim, kernel_size=2, stride=2)

    def zero_init_(self):
        # Makes the adapter the zero map, so the augmented block starts as the frozen one.
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)
        nn.init.zeros_(self.expand.bias)
        return self

    def channel_gate(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(1, 2))
        gate = torch.sigmoid(self.expand(self.act(self.shrink(pooled))))
        return x * gate[:, None, None, :]

    def spatial_transform(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[1:3]
        if h % 2 or w % 2:
            raise ValueError(f"spatial branch needs an even token grid, got {h}x{w}")
        y = self.up(self.down(x.permute(0, 3, 1, 2)))
        return y.permute(0, 2, 3, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial_transform(self.channel_gate(x))

"""Small convolutional scorer with a linear+sigmoid head.

Stands in for a full pretrained backbone at desk scale: three strided
convolutions summarize a 224 px tile, adaptive pooling flattens the
summary, and one linear unit reads it out through a sigmoid. Training is
plain SGD on binary cross-entropy.

Determinism is the load-bearing property here, not accuracy. Everything
runs float32 on one CPU thread, and the whole trajectory (weight init,
epoch shuffles) is drawn from the global generator seeded once per call,
so a train payload plus its declared seed fixes every parameter bit.
"""

import hashlib

import torch
from torch import nn

torch.set_num_threads(1)

TILE_SIDE = 224

DEFAULTS = {"seed": 0, "epochs": 40, "batch_size": 200, "learning_rate": 0.5}


class TileNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, 5, stride=4, padding=2),
            nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(32, 1))

    def forward(self, x):
        return torch.sigmoid(self.head(self.features(x))).squeeze(1)


def train_model(rgb: torch.Tensor, labels: torch.Tensor, config: dict) -> TileNet:
    """Train a fresh TileNet on uint8 tiles (n, side, side, 3).

    Callers serialize concurrent invocations: the run consumes the global
    torch generator and an interleaved second train would change both.
    """
    torch.manual_seed(config["seed"])
    net = TileNet()
    x = rgb.permute(0, 3, 1, 2).float() / 255.0
    y = labels.float()
    optimizer = torch.optim.SGD(net.parameters(), lr=config["learning_rate"])
    loss_fn = nn.BCELoss()
    n = x.shape[0]
    step = max(1, int(config["batch_size"]))
    for _ in range(config["epochs"]):
        order = torch.randperm(n)
        for start in range(0, n, step):
            idx = order[start : start + step]
            optimizer.zero_grad()
            loss = loss_fn(net(x[idx]), y[idx])
            loss.backward()
            optimizer.step()
    net.eval()
    return net


def score_tile(net: TileNet, rgb: torch.Tensor) -> float:
    """Probability of the positive class for one uint8 tile (side, side, 3)."""
    with torch.no_grad():
        x = rgb.permute(2, 0, 1).float().unsqueeze(0) / 255.0
        return float(net(x)[0])


def digest(net: TileNet) -> str:
    """Stable hash of the trained parameters, name order fixed."""
    h = hashlib.sha256()
    state = net.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(tensor.numpy().astype("float32", copy=False).tobytes())
    return h.hexdigest()

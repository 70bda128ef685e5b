"""In-process checks of the convolutional scorer itself."""

import torch

from conftest import tile_bytes
from scorer_adapter.model import TileNet, digest, score_tile, train_model

CONFIG = {"seed": 7, "epochs": 2, "batch_size": 4, "learning_rate": 0.1}


def _tiles(n):
    rgb = torch.stack(
        [
            torch.frombuffer(bytearray(tile_bytes(i)), dtype=torch.uint8).reshape(
                224, 224, 3
            )
            for i in range(n)
        ]
    )
    labels = torch.tensor([float(i % 2) for i in range(n)])
    return rgb, labels


def test_same_seed_same_parameters():
    rgb, labels = _tiles(6)
    a = train_model(rgb, labels, CONFIG)
    b = train_model(rgb, labels, CONFIG)
    assert digest(a) == digest(b)
    probe = torch.frombuffer(bytearray(tile_bytes(99)), dtype=torch.uint8).reshape(
        224, 224, 3
    )
    assert score_tile(a, probe) == score_tile(b, probe)


def test_different_seed_different_parameters():
    rgb, labels = _tiles(6)
    a = train_model(rgb, labels, CONFIG)
    b = train_model(rgb, labels, dict(CONFIG, seed=8))
    assert digest(a) != digest(b)


def test_zero_epochs_keeps_seeded_init():
    rgb, labels = _tiles(4)
    fresh = train_model(rgb, labels, dict(CONFIG, epochs=0))
    torch.manual_seed(CONFIG["seed"])
    reference = TileNet()
    assert digest(fresh) == digest(reference)


def test_scores_stay_in_unit_interval():
    rgb, labels = _tiles(6)
    net = train_model(rgb, labels, CONFIG)
    for seed in range(40, 50):
        probe = torch.frombuffer(
            bytearray(tile_bytes(seed)), dtype=torch.uint8
        ).reshape(224, 224, 3)
        assert 0.0 <= score_tile(net, probe) <= 1.0

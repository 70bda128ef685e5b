"""Reference external tile scorer speaking the line protocol.

Hosts a small convolutional network with a linear+sigmoid head behind the
newline-delimited JSON protocol that the sweep harness uses for external
scorers. Runs over stdio as a child process or over TCP; either way every
trained model is a pure function of its train payload and declared seed.
"""

__version__ = "0.1.0"

from .model import TileNet, digest, score_tile, train_model
from .protocol import RequestError, Session, handle_line
from .server import main

__all__ = [
    "TileNet",
    "train_model",
    "score_tile",
    "digest",
    "Session",
    "RequestError",
    "handle_line",
    "main",
]

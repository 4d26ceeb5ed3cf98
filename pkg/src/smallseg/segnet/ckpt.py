"""Checkpoint container and its bit-exact file format.

Layout: ``CKPT\\n`` magic line, one JSON header line (configs, tensor
directory, payload hash), then the raw tensors as little-endian float32
in directory order. Loading verifies the hash; a load/save round trip is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..volcore import InvalidArgumentError

MAGIC = b"CKPT\n"


class CorruptionError(ValueError):
    """Checkpoint payload does not match its recorded hash."""


@dataclass
class Checkpoint:
    net_config: "NetConfig"
    train_config: "TrainConfig"
    params: dict[str, np.ndarray]
    iteration: int
    final_loss: float
    loss_curve: np.ndarray | None = field(default=None, compare=False)

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(_payload(self.params)).hexdigest()

    def to_model(self):
        from .net import Model

        return Model(self.net_config, {k: v.copy() for k, v in self.params.items()})


def _payload(params: dict[str, np.ndarray]) -> bytes:
    return b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params.values()
    )


def save_ckpt(ckpt: Checkpoint, path) -> None:
    payload = _payload(ckpt.params)
    header = {
        "net_config": ckpt.net_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "tensors": [[k, list(v.shape)] for k, v in ckpt.params.items()],
        "iteration": int(ckpt.iteration),
        "final_loss": float(ckpt.final_loss),
        "hash": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_ckpt(path) -> Checkpoint:
    from .net import NetConfig
    from .train import TrainConfig

    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise InvalidArgumentError(f"not a checkpoint file: bad magic in {path}")
    nl = blob.find(b"\n", len(MAGIC))
    if nl < 0:
        raise InvalidArgumentError("checkpoint header line is unterminated")
    header = json.loads(blob[len(MAGIC) : nl].decode("utf-8"))
    payload = blob[nl + 1 :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["hash"]:
        raise CorruptionError(
            f"checkpoint payload hash {digest[:12]}... does not match header"
        )
    params = {}
    off = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        raw = payload[off : off + 4 * n]
        if len(raw) != 4 * n:
            raise CorruptionError(f"checkpoint payload truncated in tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        off += 4 * n
    if off != len(payload):
        raise CorruptionError("checkpoint payload has trailing bytes")
    return Checkpoint(
        net_config=NetConfig.from_dict(header["net_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        params=params,
        iteration=int(header["iteration"]),
        final_loss=float(header["final_loss"]),
    )

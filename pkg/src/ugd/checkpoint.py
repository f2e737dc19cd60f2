"""Single-file model checkpoint.

Layout::

    b"UGD1"                      magic
    uint32 little-endian         header length in bytes
    header                       UTF-8 JSON: configs, parameter manifest,
                                 GMM prior (decimal, round-trip exact), log
    float32 little-endian data   parameter arrays in manifest order
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .encoder import UGDNet
from .pointcloud import PipelineConfig
from .prior import GmmPrior
from .training import TrainConfig

MAGIC = b"UGD1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    pipeline: PipelineConfig
    train_config: TrainConfig
    net: UGDNet
    prior: Optional[GmmPrior] = None
    log: list = field(default_factory=list)
    seed: int = 0
    version: int = FORMAT_VERSION

    @property
    def train_digest(self) -> str:
        blob = json.dumps(self.train_config.to_record(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_prior(self, prior: GmmPrior) -> "ModelCheckpoint":
        if prior.d != self.net.d:
            raise CheckpointError(f"prior dimension {prior.d} != encoder dimension {self.net.d}")
        return ModelCheckpoint(self.pipeline, self.train_config, self.net, prior, self.log,
                               self.seed, self.version)

    def to_bytes(self) -> bytes:
        state = self.net.state_dict()
        manifest, chunks, offset = [], [], 0
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            chunks.append(np.ascontiguousarray(arr).tobytes())
            offset += arr.size
        header = {
            "format_version": self.version,
            "seed": self.seed,
            "pipeline": asdict(self.pipeline),
            "train_config": self.train_config.to_record(),
            "train_digest": self.train_digest,
            "encoder": {"h": self.net.h, "n_blocks": self.net.n_blocks, "d": self.net.d},
            "parameters": manifest,
            "prior": self.prior.to_record() if self.prior is not None else None,
            "log": self.log,
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelCheckpoint":
        if blob[:4] != MAGIC:
            raise CheckpointError("not a UGD checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pipeline = PipelineConfig(**header["pipeline"])
        tcfg = TrainConfig.from_record(header["train_config"])
        enc = header["encoder"]
        net = UGDNet(enc["h"], enc["n_blocks"], enc["d"])
        data = np.frombuffer(blob, dtype="<f4", offset=8 + hlen)
        expected = net.state_dict()
        state = {}
        for entry in header["parameters"]:
            name = entry["name"]
            if name not in expected:
                raise CheckpointError(f"unexpected parameter {name}")
            arr = data[entry["offset"]: entry["offset"] + entry["count"]].reshape(entry["shape"])
            if tuple(arr.shape) != tuple(expected[name].shape):
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tuple(expected[name].shape)}")
            state[name] = torch.from_numpy(arr.astype(np.float32))
        missing = set(expected) - set(state)
        if missing:
            raise CheckpointError(f"missing parameters: {sorted(missing)}")
        net.load_state_dict(state)
        net.eval()
        net.invalidate()
        prior = GmmPrior.from_record(header["prior"]) if header.get("prior") else None
        if prior is not None and prior.d != net.d:
            raise CheckpointError(f"prior dimension {prior.d} != encoder dimension {net.d}")
        return cls(pipeline, tcfg, net, prior, header.get("log", []), header.get("seed", 0), version)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

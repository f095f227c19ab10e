"""Checkpoint files: a text manifest followed by a raw float32 payload.

Layout::

    NEURALGPU-CHECKPOINT 1
    config <json>
    rng <json>
    state <json>
    tensor <name> <d0>x<d1>... <byte offset> <byte count>
    ...
    end
    <payload: little-endian IEEE-754 float32, tensors back to back>

JSON lines use sorted keys, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .model import ModelConfig, ParameterBank

MAGIC = "NEURALGPU-CHECKPOINT 1"


@dataclass
class Checkpoint:
    config: dict
    rng: dict
    state: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        cfg = self.config.get("model", self.config)
        return ModelConfig(**cfg)

    def bank(self, dtype=np.float32) -> ParameterBank:
        cfg = self.model_config()
        params = {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}
        return ParameterBank.from_arrays(cfg, params, collapsed=bool(self.state.get("collapsed", False)),
                                         dtype=dtype)


def _dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps(ckpt: Checkpoint) -> bytes:
    lines = [MAGIC, f"config {_dumps_json(ckpt.config)}", f"rng {_dumps_json(ckpt.rng)}",
             f"state {_dumps_json(ckpt.state)}"]
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        if any(c.isspace() for c in name):
            raise ContractViolation(f"tensor name {name!r} contains whitespace")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks)


def loads(blob: bytes) -> Checkpoint:
    header_end = blob.find(b"\nend\n")
    if not blob.startswith(MAGIC.encode()) or header_end < 0:
        raise ContractViolation("not a neuralgpu checkpoint")
    header = blob[:header_end].decode("utf-8").split("\n")
    payload = memoryview(blob)[header_end + len(b"\nend\n"):]
    sections: dict = {}
    tensors: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(header[1:], start=2):
        kind, _, rest = line.partition(" ")
        try:
            if kind in ("config", "rng", "state"):
                sections[kind] = json.loads(rest)
            elif kind == "tensor":
                name, shape, offset, count = rest.split(" ")
                dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
                start, count = int(offset), int(count)
                if start + count > len(payload):
                    raise ContractViolation(f"checkpoint line {lineno}: tensor {name} runs past the payload")
                arr = np.frombuffer(payload[start:start + count], dtype="<f4").reshape(dims)
                tensors[name] = arr.astype(np.float32)
            else:
                raise ContractViolation(f"checkpoint line {lineno}: unknown entry {kind!r}")
        except ValueError as exc:
            raise ContractViolation(f"checkpoint line {lineno}: malformed {kind} entry ({exc})") from None
    missing = {"config", "rng", "state"} - set(sections)
    if missing:
        raise ContractViolation(f"checkpoint is missing sections {sorted(missing)}")
    return Checkpoint(sections["config"], sections["rng"], sections["state"], tensors)


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))
    return path


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def from_bank(bank: ParameterBank, config: dict | None = None, rng: dict | None = None,
              state: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
    state = dict(state or {})
    state["collapsed"] = bank.collapsed
    tensors = dict(bank.state_arrays())
    tensors.update(extra or {})
    return Checkpoint(config or {"model": bank.config.to_dict()}, rng or {}, state, tensors)

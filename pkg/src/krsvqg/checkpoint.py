"""Binary checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic  b"KRSVQGCK"
    u32       format version (1)
    u32       length of the config block in bytes
    ...       config block, UTF-8 "key = value" lines in ModelConfig field order
    u32       number of parameters
    per parameter, in model order:
        u32   name length, then the UTF-8 name
        u32   number of dimensions, then one u32 per dimension
        ...   the values as little-endian float32, row-major

Every name starts with one of the four component prefixes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .model import COMPONENTS, LANGUAGE_COMPONENTS, VISION_COMPONENTS, ModelConfig

MAGIC = b"KRSVQGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_to_text(config: ModelConfig) -> str:
    return "".join("%s = %r\n" % (k, v) for k, v in config.to_dict().items())


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError("line %d: expected 'key = value', got %r" % (lineno, raw))
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value.strip("'\"")
    return out


def component_of(name: str) -> str:
    prefix = name.split(".", 1)[0]
    if prefix not in COMPONENTS:
        raise CheckpointError("parameter %r has no component prefix" % name)
    return prefix


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.params:
            component_of(name)

    @classmethod
    def from_model(cls, model) -> "Checkpoint":
        params = {n: p.detach().cpu().numpy().astype("<f4") for n, p in model.state_dict().items()}
        return cls(ModelConfig(**model.config.to_dict()), params)

    def to_model(self):
        from .model import KRSVQG

        model = KRSVQG(self.config)
        self.load_into(model)
        return model

    def load_into(self, model, components: Iterable[str] = COMPONENTS) -> None:
        """Copy the parameters of ``components`` into ``model`` in place."""
        components = tuple(components)
        state = model.state_dict()
        with torch.no_grad():
            for name, value in self.params.items():
                if component_of(name) not in components:
                    continue
                if name not in state:
                    raise CheckpointError("model has no parameter %r" % name)
                if tuple(state[name].shape) != value.shape:
                    raise CheckpointError("shape mismatch for %r: %s vs %s"
                                          % (name, tuple(state[name].shape), value.shape))
                state[name].copy_(torch.from_numpy(np.array(value, dtype=np.float32)))
        missing = [n for n in state if component_of(n) in components and n not in self.params]
        if missing:
            raise CheckpointError("checkpoint lacks parameters: %s" % ", ".join(missing[:5]))

    def component(self, names: Iterable[str]) -> dict[str, np.ndarray]:
        names = tuple(names)
        return {n: v for n, v in self.params.items() if component_of(n) in names}

    def to_bytes(self) -> bytes:
        cfg = config_to_text(self.config).encode("utf-8")
        out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(self.params))]
        for name, value in self.params.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(value, dtype="<f4")
            out.append(struct.pack("<I", len(raw)) + raw)
            out.append(struct.pack("<I%dI" % arr.ndim, arr.ndim, *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = 8

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(data):
                raise CheckpointError("truncated checkpoint")
            vals = struct.unpack_from(fmt, data, pos)
            pos += size
            return vals

        version, cfg_len = take("<II")
        if version != VERSION:
            raise CheckpointError("unsupported checkpoint version %d" % version)
        config = ModelConfig.from_dict(parse_key_values(data[pos:pos + cfg_len].decode("utf-8")))
        pos += cfg_len
        (count,) = take("<I")
        params = {}
        for _ in range(count):
            (n,) = take("<I")
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = take("<I")
            shape = take("<%dI" % ndim) if ndim else ()
            size = int(np.prod(shape)) * 4
            if pos + size > len(data):
                raise CheckpointError("truncated checkpoint")
            params[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
            pos += size
        if pos != len(data):
            raise CheckpointError("trailing bytes after parameters")
        return cls(config, params)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def compose(vision: Checkpoint, language: Checkpoint) -> Checkpoint:
    """Vision components from one checkpoint, language components from another."""
    if vision.config != language.config:
        raise CheckpointError("vision and language checkpoints have different model configs")
    params = {}
    for name in vision.params:
        src = vision if component_of(name) in VISION_COMPONENTS else language
        if name not in src.params:
            raise CheckpointError("parameter %r missing from source checkpoint" % name)
        params[name] = src.params[name].copy()
    return Checkpoint(ModelConfig(**vision.config.to_dict()), params)


__all__ = ["Checkpoint", "CheckpointError", "compose", "parse_key_values",
           "LANGUAGE_COMPONENTS", "VISION_COMPONENTS"]

import logging
import struct
from typing import Dict, Optional

import numpy as np

from config import dump_section, parse_lines, parse_value
from models.errors import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                           CheckpointUnknownTensorError, CheckpointVersionError, ConfigError)
from models.settings import NetworkConfig, build_settings
from models.state import ModelState
from models.tensor import Parameter
from services.network_service import NetworkService

logger = logging.getLogger(__name__)

MAGIC = b"SPENETCK"
VERSION = 1

# One byte per record: which dict the tensor lives in, and how its values are stored.
_KIND_PARAM, _KIND_BUFFER = 0, 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, file has {len(self.blob)}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


class CheckpointRepository:
    @staticmethod
    def config_text(state: ModelState) -> str:
        lines = [dump_section("net", state.config), f"state.epoch={state.epoch}", f"state.seed={state.seed}"]
        lines += [f"extra.{key}={value}" for key, value in sorted(state.extra.items())]
        return "\n".join(lines)

    @staticmethod
    def save_checkpoint(state: ModelState, path: str) -> None:
        """
        Write magic, version, config text and one record per parameter / buffer
        """
        out = bytearray(MAGIC)
        out += struct.pack("<I", VERSION)
        text = CheckpointRepository.config_text(state).encode("utf-8")
        out += struct.pack("<I", len(text)) + text

        records = [(_KIND_PARAM, n, p.data) for n, p in state.params.items()]
        records += [(_KIND_BUFFER, n, b) for n, b in state.buffers.items()]
        out += struct.pack("<I", len(records))
        for kind, name, values in records:
            dtype = np.dtype(values.dtype)
            if dtype not in _DTYPE_TAGS:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {dtype}")
            encoded = name.encode("utf-8")
            out += struct.pack("<H", len(encoded)) + encoded
            out += struct.pack("<BBB", kind, _DTYPE_TAGS[dtype], values.ndim)
            out += struct.pack(f"<{values.ndim}I", *values.shape)
            out += np.ascontiguousarray(values, dtype=_DTYPES[_DTYPE_TAGS[dtype]]).tobytes()

        with open(path, "wb") as f:
            f.write(bytes(out))
        logger.info("Saved checkpoint %s (%d tensors, epoch %d)", path, len(records), state.epoch)

    @staticmethod
    def _parse_header(text: str, path: str):
        raw = parse_lines(text, source=path)
        try:
            net = {k: parse_value(NetworkConfig, k, v) for k, v in raw.get("net", {}).items()}
            config = build_settings(NetworkConfig, net)
        except (ConfigError, KeyError) as e:
            raise CheckpointError(f"{path}: stored config is invalid: {e}") from e
        state_fields = raw.get("state", {})
        try:
            epoch = int(state_fields["epoch"])
            seed = int(state_fields["seed"])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: header is missing state.epoch / state.seed") from e
        return config, epoch, seed, dict(raw.get("extra", {}))

    @staticmethod
    def load_checkpoint(path: str, expected_config: Optional[NetworkConfig] = None) -> ModelState:
        """
        Restore a ModelState. Tensor names and shapes are checked against the
        layout of `expected_config` (default: the config stored in the file).
        """
        with open(path, "rb") as f:
            reader = _Reader(f.read(), path)

        magic = reader.blob[:len(MAGIC)]
        if magic != MAGIC:
            raise CheckpointVersionError(f"{path}: bad magic {magic!r}, not a checkpoint of this format")
        reader.take(len(MAGIC))
        (version,) = reader.unpack("<I")
        if version != VERSION:
            raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
        (text_len,) = reader.unpack("<I")
        config, epoch, seed, extra = CheckpointRepository._parse_header(
            reader.take(text_len).decode("utf-8"), path)

        layout = NetworkService.init_parameters(expected_config or config, seed)
        expected: Dict[str, tuple] = {n: p.shape for n, p in layout.params.items()}
        expected.update({n: b.shape for n, b in layout.buffers.items()})

        params: Dict[str, Parameter] = {}
        buffers: Dict[str, np.ndarray] = {}
        (count,) = reader.unpack("<I")
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            kind, dtype_tag, rank = reader.unpack("<BBB")
            shape = reader.unpack(f"<{rank}I") if rank else ()
            if dtype_tag not in _DTYPES:
                raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype tag {dtype_tag}")
            dtype = _DTYPES[dtype_tag]
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            values = np.frombuffer(reader.take(size * dtype.itemsize), dtype=dtype).reshape(shape)
            values = values.astype(dtype.newbyteorder("="), copy=True)

            if name not in expected:
                raise CheckpointUnknownTensorError(f"{path}: unknown tensor {name!r}")
            if tuple(shape) != tuple(expected[name]):
                raise CheckpointShapeError(
                    f"{path}: tensor {name!r} has shape {tuple(shape)}, config expects {tuple(expected[name])}")
            if kind == _KIND_PARAM:
                params[name] = Parameter(values, name=name)
            else:
                buffers[name] = values

        missing = sorted(set(expected) - set(params) - set(buffers))
        if missing:
            raise CheckpointTruncatedError(f"{path}: missing tensors {missing[:5]}")
        if reader.pos != len(reader.blob):
            logger.warning("%s: %d trailing bytes ignored", path, len(reader.blob) - reader.pos)

        # keep the layout's insertion order so parameter iteration is stable
        params = {n: params[n] for n in layout.params}
        buffers = {n: buffers[n] for n in layout.buffers}
        return ModelState(params=params, buffers=buffers, config=expected_config or config,
                          seed=seed, epoch=epoch, extra=extra)

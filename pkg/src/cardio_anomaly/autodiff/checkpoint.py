"""Parameter checkpoint file.

Layout::

    CARDIOCKPT 1\n
    meta <key> <value>\n          (zero or more, free text value)
    param <name> <d0,d1,...>\n    (one per tensor, payload order)
    end\n
    <payload: float64 little-endian, tensors back to back, C order>

A scalar tensor is written with the shape field ``-``.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

MAGIC = "CARDIOCKPT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> Path:
    path = Path(path)
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if any(c.isspace() for c in key) or "\n" in str(value):
            raise CheckpointError(f"bad meta entry {key!r}")
        lines.append(f"meta {key} {value}")
    for name, arr in state.items():
        shape = ",".join(str(n) for n in np.shape(arr)) or "-"
        lines.append(f"param {name} {shape}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in state.values())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = raw[: cut + 1].decode("utf-8").splitlines()[1:]
    payload = raw[cut + len(marker):]
    meta: dict[str, str] = {}
    entries: list[tuple[str, tuple[int, ...]]] = []
    for line in header:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "param":
            name, shape_txt = rest.rsplit(" ", 1)
            shape = () if shape_txt == "-" else tuple(int(n) for n in shape_txt.split(","))
            entries.append((name, shape))
        else:
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
    expected = sum(int(np.prod(s)) for _, s in entries) * 8
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    state: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in entries:
        n = int(np.prod(shape))
        state[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += n * 8
    return state, meta


def state_digest(state: dict[str, np.ndarray], names=None) -> str:
    """SHA-256 over names and raw bytes, for bit-identity checks."""
    h = hashlib.sha256()
    for name in names if names is not None else state:
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name], dtype="<f8").tobytes())
    return h.hexdigest()

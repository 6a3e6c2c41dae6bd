"""Binary checkpoints for networks.

Layout, all integers little-endian after the magic:

    "TKD1"
    u32 tensor count
    per tensor: u16 name length, name utf-8, u8 rank, rank x u32 dims,
                raw float32 data
    u32 descriptor length, descriptor utf-8 (key=value lines)

The descriptor carries the architecture blueprint plus the init seed
and the generation index, enough to rebuild the network and audit
where in a curriculum it came from.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .tensor import DTYPE, Tensor
from .nn import ArchitectureSpec, Network, _param_shapes

MAGIC = b"TKD1"


def _descriptor(net: Network, generation: int) -> str:
    spec = net.spec
    lines = [
        f"kind={spec.kind}",
        "input_dims=" + ",".join(str(d) for d in spec.input_dims),
        f"num_classes={spec.num_classes}",
        "base_widths=" + ",".join(str(w) for w in spec.base_widths),
        f"width_multiplier={spec.width_multiplier!r}",
        f"seed={net.seed}",
        f"generation={generation}",
    ]
    return "\n".join(lines) + "\n"


def save_checkpoint(net: Network, path: str, generation: int = 0) -> None:
    """Write the network's parameters and blueprint; order-preserving."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(net.params)))
    for name, t in net.params.items():
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    desc = _descriptor(net, generation).encode()
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path: str) -> None:
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError(f"{self.path}: truncated while reading {what}: "
                             f"needed {n} bytes at offset {self.pos}, "
                             f"file holds {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def _parse_descriptor(text: str, path: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed descriptor line {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    return fields


def checkpoint_generation(path: str) -> int:
    """Generation index recorded in a checkpoint's descriptor."""
    _, meta = _read(path)
    return int(meta.get("generation", "0"))


def load_checkpoint(path: str) -> Network:
    """Rebuild a network; every byte is validated against the header."""
    net, _ = _read(path)
    return net


def _read(path: str) -> tuple[Network, dict[str, str]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, Tensor] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode()
        (rank,) = r.unpack("<B", f"tensor {name!r} rank")
        dims = r.unpack(f"<{rank}I", f"tensor {name!r} dims") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * n, f"tensor {name!r} data")
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(DTYPE)
        if name in tensors:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = Tensor(data.copy(), requires_grad=True)
    (desc_len,) = r.unpack("<I", "descriptor length")
    desc = r.take(desc_len, "descriptor").decode()
    if r.pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - r.pos} trailing bytes after descriptor")

    meta = _parse_descriptor(desc, path)
    for key in ("kind", "input_dims", "num_classes", "base_widths", "width_multiplier"):
        if key not in meta:
            raise ValueError(f"{path}: descriptor is missing {key!r}")
    spec = ArchitectureSpec(
        kind=meta["kind"],
        input_dims=tuple(int(d) for d in meta["input_dims"].split(",")),
        num_classes=int(meta["num_classes"]),
        base_widths=tuple(int(w) for w in meta["base_widths"].split(",")),
        width_multiplier=float(meta["width_multiplier"]),
    )
    expected = _param_shapes(spec)
    got = [(name, t.shape) for name, t in tensors.items()]
    want = [(name, tuple(shape)) for name, shape in expected]
    if got != want:
        raise ValueError(f"{path}: stored tensors do not match the declared "
                         f"architecture: got {got}, expected {want}")
    return Network(spec=spec, params=tensors, seed=int(meta.get("seed", "0"))), meta

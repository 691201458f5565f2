"""Checkpoint format: plain-text header, raw little-endian f32 payload.

Header lines::

    SDCK 1
    config_digest <hex or none>
    params <N>
    <name> <component> <d0[,d1,...]>      (N lines, payload order)
    payload <total f32 count>
    END

The payload holds each parameter's values flattened C-order, concatenated in
header order.  Values are quantized to f32; a second write of a loaded
checkpoint is byte-identical to the first.
"""

from __future__ import annotations

import numpy as np

from .errors import (BadCheckpoint, BadMagic, ShapeMismatchOnLoad,
                     TruncatedPayload, UnknownName)
from .registry import Component, ParameterRegistry

_MAGIC_LINE = b"SDCK 1"


def write_checkpoint(path, registry: ParameterRegistry,
                     config_digest: str | None = None) -> None:
    lines = [_MAGIC_LINE.decode(),
             f"config_digest {config_digest or 'none'}",
             f"params {len(registry)}"]
    total = 0
    for name, t, c in registry:
        dims = ",".join(str(d) for d in t.data.shape) or "1"
        lines.append(f"{name} {c.value} {dims}")
        total += t.size
    lines.append(f"payload {total}")
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for _, t, _ in registry:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_header(raw: bytes, path) -> tuple[str, list[tuple[str, str, tuple[int, ...]]], int, int]:
    """Returns (digest, entries, payload_count, payload_offset)."""
    offset = 0

    def next_line() -> str:
        nonlocal offset
        end = raw.find(b"\n", offset)
        if end < 0:
            raise BadCheckpoint(f"{path}: header cut short")
        line = raw[offset:end]
        offset = end + 1
        try:
            return line.decode("ascii")
        except UnicodeDecodeError:
            raise BadCheckpoint(f"{path}: non-ascii header line") from None

    if not raw.startswith(_MAGIC_LINE + b"\n"):
        raise BadMagic(f"{path}: not a checkpoint file")
    next_line()
    digest_line = next_line()
    if not digest_line.startswith("config_digest "):
        raise BadCheckpoint(f"{path}: missing config_digest line")
    digest = digest_line.split(" ", 1)[1]
    params_line = next_line()
    if not params_line.startswith("params "):
        raise BadCheckpoint(f"{path}: missing params line")
    try:
        n_params = int(params_line.split(" ", 1)[1])
    except ValueError:
        raise BadCheckpoint(f"{path}: bad params count") from None
    entries = []
    for _ in range(n_params):
        parts = next_line().split(" ")
        if len(parts) != 3:
            raise BadCheckpoint(f"{path}: malformed parameter line {parts!r}")
        name, comp, dims = parts
        try:
            shape = tuple(int(d) for d in dims.split(","))
        except ValueError:
            raise BadCheckpoint(f"{path}: bad shape for {name}") from None
        entries.append((name, comp, shape))
    payload_line = next_line()
    if not payload_line.startswith("payload "):
        raise BadCheckpoint(f"{path}: missing payload line")
    count = int(payload_line.split(" ", 1)[1])
    if next_line() != "END":
        raise BadCheckpoint(f"{path}: missing END sentinel")
    return digest, entries, count, offset


def read_checkpoint_meta(path) -> tuple[str, list[tuple[str, str, tuple[int, ...]]]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    digest, entries, _, _ = _read_header(raw, path)
    return digest, entries


def load_checkpoint(path, registry: ParameterRegistry) -> str:
    """Restore parameter values into ``registry``; returns the stored
    config digest.  The registry must carry exactly the names in the file,
    with matching shapes and component tags."""
    with open(path, "rb") as fh:
        raw = fh.read()
    digest, entries, count, offset = _read_header(raw, path)
    declared = sum(int(np.prod(shape)) for _, _, shape in entries)
    if declared != count:
        raise BadCheckpoint(f"{path}: payload count {count} != declared {declared}")
    body = raw[offset:]
    if len(body) != 4 * count:
        raise TruncatedPayload(
            f"{path}: payload is {len(body)} bytes, expected {4 * count}")

    file_names = {name for name, _, _ in entries}
    reg_names = {name for name, _, _ in registry}
    if file_names != reg_names:
        extra = sorted(file_names - reg_names)
        missing = sorted(reg_names - file_names)
        raise UnknownName(
            f"{path}: parameter names differ from target registry "
            f"(unexpected: {extra[:5]}, missing: {missing[:5]})")

    values = np.frombuffer(body, dtype="<f4")
    pos = 0
    for name, comp, shape in entries:
        target = registry.get(name)
        if target.data.shape != shape:
            raise ShapeMismatchOnLoad(
                f"{path}: {name} has shape {shape}, model expects {target.data.shape}")
        if registry.component_of(name) is not Component(comp):
            raise BadCheckpoint(
                f"{path}: {name} tagged {comp}, model says "
                f"{registry.component_of(name).value}")
        n = int(np.prod(shape))
        target.data = values[pos:pos + n].astype(np.float64).reshape(shape)
        pos += n
    return digest

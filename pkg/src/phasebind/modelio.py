"""PBMODEL v1 container for trained stacks.

Layout::

    PBMODEL v1 layers=<L>\\n
    layer <i> vis=<n> hid=<m> rf=<r> in=<H>x<W>x<C> out=<h>x<w>x<c>\\n
    <W float32[m*n] row-major> <b_v float32[n]> <b_h float32[m]> <mask bitset>
    ... one header + payload per layer ...
    <checksum: 8 bytes>

Floats are little-endian.  The mask bitset packs ``W``'s row-major entries
MSB-first, padded to a whole byte.  The checksum is an 8-byte BLAKE2b digest
of every preceding byte.  Layers without a geometry record ``rf=none`` and
omit ``in``/``out``.
"""

from __future__ import annotations

import hashlib
import re
from pathlib import Path

import numpy as np

from .rbm import DbmModel, LayerGeometry, RbmLayer

MAGIC = b"PBMODEL"
VERSION = "v1"
CHECKSUM_BYTES = 8

_LAYER_RE = re.compile(
    r"layer (\d+) vis=(\d+) hid=(\d+) rf=(\w+)(?: in=(\d+)x(\d+)x(\d+) out=(\d+)x(\d+)x(\d+))?$")


class ModelFormatError(ValueError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


def dumps(model: DbmModel) -> bytes:
    parts = [f"PBMODEL {VERSION} layers={len(model.layers)}\n".encode()]
    for i, layer in enumerate(model.layers):
        g = layer.geometry
        head = f"layer {i} vis={layer.n_visible} hid={layer.n_hidden} "
        if g is None:
            head += "rf=none"
        else:
            head += (f"rf={g.rf} in={g.in_height}x{g.in_width}x{g.in_channels} "
                     f"out={g.hid_height}x{g.hid_width}x{g.hid_channels}")
        parts.append((head + "\n").encode())
        for arr in (layer.W, layer.b_v, layer.b_h):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        parts.append(np.packbits(layer.mask.reshape(-1)).tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def save_model(model: DbmModel, path) -> Path:
    """Write ``model``; arrays are stored as float32."""
    path = Path(path)
    path.write_bytes(dumps(model))
    return path


def _read_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise ModelFormatError("truncated model file")
    try:
        return buf[pos:end].decode("ascii"), end + 1
    except UnicodeDecodeError:
        raise ModelFormatError("corrupt header line") from None


def loads(buf: bytes) -> DbmModel:
    if len(buf) < CHECKSUM_BYTES or not buf.startswith(MAGIC):
        raise ModelFormatError("not a PBMODEL file")
    head, pos = _read_line(buf, 0)
    m = re.fullmatch(r"PBMODEL (\S+) layers=(\d+)", head)
    if not m:
        raise ModelFormatError(f"bad header {head!r}")
    if m.group(1) != VERSION:
        raise ModelFormatError(f"unsupported model version {m.group(1)}")
    body, stored = buf[:-CHECKSUM_BYTES], buf[-CHECKSUM_BYTES:]
    if _checksum(body) != stored:
        raise ModelFormatError("checksum mismatch: model file is corrupt or truncated")
    layers = []
    for i in range(int(m.group(2))):
        line, pos = _read_line(body, pos)
        lm = _LAYER_RE.fullmatch(line)
        if not lm or int(lm.group(1)) != i:
            raise ModelFormatError(f"bad layer header {line!r}")
        nv, nh = int(lm.group(2)), int(lm.group(3))
        geom = None
        if lm.group(4) != "none":
            ih, iw, ic, oh, ow, oc = map(int, lm.groups()[4:])
            geom = LayerGeometry(ih, iw, ic, int(lm.group(4)), oc)
            if (geom.n_visible, geom.n_hidden, geom.hid_height, geom.hid_width) != (nv, nh, oh, ow):
                raise ModelFormatError(f"layer {i} geometry disagrees with its sizes")
        sizes = [nh * nv * 4, nv * 4, nh * 4, (nh * nv + 7) // 8]
        if pos + sum(sizes) > len(body):
            raise ModelFormatError("truncated model payload")
        arrays = []
        for n in sizes[:3]:
            arrays.append(np.frombuffer(body, "<f4", count=n // 4, offset=pos).astype(np.float32))
            pos += n
        bits = np.frombuffer(body, np.uint8, count=sizes[3], offset=pos)
        pos += sizes[3]
        mask = np.unpackbits(bits, count=nh * nv).astype(bool).reshape(nh, nv)
        layers.append(RbmLayer(arrays[0].reshape(nh, nv), arrays[1], arrays[2], mask, geom))
    if pos != len(body):
        raise ModelFormatError("trailing bytes after last layer")
    return DbmModel(layers)


def load_model(path) -> DbmModel:
    return loads(Path(path).read_bytes())


def model_summary(model: DbmModel) -> str:
    return " -> ".join(str(n) for n in model.sizes)

"""Binary and text file formats.

DCDM (density map), little-endian::

    b"DCDM" | u32 version=1 | u32 height | u32 width | height*width f32, row-major

DCWT (weights), little-endian::

    b"DCWT" | u32 version=1 | u32 record count
    per record: u16 name length | name (utf-8) | u8 rank | rank*u32 dims | f32 data
"""

import struct

import numpy as np

DCDM_MAGIC = b"DCDM"
DCWT_MAGIC = b"DCWT"
VERSION = 1


class FormatError(ValueError):
    pass


def encode_dcdm(density):
    a = np.asarray(density)
    if a.ndim != 2:
        raise FormatError(f"density map must be 2-D, got shape {a.shape}")
    h, w = a.shape
    return struct.pack("<4sIII", DCDM_MAGIC, VERSION, h, w) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_dcdm(buf):
    if len(buf) < 16:
        raise FormatError("truncated DCDM header")
    magic, version, h, w = struct.unpack_from("<4sIII", buf, 0)
    if magic != DCDM_MAGIC:
        raise FormatError(f"bad DCDM magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported DCDM version {version}")
    if len(buf) != 16 + 4 * h * w:
        raise FormatError(f"DCDM payload size {len(buf) - 16} does not match {h}x{w}")
    return np.frombuffer(buf, dtype="<f4", count=h * w, offset=16).reshape(h, w).astype(np.float32)


def write_dcdm(path, density):
    with open(path, "wb") as fh:
        fh.write(encode_dcdm(density))


def read_dcdm(path):
    with open(path, "rb") as fh:
        return decode_dcdm(fh.read())


def encode_dcwt(params):
    """``params`` is an ordered mapping of name -> array."""
    chunks = [struct.pack("<4sII", DCWT_MAGIC, VERSION, len(params))]
    for name, arr in params.items():
        a = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        if a.ndim > 255:
            raise FormatError(f"rank {a.ndim} too large for {name}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_dcwt(buf):
    if len(buf) < 12:
        raise FormatError("truncated DCWT header")
    magic, version, count = struct.unpack_from("<4sII", buf, 0)
    if magic != DCWT_MAGIC:
        raise FormatError(f"bad DCWT magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported DCWT version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = bytes(buf[off : off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise FormatError(f"truncated data for parameter {name}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise FormatError(f"truncated DCWT record: {exc}") from None
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after DCWT records")
    return out


def write_dcwt(path, params):
    with open(path, "wb") as fh:
        fh.write(encode_dcwt(params))


def read_dcwt(path):
    with open(path, "rb") as fh:
        return decode_dcwt(fh.read())


def parse_key_values(text, source="<config>"):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_key_values(pairs):
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())

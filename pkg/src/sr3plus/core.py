"""Image container, splittable randomness and on-disk tensor formats."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNIT = "unit"
LATENT = "latent"

_MASK64 = (1 << 64) - 1


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class TensorFormatError(ValueError):
    pass


class MalformedHeaderError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class DtypeMismatchError(TensorFormatError):
    pass


class DimensionMismatchError(TensorFormatError):
    pass


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Immutable H x W x C float32 image.

    ``domain`` is ``"unit"`` for displayable images (values clamped to
    [0, 1]) or ``"latent"`` for unbounded diffusion states.
    """

    data: np.ndarray
    domain: str = UNIT

    def __post_init__(self):
        if self.domain not in (UNIT, LATENT):
            raise InvalidArgument(f"unknown value domain {self.domain!r}")
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise InvalidArgument(f"expected H x W x C array, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise InvalidArgument(f"channels must be 1 or 3, got {arr.shape[2]}")
        if min(arr.shape) <= 0:
            raise InvalidArgument(f"empty image shape {arr.shape}")
        if self.domain == UNIT:
            arr = np.clip(arr, 0.0, 1.0)
        if arr is self.data or np.shares_memory(arr, self.data):
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def unit(cls, data) -> "ImageTensor":
        return cls(np.asarray(data), UNIT)

    @classmethod
    def latent(cls, data) -> "ImageTensor":
        return cls(np.asarray(data), LATENT)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return (
            self.domain == other.domain
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f"ImageTensor({self.height}x{self.width}x{self.channels}, {self.domain})"


def _stream_key(stream_id: int, name) -> int:
    digest = hashlib.blake2b(f"{stream_id}/{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Prng:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    The generator is Philox4x64-10 with its 128-bit key set to
    ``seed | stream_id << 64``.  Child streams keep the seed and derive a new
    stream id from a BLAKE2b hash of the parent id and a child name, so a tree
    of named streams is reproducible on any platform.

    A Prng is single-owner; split children before handing work to threads.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        bitgen = np.random.Philox(key=self.seed | (self.stream_id << 64))
        self.gen = np.random.Generator(bitgen)

    def split(self, name) -> "Prng":
        return Prng(self.seed, _stream_key(self.stream_id, name))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n: int, p=None) -> int:
        return int(self.gen.choice(n, p=p))

    def __repr__(self):
        return f"Prng(seed={self.seed}, stream_id={self.stream_id})"


def sample_standard_normal(prng: Prng, shape) -> ImageTensor:
    """Draw an i.i.d. N(0, 1) latent of ``shape`` (H, W, C)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) <= 0:
        raise InvalidArgument(f"shape must be three positive dims, got {shape}")
    return ImageTensor.latent(prng.normal(shape).astype(np.float32))


# --- TensorFile ------------------------------------------------------------
#
# layout: b"SR3T" | u64 little-endian header length | UTF-8 JSON header | payload
# payload is raw little-endian float32; an archive stores several tensors
# back to back and lists their offsets in the header.

MAGIC = b"SR3T"
_LEN = struct.Struct("<Q")


def _pack(header: dict, payload: bytes) -> bytes:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(blob)) + blob + payload


def _unpack(raw: bytes) -> tuple[dict, bytes]:
    if len(raw) < len(MAGIC) + _LEN.size:
        raise TruncatedPayloadError("file too short for a tensor header")
    if raw[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError("bad magic bytes")
    (n,) = _LEN.unpack_from(raw, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + n > len(raw):
        raise TruncatedPayloadError("header extends past end of file")
    try:
        header = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    return header, raw[start + n :]


def _as_le_f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _decode(payload: bytes, dims, dtype, endianness, nbytes) -> np.ndarray:
    if dtype != "f32":
        raise DtypeMismatchError(f"unsupported dtype {dtype!r}")
    if endianness != "little":
        raise DtypeMismatchError(f"unsupported endianness {endianness!r}")
    if not isinstance(dims, list) or not all(isinstance(d, int) and d >= 0 for d in dims):
        raise MalformedHeaderError(f"bad dims {dims!r}")
    if len(payload) < nbytes:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header promises {nbytes}")
    if int(np.prod(dims, dtype=np.int64)) * 4 != nbytes:
        raise DimensionMismatchError(f"dims {dims} do not match payload of {nbytes} bytes")
    return np.frombuffer(payload[:nbytes], dtype="<f4").reshape(dims).astype(np.float32)


def write_tensor(path, t, tag: str | None = None) -> None:
    """Write an ImageTensor (or any float array) as a TensorFile."""
    if isinstance(t, ImageTensor):
        arr, tag = t.data, tag or t.domain
    else:
        arr = np.asarray(t, dtype=np.float32)
    payload = _as_le_f32(arr)
    header = {
        "dims": list(arr.shape),
        "dtype": "f32",
        "endianness": "little",
        "nbytes": len(payload),
        "tag": tag or "array",
    }
    Path(path).write_bytes(_pack(header, payload))


def read_array(path) -> tuple[np.ndarray, str]:
    header, payload = _unpack(Path(path).read_bytes())
    try:
        dims, dtype, endian, nbytes = (header[k] for k in ("dims", "dtype", "endianness", "nbytes"))
    except KeyError as exc:
        raise MalformedHeaderError(f"header missing field {exc}") from None
    if len(payload) > nbytes:
        raise DimensionMismatchError(f"{len(payload) - nbytes} trailing bytes after payload")
    return _decode(payload, dims, dtype, endian, nbytes), header.get("tag", "array")


def read_tensor(path) -> ImageTensor:
    arr, tag = read_array(path)
    return ImageTensor(arr, LATENT if tag == LATENT else UNIT)


def write_archive(path, tensors: dict, meta: dict | None = None) -> None:
    """Write several named float32 arrays into one TensorFile archive."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        chunk = _as_le_f32(np.asarray(tensors[name]))
        entries.append({"name": name, "dims": list(np.shape(tensors[name])), "offset": offset,
                        "nbytes": len(chunk)})
        chunks.append(chunk)
        offset += len(chunk)
    header = {"kind": "archive", "dtype": "f32", "endianness": "little", "nbytes": offset,
              "entries": entries, "meta": meta or {}}
    Path(path).write_bytes(_pack(header, b"".join(chunks)))


def read_archive(path) -> tuple[dict, dict]:
    header, payload = _unpack(Path(path).read_bytes())
    if header.get("kind") != "archive" or "entries" not in header:
        raise MalformedHeaderError("not a tensor archive")
    if len(payload) < header.get("nbytes", 0):
        raise TruncatedPayloadError("archive payload is truncated")
    out = {}
    for e in header["entries"]:
        chunk = payload[e["offset"] :]
        out[e["name"]] = _decode(chunk, e["dims"], header["dtype"], header["endianness"], e["nbytes"])
    return out, header.get("meta", {})


# --- 8-bit image files -------------------------------------------------------


def to_uint8(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def read_image(path) -> ImageTensor:
    """Load a PNG or PPM/PGM file into a unit-domain ImageTensor."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        arr = _read_pnm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            im = im.convert("L" if im.mode in ("L", "I", "I;16", "1") else "RGB")
            arr = np.asarray(im)
    return ImageTensor.unit(arr.astype(np.float32) / 255.0)


def write_image(path, img) -> None:
    path = Path(path)
    u8 = to_uint8(img)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        _write_pnm(path, u8)
        return
    from PIL import Image

    Image.fromarray(u8).save(path, format="PNG")


def _write_pnm(path: Path, u8: np.ndarray) -> None:
    magic = b"P5" if u8.ndim == 2 else b"P6"
    h, w = u8.shape[:2]
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + u8.tobytes())


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"{path}: truncated PNM header")
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise MalformedHeaderError(f"{path}: only 8-bit binary P5/P6 is supported")
    c = 3 if magic == b"P6" else 1
    body = raw[pos : pos + w * h * c]
    if len(body) != w * h * c:
        raise TruncatedPayloadError(f"{path}: pixel data truncated")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)
    return arr[:, :, 0] if c == 1 else arr


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]

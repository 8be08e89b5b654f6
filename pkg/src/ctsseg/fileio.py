"""Binary file formats: CTSF tensors, CTSM masks, named checkpoints.

CTSF (tensor): magic "CTSF", version u32 LE = 1, rank u32 LE, rank dims
u32 LE, then product(dims) float64 LE values. Round trips are bit-exact.

CTSM (mask): magic "CTSM", version u32 LE = 1, H u32 LE, W u32 LE, then
H*W class ids as u16 LE in row-major order.

Checkpoint: a sequence of named CTSF records, each `name_len u16 LE,
name utf-8, CTSF blob`, plus a sidecar text index `<path>.idx` with one
`name<TAB>offset` line per record (offset of the record start). Readers
scan the checkpoint itself; the index enables random access and auditing.

All malformed input is reported as FormatError carrying the byte offset
where the problem was detected.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

TENSOR_MAGIC = b"CTSF"
MASK_MAGIC = b"CTSM"
FORMAT_VERSION = 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def _read_exact(f, n: int, what: str) -> bytes:
    offset = f.tell()
    blob = f.read(n)
    if len(blob) != n:
        raise FormatError(
            f"truncated {what}: wanted {n} bytes, got {len(blob)}", offset
        )
    return blob


def _read_u32(f, what: str) -> int:
    return _U32.unpack(_read_exact(f, 4, what))[0]


def _check_header(f, magic: bytes, kind: str):
    offset = f.tell()
    got = _read_exact(f, 4, f"{kind} magic")
    if got != magic:
        raise FormatError(
            f"bad {kind} magic {got!r}, expected {magic.decode()!r}", offset
        )
    voff = f.tell()
    version = _read_u32(f, f"{kind} version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"unsupported {kind} version {version}, expected {FORMAT_VERSION}", voff
        )


# ------------------------------------------------------------------ tensors


def write_tensor_to(f, arr) -> None:
    # order="C" (not ascontiguousarray, which promotes rank 0 to rank 1)
    arr = np.asarray(arr, dtype=np.float64, order="C")
    f.write(TENSOR_MAGIC)
    f.write(_U32.pack(FORMAT_VERSION))
    f.write(_U32.pack(arr.ndim))
    for dim in arr.shape:
        f.write(_U32.pack(dim))
    f.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor_from(f) -> np.ndarray:
    _check_header(f, TENSOR_MAGIC, "tensor")
    rank = _read_u32(f, "tensor rank")
    dims = tuple(_read_u32(f, f"tensor dim {i}") for i in range(rank))
    count = 1
    for dim in dims:
        count *= dim
    raw = _read_exact(f, 8 * count, "tensor values")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return values.reshape(dims)


def write_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        write_tensor_to(f, arr)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor_from(f)
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after tensor payload", f.tell() - 1)
        return arr


# Images are [3, H, W] float tensors; same format, friendlier names.
write_image = write_tensor
read_image = read_tensor


# -------------------------------------------------------------------- masks


def write_mask(path, mask) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise InputError(f"mask must hold integer class ids, got {mask.dtype}")
    if mask.size and (mask.min() < 0 or mask.max() > 0xFFFF):
        raise InputError("mask class ids must fit in u16")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(_U32.pack(FORMAT_VERSION))
        f.write(_U32.pack(h))
        f.write(_U32.pack(w))
        f.write(mask.astype("<u2").tobytes())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        _check_header(f, MASK_MAGIC, "mask")
        h = _read_u32(f, "mask height")
        w = _read_u32(f, "mask width")
        raw = _read_exact(f, 2 * h * w, "mask values")
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after mask payload", f.tell() - 1)
    return np.frombuffer(raw, dtype="<u2").astype(np.int64).reshape(h, w)


# -------------------------------------------------------------- checkpoints


def write_checkpoint(path, named_arrays) -> None:
    """Write an ordered mapping of name -> array, plus the sidecar index."""
    path = Path(path)
    index_lines = []
    with open(path, "wb") as f:
        for name, arr in named_arrays.items():
            encoded = name.encode("utf-8")
            if not encoded or len(encoded) > 0xFFFF:
                raise InputError(f"checkpoint entry name {name!r} has bad length")
            index_lines.append(f"{name}\t{f.tell()}\n")
            f.write(_U16.pack(len(encoded)))
            f.write(encoded)
            write_tensor_to(f, arr)
    path.with_suffix(path.suffix + ".idx").write_text(
        "".join(index_lines), encoding="utf-8"
    )


def read_checkpoint(path) -> dict:
    """Read back name -> float64 array, preserving record order."""
    out = {}
    with open(path, "rb") as f:
        while True:
            offset = f.tell()
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated record name length", offset)
            (name_len,) = _U16.unpack(head)
            name = _read_exact(f, name_len, "record name").decode("utf-8")
            if name in out:
                raise FormatError(f"duplicate record name {name!r}", offset)
            out[name] = read_tensor_from(f)
    return out


def read_checkpoint_index(path) -> dict:
    """Parse the sidecar `name<TAB>offset` index for a checkpoint."""
    path = Path(path)
    index_path = path.with_suffix(path.suffix + ".idx")
    out = {}
    for line in index_path.read_text(encoding="utf-8").splitlines():
        name, _, offset = line.partition("\t")
        out[name] = int(offset)
    return out

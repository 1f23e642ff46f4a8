"""Binary measurement/checkpoint formats and the encode/decode pipeline.

Both formats are little-endian throughout and carry a version field. The
sample ratio is stored as a rational so header matching never depends on
float round-off. Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .model import Csrn, CsrnConfig, MeasurementSet
from .tensor import Tensor

MEASUREMENT_MAGIC = b"CSMF"
CHECKPOINT_MAGIC = b"CSRN"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """File bytes do not parse as the declared format."""


class CodecError(ValueError):
    """File and model disagree on configuration."""


def ratio_fraction(ratio: float) -> tuple[int, int]:
    frac = Fraction(ratio).limit_denominator(1000)
    return frac.numerator, frac.denominator


def pad_to_blocks(img: np.ndarray, block_size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad (no edge duplication) right/bottom to block multiples."""
    h, w = img.shape
    ph = (-h) % block_size
    pw = (-w) % block_size
    if ph >= h or pw >= w:
        raise ValueError(
            f"image {h}x{w} too small to reflect-pad to a multiple of {block_size}"
        )
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="reflect")
    return img, (h, w)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _atomic_write(path, writer) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class MeasurementFile:
    """On-disk form of a measurement set plus the padding bookkeeping."""

    ratio_num: int
    ratio_den: int
    block_size: int
    original_size: tuple[int, int]
    padded_size: tuple[int, int]
    groups: list[np.ndarray]  # each (channels, h/B, w/B) float32

    @property
    def ratio(self) -> float:
        return self.ratio_num / self.ratio_den

    def write(self, path) -> None:
        def emit(fh):
            fh.write(MEASUREMENT_MAGIC)
            fh.write(struct.pack("<HHHHH", FORMAT_VERSION, self.ratio_num,
                                 self.ratio_den, self.block_size, len(self.groups)))
            fh.write(struct.pack("<IIII", *self.original_size, *self.padded_size))
            for g in self.groups:
                fh.write(struct.pack("<H", g.shape[0]))
            for g in self.groups:
                fh.write(np.ascontiguousarray(g, dtype="<f4").tobytes())

        _atomic_write(path, emit)

    @classmethod
    def read(cls, path) -> "MeasurementFile":
        with open(path, "rb") as fh:
            magic = _read_exact(fh, 4)
            if magic != MEASUREMENT_MAGIC:
                raise FormatError(f"bad magic {magic!r}, expected {MEASUREMENT_MAGIC!r}")
            version, num, den, block, k = struct.unpack("<HHHHH", _read_exact(fh, 10))
            if version != FORMAT_VERSION:
                raise FormatError(f"unsupported measurement format version {version}")
            oh, ow, ph, pw = struct.unpack("<IIII", _read_exact(fh, 16))
            channels = [struct.unpack("<H", _read_exact(fh, 2))[0] for _ in range(k)]
            gh, gw = ph // block, pw // block
            groups = []
            for c in channels:
                raw = _read_exact(fh, c * gh * gw * 4)
                groups.append(np.frombuffer(raw, dtype="<f4").reshape(c, gh, gw).copy())
            if fh.read(1):
                raise FormatError("trailing bytes after measurement payload")
        return cls(num, den, block, (oh, ow), (ph, pw), groups)


def encode(model: Csrn, img: np.ndarray) -> MeasurementFile:
    """Sample a [0,1] luminance image into its measurement payload."""
    if img.ndim != 2:
        raise CodecError(f"encode wants a 2-d luminance image, got shape {img.shape}")
    cfg = model.config
    padded, original = pad_to_blocks(img, cfg.block_size)
    x = Tensor(padded[None, None, :, :].astype(np.float32))
    fm = model.sample(x)
    num, den = ratio_fraction(cfg.ratio)
    return MeasurementFile(
        ratio_num=num,
        ratio_den=den,
        block_size=cfg.block_size,
        original_size=original,
        padded_size=padded.shape,
        groups=[g.data[0].astype(np.float32, copy=False) for g in fm.groups],
    )


def decode(model: Csrn, mfile: MeasurementFile) -> np.ndarray:
    """Reconstruct, crop to the original dims and clamp to [0,1]."""
    cfg = model.config
    if (mfile.ratio_num, mfile.ratio_den) != ratio_fraction(cfg.ratio):
        raise CodecError(
            f"measurement ratio {mfile.ratio_num}/{mfile.ratio_den} does not match "
            f"model ratio {cfg.ratio}"
        )
    if mfile.block_size != cfg.block_size:
        raise CodecError(
            f"measurement block size {mfile.block_size} != model {cfg.block_size}"
        )
    expected = cfg.group_channels()
    got = [g.shape[0] for g in mfile.groups]
    if got != expected:
        raise CodecError(f"group channels {got} do not match the model plan {expected}")
    fm = MeasurementSet(
        [Tensor(g[None]) for g in mfile.groups], cfg.ratio, cfg.block_size
    )
    _, x_f = model.reconstruct(fm)
    h, w = mfile.original_size
    return np.clip(x_f.data[0, 0, :h, :w], 0.0, 1.0)


# -- checkpoints ----------------------------------------------------------

_FLAG_PROGRESSIVE = 1
_FLAG_RRFM = 2
_FLAG_FCM = 4


@dataclass
class CheckpointMeta:
    seed: int = 0
    epoch: int = 0
    val_loss: float = float("nan")


def save_checkpoint(model: Csrn, path, meta: CheckpointMeta | None = None) -> None:
    meta = meta or CheckpointMeta()
    cfg = model.config
    num, den = ratio_fraction(cfg.ratio)
    flags = (
        (_FLAG_PROGRESSIVE if cfg.progressive_init else 0)
        | (_FLAG_RRFM if cfg.use_rrfm else 0)
        | (_FLAG_FCM if cfg.use_fcm else 0)
    )

    def emit(fh):
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HHHHHHHB", FORMAT_VERSION, num, den, cfg.block_size,
                             cfg.filters, cfg.rrfm_count, cfg.recurrences, flags))
        fh.write(struct.pack("<QId", meta.seed, meta.epoch, meta.val_loss))
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())

    _atomic_write(path, emit)


def load_checkpoint(path) -> tuple[Csrn, CheckpointMeta]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version, num, den, block, filters, rrfm_count, recurrences, flags) = struct.unpack(
            "<HHHHHHHB", _read_exact(fh, 15)
        )
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint format version {version}")
        seed, epoch, val_loss = struct.unpack("<QId", _read_exact(fh, 20))
        cfg = CsrnConfig(
            ratio=num / den,
            block_size=block,
            filters=filters,
            rrfm_count=rrfm_count,
            recurrences=recurrences,
            progressive_init=bool(flags & _FLAG_PROGRESSIVE),
            use_rrfm=bool(flags & _FLAG_RRFM),
            use_fcm=bool(flags & _FLAG_FCM),
        )
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            try:
                (rank,) = struct.unpack("<B", _read_exact(fh, 1))
                dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
                size = int(np.prod(dims))
                raw = _read_exact(fh, size * 4)
            except FormatError as exc:
                raise FormatError(f"corrupt record {name!r}: {exc}") from exc
            params[name] = Tensor(np.frombuffer(raw, dtype="<f4").reshape(dims).copy())
        if fh.read(1):
            raise FormatError("trailing bytes after parameter records")
    model = Csrn(cfg, params)
    return model, CheckpointMeta(seed=seed, epoch=epoch, val_loss=val_loss)

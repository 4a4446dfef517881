"""Binary persistence: feature files (UFST), weight files (UADW), memory-bank
files (UFSB), and PGM/PPM rasters.

All multi-byte integers and floats are little-endian; tensor payloads are
float32. Readers never trust declared lengths: every read is bounds-checked
and a malformed file raises FormatError with the offending byte offset.

Layouts (all offsets in bytes):

UFST (feature stack), version 1:
    magic "UFST" | u16 version | u16 layer_count L | u32 image_h | u32 image_w
    L x layer header: u16 block_index | u32 dim | u32 grid_h | u32 grid_w
    L x layer payload: dim f32 global token, then grid_h*grid_w*dim f32
    patch tokens, row-major (row, column, channel)

UADW (weight bank), version 1:
    magic "UADW" | u16 version | f32 tau | f32 lambda_p | f32 lambda_f | u16 L
    L x ( u16 block_index | u32 dim | w_cls | w_seg ), each weight matrix
    stored column-major as dim f32 normal column then dim f32 anomaly column
    u32 metadata_len | metadata_len bytes of UTF-8 JSON

UFSB (memory bank), version 1:
    magic "UFSB" | u16 version | u16 shots K
    K x ( u16 id_len | id_len bytes UTF-8 )
    u16 L, then L x ( u16 block_index | u32 dim | u32 rows | rows*dim f32
    unit-normalized tokens, row-major )
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .types import FeatureStack, LayerFeatures, LayerWeights, Raster, WeightBank

UFST_MAGIC = b"UFST"
UADW_MAGIC = b"UADW"
UFSB_MAGIC = b"UFSB"
FORMAT_VERSION = 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F32 = struct.Struct("<f")


class _Reader:
    """Bounds-checked little-endian cursor over a byte buffer."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.what}: truncated while reading {what} "
                f"({n} bytes wanted, {len(self.data) - self.pos} left)",
                offset=self.pos,
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return _U16.unpack(self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def f32(self, what: str) -> float:
        return _F32.unpack(self.take(4, what))[0]

    def f32_array(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4", count=count)

    def expect_magic(self, magic: bytes) -> None:
        offset = self.pos
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(
                f"{self.what}: bad magic {got!r}, expected {magic!r}", offset=offset
            )

    def expect_version(self) -> None:
        offset = self.pos
        version = self.u16("version")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"{self.what}: unsupported version {version}", offset=offset
            )

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.what}: {len(self.data) - self.pos} trailing bytes", offset=self.pos
            )


def _f32_contig(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype="<f4")


# ---------------------------------------------------------------------------
# UFST feature files


def write_feature_file(stack: FeatureStack, path) -> None:
    parts = [UFST_MAGIC, _U16.pack(FORMAT_VERSION), _U16.pack(len(stack.layers))]
    parts += [_U32.pack(stack.image_height), _U32.pack(stack.image_width)]
    for lf in stack.layers:
        parts.append(struct.pack("<HIII", lf.block_index, lf.dim, lf.grid_h, lf.grid_w))
    for lf in stack.layers:
        parts.append(_f32_contig(lf.global_token).tobytes())
        parts.append(_f32_contig(lf.patch_tokens).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_feature_file(path, source_id: str | None = None) -> FeatureStack:
    path = Path(path)
    r = _Reader(path.read_bytes(), f"feature file {path.name}")
    r.expect_magic(UFST_MAGIC)
    r.expect_version()
    layer_count = r.u16("layer count")
    if layer_count == 0:
        raise FormatError(f"{r.what}: zero layers", offset=r.pos - 2)
    image_h = r.u32("image height")
    image_w = r.u32("image width")
    headers = []
    for i in range(layer_count):
        block = r.u16(f"layer {i} block index")
        dim = r.u32(f"layer {i} dim")
        grid_h = r.u32(f"layer {i} grid_h")
        grid_w = r.u32(f"layer {i} grid_w")
        if dim == 0 or grid_h == 0 or grid_w == 0:
            raise FormatError(f"{r.what}: layer {i} has zero-sized tensor dims", offset=r.pos)
        headers.append((block, dim, grid_h, grid_w))
    layers = []
    for i, (block, dim, grid_h, grid_w) in enumerate(headers):
        g = r.f32_array(dim, f"layer {i} global token")
        p = r.f32_array(grid_h * grid_w * dim, f"layer {i} patch tokens")
        if not np.all(np.isfinite(g)):
            cell = int(np.flatnonzero(~np.isfinite(g))[0])
            raise ValidationError(
                f"{r.what}: non-finite value in layer {i} (block {block}) global token, component {cell}"
            )
        if not np.all(np.isfinite(p)):
            flat = int(np.flatnonzero(~np.isfinite(p))[0])
            cell = divmod(flat // dim, grid_w)
            raise ValidationError(
                f"{r.what}: non-finite value in layer {i} (block {block}) patch cell {cell}"
            )
        layers.append(
            LayerFeatures(
                block_index=block,
                global_token=g,
                patch_tokens=p.reshape(grid_h, grid_w, dim),
            )
        )
    r.done()
    return FeatureStack(
        layers=tuple(layers),
        image_height=image_h,
        image_width=image_w,
        source_id=path.stem if source_id is None else source_id,
    )


# ---------------------------------------------------------------------------
# UADW weight files


def write_weight_file(bank: WeightBank, path) -> None:
    parts = [UADW_MAGIC, _U16.pack(FORMAT_VERSION)]
    parts += [_F32.pack(bank.tau), _F32.pack(bank.lambda_p), _F32.pack(bank.lambda_f)]
    parts.append(_U16.pack(bank.num_layers))
    for block, lw in zip(bank.block_indices, bank.per_layer):
        parts.append(struct.pack("<HI", block, lw.dim))
        # column-major, normal column first
        parts.append(_f32_contig(lw.w_cls.T).tobytes())
        parts.append(_f32_contig(lw.w_seg.T).tobytes())
    meta = json.dumps(bank.metadata, sort_keys=True).encode("utf-8")
    parts.append(_U32.pack(len(meta)))
    parts.append(meta)
    Path(path).write_bytes(b"".join(parts))


def read_weight_file(path) -> WeightBank:
    path = Path(path)
    r = _Reader(path.read_bytes(), f"weight file {path.name}")
    r.expect_magic(UADW_MAGIC)
    r.expect_version()
    tau = r.f32("tau")
    lambda_p = r.f32("lambda_p")
    lambda_f = r.f32("lambda_f")
    layer_count = r.u16("layer count")
    if layer_count == 0:
        raise FormatError(f"{r.what}: zero layers", offset=r.pos - 2)
    blocks = []
    per_layer = []
    for i in range(layer_count):
        block = r.u16(f"layer {i} block index")
        dim = r.u32(f"layer {i} dim")
        if dim == 0:
            raise FormatError(f"{r.what}: layer {i} has dim 0", offset=r.pos - 4)
        w_cls = r.f32_array(2 * dim, f"layer {i} w_cls").reshape(2, dim).T
        w_seg = r.f32_array(2 * dim, f"layer {i} w_seg").reshape(2, dim).T
        if not (np.all(np.isfinite(w_cls)) and np.all(np.isfinite(w_seg))):
            raise ValidationError(f"{r.what}: non-finite weights in layer {i} (block {block})")
        blocks.append(block)
        per_layer.append(LayerWeights(w_cls=w_cls, w_seg=w_seg))
    meta_len = r.u32("metadata length")
    meta_raw = r.take(meta_len, "metadata")
    r.done()
    try:
        metadata = json.loads(meta_raw.decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{r.what}: bad metadata JSON: {exc}", offset=len(r.data) - meta_len)
    return WeightBank(
        per_layer=tuple(per_layer),
        block_indices=tuple(blocks),
        tau=tau,
        lambda_p=lambda_p,
        lambda_f=lambda_f,
        metadata=metadata,
    )


# ---------------------------------------------------------------------------
# UFSB memory-bank files


def write_bank_file(bank, path) -> None:
    parts = [UFSB_MAGIC, _U16.pack(FORMAT_VERSION), _U16.pack(bank.shots)]
    if len(bank.source_ids) != bank.shots:
        raise ValidationError(
            f"bank has {len(bank.source_ids)} source ids but {bank.shots} shots"
        )
    for sid in bank.source_ids:
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"source id too long: {sid[:32]!r}...")
        parts.append(_U16.pack(len(raw)))
        parts.append(raw)
    parts.append(_U16.pack(len(bank.per_layer)))
    for block, store in zip(bank.block_indices, bank.per_layer):
        rows, dim = store.shape
        parts.append(struct.pack("<HII", block, dim, rows))
        parts.append(_f32_contig(store).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_bank_file(path):
    from .memory import MemoryBank

    path = Path(path)
    r = _Reader(path.read_bytes(), f"bank file {path.name}")
    r.expect_magic(UFSB_MAGIC)
    r.expect_version()
    shots = r.u16("shots")
    if shots == 0:
        raise FormatError(f"{r.what}: zero shots", offset=r.pos - 2)
    ids = []
    for i in range(shots):
        n = r.u16(f"id {i} length")
        raw = r.take(n, f"id {i}")
        try:
            ids.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{r.what}: bad id {i}: {exc}", offset=r.pos - n)
    layer_count = r.u16("layer count")
    if layer_count == 0:
        raise FormatError(f"{r.what}: zero layers", offset=r.pos - 2)
    blocks = []
    stores = []
    for i in range(layer_count):
        block = r.u16(f"layer {i} block index")
        dim = r.u32(f"layer {i} dim")
        rows = r.u32(f"layer {i} row count")
        if dim == 0 or rows == 0:
            raise FormatError(f"{r.what}: layer {i} has empty store", offset=r.pos)
        store = r.f32_array(rows * dim, f"layer {i} tokens").reshape(rows, dim)
        if not np.all(np.isfinite(store)):
            raise ValidationError(f"{r.what}: non-finite tokens in layer {i} (block {block})")
        blocks.append(block)
        stores.append(store.astype(np.float64))
    r.done()
    return MemoryBank(
        per_layer=tuple(stores),
        shots=shots,
        source_ids=tuple(ids),
        block_indices=tuple(blocks),
    )


# ---------------------------------------------------------------------------
# PGM / PPM rasters


def _read_pnm_header(data: bytes, path_name: str, expected: tuple[bytes, ...]):
    """Parse a PNM header, tolerating comments; returns (kind, w, h, maxval, offset)."""
    if len(data) < 2 or data[:1] != b"P":
        raise FormatError(f"{path_name}: not a PNM file", offset=0)
    kind = data[:2]
    if kind not in expected:
        raise FormatError(
            f"{path_name}: unsupported PNM kind {kind!r}, expected one of {expected}", offset=0
        )
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError(f"{path_name}: truncated header", offset=pos)
        c = data[pos : pos + 1]
        if c == b"#":
            nl = data.find(b"\n", pos)
            if nl == -1:
                raise FormatError(f"{path_name}: unterminated comment", offset=pos)
            pos = nl + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            token = data[start:pos]
            if not token.isdigit():
                raise FormatError(f"{path_name}: bad header token {token!r}", offset=start)
            fields.append(int(token))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{path_name}: missing header terminator", offset=pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"{path_name}: bad dimensions {w}x{h}", offset=2)
    if not 0 < maxval < 256:
        raise FormatError(f"{path_name}: unsupported maxval {maxval}", offset=2)
    return kind, w, h, maxval, pos


def write_mask(path, mask: np.ndarray) -> None:
    """Write a binary mask as 8-bit PGM (P5); nonzero pixels become 255."""
    m = (np.asarray(mask) != 0).astype(np.uint8) * np.uint8(255)
    if m.ndim != 2:
        raise ValidationError(f"mask must be 2-dimensional, got shape {m.shape}")
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(m.tobytes())


def read_mask(path) -> np.ndarray:
    """Read a PGM (P5) mask; any nonzero value counts as anomalous."""
    path = Path(path)
    data = path.read_bytes()
    kind, w, h, _, pos = _read_pnm_header(data, path.name, (b"P5",))
    need = w * h
    if len(data) - pos < need:
        raise FormatError(f"{path.name}: truncated pixel data", offset=pos)
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w)
    return (pixels != 0).astype(np.uint8)


def write_raster(path, raster: Raster) -> None:
    """Write a raster in [0,1] as PGM (1 channel) or PPM (3 channels)."""
    data = np.clip(raster.data, 0.0, 1.0)
    q = np.round(data * 255.0).astype(np.uint8)
    h, w, c = q.shape
    if c == 1:
        header = f"P5\n{w} {h}\n255\n"
        payload = q[:, :, 0].tobytes()
    elif c == 3:
        header = f"P6\n{w} {h}\n255\n"
        payload = q.tobytes()
    else:
        raise ValidationError(f"cannot serialize raster with {c} channels (1 or 3 supported)")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload)


def read_raster(path) -> Raster:
    """Read a PGM/PPM image into a float raster with values in [0,1]."""
    path = Path(path)
    data = path.read_bytes()
    kind, w, h, maxval, pos = _read_pnm_header(data, path.name, (b"P5", b"P6"))
    channels = 1 if kind == b"P5" else 3
    need = w * h * channels
    if len(data) - pos < need:
        raise FormatError(f"{path.name}: truncated pixel data", offset=pos)
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    arr = pixels.reshape(h, w, channels).astype(np.float64) / float(maxval)
    return Raster(data=arr)

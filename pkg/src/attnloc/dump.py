"""Attention-dump interchange format.

One directory per model response:

    manifest.json     UTF-8 JSON, snake_case fields (see DumpManifest)
    attn_patches.f32  raw float32 LE, row-major, [rows x P*P]
    attn_text.f32     raw float32 LE, row-major, [rows x n_input_text]
    mask.pgm          optional binary ground truth, nonzero = anomalous

`rows` is n_output for mean-aggregated dumps and num_layers * n_output for
per-layer dumps. Shapes are authoritative in the manifest; the tensor files
carry no header.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    IoFailure,
    MalformedManifest,
    MissingFile,
    NegativeAttention,
    ShapeMismatch,
    UnsupportedFormat,
)

SCHEMA_VERSION = 1
ROW_MASS_TOL = 1e-4

ROLE_REASONING = "reasoning"
ROLE_ANSWER = "answer"
AGG_MEAN = "mean_layers_heads"
AGG_PER_LAYER = "per_layer"

MANIFEST_NAME = "manifest.json"
PATCHES_NAME = "attn_patches.f32"
TEXT_NAME = "attn_text.f32"
MASK_NAME = "mask.pgm"


@dataclass
class GeneratedToken:
    index: int
    text: str
    role: str  # ROLE_REASONING or ROLE_ANSWER


@dataclass
class DumpManifest:
    schema_version: int
    sample_id: str
    label: int  # 1 = anomalous
    patch_grid_side: int
    n_input_text: int
    n_output: int
    image_height: int
    image_width: int
    generated_tokens: list[GeneratedToken]
    anomaly_text_indices: list[int]
    answer_text: str  # full decoded response text, reasoning markup included
    aggregation_mode: str = AGG_MEAN
    num_layers: int = 1
    num_heads: int = 1
    mask_present: bool = False
    extra: dict = field(default_factory=dict)  # producer annotations, preserved on write

    @property
    def n_patches(self) -> int:
        return self.patch_grid_side * self.patch_grid_side

    @property
    def tensor_rows(self) -> int:
        """Row count of the stored tensors (layers folded in for per-layer dumps)."""
        if self.aggregation_mode == AGG_PER_LAYER:
            return self.num_layers * self.n_output
        return self.n_output


@dataclass
class AttentionRecord:
    attn_to_patches: np.ndarray  # float32 [rows, P*P]
    attn_to_text: np.ndarray  # float32 [rows, n_input_text]


_MANIFEST_FIELDS = {
    "schema_version": int,
    "sample_id": str,
    "label": int,
    "patch_grid_side": int,
    "n_input_text": int,
    "n_output": int,
    "image_height": int,
    "image_width": int,
    "generated_tokens": list,
    "anomaly_text_indices": list,
    "answer_text": str,
    "aggregation_mode": str,
    "num_layers": int,
    "num_heads": int,
    "mask_present": bool,
}


def validate_manifest(m: DumpManifest) -> None:
    """Check every manifest invariant; raise MalformedManifest naming the field."""
    if m.schema_version != SCHEMA_VERSION:
        raise MalformedManifest(f"schema_version: expected {SCHEMA_VERSION}, got {m.schema_version!r}")
    if m.label not in (0, 1):
        raise MalformedManifest(f"label: must be 0 or 1, got {m.label!r}")
    if m.patch_grid_side < 1:
        raise MalformedManifest(f"patch_grid_side: must be >= 1, got {m.patch_grid_side}")
    if m.n_output < 1:
        raise MalformedManifest(f"n_output: must be >= 1, got {m.n_output}")
    if m.n_input_text < 1:
        raise MalformedManifest(f"n_input_text: must be >= 1, got {m.n_input_text}")
    if m.image_height < 1 or m.image_width < 1:
        raise MalformedManifest("image_height/image_width: must be >= 1")
    if m.aggregation_mode not in (AGG_MEAN, AGG_PER_LAYER):
        raise MalformedManifest(f"aggregation_mode: unknown value {m.aggregation_mode!r}")
    if m.num_layers < 1 or m.num_heads < 1:
        raise MalformedManifest("num_layers/num_heads: must be >= 1")
    if m.n_output != len(m.generated_tokens):
        raise MalformedManifest(
            f"generated_tokens: length {len(m.generated_tokens)} != n_output {m.n_output}"
        )
    for tok in m.generated_tokens:
        if tok.role not in (ROLE_REASONING, ROLE_ANSWER):
            raise MalformedManifest(f"generated_tokens[{tok.index}].role: unknown role {tok.role!r}")
    indices = [tok.index for tok in m.generated_tokens]
    if indices != list(range(m.n_output)):
        raise MalformedManifest("generated_tokens: indices must be 0..n_output-1 with no gaps")
    for e in m.anomaly_text_indices:
        if not (0 <= e < m.n_input_text):
            raise MalformedManifest(
                f"anomaly_text_indices: {e} outside [0, {m.n_input_text})"
            )
    if len(set(m.anomaly_text_indices)) != len(m.anomaly_text_indices):
        raise MalformedManifest("anomaly_text_indices: duplicate entries")


def validate_record(record: AttentionRecord, manifest: DumpManifest) -> None:
    """Check tensor shapes and value invariants against the manifest."""
    rows = manifest.tensor_rows
    if record.attn_to_patches.shape != (rows, manifest.n_patches):
        raise ShapeMismatch(
            f"attn_to_patches: shape {record.attn_to_patches.shape} != ({rows}, {manifest.n_patches})"
        )
    if record.attn_to_text.shape != (rows, manifest.n_input_text):
        raise ShapeMismatch(
            f"attn_to_text: shape {record.attn_to_text.shape} != ({rows}, {manifest.n_input_text})"
        )
    for name, arr in (("attn_to_patches", record.attn_to_patches), ("attn_to_text", record.attn_to_text)):
        if not np.isfinite(arr).all():
            raise NegativeAttention(f"{name}: contains non-finite values")
        if (arr < 0).any():
            raise NegativeAttention(f"{name}: contains negative values")
    # Both matrices restrict one probability row, so their combined mass is <= 1.
    row_mass = record.attn_to_patches.sum(axis=1, dtype=np.float64) + record.attn_to_text.sum(
        axis=1, dtype=np.float64
    )
    if (row_mass > 1.0 + ROW_MASS_TOL).any():
        bad = int(np.argmax(row_mass))
        raise NegativeAttention(
            f"attn_to_patches+attn_to_text: row {bad} mass {row_mass[bad]:.6f} exceeds 1+{ROW_MASS_TOL}"
        )


def _token_from_json(obj: object, pos: int) -> GeneratedToken:
    if not isinstance(obj, dict):
        raise MalformedManifest(f"generated_tokens[{pos}]: expected object")
    for key, typ in (("index", int), ("text", str), ("role", str)):
        if key not in obj:
            raise MalformedManifest(f"generated_tokens[{pos}].{key}: missing")
        if not isinstance(obj[key], typ) or isinstance(obj[key], bool):
            raise MalformedManifest(f"generated_tokens[{pos}].{key}: expected {typ.__name__}")
    return GeneratedToken(index=obj["index"], text=obj["text"], role=obj["role"])


def manifest_from_json(text: str) -> DumpManifest:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"manifest.json: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise MalformedManifest("manifest.json: top level must be an object")
    for key, typ in _MANIFEST_FIELDS.items():
        if key not in raw:
            raise MalformedManifest(f"{key}: missing")
        val = raw[key]
        if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
            raise MalformedManifest(f"{key}: expected integer, got {val!r}")
        if typ in (str, list, bool) and not isinstance(val, typ):
            raise MalformedManifest(f"{key}: expected {typ.__name__}, got {val!r}")
    tokens = [_token_from_json(t, i) for i, t in enumerate(raw["generated_tokens"])]
    anomaly_idx = []
    for e in raw["anomaly_text_indices"]:
        if isinstance(e, bool) or not isinstance(e, int):
            raise MalformedManifest(f"anomaly_text_indices: expected integers, got {e!r}")
        anomaly_idx.append(e)
    extra = {k: v for k, v in raw.items() if k not in _MANIFEST_FIELDS}
    manifest = DumpManifest(
        schema_version=raw["schema_version"],
        sample_id=raw["sample_id"],
        label=raw["label"],
        patch_grid_side=raw["patch_grid_side"],
        n_input_text=raw["n_input_text"],
        n_output=raw["n_output"],
        image_height=raw["image_height"],
        image_width=raw["image_width"],
        generated_tokens=tokens,
        anomaly_text_indices=anomaly_idx,
        answer_text=raw["answer_text"],
        aggregation_mode=raw["aggregation_mode"],
        num_layers=raw["num_layers"],
        num_heads=raw["num_heads"],
        mask_present=raw["mask_present"],
        extra=extra,
    )
    validate_manifest(manifest)
    return manifest


def manifest_to_json(m: DumpManifest) -> str:
    obj = {
        "schema_version": m.schema_version,
        "sample_id": m.sample_id,
        "label": m.label,
        "patch_grid_side": m.patch_grid_side,
        "n_input_text": m.n_input_text,
        "n_output": m.n_output,
        "image_height": m.image_height,
        "image_width": m.image_width,
        "generated_tokens": [
            {"index": t.index, "text": t.text, "role": t.role} for t in m.generated_tokens
        ],
        "anomaly_text_indices": sorted(m.anomaly_text_indices),
        "answer_text": m.answer_text,
        "aggregation_mode": m.aggregation_mode,
        "num_layers": m.num_layers,
        "num_heads": m.num_heads,
        "mask_present": m.mask_present,
    }
    obj.update(m.extra)
    return json.dumps(obj, indent=2, sort_keys=False)


def _read_f32(path: Path, rows: int, cols: int, name: str) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(f"{name}: {path} not found")
    data = path.read_bytes()
    expected = rows * cols * 4
    if len(data) != expected:
        raise ShapeMismatch(f"{name}: byte length {len(data)} != {rows}*{cols}*4 = {expected}")
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols)


def read_dump(path: str | Path) -> tuple[DumpManifest, AttentionRecord, np.ndarray | None]:
    """Read and fully validate one dump directory.

    Returns (manifest, record, mask) where mask is None when absent.
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingFile(f"manifest.json: {manifest_path} not found")
    manifest = manifest_from_json(manifest_path.read_text(encoding="utf-8"))
    rows = manifest.tensor_rows
    patches = _read_f32(root / PATCHES_NAME, rows, manifest.n_patches, "attn_patches.f32")
    text = _read_f32(root / TEXT_NAME, rows, manifest.n_input_text, "attn_text.f32")
    record = AttentionRecord(attn_to_patches=patches, attn_to_text=text)
    validate_record(record, manifest)
    mask = None
    mask_path = root / MASK_NAME
    if manifest.mask_present:
        if not mask_path.is_file():
            raise MissingFile(f"mask.pgm: {mask_path} not found but mask_present is true")
        mask = read_mask(mask_path)
        if mask.shape != (manifest.image_height, manifest.image_width):
            raise DimensionMismatch(
                f"mask.pgm: shape {mask.shape} != (image_height, image_width) "
                f"({manifest.image_height}, {manifest.image_width})"
            )
    return manifest, record, mask


def write_dump(
    manifest: DumpManifest,
    record: AttentionRecord,
    path: str | Path,
    mask: np.ndarray | None = None,
) -> None:
    """Write a dump directory; inputs are validated first.

    Round-trip law: read_dump(write_dump(x)) reproduces manifest fields and
    tensors bit-exactly (tensors are stored as float32).
    """
    validate_manifest(manifest)
    validate_record(record, manifest)
    if manifest.mask_present and mask is None:
        raise MalformedManifest("mask_present: true but no mask given")
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / MANIFEST_NAME).write_text(manifest_to_json(manifest), encoding="utf-8")
        record.attn_to_patches.astype("<f4", copy=False).tofile(root / PATCHES_NAME)
        record.attn_to_text.astype("<f4", copy=False).tofile(root / TEXT_NAME)
        if mask is not None:
            write_mask_pgm(mask, root / MASK_NAME)
    except OSError as exc:
        raise IoFailure(f"writing dump to {root}: {exc}") from exc


def reduce_per_layer(manifest: DumpManifest, record: AttentionRecord) -> AttentionRecord:
    """Mean-reduce a per-layer record over layers into the aggregated form."""
    if manifest.aggregation_mode != AGG_PER_LAYER:
        return record
    L, n_o = manifest.num_layers, manifest.n_output
    patches = record.attn_to_patches.reshape(L, n_o, -1).mean(axis=0).astype(np.float32)
    text = record.attn_to_text.reshape(L, n_o, -1).mean(axis=0).astype(np.float32)
    return AttentionRecord(attn_to_patches=patches, attn_to_text=text)


# --- mask / PGM IO ---------------------------------------------------------


def _parse_pgm_header(data: bytes) -> tuple[str, int, int, int, int]:
    """Return (magic, width, height, maxval, data_offset); PGM comments allowed."""
    pos = 2  # after magic
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnsupportedFormat("mask: truncated PGM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as exc:
            raise UnsupportedFormat(f"mask: bad PGM header token {data[start:pos]!r}") from exc
    magic = data[:2].decode("ascii", errors="replace")
    width, height, maxval = fields
    if maxval <= 0 or maxval > 65535:
        raise UnsupportedFormat(f"mask: PGM maxval {maxval} out of range")
    return magic, width, height, maxval, pos + 1


def read_mask(path: str | Path) -> np.ndarray:
    """Read a PGM (P2/P5) or grayscale PNG mask; nonzero pixels map to 1."""
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"mask: {p} not found")
    data = p.read_bytes()
    if data[:2] in (b"P5", b"P2"):
        magic, width, height, maxval, offset = _parse_pgm_header(data)
        n = width * height
        if magic == "P5":
            dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
            body = data[offset : offset + n * dtype.itemsize]
            if len(body) != n * dtype.itemsize:
                raise DimensionMismatch(f"mask: PGM body has {len(body)} bytes, expected {n * dtype.itemsize}")
            values = np.frombuffer(body, dtype=dtype)
        else:
            tokens = data[offset - 1 :].split()
            if len(tokens) != n:
                raise DimensionMismatch(f"mask: PGM body has {len(tokens)} values, expected {n}")
            values = np.array([int(t) for t in tokens], dtype=np.int64)
        return (values.reshape(height, width) > 0).astype(np.uint8)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(p) as img:
            arr = np.asarray(img.convert("L"))
        return (arr > 0).astype(np.uint8)
    raise UnsupportedFormat(f"mask: {p} is neither PGM (P2/P5) nor PNG")


def write_mask_pgm(mask: np.ndarray, path: str | Path) -> None:
    """Write a binary mask as 8-bit P5 PGM (0 / 255)."""
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    if arr.ndim != 2:
        raise IoFailure(f"mask: expected 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(arr.tobytes())
    except OSError as exc:
        raise IoFailure(f"writing mask to {path}: {exc}") from exc


def write_pgm16(values: np.ndarray, path: str | Path) -> None:
    """Write a [0,1] float map as 16-bit P5 PGM (value = round(65535 * score))."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise IoFailure(f"pgm16: expected 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise IoFailure("pgm16: non-finite values")
    scaled = np.rint(np.clip(arr, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = scaled.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            f.write(scaled.tobytes())
    except OSError as exc:
        raise IoFailure(f"writing pgm16 to {path}: {exc}") from exc


def read_f32_map(path: str | Path, height: int, width: int) -> np.ndarray:
    """Read a raw float32 LE H x W map (the map.f32 export format)."""
    return _read_f32(Path(path), height, width, Path(path).name)

"""Binary and JSON-lines persistence.

Layouts (all integers little-endian u32):

* PEMB matrix: ``b"PEMB" | version=1 | rows | dims | float32 payload | crc32(payload)``
* PBNK bank: ``b"PBNK" | version=1 | C | L_t | L_v | T payload | V payload |
  json length | UTF-8 json | crc32(T payload + V payload + json)``

Manifests and reference indices are JSON-lines files.
"""

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .exceptions import (
    BadMagicError,
    ChecksumMismatchError,
    DataValidationError,
    DuplicateCategoryIdError,
    EmptyReferenceSetError,
    NonFiniteValueError,
    ReferenceSetError,
    RowIndexOutOfRangeError,
    TruncatedPayloadError,
    VersionUnsupportedError,
)
from .heads import ClassifierParams
from .structures import (
    MAX_REFERENCES,
    SPLITS,
    CategoryRecord,
    LabeledBatch,
    PrototypeBank,
    ReferenceEntry,
    ReferenceSet,
)
from .tensor import as_matrix

PEMB_MAGIC = b"PEMB"
BANK_MAGIC = b"PBNK"
FORMAT_VERSION = 1

_F32 = np.dtype("<f4")
_U32 = struct.Struct("<I")


def _atomic_write(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text):
    _atomic_write(path, text.encode("utf-8"))


def _payload(m):
    return np.ascontiguousarray(m, dtype=_F32).tobytes()


def _decode(buf, rows, dims, what):
    m = np.frombuffer(buf, dtype=_F32).astype(np.float32).reshape(rows, dims)
    if not np.all(np.isfinite(m)):
        raise NonFiniteValueError(f"{what} contains NaN or Inf")
    return m


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"{self.path}: {what} needs {n} bytes, {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    def finish(self):
        if self.pos != len(self.data):
            raise DataValidationError(
                f"{self.path}: {len(self.data) - self.pos} trailing bytes"
            )


def _read_header(reader, magic):
    got = reader.take(4, "magic")
    if got != magic:
        raise BadMagicError(f"{reader.path}: magic {got!r}, expected {magic!r}")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise VersionUnsupportedError(f"{reader.path}: version {version}")


def encode_embeddings(m):
    m = as_matrix(m)
    rows, dims = m.shape
    payload = _payload(m)
    return (
        PEMB_MAGIC
        + _U32.pack(FORMAT_VERSION)
        + _U32.pack(rows)
        + _U32.pack(dims)
        + payload
        + _U32.pack(zlib.crc32(payload))
    )


def decode_embeddings(data, path="<bytes>"):
    reader = _Reader(data, path)
    _read_header(reader, PEMB_MAGIC)
    rows = reader.u32("rows")
    dims = reader.u32("dims")
    payload = reader.take(rows * dims * 4, "payload")
    crc = reader.u32("checksum")
    reader.finish()
    if zlib.crc32(payload) != crc:
        raise ChecksumMismatchError(f"{path}: payload checksum mismatch")
    return _decode(payload, rows, dims, path)


def write_embeddings(m, path):
    _atomic_write(path, encode_embeddings(m))


def read_embeddings(path):
    return decode_embeddings(Path(path).read_bytes(), str(path))


def _iter_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})")
            if not isinstance(obj, dict):
                raise DataValidationError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _field(obj, key, kind, where):
    if key not in obj:
        raise DataValidationError(f"{where}: missing field '{key}'")
    value = obj[key]
    # bool is an int subclass; keep the two apart
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise DataValidationError(f"{where}: field '{key}' must be an integer")
    if kind is not int and not isinstance(value, kind):
        raise DataValidationError(f"{where}: field '{key}' must be {kind.__name__}")
    return value


def write_manifest(categories, path):
    lines = [json.dumps(c.to_json(), sort_keys=True) for c in categories]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def parse_manifest_records(items, where="manifest"):
    """Validate ``(location, json_object)`` pairs into records sorted by id."""
    records, seen = [], set()
    for loc, obj in items:
        cid = _field(obj, "id", int, loc)
        name = _field(obj, "name", str, loc)
        split = _field(obj, "split", str, loc)
        has_desc = _field(obj, "has_description", bool, loc)
        if split not in SPLITS:
            raise DataValidationError(f"{loc}: split must be one of {SPLITS}")
        if cid in seen:
            raise DuplicateCategoryIdError(f"{loc}: duplicate category id {cid}")
        seen.add(cid)
        records.append(CategoryRecord(cid, name, split, has_desc))
    records.sort(key=lambda r: r.category_id)
    if [r.category_id for r in records] != list(range(len(records))):
        raise DataValidationError(f"{where}: category ids must be contiguous from 0")
    return records


def read_manifest(path):
    """Read a category manifest, sorted by id."""
    items = [(f"{path}:{lineno}", obj) for lineno, obj in _iter_jsonl(path)]
    return parse_manifest_records(items, str(path))


def write_reference_index(refs, path):
    lines = []
    for cid in sorted(refs):
        for e in refs[cid].entries:
            lines.append(
                json.dumps(
                    {"id": cid, "row": e.row, "resolution": e.resolution, "exemplar": e.exemplar},
                    sort_keys=True,
                )
            )
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_reference_index(path, embeddings, categories=None):
    """Read a reference index that points into ``embeddings``.

    Returns ``(refs, warnings)`` where ``refs`` maps category id to a
    :class:`ReferenceSet` and ``warnings`` counts categories whose entries
    had to be re-sorted. When ``categories`` is given, every listed category
    must have at least one reference.
    """
    n_rows = len(embeddings)
    grouped = {}
    for lineno, obj in _iter_jsonl(path):
        loc = f"{path}:{lineno}"
        cid = _field(obj, "id", int, loc)
        row = _field(obj, "row", int, loc)
        res = _field(obj, "resolution", int, loc)
        exemplar = _field(obj, "exemplar", bool, loc)
        if not 0 <= row < n_rows:
            raise RowIndexOutOfRangeError(f"{loc}: row {row} outside 0..{n_rows - 1}")
        if res <= 0:
            raise DataValidationError(f"{loc}: resolution must be positive")
        grouped.setdefault(cid, []).append(ReferenceEntry(row, res, exemplar))

    if categories is not None:
        known = {c.category_id for c in categories}
        for c in categories:
            if not grouped.get(c.category_id):
                raise EmptyReferenceSetError(f"category {c.category_id} has no references")
        unknown = sorted(set(grouped) - known)
        if unknown:
            raise DataValidationError(f"{path}: references for unknown categories {unknown}")

    refs, warnings = {}, 0
    for cid, entries in sorted(grouped.items()):
        if len(entries) > MAX_REFERENCES:
            raise ReferenceSetError(
                f"category {cid}: {len(entries)} references exceeds {MAX_REFERENCES}"
            )
        refs[cid], reordered = ReferenceSet.from_unordered(cid, entries)
        warnings += int(reordered)
    return refs, warnings


def encode_bank(bank):
    T = as_matrix(bank.T, "T")
    V = as_matrix(bank.V, "V")
    C = len(bank.categories)
    if T.shape[0] != C or V.shape[0] != C:
        raise DataValidationError("bank matrices must have one row per category")
    meta = json.dumps(
        {
            "categories": [c.to_json() for c in bank.categories],
            "sigma_table_hash": bank.sigma_table_hash,
        },
        sort_keys=True,
    ).encode("utf-8")
    t_bytes, v_bytes = _payload(T), _payload(V)
    crc = zlib.crc32(v_bytes + meta, zlib.crc32(t_bytes))
    return b"".join(
        [
            BANK_MAGIC,
            _U32.pack(FORMAT_VERSION),
            _U32.pack(C),
            _U32.pack(T.shape[1]),
            _U32.pack(V.shape[1]),
            t_bytes,
            v_bytes,
            _U32.pack(len(meta)),
            meta,
            _U32.pack(crc),
        ]
    )


def decode_bank(data, path="<bytes>"):
    reader = _Reader(data, path)
    _read_header(reader, BANK_MAGIC)
    C = reader.u32("C")
    Lt = reader.u32("L_t")
    Lv = reader.u32("L_v")
    t_bytes = reader.take(C * Lt * 4, "T payload")
    v_bytes = reader.take(C * Lv * 4, "V payload")
    meta = reader.take(reader.u32("manifest length"), "manifest block")
    crc = reader.u32("checksum")
    reader.finish()
    if zlib.crc32(v_bytes + meta, zlib.crc32(t_bytes)) != crc:
        raise ChecksumMismatchError(f"{path}: bank checksum mismatch")
    try:
        info = json.loads(meta.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataValidationError(f"{path}: manifest block unreadable ({exc})")
    items = [(f"{path}:manifest[{i}]", obj) for i, obj in enumerate(info.get("categories", []))]
    categories = parse_manifest_records(items, f"{path}:manifest")
    if len(categories) != C:
        raise DataValidationError(f"{path}: manifest lists {len(categories)} categories, header {C}")
    return PrototypeBank(
        T=_decode(t_bytes, C, Lt, f"{path}:T"),
        V=_decode(v_bytes, C, Lv, f"{path}:V"),
        categories=categories,
        sigma_table_hash=info.get("sigma_table_hash", ""),
    )


def save_bank(bank, path):
    _atomic_write(path, encode_bank(bank))


def load_bank(path):
    return decode_bank(Path(path).read_bytes(), str(path))


def save_batch(batch, stem):
    """Write ``<stem>.pemb`` (features) and ``<stem>.labels.json``."""
    stem = Path(stem)
    write_embeddings(batch.X, stem.with_name(stem.name + ".pemb"))
    _atomic_write_text(
        stem.with_name(stem.name + ".labels.json"),
        json.dumps([int(v) for v in batch.labels]) + "\n",
    )


def load_batch(stem):
    stem = Path(stem)
    X = read_embeddings(stem.with_name(stem.name + ".pemb"))
    label_path = stem.with_name(stem.name + ".labels.json")
    try:
        labels = json.loads(label_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{label_path}: invalid JSON ({exc.msg})")
    if not isinstance(labels, list) or any(
        isinstance(v, bool) or not isinstance(v, int) for v in labels
    ):
        raise DataValidationError(f"{label_path}: expected a JSON array of integers")
    if len(labels) != len(X):
        raise DataValidationError(f"{label_path}: {len(labels)} labels for {len(X)} rows")
    return LabeledBatch(X, np.asarray(labels, dtype=np.int64))


PARAM_FILES = ("W.pemb", "P_t.pemb", "P_v.pemb", "params.json")


def save_params(params, directory, extra=None):
    """Write trained parameters as three PEMB files plus ``params.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_embeddings(params.W, d / "W.pemb")
    write_embeddings(params.P_t, d / "P_t.pemb")
    write_embeddings(params.P_v, d / "P_v.pemb")
    meta = {"tau": params.tau, "conventional_normalized": params.conventional_normalized}
    meta.update(extra or {})
    _atomic_write_text(d / "params.json", json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_params(directory):
    d = Path(directory)
    meta_path = d / "params.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{meta_path}: invalid JSON ({exc.msg})")
    params = ClassifierParams(
        W=read_embeddings(d / "W.pemb"),
        P_t=read_embeddings(d / "P_t.pemb"),
        P_v=read_embeddings(d / "P_v.pemb"),
        tau=float(meta["tau"]),
        conventional_normalized=bool(meta["conventional_normalized"]),
    )
    return params, meta

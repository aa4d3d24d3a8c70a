"""Versioned on-disk formats: JSON documents and array archives.

Every file carries a header ``{"schema": name, "version": "MAJOR.MINOR"}``.
Readers reject other schemas and unknown major versions. Archives are written
with fixed zip timestamps so identical contents give identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


class ArtifactError(ValueError):
    pass


def _header(schema: str, version: str) -> dict:
    return {"schema": schema, "version": version}


def check_header(header: Mapping, schema: str, version: str, path: os.PathLike | str = "<memory>") -> None:
    if header.get("schema") != schema:
        raise ArtifactError(f"{path}: expected schema {schema!r}, found {header.get('schema')!r}")
    found = str(header.get("version", ""))
    if found.split(".")[0] != version.split(".")[0]:
        raise ArtifactError(f"{path}: unsupported {schema} version {found!r} (this build reads {version.split('.')[0]}.x)")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def dump_json(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def write_json(path: os.PathLike | str, schema: str, version: str, body: Mapping) -> None:
    doc = {"header": _header(schema, version), **body}
    _atomic_write(Path(path), dump_json(doc).encode())


def read_json(path: os.PathLike | str, schema: str, version: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or "header" not in doc:
        raise ArtifactError(f"{path}: missing header")
    check_header(doc["header"], schema, version, path)
    return doc


def write_arrays(path: os.PathLike | str, schema: str, version: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    """Store ``arrays`` plus a JSON ``meta`` block in a deterministic .npz archive."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps({"header": _header(schema, version), "meta": meta}, sort_keys=True))
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.lib.format.write_array(arr_buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_EPOCH), arr_buf.getvalue())
    _atomic_write(Path(path), buf.getvalue())


def read_arrays(path: os.PathLike | str, schema: str, version: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise ArtifactError(f"{path}: not an array archive") from None
    with zf:
        try:
            doc = json.loads(zf.read("header.json"))
        except KeyError:
            raise ArtifactError(f"{path}: missing header") from None
        check_header(doc["header"], schema, version, path)
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return doc["meta"], arrays

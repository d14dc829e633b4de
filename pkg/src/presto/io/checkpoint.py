"""Versioned checkpoints: an ``.npz`` archive holding a JSON header plus
named float arrays, with a sha256 over the payload.

The header records the schema version, config hash, stage name and step
count. Files are written to a temporary sibling and renamed into place, so
a reader never sees a half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
HEADER_KEY = "__header__"


class CheckpointError(RuntimeError):
    pass


def payload_digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode("utf-8"))
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path, arrays: dict, stage: str, step: int, config_hash: str, meta=None) -> Path:
    path = Path(path)
    if HEADER_KEY in arrays:
        raise CheckpointError(f"array name {HEADER_KEY!r} is reserved")
    header = {"schema_version": SCHEMA_VERSION, "config_hash": config_hash, "stage": stage,
              "step": int(step), "sha256": payload_digest(arrays), "meta": meta or {}}
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **{HEADER_KEY: np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)},
                     **{k: np.asarray(v) for k, v in arrays.items()})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expect_hash=None, force: bool = False):
    """Return ``(header, arrays)``; nothing is returned unless the whole file verifies."""
    try:
        with np.load(path, allow_pickle=False) as z:
            if HEADER_KEY not in z.files:
                raise CheckpointError(f"{path}: no header")
            header = json.loads(bytes(z[HEADER_KEY]).decode("utf-8"))
            arrays = {k: np.array(z[k]) for k in z.files if k != HEADER_KEY}
    except CheckpointError:
        raise
    except (OSError, ValueError, zipfile.BadZipFile, EOFError, KeyError) as err:
        raise CheckpointError(f"{path}: unreadable checkpoint ({err})") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {header.get('schema_version')} != {SCHEMA_VERSION}")
    if payload_digest(arrays) != header.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    if expect_hash is not None and header.get("config_hash") != expect_hash and not force:
        raise CheckpointError(f"{path}: written under config {header.get('config_hash', '')[:12]}, "
                              f"current config is {expect_hash[:12]} (pass force to load anyway)")
    return header, arrays


def prefixed(prefix: str, arrays: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in arrays.items()}


def section(prefix: str, arrays: dict) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix)}


def presto_s_arrays(state) -> dict:
    """Everything needed to resume step distillation (the frozen teacher is stored separately)."""
    out = {}
    out.update(prefixed("gen.", state.generator.net.state_arrays()))
    out.update(prefixed("fake.", state.fake.net.state_arrays()))
    out.update(prefixed("head.", {k: v.data for k, v in state.head.params.items()}))
    out.update(state.opt_gen.state_arrays("opt_gen"))
    out.update(state.opt_fake.state_arrays("opt_fake"))
    out["counters"] = np.array([state.iteration, state.gen_updates, state.fake_updates], dtype=np.int64)
    out["acc_window"] = np.array(list(state.acc_window), dtype=np.float64)
    return out


def restore_presto_s(state, arrays: dict):
    state.generator.net.load_state_arrays(section("gen.", arrays))
    state.fake.net.load_state_arrays(section("fake.", arrays))
    head = section("head.", arrays)
    for k, p in state.head.params.items():
        p.data = np.array(head[k])
    state.opt_gen.load_state_arrays(arrays, "opt_gen")
    state.opt_fake.load_state_arrays(arrays, "opt_fake")
    state.iteration, state.gen_updates, state.fake_updates = (int(v) for v in arrays["counters"])
    state.acc_window.clear()
    state.acc_window.extend(float(v) for v in arrays["acc_window"])
    return state

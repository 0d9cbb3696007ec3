"""
Artifact I/O for dipwell.
Binary wave-function dumps, CSV tables, gnuplot data files and run
manifests. Every file is written to a temporary path and renamed into place.
"""
import json
import os
import platform
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from config import APP_NAME, VERSION
from errors import FieldFormatError
from grid import GridSpec, GridState
from logger import log


FIELD_MAGIC = b"TGPE"
FIELD_VERSION = 1
FLOAT_FORMAT = "%.17g"
MANIFEST_NAME = "manifest.json"

HEADER_DTYPE = np.dtype([
    ("magic", "S4"),
    ("version", "<u4"),
    ("n", "<u4", (3,)),
    ("box", "<f8", (3,)),
    ("time", "<f8"),
    ("na", "<f8"),
    ("nadd", "<f8"),
])


@contextmanager
def atomic_write(path, mode: str = "w"):
    """Open a temporary file next to `path` and move it over `path` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_field(path, state: GridState, na: float = 0.0, nadd: float = 0.0):
    """
    Write a wave function dump.

    Layout: fixed little-endian header (magic, version, grid sizes, box,
    time, Na, Na_dd) followed by complex128 samples in C order.
    """
    header = np.zeros(1, dtype=HEADER_DTYPE)
    header["magic"] = FIELD_MAGIC
    header["version"] = FIELD_VERSION
    header["n"] = state.spec.shape
    header["box"] = state.spec.box
    header["time"] = state.time
    header["na"] = na
    header["nadd"] = nadd
    with atomic_write(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(state.psi, dtype="<c16").tobytes())
    log.debug(f"Wrote field {state.spec.shape} to {path}")


def read_field(path, dt: float = None):
    """
    Read a dump written by write_field.

    Returns:
        (GridState, metadata dict with time, na, nadd)

    Raises:
        FieldFormatError: bad magic, unknown version or truncated data
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_DTYPE.itemsize:
        raise FieldFormatError(f"{path}: file shorter than the header")
    header = np.frombuffer(raw[:HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0]
    if header["magic"] != FIELD_MAGIC:
        raise FieldFormatError(f"{path}: not a dipwell field dump")
    if int(header["version"]) != FIELD_VERSION:
        raise FieldFormatError(f"{path}: unsupported version {int(header['version'])}")
    shape = tuple(int(n) for n in header["n"])
    data = raw[HEADER_DTYPE.itemsize:]
    expected = int(np.prod(shape)) * 16
    if len(data) != expected:
        raise FieldFormatError(f"{path}: expected {expected} data bytes, found {len(data)}")

    box = [float(b) for b in header["box"]]
    kwargs = {} if dt is None else {"dt": dt}
    try:
        spec = GridSpec(nx=shape[0], ny=shape[1], nz=shape[2], lx=box[0], ly=box[1], lz=box[2], **kwargs)
    except ValueError as e:
        raise FieldFormatError(f"{path}: invalid grid in header: {e}") from e
    psi = np.frombuffer(data, dtype="<c16").reshape(shape).astype(np.complex128)
    state = GridState(psi=psi, spec=spec, time=float(header["time"]))
    meta = {"time": float(header["time"]), "na": float(header["na"]), "nadd": float(header["nadd"])}
    return state, meta


def write_csv(path, frame: pd.DataFrame):
    """Whole-file CSV write with lossless doubles."""
    with atomic_write(path, "w") as f:
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT)


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path)


def write_gnuplot(path, frame: pd.DataFrame, columns, comment: str = ""):
    """Whitespace-separated columns with a commented header line."""
    with atomic_write(path, "w") as f:
        if comment:
            f.write(f"# {comment}\n")
        f.write("# " + " ".join(columns) + "\n")
        frame[list(columns)].to_csv(f, sep=" ", header=False, index=False, float_format=FLOAT_FORMAT)


def write_text(path, text: str):
    with atomic_write(path, "w") as f:
        f.write(text)


def write_json(path, data):
    with atomic_write(path, "w") as f:
        json.dump(data, f, indent=2, default=_json_default)
        f.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def software_versions() -> dict:
    return {
        APP_NAME: VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def write_manifest(out_dir, config: dict, argv, command: str, outcome: str, exit_code: int,
                   wall_time: float, artifacts=(), extra: dict = None):
    """Record everything needed to rerun a command next to its outputs."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "versions": software_versions(),
        "threads": config.get("grid", {}).get("threads"),
        "wall_time_s": wall_time,
        "outcome": outcome,
        "exit_code": exit_code,
        "artifacts": sorted(str(a) for a in artifacts),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / MANIFEST_NAME
    write_json(path, manifest)
    return path

"""File formats: TNSR1 tensors, coefficient containers, CSV tables, dataset
directories and run manifests.

TNSR1 layout (little-endian): ``b"TNSR"``, version byte ``0x01``, ``u32 D``,
``D x u32`` dims, then ``prod(dims)`` float64 values in column-major order.

Coefficient container: ``b"TCOF"``, version byte ``0x01``, ``u32 D``;
``b"GAMA"``, ``u32 k`` and ``k`` float64 values; ``D`` records of ``b"FACT"``
followed by a TNSR1 blob; one ``b"CORE"`` record followed by a TNSR1 blob.
"""

import csv
import hashlib
import io
import json
import os
import struct
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .coeff_model import TuckerCoeff
from .estimator import Dataset

TNSR_MAGIC = b"TNSR\x01"
COEF_MAGIC = b"TCOF\x01"
RESPONSE_FILE = "response.csv"
COVARIATE_FILE = "covariates.csv"
TENSOR_LIST = "tensors.txt"


class FormatError(ValueError):
    """Malformed input file; the message names the file and the location."""


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def encode_tensor(t):
    t = np.asarray(t, dtype="<f8")
    if t.ndim < 1:
        raise ValueError("TNSR1 stores tensors with at least one mode")
    head = TNSR_MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return head + t.ravel(order="F").tobytes()


def _decode_tensor(buf, offset, name):
    """Parse one TNSR1 blob at ``offset``; returns ``(tensor, next_offset)``."""
    if buf[offset:offset + 5] != TNSR_MAGIC:
        raise FormatError(f"{name}: bad TNSR1 magic at byte {offset}")
    pos = offset + 5
    if len(buf) < pos + 4:
        raise FormatError(f"{name}: truncated header at byte {pos}")
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if ndim < 1 or ndim > 64:
        raise FormatError(f"{name}: implausible mode count {ndim} at byte {pos - 4}")
    if len(buf) < pos + 4 * ndim:
        raise FormatError(f"{name}: truncated dims at byte {len(buf)}, expected {ndim} dims "
                          f"from byte {pos}")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    if any(p == 0 for p in dims):
        raise FormatError(f"{name}: zero dimension in {dims} at byte {pos - 4 * ndim}")
    nbytes = 8 * int(np.prod(dims, dtype=np.int64))
    if len(buf) < pos + nbytes:
        raise FormatError(f"{name}: truncated data at byte {len(buf)}, expected "
                          f"{nbytes} data bytes from byte {pos}")
    data = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos)
    return data.reshape(dims, order="F").astype(float), pos + nbytes


def decode_tensor(buf, name="<bytes>"):
    t, end = _decode_tensor(buf, 0, name)
    if end != len(buf):
        raise FormatError(f"{name}: {len(buf) - end} trailing bytes after byte {end}")
    return t


def write_tensor(path, t):
    atomic_write(path, encode_tensor(t))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes(), str(path))


def encode_coeff(c):
    out = [COEF_MAGIC, struct.pack("<I", c.ndim), b"GAMA", struct.pack("<I", c.gamma.size),
           np.asarray(c.gamma, dtype="<f8").tobytes()]
    for b in c.factors:
        out += [b"FACT", encode_tensor(b)]
    out += [b"CORE", encode_tensor(c.core)]
    return b"".join(out)


def _tag(buf, pos, tag, name):
    if buf[pos:pos + 4] != tag:
        raise FormatError(f"{name}: expected {tag.decode()} record at byte {pos}")
    return pos + 4


def decode_coeff(buf, name="<bytes>"):
    if buf[:5] != COEF_MAGIC:
        raise FormatError(f"{name}: bad coefficient magic at byte 0")
    if len(buf) < 9:
        raise FormatError(f"{name}: truncated header at byte {len(buf)}")
    (ndim,) = struct.unpack_from("<I", buf, 5)
    pos = _tag(buf, 9, b"GAMA", name)
    if len(buf) < pos + 4:
        raise FormatError(f"{name}: truncated gamma length at byte {pos}")
    (k,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 8 * k:
        raise FormatError(f"{name}: truncated gamma at byte {len(buf)}, expected {8 * k} "
                          f"bytes from byte {pos}")
    gamma = np.frombuffer(buf, dtype="<f8", count=k, offset=pos).astype(float)
    pos += 8 * k
    factors = []
    for _ in range(ndim):
        pos = _tag(buf, pos, b"FACT", name)
        b, pos = _decode_tensor(buf, pos, name)
        if b.ndim != 2:
            raise FormatError(f"{name}: factor record ending at byte {pos} is not a matrix")
        factors.append(b)
    pos = _tag(buf, pos, b"CORE", name)
    core, pos = _decode_tensor(buf, pos, name)
    if pos != len(buf):
        raise FormatError(f"{name}: {len(buf) - pos} trailing bytes after byte {pos}")
    try:
        return TuckerCoeff(core, factors, gamma)
    except ValueError as exc:
        raise FormatError(f"{name}: {exc}") from exc


def write_coeff(path, c):
    atomic_write(path, encode_coeff(c))


def read_coeff(path):
    return decode_coeff(Path(path).read_bytes(), str(path))


def format_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write(path, format_csv(header, rows))


def read_numeric_csv(path):
    """Header and float matrix from a CSV file with a header row."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or any(not h.strip() for h in rows[0]):
        raise FormatError(f"{path}: missing or malformed header in row 1")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise FormatError(f"{path}: duplicate column names in header row 1")
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                data[i - 2, j] = float(cell)
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell {cell!r} at row {i}, "
                                  f"column {j + 1} ({header[j]})") from None
    return header, data


def read_tensor_list(path):
    """Tensor paths listed one per line, resolved against the list's directory."""
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    return [path.parent / ln for ln in lines if ln]


def write_dataset(ds, directory):
    """Dataset directory: response and covariate CSVs plus one TNSR1 file per subject."""
    directory = Path(directory)
    write_csv(directory / RESPONSE_FILE, ["y"], [[v] for v in ds.y])
    if ds.z is not None:
        write_csv(directory / COVARIATE_FILE, [f"z{j + 1}" for j in range(ds.p0)], ds.z.tolist())
    names = []
    for i, x in enumerate(ds.x):
        name = f"tensors/x{i:06d}.tnsr"
        write_tensor(directory / name, x)
        names.append(name)
    atomic_write(directory / TENSOR_LIST, "\n".join(names) + "\n")
    paths = [directory / RESPONSE_FILE, directory / TENSOR_LIST]
    if ds.z is not None:
        paths.append(directory / COVARIATE_FILE)
    return paths + [directory / n for n in names]


def read_dataset(directory):
    directory = Path(directory)
    header, y = read_numeric_csv(directory / RESPONSE_FILE)
    if y.shape[1] != 1:
        raise FormatError(f"{directory / RESPONSE_FILE}: expected one column, found {header}")
    y = y[:, 0]
    z = None
    if (directory / COVARIATE_FILE).exists():
        _, z = read_numeric_csv(directory / COVARIATE_FILE)
        if z.shape[0] != y.size:
            raise FormatError(f"{directory / COVARIATE_FILE}: {z.shape[0]} rows, "
                              f"response has {y.size}")
    paths = read_tensor_list(directory / TENSOR_LIST)
    if len(paths) != y.size:
        raise FormatError(f"{directory / TENSOR_LIST}: lists {len(paths)} tensors, "
                          f"response has {y.size} rows")
    xs = [read_tensor(p) for p in paths]
    for p, x in zip(paths, xs):
        if x.shape != xs[0].shape:
            raise FormatError(f"{p}: dims {x.shape} differ from {xs[0].shape}")
    return Dataset(y, np.stack(xs) if xs else np.zeros((0, 1)), z)


def version_string():
    from importlib.metadata import PackageNotFoundError, version
    try:
        base = version("artifact")
    except PackageNotFoundError:
        base = "0+unknown"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              cwd=Path(__file__).parent, capture_output=True, text=True,
                              timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def write_manifest(path, argv, seed, options, wall_time, inputs=(), outputs=()):
    """Run manifest: command line, seed, option snapshot, version, wall time, digests."""
    manifest = {
        "argv": list(argv),
        "seed": seed,
        "options": options,
        "version": version_string(),
        "wall_time_seconds": wall_time,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def write_result(fit, directory):
    """Coefficient container plus fit-report CSVs; returns the written paths."""
    directory = Path(directory)
    paths = [directory / "coefficients.tcoef", directory / "summary.csv",
             directory / "trace.csv", directory / "blocks.csv"]
    write_coeff(paths[0], fit.coeff)
    summary = [("model", fit.model), ("loglik", float(fit.loglik)),
               ("deviance", float(fit.deviance)), ("bic", float(fit.bic)), ("df", fit.df),
               ("converged", int(fit.converged)), ("n_iter", fit.n_iter),
               ("best_start", fit.best_start), ("seed", fit.seed),
               ("ranks", "x".join(str(r) for r in fit.coeff.ranks))]
    write_csv(paths[1], ["key", "value"], summary)
    write_csv(paths[2], ["iteration", "loglik"], list(enumerate(map(float, fit.loglik_trace))))
    write_csv(paths[3], ["step", "block", "loglik"],
              [(i, name, float(v)) for i, (name, v) in enumerate(fit.block_trace)])
    return paths

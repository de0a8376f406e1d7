"""Reading and writing tensors, masks, images, models and reports.

Tensor text format (``.nntc``)::

    NNTC 1
    sparse | dense
    K n_1 ... n_K
    <sparse: entry count, then one ``i_1 ... i_K value`` line per entry,
     1-based and strictly ascending>
    <dense: whitespace-separated values, last index fastest>

Values are written with ``repr`` so every binary64 value round-trips
exactly. All writers go through a temporary file in the target directory
followed by an atomic rename.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .inner_solver import DualPair
from .outer_solver import CompletionModel, IterationRecord
from .tensor_core import ObservationMask, SparseTensor, check_shape

MAGIC = "NNTC"
VERSION = "1"
DENSITIES = ("sparse", "dense")
REPORT_COLUMNS = ("iteration", "cost", "grad_norm", "step", "cg_iters", "nnls_iters", "elapsed", "rmse")


class TensorFormatError(ValueError):
    """Malformed tensor, mask or image file; the message carries the line number."""

    def __init__(self, path, line: int | None, msg: str):
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {msg}")
        self.path = str(path)
        self.line = line


def atomic_write(path, data: str | bytes) -> None:
    """Write ``data`` to a sibling temp file, then rename it over ``path``."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "ascii", "newline": "\n"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _fmt(v: float) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"cannot serialize non-finite value {v}")
    return repr(v)


# -- NNTC tensors -----------------------------------------------------------

def format_tensor(t, density: str | None = None) -> str:
    """Text of ``t`` in the NNTC format.

    ``density`` defaults to the storage of ``t``. A dense array written as
    sparse keeps only its nonzero entries.
    """
    if density is None:
        density = "sparse" if isinstance(t, SparseTensor) else "dense"
    if density not in DENSITIES:
        raise ValueError(f"density must be one of {DENSITIES}, got {density!r}")
    if isinstance(t, SparseTensor):
        shape = t.shape
    else:
        t = np.asarray(t, dtype=np.float64)
        shape = check_shape(t.shape)
    out = [f"{MAGIC} {VERSION}", density, " ".join(str(n) for n in (len(shape),) + shape)]
    if density == "sparse":
        s = t if isinstance(t, SparseTensor) else SparseTensor.from_dense(t)
        out.append(str(s.nnz))
        for idx, v in zip(s.indices + 1, s.values):
            out.append(" ".join(map(str, idx)) + " " + _fmt(v))
    else:
        d = t.to_dense() if isinstance(t, SparseTensor) else t
        for row in d.reshape(-1, shape[-1]):
            out.append(" ".join(_fmt(v) for v in row))
    return "\n".join(out) + "\n"


def write_tensor(t, path, density: str | None = None) -> None:
    atomic_write(path, format_tensor(t, density))


def _parse_float(tok: str, path, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise TensorFormatError(path, line, f"cannot parse value {tok!r}") from None
    if not math.isfinite(v):
        raise TensorFormatError(path, line, f"non-finite value {tok!r}")
    return v


def _parse_int(tok: str, path, line: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise TensorFormatError(path, line, f"cannot parse {what} {tok!r}") from None


def parse_tensor(text: str, path="<string>"):
    """Parse NNTC text into a dense array or a :class:`SparseTensor`."""
    lines = text.splitlines()
    if not lines or lines[0].split() != [MAGIC, VERSION]:
        got = lines[0].strip() if lines else ""
        raise TensorFormatError(path, 1, f"bad header {got!r}, expected '{MAGIC} {VERSION}'")
    if len(lines) < 2 or lines[1].strip() not in DENSITIES:
        got = lines[1].strip() if len(lines) > 1 else ""
        raise TensorFormatError(path, 2, f"bad density flag {got!r}, expected 'sparse' or 'dense'")
    density = lines[1].strip()
    if len(lines) < 3:
        raise TensorFormatError(path, 3, "missing dimension line")
    toks = lines[2].split()
    dims = [_parse_int(x, path, 3, "dimension") for x in toks]
    if not dims or dims[0] != len(dims) - 1:
        raise TensorFormatError(path, 3, f"dimension line {lines[2].strip()!r} does not match 'K n_1 ... n_K'")
    try:
        shape = check_shape(dims[1:])
    except ValueError as exc:
        raise TensorFormatError(path, 3, str(exc)) from None
    order = len(shape)
    if density == "dense":
        vals = []
        for ln in range(3, len(lines)):
            vals.extend(_parse_float(tok, path, ln + 1) for tok in lines[ln].split())
        total = math.prod(shape)
        if len(vals) != total:
            raise TensorFormatError(path, len(lines), f"expected {total} dense values, found {len(vals)}")
        return np.array(vals, dtype=np.float64).reshape(shape)

    if len(lines) < 4 or len(lines[3].split()) != 1:
        raise TensorFormatError(path, 4, "missing or malformed entry count")
    count = _parse_int(lines[3].strip(), path, 4, "entry count")
    if count < 0:
        raise TensorFormatError(path, 4, f"negative entry count {count}")
    body = [(ln + 1, lines[ln]) for ln in range(4, len(lines)) if lines[ln].strip()]
    if len(body) != count:
        raise TensorFormatError(path, 4, f"header declares {count} entries, found {len(body)}")
    indices = np.empty((count, order), dtype=np.int64)
    values = np.empty(count)
    prev = -1
    strides = np.cumprod((1,) + shape[:0:-1])[::-1]
    for j, (ln, raw) in enumerate(body):
        toks = raw.split()
        if len(toks) != order + 1:
            raise TensorFormatError(path, ln, f"expected {order} indices and a value, found {len(toks)} fields")
        idx = [_parse_int(x, path, ln, "index") for x in toks[:order]]
        for m, (i, n) in enumerate(zip(idx, shape)):
            if not 1 <= i <= n:
                raise TensorFormatError(path, ln, f"index {i} out of bounds 1..{n} in mode {m + 1}")
        values[j] = _parse_float(toks[order], path, ln)
        indices[j] = idx
        lin = int(np.dot(np.asarray(idx) - 1, strides))
        if lin == prev:
            raise TensorFormatError(path, ln, f"duplicate index {tuple(idx)}")
        if lin < prev:
            raise TensorFormatError(path, ln, f"index {tuple(idx)} is out of ascending order")
        prev = lin
    return SparseTensor(shape, indices - 1, values)


def read_tensor(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except UnicodeDecodeError:
        raise TensorFormatError(path, None, "file is not ASCII text") from None
    return parse_tensor(text, path)


def write_mask(omega: ObservationMask, path) -> None:
    """Store a mask as a sparse NNTC tensor of ones."""
    write_tensor(SparseTensor(omega.shape, omega.indices, np.ones(len(omega))), path, "sparse")


def read_mask(path) -> ObservationMask:
    """Mask from a sparse file (its support) or a dense file (its nonzeros)."""
    t = read_tensor(path)
    if isinstance(t, SparseTensor):
        return t.support()
    return ObservationMask.from_linear(t.shape, np.flatnonzero(t.reshape(-1)))


# -- portable graymap / pixmap ----------------------------------------------

_PNM_MAGIC = {b"P2": (1, False), b"P5": (1, True), b"P3": (3, False), b"P6": (3, True)}


def _pnm_tokens(data: bytes, count: int, pos: int, path):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    toks = []
    n = len(data)
    while len(toks) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TensorFormatError(path, None, "truncated image header")
        toks.append(data[start:pos])
    return toks, pos


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Decode a P2/P3/P5/P6 file into ``(samples, maxval)``.

    ``samples`` is ``height x width`` for graymaps and ``height x width x 3``
    for pixmaps, as unsigned integers.
    """
    path = Path(path)
    data = path.read_bytes()
    magic = data[:2]
    if magic not in _PNM_MAGIC:
        raise TensorFormatError(path, 1, f"unsupported image format {magic!r}")
    channels, binary = _PNM_MAGIC[magic]
    toks, pos = _pnm_tokens(data, 3, 2, path)
    try:
        width, height, maxval = (int(t) for t in toks)
    except ValueError:
        raise TensorFormatError(path, None, "non-numeric image header") from None
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise TensorFormatError(path, None, f"invalid image header {width}x{height}, maxval {maxval}")
    count = width * height * channels
    if binary:
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos:pos + count * dtype.itemsize]
        if len(raw) != count * dtype.itemsize:
            raise TensorFormatError(path, None, "truncated image payload")
        samples = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    else:
        body = data[pos:]
        vals = []
        for ln_tok in body.split():
            try:
                vals.append(int(ln_tok))
            except ValueError:
                raise TensorFormatError(path, None, f"bad sample {ln_tok!r}") from None
        if len(vals) != count:
            raise TensorFormatError(path, None, f"expected {count} samples, found {len(vals)}")
        samples = np.array(vals, dtype=np.int64)
    if np.any(samples > maxval) or np.any(samples < 0):
        raise TensorFormatError(path, None, f"sample exceeds maxval {maxval}")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return samples.reshape(shape), maxval


def format_pnm(samples, maxval: int = 255, binary: bool = True) -> bytes:
    samples = np.asarray(samples)
    if samples.ndim == 2:
        magic = b"P5" if binary else b"P2"
    elif samples.ndim == 3 and samples.shape[2] == 3:
        magic = b"P6" if binary else b"P3"
    else:
        raise ValueError(f"expected HxW or HxWx3 samples, got shape {samples.shape}")
    if not 1 <= maxval <= 65535:
        raise ValueError("maxval must lie in 1..65535")
    s = np.asarray(samples, dtype=np.int64)
    if np.any(s < 0) or np.any(s > maxval):
        raise ValueError("samples outside 0..maxval")
    height, width = s.shape[:2]
    head = magic + f"\n{width} {height}\n{maxval}\n".encode("ascii")
    if binary:
        return head + s.astype(">u2" if maxval > 255 else "u1").tobytes()
    rows = ("\n".join(" ".join(map(str, r)) for r in s.reshape(height, -1)) + "\n").encode("ascii")
    return head + rows


def write_pnm(path, samples, maxval: int = 255, binary: bool = True) -> None:
    atomic_write(path, format_pnm(samples, maxval, binary))


def import_image_stack(paths) -> np.ndarray:
    """Stack graymap frames along mode 3, or load one pixmap as ``H x W x 3``.

    Samples are divided by each file's maxval.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("no image files given")
    frames = []
    for p in paths:
        s, maxval = read_pnm(p)
        frames.append((p, s.astype(np.float64) / maxval))
    color = [f.ndim == 3 for _, f in frames]
    if any(color):
        if len(frames) != 1:
            raise TensorFormatError(paths[0], None, "color stacks are not supported; pass one pixmap")
        return frames[0][1]
    first = frames[0][1].shape
    for p, f in frames[1:]:
        if f.shape != first:
            raise TensorFormatError(p, None, f"frame size {f.shape} differs from {first}")
    return np.stack([f for _, f in frames], axis=2)


def quantize(t, maxval: int = 255) -> np.ndarray:
    """Clamp to [0, 1] and round to integer levels."""
    return np.rint(np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) * maxval).astype(np.int64)


def export_slices(t, mode: int, out_dir, model: CompletionModel | None = None,
                  prefix: str = "slice") -> list[Path]:
    """Write one graymap per slice of ``t`` along ``mode``.

    With ``model``, the K components of the reconstruction are written too,
    as ``comp<k>_<prefix>_<i>.pgm``. Returns the written paths.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"export_slices needs an order-3 tensor, got order {t.ndim}")
    if not 0 <= mode < 3:
        raise ValueError(f"mode {mode} out of range")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def dump(x, stem):
        for i in range(x.shape[mode]):
            p = out_dir / f"{stem}_{i:03d}.pgm"
            write_pnm(p, quantize(np.take(x, i, axis=mode)))
            written.append(p)

    dump(t, prefix)
    if model is not None:
        from .outer_solver import components
        for k, w in enumerate(components(model)):
            dump(w, f"comp{k + 1}_{prefix}")
    return written


def export_color(t, path) -> None:
    """Write an ``H x W x 3`` tensor as a binary pixmap."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or t.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 tensor, got shape {t.shape}")
    write_pnm(path, quantize(t))


# -- models and reports -----------------------------------------------------

def model_to_json(m: CompletionModel) -> str:
    doc = {
        "format": "nntc-model",
        "version": 1,
        "shape": list(m.shape),
        "lam": [float(v) for v in m.lam],
        "c": float(m.c),
        "u": [u.tolist() for u in m.u],
        "z_indices": m.dual.z.indices.tolist(),
        "z_values": m.dual.z.values.tolist(),
        "s": m.dual.s.reshape(-1).tolist(),
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def model_from_json(text: str) -> CompletionModel:
    doc = json.loads(text)
    if doc.get("format") != "nntc-model" or doc.get("version") != 1:
        raise ValueError("not an nntc-model version 1 document")
    shape = tuple(doc["shape"])
    z = SparseTensor(shape, np.asarray(doc["z_indices"], dtype=np.int64).reshape(-1, len(shape)),
                     doc["z_values"])
    s = np.asarray(doc["s"], dtype=np.float64).reshape(shape)
    u = tuple(np.asarray(x, dtype=np.float64).reshape(n, -1) for x, n in zip(doc["u"], shape))
    return CompletionModel(u, DualPair(z, s), tuple(doc["lam"]), float(doc["c"]), shape)


def write_model(m: CompletionModel, path) -> None:
    atomic_write(path, model_to_json(m))


def read_model(path) -> CompletionModel:
    return model_from_json(Path(path).read_text(encoding="ascii"))


def format_report(trace: list[IterationRecord]) -> str:
    """CSV with one row per accepted outer iteration; empty rmse when unknown."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    last = 0
    for rec in trace:
        if rec.iteration <= last:
            raise ValueError("report iterations must be strictly increasing")
        last = rec.iteration
        w.writerow([rec.iteration, _fmt(rec.cost), _fmt(rec.grad_norm), _fmt(rec.step),
                    rec.cg_iters, rec.nnls_iters, _fmt(rec.elapsed),
                    "" if rec.rmse is None else _fmt(rec.rmse)])
    return buf.getvalue()


def write_report(trace: list[IterationRecord], path) -> None:
    atomic_write(path, format_report(trace))


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="ascii") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != REPORT_COLUMNS:
        raise TensorFormatError(path, 1, "unexpected report header")
    return rows

"""Similarity scoring, empirical CDFs and report files."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

DOMINANCE_THRESHOLDS = (0.8, 0.9, 0.95, 0.99)
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def cosine_similarity(a, b, *, return_flag: bool = False):
    """``<a, b> / (|a| |b|)``, clamped to [-1, 1].

    Returns 0 when either norm is below 1e-15; with ``return_flag`` the
    result is ``(value, degenerate)``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-15 or nb < 1e-15:
        return (0.0, True) if return_flag else 0.0
    value = float(min(1.0, max(-1.0, (a @ b) / (na * nb))))
    return (value, False) if return_flag else value


@dataclass
class SimilarityRecord:
    index: int
    method: str
    cosine: float
    true_label: float | int | None = None
    predicted_label: int | None = None
    label_correct: bool | None = None
    scale: float | None = None
    inversion_residual: float | None = None
    embedding_cosine: float | None = None
    flags: list[str] = field(default_factory=list)
    config_digest: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> SimilarityRecord:
        return cls(**json.loads(line))


@dataclass(frozen=True)
class CdfCurve:
    method: str
    values: np.ndarray
    fractions: np.ndarray

    def at(self, tau: float) -> float:
        """Fraction of samples with similarity ``<= tau``."""
        i = np.searchsorted(self.values, tau, side="right")
        return 0.0 if i == 0 else float(self.fractions[i - 1])

    def equals(self, other: CdfCurve) -> bool:
        return (self.method == other.method and np.array_equal(self.values, other.values)
                and np.array_equal(self.fractions, other.fractions))


def build_cdf(records_or_values: Iterable, method: str | None = None) -> CdfCurve:
    """Empirical CDF; tied values collapse onto one point with the higher fraction."""
    items = list(records_or_values)
    if not items:
        raise ValueError("cannot build a CDF from no samples")
    if isinstance(items[0], SimilarityRecord):
        method = method or items[0].method
        vals = np.array([r.cosine for r in items], dtype=np.float64)
    else:
        vals = np.asarray(items, dtype=np.float64)
    vals = np.sort(vals, kind="stable")
    n = len(vals)
    fractions = np.arange(1, n + 1) / n
    last = np.append(vals[1:] != vals[:-1], True)
    return CdfCurve(method or "", vals[last], fractions[last])


def dominance_check(better: CdfCurve, worse: CdfCurve, tau: float) -> bool:
    """True when ``better`` has no larger fraction of samples at or below ``tau``."""
    return better.at(tau) <= worse.at(tau)


def fraction_at_least(records: Sequence[SimilarityRecord], threshold: float) -> float:
    return float(np.mean([r.cosine >= threshold for r in records]))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def cdf_to_csv(curve: CdfCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["similarity", "fraction"])
    for v, f in zip(curve.values, curve.fractions):
        w.writerow([format(float(v), ".17g"), format(float(f), ".17g")])
    return buf.getvalue()


def read_cdf_csv(path: str | Path, method: str = "") -> CdfCurve:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["similarity", "fraction"]:
        raise ValueError(f"{path}: unexpected CDF header {rows[0]}")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=np.float64).reshape(-1, 2)
    return CdfCurve(method, data[:, 0], data[:, 1])


def cdf_svg(curves: Sequence[CdfCurve], config_digest: str = "", title: str = "") -> str:
    """Static SVG with one CDF step-polyline per method on [-1, 1] x [0, 1]."""
    W, H, L, R, T, B = 640, 420, 60, 170, 30, 50
    pw, ph = W - L - R, H - T - B

    def px(v):
        return L + (v + 1.0) / 2.0 * pw

    def py(f):
        return T + (1.0 - f) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<metadata>config-digest: {escape(config_digest)}</metadata>",
        f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
    ]
    for tick in (-1.0, -0.5, 0.0, 0.5, 1.0):
        x = px(tick)
        out.append(f'<line x1="{x:.2f}" y1="{T + ph}" x2="{x:.2f}" y2="{T + ph + 5}" stroke="#000"/>')
        out.append(f'<text x="{x:.2f}" y="{T + ph + 18}" font-size="11" text-anchor="middle">{tick:g}</text>')
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(tick)
        out.append(f'<line x1="{L - 5}" y1="{y:.2f}" x2="{L}" y2="{y:.2f}" stroke="#000"/>')
        out.append(f'<text x="{L - 8}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{tick:g}</text>')
    out.append(f'<text x="{L + pw / 2:.2f}" y="{H - 12}" font-size="12" text-anchor="middle">cosine similarity</text>')
    out.append(f'<text x="16" y="{T + ph / 2:.2f}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 16 {T + ph / 2:.2f})">CDF</text>')
    if title:
        out.append(f'<text x="{L + pw / 2:.2f}" y="18" font-size="13" text-anchor="middle">{escape(title)}</text>')

    for i, curve in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(px(-1.0), py(0.0))]
        prev = 0.0
        for v, f in zip(curve.values, curve.fractions):
            v = min(1.0, max(-1.0, float(v)))
            pts.append((px(v), py(prev)))
            pts.append((px(v), py(float(f))))
            prev = float(f)
        pts.append((px(1.0), py(prev)))
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = T + 16 + 18 * i
        out.append(f'<line x1="{W - R + 12}" y1="{ly}" x2="{W - R + 36}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 42}" y="{ly + 4}" font-size="12">{escape(curve.method)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _atomic_write(files: dict[Path, bytes]) -> None:
    """Write all files via temporaries, renaming only once every write succeeded."""
    staged = []
    try:
        for path, data in files.items():
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
            staged.append((tmp, path))
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


def order_records(records: Iterable[SimilarityRecord], methods: Sequence[str]) -> list[SimilarityRecord]:
    rank = {m: i for i, m in enumerate(methods)}
    return sorted(records, key=lambda r: (r.index, rank.get(r.method, len(rank)), r.method))


def emit_report(records: Sequence[SimilarityRecord], out_dir: str | Path, config_digest: str = "",
                methods: Sequence[str] | None = None, title: str = "") -> dict[str, CdfCurve]:
    """Write ``records.jsonl``, ``cdf_<method>.csv`` and ``cdf.svg``.

    Nothing is written if the record set is empty or inconsistent.
    """
    out_dir = Path(out_dir)
    if methods is None:
        methods = sorted({r.method for r in records})
    if not records or not methods:
        raise ValueError("no records to report")
    seen = set()
    for r in records:
        key = (r.method, r.index)
        if key in seen:
            raise ValueError(f"duplicate record for method {r.method!r}, deletion {r.index}")
        seen.add(key)
    by_method = {m: [r for r in records if r.method == m] for m in methods}
    empty = [m for m, rs in by_method.items() if not rs]
    if empty:
        raise ValueError(f"no records for methods {empty}")
    if not out_dir.is_dir():
        out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")

    curves = {m: build_cdf(rs, m) for m, rs in by_method.items()}
    ordered = order_records(records, methods)
    if config_digest:
        ordered = [replace(r, config_digest=config_digest) for r in ordered]
    files = {out_dir / "records.jsonl": "".join(r.to_json() + "\n" for r in ordered).encode()}
    for m, c in curves.items():
        files[out_dir / f"cdf_{m}.csv"] = cdf_to_csv(c).encode()
    files[out_dir / "cdf.svg"] = cdf_svg(list(curves.values()), config_digest, title).encode()
    _atomic_write(files)
    return curves


def read_records(path: str | Path) -> list[SimilarityRecord]:
    with Path(path).open() as fh:
        return [SimilarityRecord.from_json(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# Image montages
# --------------------------------------------------------------------------


def to_bytes_image(x: np.ndarray, scaling) -> np.ndarray:
    """Map normalized features back to 0..255 pixel bytes."""
    raw = scaling.inverse(np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0))
    return np.clip(np.rint(raw), 0, 255).astype(np.uint8)


def montage_grid(rows: Sequence[Sequence[np.ndarray | None]], image_shape: tuple[int, int, int],
                 pad: int = 2) -> np.ndarray:
    """Tile byte images (``None`` leaves a blank cell) into one ``(H, W, C)`` array."""
    h, w, c = image_shape
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    grid = np.full((n_rows * (h + pad) + pad, n_cols * (w + pad) + pad, c), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            if img is None:
                continue
            y0, x0 = pad + i * (h + pad), pad + j * (w + pad)
            grid[y0:y0 + h, x0:x0 + w] = np.asarray(img, dtype=np.uint8).reshape(h, w, c)
    return grid


def write_pnm(image: np.ndarray, path: str | Path, comment: str = "") -> None:
    """Binary PGM (P5) for one channel, PPM (P6) for three."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    c = 1 if image.ndim == 2 else image.shape[2]
    if c not in (1, 3):
        raise ValueError("PNM output needs 1 or 3 channels")
    magic = b"P5" if c == 1 else b"P6"
    note = f"\n# {comment}" if comment else ""
    Path(path).write_bytes(magic + f"{note}\n{w} {h}\n255\n".encode() + image.tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, rest = raw.split(b"\n", 1)
    while rest.startswith(b"#"):
        rest = rest.split(b"\n", 1)[1]
    dims, maxval, rest = rest.split(b"\n", 2)
    w, h = map(int, dims.split())
    if int(maxval) != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM")
    c = 1 if magic == b"P5" else 3
    img = np.frombuffer(rest, dtype=np.uint8, count=h * w * c)
    return img.reshape(h, w) if c == 1 else img.reshape(h, w, 3)


def finite_or_none(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None

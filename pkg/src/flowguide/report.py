"""Deterministic CSV / JSON / SVG writers (atomic: temp file + rename)."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        os.fchmod(fd, 0o666 & ~_umask())
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, blob):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        os.fchmod(fd, 0o666 & ~_umask())
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(path, payload):
    atomic_write_text(path, json.dumps(jsonable(payload), indent=2, sort_keys=True) + "\n")


def trajectory_rows(traj):
    states = traj.states
    if states.ndim == 2:
        for t, x in zip(traj.times, states):
            yield [t] + list(x)
    else:
        for t, xs in zip(traj.times, states):
            for j, x in enumerate(xs):
                yield [t, j] + list(x)


def write_trajectory(path, traj):
    d = traj.states.shape[-1]
    header = ["t"] + (["sample"] if traj.states.ndim == 3 else []) + [f"x{i}" for i in range(d)]
    write_csv(path, header, trajectory_rows(traj))


# ---------------------------------------------------------------------------
# minimal SVG

_W, _H, _PAD = 480, 360, 50


def _frame(title, xlabel, ylabel):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">',
        f'<rect x="{_PAD}" y="{_PAD // 2}" width="{_W - 1.5 * _PAD:.0f}" height="{_H - 1.5 * _PAD:.0f}" fill="none" stroke="#444"/>',
        f'<text x="{_W / 2:.0f}" y="15" text-anchor="middle">{title}</text>',
        f'<text x="{_W / 2:.0f}" y="{_H - 8}" text-anchor="middle">{xlabel}</text>',
        f'<text x="12" y="{_H / 2:.0f}" transform="rotate(-90 12 {_H / 2:.0f})" text-anchor="middle">{ylabel}</text>',
    ]


def _scaler(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def loglog_svg(path, hs, errors, title="", xlabel="h", ylabel="error", reference_slope=None):
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = (hs > 0) & (errors > 0)
    lx, ly = np.log10(hs[keep]), np.log10(errors[keep])
    parts = _frame(title, f"log10 {xlabel}", f"log10 {ylabel}")
    if lx.size:
        sx = _scaler(lx.min(), lx.max(), _PAD + 10, _W - _PAD / 2 - 10)
        sy = _scaler(ly.min(), ly.max(), _H - _PAD - 10, _PAD / 2 + 10)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(lx, ly))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
        for a, b in zip(lx, ly):
            parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="#1f77b4"/>')
        if reference_slope is not None:
            i = int(np.argmax(lx))
            y0 = ly[i] + reference_slope * (lx.min() - lx[i])
            parts.append(
                f'<line x1="{sx(lx.min()):.2f}" y1="{sy(y0):.2f}" x2="{sx(lx[i]):.2f}" y2="{sy(ly[i]):.2f}" '
                f'stroke="#999" stroke-dasharray="4 3"/>'
            )
        parts.append(f'<text x="{_PAD + 4}" y="{_H - _PAD - 2}">[{lx.min():.2f}, {lx.max():.2f}] x [{ly.min():.2f}, {ly.max():.2f}]</text>')
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")


def scatter_svg(path, points, title="", marks=()):
    """2-D scatter of terminal samples; ``marks`` are highlighted points (e.g. targets)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))[:, :2]
    allp = np.vstack([pts] + [np.atleast_2d(m)[:, :2] for m in marks]) if len(marks) else pts
    parts = _frame(title, "x0", "x1")
    sx = _scaler(allp[:, 0].min(), allp[:, 0].max(), _PAD + 10, _W - _PAD / 2 - 10)
    sy = _scaler(allp[:, 1].min(), allp[:, 1].max(), _H - _PAD - 10, _PAD / 2 + 10)
    for x, y in pts:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2" fill="#1f77b4" fill-opacity="0.6"/>')
    for m in marks:
        for x, y in np.atleast_2d(m)[:, :2]:
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="5" fill="none" stroke="#d62728" stroke-width="2"/>')
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")

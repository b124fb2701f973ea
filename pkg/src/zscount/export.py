"""Plain-text map exports: PGM ``P2`` snapshots and row-major CSV."""

from __future__ import annotations

from pathlib import Path

import numpy as np

PGM_MAXVAL = 65535


def to_pgm_levels(values: np.ndarray) -> np.ndarray:
    """Min-max scale to ``0..65535`` and round half up; constant maps become 0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.int64)
    return np.floor((v - lo) / (hi - lo) * PGM_MAXVAL + 0.5).astype(np.int64)


def write_pgm(values: np.ndarray, path: str | Path) -> None:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM export needs a 2-d map, got shape {v.shape}")
    levels = to_pgm_levels(v)
    h, w = v.shape
    lines = ["P2", f"{w} {h}", str(PGM_MAXVAL)]
    lines += [" ".join(str(x) for x in row) for row in levels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM (P2) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != w * h or data.max(initial=0) > maxval:
        raise ValueError(f"{path}: pixel payload does not match header")
    return data.reshape(h, w)


def write_csv(values: np.ndarray, path: str | Path) -> None:
    """Row-major CSV, 9 significant digits."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[None]
    if v.ndim != 2:
        raise ValueError(f"CSV export needs a 1- or 2-d map, got shape {v.shape}")
    rows = [",".join(f"{x:.9g}" for x in row) for row in v]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_csv(path: str | Path) -> np.ndarray:
    rows = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    return np.array([[float(x) for x in row.split(",")] for row in rows], dtype=np.float64)


def equal_to_sig_digits(a: np.ndarray, b: np.ndarray, digits: int = 9) -> bool:
    """True when every pair agrees after rounding to ``digits`` significant digits."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        return False
    return all(float(f"{x:.{digits}g}") == float(f"{y:.{digits}g}") for x, y in zip(a, b))

"""R-D curve assembly and deterministic CSV / plain-text tables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

FORMATS = ("csv", "text")


@dataclass(frozen=True)
class RdPoint:
    lambda_id: int
    bpp: float
    psnr_db: float
    msssim_db: float
    digest: str = ""
    order: int = 0  # production order; later points replace earlier ones with the same lambda

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if not (math.isfinite(self.bpp) and math.isfinite(self.psnr_db) and math.isfinite(self.msssim_db)):
            raise ValueError("R-D point metrics must be finite")


@dataclass
class RdCurve:
    points: list[RdPoint]
    flags: list[bool]  # flags[i]: segment from point i to i+1 loses quality as rate grows

    @property
    def num_flags(self) -> int:
        return sum(self.flags)

    @property
    def monotone(self) -> bool:
        return not any(self.flags)


def assemble_curve(points: Sequence[RdPoint], metric: str = "psnr_db") -> RdCurve:
    """Sort by bpp, keep the latest point per lambda, and flag non-increasing quality segments."""
    if len(points) < 2:
        raise ValueError(f"an R-D curve needs at least 2 points, got {len(points)}")
    latest: dict[int, RdPoint] = {}
    for p in points:
        prev = latest.get(p.lambda_id)
        if prev is None or p.order >= prev.order:
            latest[p.lambda_id] = p
    ordered = sorted(latest.values(), key=lambda p: (p.bpp, p.lambda_id))
    flags = [getattr(b, metric) <= getattr(a, metric) for a, b in zip(ordered, ordered[1:])]
    return RdCurve(ordered, flags)


def _cell(v, exact: bool) -> str:
    # csv cells round-trip exactly; text cells are for reading
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v) if exact else f"{v:.6f}"
    return str(v)


def render_table(rows: Sequence[Mapping], fmt: str = "csv", columns: Sequence[str] | None = None) -> bytes:
    """Render dict rows with a header line; output depends only on the inputs.

    ``columns`` fixes the column order (required to print a header for an
    empty table); otherwise the first row's key order is used.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown table format {fmt!r}; expected one of {FORMATS}")
    cols = list(columns) if columns is not None else (list(rows[0].keys()) if rows else [])
    body = [[_cell(r.get(c, ""), fmt == "csv") for c in cols] for r in rows]
    if fmt == "csv":
        lines = [",".join(cols)] + [",".join(r) for r in body]
    else:
        widths = [max([len(c)] + [len(r[i]) for r in body]) for i, c in enumerate(cols)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths)).rstrip()]
        lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)).rstrip() for r in body]
    return ("\n".join(lines) + "\n").encode("ascii") if cols else b""


def mean_row(rows: Sequence[Mapping], label_key: str, label: str = "mean") -> dict:
    """Arithmetic mean of every numeric column, with ``label`` in the label column."""
    if not rows:
        raise ValueError("cannot average zero rows")
    out: dict = {}
    for key in rows[0]:
        if key == label_key:
            out[key] = label
            continue
        vals = [r[key] for r in rows]
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            out[key] = sum(float(v) for v in vals) / len(vals)
        else:
            out[key] = ""
    return out

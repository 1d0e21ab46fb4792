"""PSNR, bits per point, Bjontegaard deltas and RD report files."""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 100.0
BD_BR_FLAG = 999.0


@dataclass
class RDPoint:
    bpp: float
    psnr_y: float
    psnr_yuv: float
    name: str = ""
    lam: float = float("nan")

    def __post_init__(self):
        if self.bpp < 0:
            raise ValueError(f"bpp must be >= 0, got {self.bpp}")


@dataclass
class RDCurve:
    label: str
    points: list = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)

    def rates(self):
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    def psnrs(self, metric: str = "psnr_y"):
        return np.array([getattr(p, metric) for p in self.points], dtype=np.float64)


def _mse_to_psnr(mse: float, peak: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    return _mse_to_psnr(float(np.mean((a - b) ** 2)), peak)


def psnr_yuv(orig, rec, peak: float = 1.0) -> float:
    """Composite PSNR with luma weighted 6:1:1 against the two chroma channels."""
    orig = np.asarray(orig, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if orig.shape != rec.shape:
        raise ValueError(f"length mismatch {orig.shape} vs {rec.shape}")
    mse = ((orig - rec) ** 2).mean(axis=0)
    return _mse_to_psnr(float((6 * mse[0] + mse[1] + mse[2]) / 8), peak)


def bpp(stream: bytes, n_points: int) -> float:
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    return 8.0 * len(stream) / n_points


# ---------------------------------------------------------------------------
# Bjontegaard


def _fit_integral(x, y, lo, hi):
    deg = min(3, len(x) - 1)
    poly = np.polyint(np.polyfit(x, y, deg))
    return np.polyval(poly, hi) - np.polyval(poly, lo)


def _check(curve: RDCurve):
    if len(curve.points) < 2:
        raise ValueError(f"curve {curve.label!r} needs at least 2 points")
    r = curve.rates()
    if (np.diff(r) <= 0).any() or (r <= 0).any():
        raise ValueError(f"curve {curve.label!r} needs strictly increasing positive rates")


def bd_psnr(anchor: RDCurve, test: RDCurve, metric: str = "psnr_y") -> float:
    """Average quality gain of ``test`` over ``anchor`` across the shared log-rate range."""
    _check(anchor)
    _check(test)
    la, lt = np.log10(anchor.rates()), np.log10(test.rates())
    lo, hi = max(la.min(), lt.min()), min(la.max(), lt.max())
    if lo >= hi:
        raise ValueError("disjoint RD ranges")
    ia = _fit_integral(la, anchor.psnrs(metric), lo, hi)
    it = _fit_integral(lt, test.psnrs(metric), lo, hi)
    return float((it - ia) / (hi - lo))


def bd_rate(anchor: RDCurve, test: RDCurve, metric: str = "psnr_y") -> float:
    """Average rate change of ``test`` vs ``anchor`` in percent at equal quality."""
    _check(anchor)
    _check(test)
    qa, qt = anchor.psnrs(metric), test.psnrs(metric)
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    if lo >= hi:
        raise ValueError("disjoint RD ranges")
    ia = _fit_integral(qa, np.log10(anchor.rates()), lo, hi)
    it = _fit_integral(qt, np.log10(test.rates()), lo, hi)
    return float((10 ** ((it - ia) / (hi - lo)) - 1) * 100)


def bd_metrics(anchor: RDCurve, test: RDCurve, metric: str = "psnr_y") -> tuple[float, float]:
    return bd_rate(anchor, test, metric), bd_psnr(anchor, test, metric)


def bd_rate_abnormal(value: float) -> bool:
    return abs(value) > BD_BR_FLAG


# ---------------------------------------------------------------------------
# report files

CSV_FIELDS = ["name", "lambda", "bpp", "psnr_y", "psnr_yuv"]


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label).strip("_") or "curve"


def write_curve_csv(curve: RDCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for p in curve.points:
            w.writerow([p.name or curve.label, repr(float(p.lam)), repr(float(p.bpp)),
                        repr(float(p.psnr_y)), repr(float(p.psnr_yuv))])


def read_curve_csv(path, label: str | None = None) -> RDCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    pts = [
        RDPoint(float(r["bpp"]), float(r["psnr_y"]), float(r["psnr_yuv"]), r["name"], float(r["lambda"]))
        for r in rows
    ]
    if label is None:
        label = pts[0].name if pts else os.path.splitext(os.path.basename(path))[0]
    return RDCurve(label, pts)


def rd_report(curves, out_dir, title: str = "rd") -> list[str]:
    """Write one CSV per curve and one Y-PSNR plot; returns the file paths."""
    if not curves:
        raise ValueError("rd_report needs at least one curve")
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for c in curves:
        path = os.path.join(out_dir, f"{_slug(c.label)}.csv")
        write_curve_csv(c, path)
        files.append(path)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for c in curves:
        ax.plot(c.rates(), c.psnrs(), marker="o", label=c.label)
    ax.set_xlabel("bpp")
    ax.set_ylabel("Y-PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    plot = os.path.join(out_dir, f"{_slug(title)}.png")
    fig.savefig(plot, dpi=100, metadata={"Software": None})
    plt.close(fig)
    files.append(plot)
    return files

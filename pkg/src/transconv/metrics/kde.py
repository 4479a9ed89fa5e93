"""Gaussian KDE of pooled values and the real/synthetic overlay artifacts."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..errors import DataError


def silverman_bandwidth(values: np.ndarray) -> float:
    x = np.asarray(values, dtype=np.float64).ravel()
    n = x.size
    sd = x.std(ddof=1) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    if spread <= 0:
        spread = max(abs(float(x.mean())), 1.0) * 1e-3
    return 0.9 * spread * n ** (-0.2)


def binned_kde(values, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gaussian KDE evaluated on an equispaced ``grid`` via linear binning."""
    x = np.asarray(values, dtype=np.float64).ravel()
    dx = grid[1] - grid[0]
    pos = (x - grid[0]) / dx
    lo = np.clip(np.floor(pos).astype(np.int64), 0, grid.size - 2)
    frac = np.clip(pos - lo, 0.0, 1.0)
    counts = np.bincount(lo, weights=1.0 - frac, minlength=grid.size)
    counts += np.bincount(lo + 1, weights=frac, minlength=grid.size)
    reach = int(np.ceil(5.0 * bandwidth / dx))
    offsets = np.arange(-reach, reach + 1) * dx
    kernel = np.exp(-0.5 * (offsets / bandwidth) ** 2) / (bandwidth * np.sqrt(2 * np.pi))
    return np.convolve(counts, kernel)[reach:reach + grid.size] / x.size


def kde_curves(real, synth, points: int = 512) -> tuple:
    """``(grid, real_density, synth_density)`` on a shared grid."""
    a = np.asarray(real, dtype=np.float64).ravel()
    b = np.asarray(synth, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise DataError("KDE of an empty batch")
    ha, hb = silverman_bandwidth(a), silverman_bandwidth(b)
    pad = 3.0 * max(ha, hb)
    grid = np.linspace(min(a.min(), b.min()) - pad, max(a.max(), b.max()) + pad, points)
    return grid, binned_kde(a, grid, ha), binned_kde(b, grid, hb)


def _write_curve(path: Path, grid, density) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "density"])
        w.writerows([f"{g:.9g}", f"{d:.9g}"] for g, d in zip(grid, density))


def emit_kde(real, synth, out_path, title: str = "") -> dict:
    """Write ``<stem>_real.csv``, ``<stem>_synth.csv`` and ``<stem>.svg``; returns their paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_path)
    stem = out.with_suffix("") if out.suffix else out
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        grid, dr, ds = kde_curves(real, synth)
        paths = {"real": Path(f"{stem}_real.csv"), "synth": Path(f"{stem}_synth.csv"), "svg": Path(f"{stem}.svg")}
        _write_curve(paths["real"], grid, dr)
        _write_curve(paths["synth"], grid, ds)
        with matplotlib.rc_context({"svg.hashsalt": "kde", "svg.fonttype": "none"}):
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.plot(grid, dr, color="tab:blue", label="real")
            ax.plot(grid, ds, color="tab:orange", label="synthetic")
            ax.fill_between(grid, np.minimum(dr, ds), color="tab:green", alpha=0.3, label="overlap")
            ax.set_xlabel("value")
            ax.set_ylabel("density")
            if title:
                ax.set_title(title)
            ax.legend()
            fig.tight_layout()
            fig.savefig(paths["svg"], format="svg", metadata={"Date": None})
            plt.close(fig)
    except OSError as exc:
        raise DataError(f"cannot write KDE artifact: {exc.strerror}", path=exc.filename or out) from exc
    return paths

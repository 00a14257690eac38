"""Render the experiment runner's CSV outputs into figures.

Five figure kinds, one per diagnostic family:

  picard-decay       picard.csv          log-scale decay of the fixed-point
                                         increments Delta_m
  density-histogram  density.csv + paths.csv
                                         series density against a terminal-
                                         position histogram
  series-orders      density.csv         per-order contributions and their
                                         maxima against the order k
  exponent-fit       scan.csv            log-log scatter with the regression
                                         line, slope re-fitted from the raw
                                         columns (must match the stored fit)
  constants-envelope constants.csv       C_k against the closed-form
                                         envelope, with their ratio inset

The layer couples to the simulation package only through these files.
Figures are written as both PNG and SVG with deterministic metadata.
"""

from dataclasses import dataclass, field
import os

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "mckean-plots"
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

EXPECTED_HEADERS = {
    "picard-decay": {"picard": ["iteration", "increment", "w2_gap"]},
    "density-histogram": {
        "density": ["k", "s_prime", "y_prime", "s", "y", "value"],
        "paths": ["particle", "time", "x0"],
    },
    "series-orders": {"density": ["k", "s_prime", "y_prime", "s", "y", "value"]},
    "exponent-fit": {"scan": ["log_dt", "log_mag", "slope", "intercept",
                              "r_squared"]},
    "constants-envelope": {"constants": ["k", "value", "asymptotic"]},
}

FIGURE_KINDS = tuple(sorted(EXPECTED_HEADERS))


class SchemaError(ValueError):
    """Input CSV is missing or does not carry the expected columns."""


@dataclass(frozen=True)
class FigureSpec:
    """What to draw, from which CSV files, into which image stem.

    ``inputs`` maps input roles (see EXPECTED_HEADERS) to CSV paths;
    ``out`` is the output path without extension: both ``out``.png and
    ``out``.svg are written.
    """

    kind: str
    inputs: dict = field(default_factory=dict)
    out: str = "figure"

    def __post_init__(self):
        if self.kind not in EXPECTED_HEADERS:
            raise SchemaError(
                f"unknown figure kind {self.kind!r}; choose from {FIGURE_KINDS}")


def read_csv(path, role, kind):
    want = EXPECTED_HEADERS[kind][role]
    if not os.path.exists(path):
        raise SchemaError(f"{kind}: missing input file {path}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if header[:len(want)] != want:
        raise SchemaError(
            f"{kind}: {path} carries columns {header}, expected {want}")
    data = np.array([[float(v) for v in row] for row in rows])
    if data.size == 0:
        raise SchemaError(f"{kind}: {path} has no data rows")
    return {name: data[:, i] for i, name in enumerate(header)}


def refit_scan(path):
    """Re-fit the scan's log-log slope from the raw columns.

    Returns (stored, refit) pairs for slope and intercept; the renderer
    annotates both and the stored fit must match the re-fit.
    """
    cols = read_csv(path, "scan", "exponent-fit")
    slope, intercept = np.polyfit(cols["log_dt"], cols["log_mag"], 1)
    return {"slope_stored": float(cols["slope"][0]),
            "slope_refit": float(slope),
            "intercept_stored": float(cols["intercept"][0]),
            "intercept_refit": float(intercept),
            "r_squared_stored": float(cols["r_squared"][0])}


def _save(fig, out):
    os.makedirs(os.path.dirname(os.path.abspath(out)) or ".", exist_ok=True)
    png = out + ".png"
    svg = out + ".svg"
    fig.savefig(png, dpi=150)
    fig.savefig(svg, metadata={"Date": None})
    plt.close(fig)
    return [png, svg]


def _render_picard_decay(spec):
    cols = read_csv(spec.inputs["picard"], "picard", spec.kind)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(cols["iteration"], cols["increment"], "o-",
                label=r"$\Delta_m$")
    finite_w2 = np.isfinite(cols["w2_gap"]) & (cols["w2_gap"] > 0)
    if np.any(finite_w2):
        ax.semilogy(cols["iteration"][finite_w2], cols["w2_gap"][finite_w2],
                    "s--", label=r"$\max_t W_2(\mu_t^m, \mu_t^{m+1})$")
    ax.set_xlabel("iteration $m$")
    ax.set_ylabel(r"$\Delta_m$")
    ax.set_title("fixed-point increments")
    ax.legend()
    return _save(fig, spec.out)


def _density_orders(cols):
    ks = np.unique(cols["k"]).astype(int)
    ys = np.unique(cols["y"])
    table = {}
    for k in ks:
        mask = cols["k"] == k
        order = np.argsort(cols["y"][mask])
        table[k] = (cols["y"][mask][order], cols["value"][mask][order])
    return ks, ys, table


def _render_density_histogram(spec):
    cols = read_csv(spec.inputs["density"], "density", spec.kind)
    paths = read_csv(spec.inputs["paths"], "paths", spec.kind)
    ks, _, table = _density_orders(cols)
    y = table[ks[0]][0]
    total = np.sum([table[k][1] for k in ks], axis=0)
    t_final = paths["time"].max()
    terminal = paths["x0"][paths["time"] == t_final]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(terminal, bins=50, range=(y.min(), y.max()), density=True,
            alpha=0.4, label="terminal positions")
    ax.plot(y, total, lw=2, label=f"series, K={ks.max()}")
    ax.set_xlabel("$y$")
    ax.set_ylabel("density")
    ax.set_title(f"density vs simulation at s = {cols['s'][0]:g}")
    ax.legend()
    return _save(fig, spec.out)


def _render_series_orders(spec):
    cols = read_csv(spec.inputs["density"], "density", spec.kind)
    ks, _, table = _density_orders(cols)
    fig, (ax, axk) = plt.subplots(1, 2, figsize=(9, 4),
                                  gridspec_kw={"width_ratios": [2, 1]})
    maxima = []
    for k in ks:
        y, v = table[k]
        mag = np.abs(v)
        maxima.append(mag.max())
        shown = np.where(mag > 0, mag, np.nan)
        ax.semilogy(y, shown, label=f"k={k}")
    ax.set_xlabel("$y$")
    ax.set_ylabel("|per-order contribution|")
    ax.legend()
    axk.semilogy(ks, maxima, "o-")
    axk.set_xlabel("order $k$")
    axk.set_ylabel(r"$\max_y$ |contribution|")
    axk.set_xticks(ks)
    fig.suptitle("series contributions by order")
    fig.tight_layout()
    return _save(fig, spec.out)


def _render_exponent_fit(spec):
    cols = read_csv(spec.inputs["scan"], "scan", spec.kind)
    fit = refit_scan(spec.inputs["scan"])
    x = cols["log_dt"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, cols["log_mag"], "o", label="scan")
    xs = np.linspace(x.min(), x.max(), 50)
    ax.plot(xs, fit["slope_refit"] * xs + fit["intercept_refit"], "-",
            label=(f"slope {fit['slope_refit']:+.3f} "
                   f"(stored {fit['slope_stored']:+.3f}), "
                   f"$r^2$ = {fit['r_squared_stored']:.3f}"))
    ax.set_xlabel(r"$\log (s-t)$")
    ax.set_ylabel(r"$\log \sup_z |\partial_\mu \langle\phi,\mu_s\rangle(z)|$")
    ax.set_title("smoothing-rate exponent fit")
    ax.legend()
    return _save(fig, spec.out)


def _render_constants_envelope(spec):
    cols = read_csv(spec.inputs["constants"], "constants", spec.kind)
    k = cols["k"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(k, cols["value"], "o-", label="$C_k$")
    ok = np.isfinite(cols["asymptotic"])
    ax.semilogy(k[ok], cols["asymptotic"][ok], "s--", label="envelope")
    ax.set_xlabel("$k$")
    ax.set_ylabel("$C_k$")
    ax.set_title("kernel-bound constants")
    ax.legend(loc="upper left")
    if np.any(ok):
        inset = ax.inset_axes([0.55, 0.12, 0.4, 0.3])
        inset.plot(k[ok], cols["value"][ok] / cols["asymptotic"][ok], ".-")
        inset.set_title("ratio", fontsize=8)
        inset.tick_params(labelsize=7)
    return _save(fig, spec.out)


_RENDERERS = {
    "picard-decay": _render_picard_decay,
    "density-histogram": _render_density_histogram,
    "series-orders": _render_series_orders,
    "exponent-fit": _render_exponent_fit,
    "constants-envelope": _render_constants_envelope,
}


def render(spec):
    """Draw the figure described by ``spec``; returns the written paths."""
    needed = set(EXPECTED_HEADERS[spec.kind])
    missing = needed - set(spec.inputs)
    if missing:
        raise SchemaError(f"{spec.kind}: missing inputs {sorted(missing)}")
    return _RENDERERS[spec.kind](spec)

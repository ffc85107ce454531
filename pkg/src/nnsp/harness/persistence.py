"""CSV tables, run manifests and optional SVG plots."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

RNG_SCHEME = ("Philox4x64 via numpy SeedSequence; datasets keyed (dataset seed, stream); "
              "chains keyed (master seed, chain seed, purpose) with purpose 0 = noise, 1 = init")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")  # RFC 4180 line endings
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def content_version():
    """Git-style blob hash over the package sources, in sorted path order."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha1()
    for p in sorted(root.rglob("*.py")):
        data = p.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        h.update(f"{p.relative_to(root).as_posix()} {blob}\n".encode())
    return h.hexdigest()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, config, command, outputs, extra=None):
    """manifest.json next to the outputs; contains no timestamps so reruns match byte for byte."""
    out_dir = Path(out_dir)
    man = {
        "command": command,
        "preset": config.preset,
        "config_hash": config.hash(),
        "content_version": content_version(),
        "rng_scheme": RNG_SCHEME,
        "outputs": {Path(o).name: file_digest(o) for o in sorted(map(str, outputs))},
    }
    if extra:
        man["summary"] = extra
    (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def loglog_svg(path, series, fits=(), xlabel="", ylabel="", title=""):
    """Static log-log plot.  series: list of (label, x, y); fits: list of (label, SlopeFit).

    Returns False without writing when matplotlib is unavailable.
    """
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    plt.rcParams["svg.hashsalt"] = "nnsp"
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, x, y in series:
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = y > 0
        ax.plot(x[ok], y[ok], "o-", label=label)
    for label, fit in fits:
        xs = np.geomspace(fit.x_min, fit.x_max, 20)
        ax.plot(xs, fit.predict(xs), "k--", lw=1, label=f"{label}: slope {fit.slope:.2f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True

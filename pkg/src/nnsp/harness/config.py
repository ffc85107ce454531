"""Experiment configuration: typed ``section.key = value`` text files.

Format: UTF-8, one assignment per line, ``#`` starts a comment, blank lines
ignored.  Lists are comma separated.  Unknown keys are rejected with the
nearest valid key.  Every key has a default; ``--quick`` and ``--full``
presets only change grid sizes and epoch budgets.
"""

from __future__ import annotations

import difflib
import hashlib

from .._validation import ConfigError

KINDS = ("width_sweep", "n_sweep", "ek_check", "ergodicity", "single_predict")

# key -> (type, default).  Types: int, float, str, bool, "ints", "floats".
SCHEMA = {
    "experiment.kind": (str, "width_sweep"),
    "experiment.master_seed": (int, 0),
    "experiment.output_dir": (str, "out"),
    "experiment.plots": (bool, True),
    "dataset.d": (int, 8),
    "dataset.n_train": (int, 64),
    "dataset.n_test": (int, 40),
    "dataset.seed": (int, 0),
    "dataset.normalize": (bool, True),
    "network.depth": (int, 1),
    "network.activation": (str, "quadratic"),
    "network.weight_var": (float, 1.0),
    "network.balanced": (bool, True),  # rescale variances so every layer gets the same weight decay
    "network.readout_var": (float, 1.0 / 3.0),
    "network.bias_var": (float, 0.0),
    "train.sigma2": (float, 0.2),
    "train.dt_scale": (float, 0.002),  # dt = dt_scale / max weight decay
    "train.epochs": (int, 200_000),  # at the reference width
    "train.epochs_ref_width": (int, 512),
    "train.epochs_power": (float, 2.0),  # epochs scale as (N / ref)^power
    "train.min_epochs": (int, 20_000),
    "train.burn_frac": (float, 0.1),
    "train.thin": (int, 10),
    "train.n_seeds": (int, 8),
    "train.width": (int, 128),  # single-chain runs (train, ergodicity)
    "sweep.widths": ("ints", [16, 32, 64, 128, 256, 512]),
    "sweep.fit_fraction": (float, 0.5),
    "sweep.n_grid": ("ints", [8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096]),
    "sweep.sigma2_grid": ("floats", [0.2, 1.0]),
    "sweep.n_datasets": (int, 3),
    "sweep.n_test_points": (int, 100),
    "sweep.small_n_points": (int, 3),
    "sweep.bootstrap": (int, 200),
    "ek.n": (int, 512),
    "ek.draws": (int, 20),
    "ek.M": (int, 2048),
    "ek.n_test": (int, 50),
    "ek.n_grid": ("ints", [64, 128, 256, 512, 1024]),
    "ek.nodes": (str, "samples"),  # 'samples' or a count of fresh measure draws
    "ergodicity.epochs": (int, 100_000),
    "ergodicity.n_seeds": (int, 8),
    "ergodicity.n_probes": (int, 4),
    "ergodicity.width": (int, 64),
    "ergodicity.thin": (int, 10),
    "cumulant.n_points": (int, 8),
}

PRESETS = {
    "quick": {},
    "full": {
        "dataset.d": 16,
        "dataset.n_train": 110,
        "sweep.widths": [128, 256, 512, 1024, 2048],
        "train.epochs": 2_000_000,
        "train.epochs_ref_width": 2048,
        "train.min_epochs": 200_000,
        "train.thin": 100,
        "sweep.n_datasets": 10,
        "ek.draws": 50,
        "ek.M": 4096,
        "ergodicity.epochs": 1_000_000,
    },
}


def _parse(key, text):
    typ = SCHEMA[key][0]
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ == "ints":
            return [int(float(t)) if "e" in t.lower() else int(t) for t in _split(text)]
        if typ == "floats":
            return [float(t) for t in _split(text)]
        if typ is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _coerce(key, value):
    typ = SCHEMA[key][0]
    try:
        if typ == "ints":
            return [int(v) for v in value]
        if typ == "floats":
            return [float(v) for v in value]
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def _split(text):
    parts = [t.strip() for t in text.strip("[]").split(",")]
    return [t for t in parts if t]


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def check_key(key):
    if key not in SCHEMA:
        near = difflib.get_close_matches(key, SCHEMA.keys(), n=1, cutoff=0.0)
        hint = f"; did you mean {near[0]!r}?" if near else ""
        raise ConfigError(f"unknown config key {key!r}{hint}")


class ExperimentConfig:
    """Flat mapping of ``section.key`` to typed values."""

    def __init__(self, values=None, preset="quick"):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        self.preset = preset
        self.values = {k: (list(v) if isinstance(v, list) else v) for k, (_, v) in SCHEMA.items()}
        self.values.update(PRESETS[preset])
        for k, v in (values or {}).items():
            self[k] = v

    def __getitem__(self, key):
        check_key(key)
        return self.values[key]

    def __setitem__(self, key, value):
        check_key(key)
        value = _parse(key, value) if isinstance(value, str) else _coerce(key, value)
        self.values[key] = value
        if key == "experiment.kind" and value not in KINDS:
            raise ConfigError(f"experiment.kind must be one of {', '.join(KINDS)}")

    @classmethod
    def from_text(cls, text, preset="quick", source="<config>"):
        """Preset defaults, then the file's assignments on top."""
        cfg = cls(preset=preset)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                cfg[key] = val
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def from_file(cls, path, preset="quick"):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), preset, str(path))

    def to_text(self):
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def epochs_for_width(self, N):
        ref = self["train.epochs_ref_width"]
        e = self["train.epochs"] * (N / ref) ** self["train.epochs_power"]
        return int(max(self["train.min_epochs"], round(e)))

"""Command-line driver: ``npivband band`` and ``npivband simulate``.

Configuration comes from a flat ``key=value`` file (``--config``) with
command-line flags taking precedence.  Every output embeds the resolved
configuration, and any output file can be passed back as ``--config``.
"""

from __future__ import annotations

import argparse
import csv
import fnmatch
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from ._validation import NpivError, ValidationError
from .band import BandConfig, BandResult, run_band
from .simkit import G_ALIASES, DgpSpec, run_monte_carlo
from .stage import Dataset

logger = logging.getLogger(__name__)

__all__ = ["RunConfig", "SimConfig", "read_config", "ingest_csv", "cmd_band", "cmd_simulate", "main"]

CONFIG_MARK = "# npivband config"
SEED_ENV = "NPIV_SEED"
BAND_COLUMNS = ["d", "gprime_plugin", "gprime_debiased", "se", "pw_lo", "pw_hi", "unif_lo", "unif_hi"]


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _split_list(text):
    if isinstance(text, (list, tuple)):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _as_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


def _parse_seed(text) -> int:
    try:
        seed = int(str(text).strip())
    except ValueError as exc:
        raise ValidationError(f"seed must be an integer, got {text!r}") from exc
    if not 0 <= seed < 2**64:
        raise ValidationError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return seed


def _coerce(cls, raw: dict):
    """Build dataclass ``cls`` from string-valued ``raw``, converting by field type."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for key, value in raw.items():
        kind = known[key].type
        try:
            if key == "seed":
                out[key] = _parse_seed(value)
            elif kind in ("int", int):
                out[key] = int(value)
            elif kind in ("float", float):
                out[key] = float(value)
            elif kind in ("bool", bool):
                out[key] = _as_bool(value)
            elif kind.startswith("tuple"):
                parts = [float(v) for v in _split_list(value)]
                if len(parts) != 2:
                    raise ValidationError(f"{key} needs two comma-separated numbers")
                out[key] = tuple(parts)
            elif kind.startswith("list"):
                out[key] = _split_list(value)
            else:
                out[key] = str(value)
        except ValueError as exc:
            raise ValidationError(f"bad value for {key}: {value!r}") from exc
    return cls(**out)


def _dump(cfg) -> list[str]:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, (list, tuple)):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return lines


@dataclass(frozen=True)
class RunConfig:
    data_path: str = ""
    y_col: str = "y"
    d_col: str = "d"
    x_cols: list = ("x*",)
    z_cols: list = ("z*",)
    m_d: int = 5
    m_v: int = 5
    m_z: int = 5
    degree: int = 3
    alpha: float = 0.05
    a0: float = 1.2
    grid_points: int = 1000
    grid_quantiles: tuple = (0.10, 0.90)
    boot_draws: int = 1000
    mode: str = "full"
    seed: int = 0
    out_path: str = "band"

    def __post_init__(self):
        object.__setattr__(self, "x_cols", list(self.x_cols))
        object.__setattr__(self, "z_cols", list(self.z_cols))
        if self.mode not in ("full", "split"):
            raise ValidationError(f"mode must be full or split, got {self.mode!r}")
        lo, hi = self.grid_quantiles
        if not 0 < lo < hi < 1:
            raise ValidationError(f"grid_quantiles must satisfy 0 < lo < hi < 1, got {self.grid_quantiles}")
        if not 0 < self.alpha <= 0.5:
            raise ValidationError(f"alpha must lie in (0, 0.5], got {self.alpha}")

    def band_config(self) -> BandConfig:
        return BandConfig(m_d=self.m_d, m_v=self.m_v, m_z=self.m_z, degree=self.degree, alpha=self.alpha,
                          a0=self.a0, grid_points=self.grid_points, grid_quantiles=tuple(self.grid_quantiles),
                          boot_draws=self.boot_draws, seed=self.seed)


@dataclass(frozen=True)
class SimConfig:
    g: str = "g1"
    n: int = 1000
    p: int = 150
    p_z: int = 1
    bounded: bool = True
    reps: int = 200
    mode: str = "full"
    seed: int = 0
    out_path: str = "simulate.csv"

    def __post_init__(self):
        if self.g not in G_ALIASES:
            raise ValidationError(f"unknown g function {self.g!r}; choose from {sorted(G_ALIASES)}")
        if self.mode not in ("full", "split"):
            raise ValidationError(f"mode must be full or split, got {self.mode!r}")

    def dgp(self) -> DgpSpec:
        return DgpSpec(n=self.n, p=self.p, p_z=self.p_z, g_kind=self.g, bounded=self.bounded, seed=self.seed)


def read_config(path) -> dict:
    """Raw ``key -> value`` strings from a config file or from a previous output.

    A plain config holds ``key=value`` lines; blank lines and ``#`` comments
    are skipped.  Output CSV and plot files carry the config as a leading
    comment block, JSON summaries under ``"config"``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            return {k: v for k, v in json.loads(text)["config"].items()}
        except (ValueError, KeyError, AttributeError) as exc:
            raise ValidationError(f"{path} has no embedded config") from exc
    lines = text.splitlines()
    if lines and lines[0].strip() == CONFIG_MARK:
        body = []
        for line in lines[1:]:
            if not line.startswith("# ") or "=" not in line:
                break
            body.append(line[2:])
    else:
        body = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    raw = {}
    for num, line in enumerate(body, 1):
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValidationError(f"{path}: line {num} is not key=value: {line!r}")
        raw[key.strip()] = value.strip()
    return raw


def _match(header, patterns, what):
    picked = []
    for pat in patterns:
        hits = [h for h in header if fnmatch.fnmatchcase(h, pat)]
        if not hits:
            raise ValidationError(f"no column matches {what} pattern {pat!r}")
        picked.extend(h for h in hits if h not in picked)
    return picked


def ingest_csv(path, cfg: RunConfig):
    """Read ``path`` into a demeaned :class:`Dataset`; returns ``(dataset, manifest)``."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read data file {path}: {exc}") from exc
    rows = [r for r in rows if r and not (len(r) == 1 and not r[0].strip())]
    if not rows:
        raise ValidationError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    seen = set()
    dups = sorted({h for h in header if h in seen or seen.add(h)})
    if dups:
        raise ValidationError(f"duplicate column name(s) in {path}: {', '.join(dups)}")
    for col in (cfg.y_col, cfg.d_col):
        if col not in header:
            raise ValidationError(f"column {col!r} not found in {path}")
    taken = {cfg.y_col, cfg.d_col}
    x_cols = [c for c in _match(header, cfg.x_cols, "x") if c not in taken] if cfg.x_cols else []
    z_cols = [c for c in _match(header, cfg.z_cols, "z") if c not in taken and c not in x_cols]
    if not z_cols:
        raise ValidationError("no instrument columns selected")
    wanted = [cfg.y_col, cfg.d_col] + x_cols + z_cols
    index = {h: i for i, h in enumerate(header)}
    values = np.empty((len(rows) - 1, len(wanted)))
    for r, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise ValidationError(f"row {r + 1} has {len(row)} cells, header has {len(header)}")
        for c, col in enumerate(wanted):
            cell = row[index[col]].strip()
            try:
                val = float(cell)
            except ValueError:
                raise ValidationError(f"non-numeric cell {cell!r} at row {r + 1}, column {col!r}") from None
            if not math.isfinite(val):
                raise ValidationError(f"missing or non-finite value at row {r + 1}, column {col!r}")
            values[r, c] = val
    p = len(x_cols)
    data = Dataset(values[:, 0], values[:, 1], values[:, 2 : 2 + p], values[:, 2 + p :]).demean()
    manifest = {"path": str(path), "rows": data.n, "y": cfg.y_col, "d": cfg.d_col, "x": x_cols, "z": z_cols}
    return data, manifest


def _config_header(cfg) -> list[str]:
    return [CONFIG_MARK] + [f"# {line}" for line in _dump(cfg)]


def _write_band(prefix: str, res: BandResult, cfg: RunConfig, manifest: dict):
    se = res.se
    header = _config_header(cfg)
    with open(f"{prefix}.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(header) + "\n")
        fh.write(",".join(BAND_COLUMNS) + "\n")
        cols = (res.grid, res.gplugin, res.gtilde, se, res.pointwise_lo, res.pointwise_hi,
                res.uniform_lo, res.uniform_hi)
        for vals in zip(*cols):
            fh.write(",".join(_fmt(v) for v in vals) + "\n")
    summary = res.summary()
    summary["seed"] = cfg.seed
    summary["manifest"] = manifest
    summary["config"] = dict(line.split("=", 1) for line in _dump(cfg))
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # one block per curve: columns d and value, blocks separated by blank lines
    with open(f"{prefix}.dat", "w", encoding="utf-8") as fh:
        fh.write("\n".join(header) + "\n")
        for name, curve in (("debiased", res.gtilde), ("uniform_lower", res.uniform_lo),
                            ("uniform_upper", res.uniform_hi)):
            fh.write(f"# {name}\n")
            for d, v in zip(res.grid, curve):
                fh.write(f"{_fmt(d)} {_fmt(v)}\n")
            fh.write("\n\n")


def cmd_band(cfg: RunConfig, threads: int | None = None) -> int:
    data, manifest = ingest_csv(cfg.data_path, cfg)
    with _limit_threads(threads):
        res = run_band(data, cfg.band_config(), cfg.mode)
    _write_band(cfg.out_path, res, cfg, manifest)
    logger.info("wrote %s.csv, %s.json and %s.dat", cfg.out_path, cfg.out_path, cfg.out_path)
    return 0


def cmd_simulate(cfg: SimConfig, threads: int | None = None) -> int:
    band_cfg = BandConfig(seed=cfg.seed)
    with _limit_threads(1 if threads and threads > 1 else threads):
        report = run_monte_carlo(cfg.dgp(), cfg.reps, cfg.mode, band_cfg, n_jobs=threads or 1)
    row = report.row()
    with open(cfg.out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(_config_header(cfg)) + "\n")
        fh.write(",".join(row) + "\n")
        fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row.values()) + "\n")
    return 0


class _limit_threads:
    def __init__(self, threads):
        self.threads = threads
        self._ctl = None

    def __enter__(self):
        if self.threads:
            from threadpoolctl import threadpool_limits

            self._ctl = threadpool_limits(self.threads)
        return self

    def __exit__(self, *exc):
        if self._ctl is not None:
            self._ctl.unregister()
        return False


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="npivband", description="Debiased marginal effects with uniform bands.")
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", required=True)

    band = sub.add_parser("band", help="estimate g' and its bands from a CSV file")
    band.add_argument("--config")
    band.add_argument("--data", dest="data_path")
    band.add_argument("--y", dest="y_col")
    band.add_argument("--d", dest="d_col")
    band.add_argument("--x", dest="x_cols", help="comma-separated names or patterns such as 'x*'")
    band.add_argument("--z", dest="z_cols")
    for name, kind in (("m_d", int), ("m_v", int), ("m_z", int), ("degree", int), ("alpha", float),
                       ("a0", float), ("grid_points", int), ("boot_draws", int)):
        band.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind)
    band.add_argument("--grid-quantiles", dest="grid_quantiles", help="two comma-separated levels")
    band.add_argument("--mode", choices=("full", "split"))
    band.add_argument("--seed")
    band.add_argument("--out", dest="out_path", help="output prefix")
    band.add_argument("--threads", type=int)

    sim = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    sim.add_argument("--config")
    sim.add_argument("--g", choices=sorted(G_ALIASES))
    sim.add_argument("--n", type=int)
    sim.add_argument("--p", type=int)
    sim.add_argument("--p-z", dest="p_z", type=int)
    sim.add_argument("--unbounded", dest="bounded", action="store_const", const="false")
    sim.add_argument("--reps", type=int)
    sim.add_argument("--mode", choices=("full", "split"))
    sim.add_argument("--seed")
    sim.add_argument("--out", dest="out_path")
    sim.add_argument("--threads", type=int)
    return top


def _resolve(cls, args) -> object:
    raw = read_config(args.config) if args.config else {}
    skip = {"config", "threads", "command", "verbose"}
    raw.update({k: v for k, v in vars(args).items() if k not in skip and v is not None})
    if "seed" not in raw and os.environ.get(SEED_ENV):
        raw["seed"] = os.environ[SEED_ENV]
    return _coerce(cls, {k: v for k, v in raw.items()})


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        if args.command == "band":
            cfg = _resolve(RunConfig, args)
            if not cfg.data_path:
                raise ValidationError("no data file given (--data or data_path=)")
            return cmd_band(cfg, args.threads)
        return cmd_simulate(_resolve(SimConfig, args), args.threads)
    except NpivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Experiment configuration files.

Plain ``key = value`` text with ``[section]`` headers, read with
``configparser``.  Fracture paths are relative to the config file; the
output directory is relative to the working directory and can be
overridden with the ``MSINVERT_OUT`` environment variable.

Cell specs (``observed_cells``, ``update_mask``) accept ``all``, a list of
rectangles ``rect x0 y0 x1 y1; rect ...`` (a cell is selected when its
centroid lies inside one of them), or explicit ids ``3 4 17`` / ``3,4,17``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import AssemblyParams
from .exceptions import ConfigError
from .geometry import CoarseMesh, build_coarse_mesh, read_fractures
from .gmsfem import NORMALIZATIONS
from .inversion import GRADIENT_MODES, STEP_POLICIES

# section -> key -> (type, default)
SCHEMA = {
    "mesh": {"coarse_n": (int, 10), "refine_r": (int, 4)},
    "fractures": {"true": (str, None), "prior": (str, None)},
    "physics": {
        "k_m": (float, 1.0e-3),
        "k_f": (float, 1.0e2),
        "c_m": (float, 1.0),
        "c_f": (float, 1.0),
        "p0": (float, 1.0),
        "T": (float, 10.0),
        "n_t": (int, 10),
    },
    "basis": {"N_b": (int, 2), "normalization": (str, "energy"), "basis_scale": (float, 1.0)},
    "inversion": {
        "sigma_M": (float, 1.0),
        "sigma_A": (float, 1.0),
        "sigma_F": (float, 1.0e4),
        "epsilon": (float, 1.0e-12),
        "n_iter": (int, 100),
        "gradient_mode": (str, "consistent"),
        "step_policy": (str, "fixed"),
        "initial_misfit": (bool, False),
        "rel_tol": (float, 1.0e-10),
        "observed_cells": (str, "all"),
        "update_mask": (str, "all"),
    },
    "data": {"noise": (float, 0.0), "seed": (int, 0)},
    "output": {"directory": (str, "msinvert_out")},
}


@dataclass
class ExperimentConfig:
    source: Path | None
    coarse_n: int
    refine_r: int
    true_fractures: Path
    prior_fractures: Path
    params: AssemblyParams
    N_b: int
    normalization: str
    basis_scale: float
    inversion: dict  # InversionConfig fields except the cell sets
    observed_cells: str
    update_mask: str
    noise: float
    seed: int
    output: Path
    values: dict = field(default_factory=dict)  # resolved section -> key -> value

    def echo(self):
        """Resolved configuration in the input format."""
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in keys.items())
            lines.append("")
        return "\n".join(lines)


def _convert(kind, raw, section, key):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {kind.__name__}") from None


def read_values(path=None, text=None, overrides=None):
    """Parse a config into ``{section: {key: typed value}}`` with defaults filled in."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (N_b, sigma_M, T)
    try:
        if text is not None:
            parser.read_string(text, source=str(path or "<string>"))
        else:
            with open(path) as fh:
                parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"[{section}] unknown key {key!r}")
    for dotted, raw in (overrides or {}).items():
        section, key = split_key(dotted)
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key] = raw
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                values[section][key] = _convert(kind, parser[section][key], section, key)
            elif default is None:
                raise ConfigError(f"[{section}] {key} is required")
            else:
                values[section][key] = default
    return values


def split_key(key):
    """``section.key`` or a bare key that is unique across sections."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r}")
        return section, name
    hits = [s for s, keys in SCHEMA.items() if key in keys]
    if len(hits) != 1:
        raise ConfigError(f"unknown or ambiguous key {key!r}; use section.key")
    return hits[0], key


def load_config(path, overrides=None, text=None) -> ExperimentConfig:
    values = read_values(path, text=text, overrides=overrides)
    base = Path(path).resolve().parent if path is not None else Path.cwd()

    def fracture_path(key):
        p = Path(values["fractures"][key])
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise ConfigError(f"[fractures] {key}: file not found: {p}")
        try:
            read_fractures(p)
        except ValueError as exc:
            raise ConfigError(f"[fractures] {key}: {p}: {exc}") from None
        return p

    mesh, phys, basis, inv = values["mesh"], values["physics"], values["basis"], values["inversion"]
    if mesh["coarse_n"] < 1 or mesh["refine_r"] < 1:
        raise ConfigError("[mesh] coarse_n and refine_r must be positive")
    if basis["N_b"] < 1:
        raise ConfigError("[basis] N_b must be at least 1")
    if basis["normalization"] not in NORMALIZATIONS:
        raise ConfigError(f"[basis] normalization must be one of {NORMALIZATIONS}")
    if basis["basis_scale"] <= 0:
        raise ConfigError("[basis] basis_scale must be positive")
    if inv["gradient_mode"] not in GRADIENT_MODES:
        raise ConfigError(f"[inversion] gradient_mode must be one of {GRADIENT_MODES}")
    if inv["step_policy"] not in STEP_POLICIES:
        raise ConfigError(f"[inversion] step_policy must be one of {STEP_POLICIES}")
    for key in ("sigma_M", "sigma_A", "sigma_F", "epsilon"):
        if inv[key] <= 0:
            raise ConfigError(f"[inversion] {key} must be positive")
    if inv["n_iter"] < 0:
        raise ConfigError("[inversion] n_iter must be non-negative")
    if values["data"]["noise"] < 0:
        raise ConfigError("[data] noise must be non-negative")
    try:
        params = AssemblyParams(f=0.0, **phys)
    except ValueError as exc:
        raise ConfigError(f"[physics] {exc}") from None
    out = os.environ.get("MSINVERT_OUT") or values["output"]["directory"]
    inversion = {k: v for k, v in inv.items() if k not in ("observed_cells", "update_mask")}
    cfg = ExperimentConfig(
        source=Path(path) if path is not None else None,
        coarse_n=mesh["coarse_n"],
        refine_r=mesh["refine_r"],
        true_fractures=fracture_path("true"),
        prior_fractures=fracture_path("prior"),
        params=params,
        N_b=basis["N_b"],
        normalization=basis["normalization"],
        basis_scale=basis["basis_scale"],
        inversion=inversion,
        observed_cells=inv["observed_cells"],
        update_mask=inv["update_mask"],
        noise=values["data"]["noise"],
        seed=values["data"]["seed"],
        output=Path(out),
        values=values,
    )
    # catch bad cell specs before any work is done
    resolve_cells(cfg.observed_cells, coarse_centroids(cfg.coarse_n), "observed_cells")
    resolve_cells(cfg.update_mask, coarse_centroids(cfg.coarse_n), "update_mask")
    return cfg


def coarse_centroids(n):
    """Centroids of the structured coarse triangulation (same order as the mesh)."""
    return build_coarse_mesh(n).centroids()


def resolve_cells(spec: str, centroids, name="cells") -> np.ndarray:
    """Sorted coarse cell ids selected by ``spec``; never empty."""
    if isinstance(centroids, CoarseMesh):
        centroids = centroids.centroids()
    n_cells = len(centroids)
    text = spec.strip()
    if not text:
        raise ConfigError(f"{name}: empty cell spec")
    if text.lower() == "all":
        return np.arange(n_cells)
    if text.lower().startswith("rect"):
        chosen = np.zeros(n_cells, dtype=bool)
        for part in text.split(";"):
            part = part.strip()
            if not part:
                continue
            words = part.split()
            if words[0].lower() != "rect" or len(words) != 5:
                raise ConfigError(f"{name}: expected 'rect x0 y0 x1 y1', got {part!r}")
            try:
                x0, y0, x1, y1 = map(float, words[1:])
            except ValueError:
                raise ConfigError(f"{name}: bad rectangle {part!r}") from None
            if x1 < x0 or y1 < y0:
                raise ConfigError(f"{name}: rectangle {part!r} has negative extent")
            cx, cy = centroids[:, 0], centroids[:, 1]
            chosen |= (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
        ids = np.flatnonzero(chosen)
    else:
        try:
            ids = np.array(sorted({int(w) for w in text.replace(",", " ").split()}), dtype=np.int64)
        except ValueError:
            raise ConfigError(f"{name}: expected 'all', rectangles or integer ids, got {spec!r}") from None
        if ids.size and (ids.min() < 0 or ids.max() >= n_cells):
            raise ConfigError(f"{name}: cell ids must lie in [0, {n_cells})")
    if ids.size == 0:
        raise ConfigError(f"{name}: spec {spec!r} selects no cells")
    return ids

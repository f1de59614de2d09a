"""Experiment configuration: flat key=value sections parsed with configparser.

Example::

    [link]
    kind = parity
    s = 2
    sigma = 0.1

    [data]
    d = 20
    n = 2000
    seed = 7

    [estimator]
    degrees = 2
    ranks = planted
"""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from . import models
from .models import LinkSpec


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the message names the field."""


def _get(cp, section, key, conv=str, default=...):
    if not cp.has_option(section, key):
        if default is ...:
            raise ConfigError(f"missing field '{key}' in section [{section}]")
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for '{key}' in [{section}]: {raw!r} ({exc})") from None


def _int_list(raw: str):
    vals = [int(x) for x in raw.replace(";", ",").split(",") if x.strip()]
    if not vals:
        raise ValueError("empty list")
    return vals


def _float_list(raw: str):
    vals = [float(x) for x in raw.replace(";", ",").split(",") if x.strip()]
    if not vals:
        raise ValueError("empty list")
    return vals


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _ranks(raw: str):
    raw = raw.strip()
    if raw in ("planted", "adaptive"):
        return raw
    out = []
    for part in raw.split(","):
        t, _, s0 = part.partition(":")
        out.append((int(t), int(s0 or t)))
    return out


def parse_link(cp) -> LinkSpec:
    sec = "link"
    if not cp.has_section(sec):
        raise ConfigError("missing section [link]")
    kind = _get(cp, sec, "kind")
    sigma = _get(cp, sec, "sigma", float, 0.0)
    try:
        if kind == "parity":
            return models.parity(_get(cp, sec, "s", int), sigma)
        if kind == "mixture":
            return models.mixture_of_parities(_get(cp, sec, "k0", int), _get(cp, sec, "k1", int),
                                              _get(cp, sec, "k2", int), _get(cp, sec, "p", float),
                                              sigma)
        if kind == "staircase":
            terms = _get(cp, sec, "terms", str, "0;0,1,2")
            parsed = [tuple(int(i) for i in t.split(",")) for t in terms.split(";") if t.strip()]
            return models.staircase(parsed, sigma)
        if kind in ("gaussian", "directional"):
            fn = models.gaussian if kind == "gaussian" else models.directional
            return fn(_get(cp, sec, "link"), _get(cp, sec, "s", int, 1), sigma)
        if kind == "polynomial":
            return models.polynomial(json.loads(_get(cp, sec, "coeffs")), sigma)
        if kind == "null":
            return models.null(_get(cp, sec, "s", int, 1))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid [link]: {exc}") from None
    raise ConfigError(f"unknown link kind '{kind}' in [link]")


@dataclass
class ExperimentConfig:
    link: LinkSpec
    d_grid: list
    n_grid: list = field(default_factory=list)
    n_over_d: list = field(default_factory=list)
    seed: int = 0
    trials: int = 1
    fmt: str = "text"
    degrees: list = field(default_factory=list)
    ranks: object = "planted"
    kernel: str = "oracle"
    n_cal: int = 50_000
    n_bins: int = 16
    tol: float = 1e-6
    threshold: float = 0.3
    n_rot: int = 16
    max_ell: int = 4
    mode: str = "both"
    n_mc: int = 50_000
    symbolic: str = ""
    q: int = 1
    budget_s: float = 0.0
    resume: bool = False

    @property
    def d(self):
        return self.d_grid[0]

    @property
    def n(self):
        if self.n_grid:
            return self.n_grid[0]
        return int(round(self.n_over_d[0] * self.d))

    def n_values(self, d):
        if self.n_grid:
            return list(self.n_grid)
        return [int(round(c * d)) for c in self.n_over_d]

    def to_dict(self):
        out = asdict(self)
        out["link"] = self.link.to_dict()
        out["ranks"] = self.ranks if isinstance(self.ranks, str) else [list(r) for r in self.ranks]
        return out


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return config_from_parser(cp, overrides)


def config_from_parser(cp, overrides: dict | None = None) -> ExperimentConfig:
    link = parse_link(cp)
    if not cp.has_section("data"):
        raise ConfigError("missing section [data]")
    if cp.has_option("data", "d_grid"):
        d_grid = _get(cp, "data", "d_grid", _int_list)
    else:
        d_grid = [_get(cp, "data", "d", int)]
    n_grid = _get(cp, "data", "n_grid", _int_list, []) or \
        ([_get(cp, "data", "n", int)] if cp.has_option("data", "n") else [])
    n_over_d = _get(cp, "data", "n_over_d", _float_list, [])
    est = "estimator"
    pl = "planner"
    sc = "scaling"
    cfg = ExperimentConfig(
        link=link,
        d_grid=d_grid,
        n_grid=n_grid,
        n_over_d=n_over_d,
        seed=_get(cp, "data", "seed", int, 0),
        trials=_get(cp, sc, "trials", int, _get(cp, "data", "trials", int, 1)),
        fmt=_get(cp, "data", "format", str, "text"),
        degrees=_get(cp, est, "degrees", _int_list, []),
        ranks=_get(cp, est, "ranks", _ranks, "planted"),
        kernel=_get(cp, est, "kernel", str, "oracle"),
        n_cal=_get(cp, est, "n_cal", int, 50_000),
        n_bins=_get(cp, est, "n_bins", int, 16),
        tol=_get(cp, est, "tol", float, 1e-6),
        threshold=_get(cp, sc, "threshold", float, _get(cp, est, "threshold", float, 0.3)),
        n_rot=_get(cp, est, "n_rot", int, 16),
        max_ell=_get(cp, pl, "max_ell", int, 4),
        mode=_get(cp, pl, "mode", str, "both"),
        n_mc=_get(cp, pl, "n_mc", int, 50_000),
        symbolic=_get(cp, pl, "symbolic", str, ""),
        q=_get(cp, pl, "q", int, 1),
        budget_s=_get(cp, sc, "budget_s", float, 0.0),
        resume=_get(cp, sc, "resume", _bool, False),
    )
    for key, val in (overrides or {}).items():
        if val is not None:
            setattr(cfg, key, val)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.d_grid or any(d < 2 for d in cfg.d_grid):
        raise ConfigError("field 'd' must be >= 2 (section [data])")
    if any(d < cfg.link.s for d in cfg.d_grid):
        raise ConfigError("field 'd' must be at least the link index s")
    if any(n < 2 for n in cfg.n_grid) or any(c <= 0 for c in cfg.n_over_d):
        raise ConfigError("field 'n' must be >= 2 (section [data])")
    if cfg.trials < 1:
        raise ConfigError("field 'trials' must be >= 1")
    if cfg.fmt not in ("text", "binary"):
        raise ConfigError("field 'format' must be 'text' or 'binary' (section [data])")
    if cfg.degrees:
        if any(ell < 1 or ell > 4 for ell in cfg.degrees):
            raise ConfigError("field 'degrees' entries must lie in 1..4 (section [estimator])")
        if len(cfg.degrees) > cfg.link.s:
            raise ConfigError("field 'degrees' is longer than the link index s (section [estimator])")
    if isinstance(cfg.ranks, list):
        if cfg.degrees and len(cfg.ranks) != len(cfg.degrees):
            raise ConfigError("field 'ranks' needs one t:s0 pair per degree (section [estimator])")
        if any(t < 1 or s0 < 1 for t, s0 in cfg.ranks):
            raise ConfigError("field 'ranks' entries must be >= 1")
    if not (cfg.kernel == "oracle" or cfg.kernel.startswith("table:")):
        raise ConfigError("field 'kernel' must be 'oracle' or 'table:<path>' (section [estimator])")
    if cfg.mode not in ("sample", "query", "both"):
        raise ConfigError("field 'mode' must be sample, query or both (section [planner])")
    if cfg.max_ell < 1 or cfg.max_ell > 6:
        raise ConfigError("field 'max_ell' must lie in 1..6 (section [planner])")
    if cfg.symbolic and cfg.symbolic != "mixture" and not cfg.symbolic.startswith("groups:"):
        raise ConfigError("field 'symbolic' must be 'mixture' or 'groups:<spec>' (section [planner])")
    if cfg.n_bins < 1 or cfg.n_cal < 10 or cfg.n_mc < 10:
        raise ConfigError("fields 'n_bins', 'n_cal', 'n_mc' out of range")
    if not 0 < cfg.threshold <= 1:
        raise ConfigError("field 'threshold' must lie in (0, 1]")


def parse_groups(spec: str):
    """'0-3:-3; 2-9:0' -> parity groups over coordinate ranges with exponents."""
    from .complexity import ParityGroup

    groups = []
    for part in spec.split(";"):
        if not part.strip():
            continue
        rng, _, expo = part.partition(":")
        lo, _, hi = rng.partition("-")
        groups.append(ParityGroup(frozenset(range(int(lo), int(hi or lo) + 1)), Fraction(expo.strip())))
    if not groups:
        raise ConfigError("symbolic groups spec is empty (section [planner])")
    return groups


def _join(vals):
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in vals)


def to_ini(cfg: ExperimentConfig) -> str:
    """Config text that parses back to ``cfg``."""
    link = cfg.link
    lines = ["[link]", f"kind = {link.kind}", f"sigma = {link.sigma!r}"]
    if link.kind == "mixture":
        lines += [f"{k} = {link.param(k)!r}" for k in ("k0", "k1", "k2", "p")]
    elif link.kind == "staircase":
        lines.append("terms = " + ";".join(",".join(map(str, t)) for t in link.param("terms")))
    elif link.kind == "polynomial":
        lines.append("coeffs = " + json.dumps(link.param("coeffs")))
    else:
        lines.append(f"s = {link.s}")
        if link.kind in ("gaussian", "directional"):
            lines.append(f"link = {link.param('link')}")
    lines += ["", "[data]", f"d_grid = {_join(cfg.d_grid)}", f"seed = {cfg.seed}",
              f"format = {cfg.fmt}"]
    if cfg.n_grid:
        lines.append(f"n_grid = {_join(cfg.n_grid)}")
    if cfg.n_over_d:
        lines.append(f"n_over_d = {_join(cfg.n_over_d)}")
    ranks = cfg.ranks if isinstance(cfg.ranks, str) else ",".join(f"{t}:{s}" for t, s in cfg.ranks)
    lines += ["", "[estimator]"]
    if cfg.degrees:
        lines.append(f"degrees = {_join(cfg.degrees)}")
    lines += [f"ranks = {ranks}", f"kernel = {cfg.kernel}", f"n_cal = {cfg.n_cal}",
              f"n_bins = {cfg.n_bins}", f"tol = {cfg.tol!r}", f"n_rot = {cfg.n_rot}",
              "", "[planner]", f"max_ell = {cfg.max_ell}", f"mode = {cfg.mode}",
              f"n_mc = {cfg.n_mc}", f"q = {cfg.q}"]
    if cfg.symbolic:
        lines.append(f"symbolic = {cfg.symbolic}")
    lines += ["", "[scaling]", f"trials = {cfg.trials}", f"threshold = {cfg.threshold!r}",
              f"budget_s = {cfg.budget_s!r}", f"resume = {str(cfg.resume).lower()}", ""]
    return "\n".join(lines)


def config_from_dict(spec: dict) -> ExperimentConfig:
    """Rebuild a config from the ``config`` block embedded in a report."""
    fields = dict(spec)
    link = LinkSpec.from_dict(fields.pop("link"))
    ranks = fields.get("ranks", "planted")
    if not isinstance(ranks, str):
        fields["ranks"] = [tuple(r) for r in ranks]
    cfg = ExperimentConfig(link=link, **fields)
    validate(cfg)
    return cfg

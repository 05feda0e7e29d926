"""Command-line entry point.

Every subcommand reads an optional JSON run config, writes its results to
the output directory and finishes with ``manifest.json``. Exit codes:
0 ok, 1 usage or config error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from . import __version__
from .errors import ConfigError, CovidSemError, DataError, NumericalError

logger = logging.getLogger("covidsem")

COMMANDS = ("ingest", "estimate", "decompose", "counterfactual", "sird-synth", "dml", "sensitivity")
SOURCE_FILES = {
    "cases_deaths": "cases_deaths.csv",
    "tests": "tests.csv",
    "policies": "policies.csv",
    "mobility": "mobility.csv",
    "covariates": "covariates.csv",
}
SYNTH_FIELDS = ("n_states", "days", "burn_in", "start", "theta", "alpha", "base_growth", "covariate_growth",
                "gamma", "kappa", "noise", "noise_ar", "behavior_noise", "lag", "infection_lag", "tau0",
                "tau_ramp", "tau_ramp_day", "tau_ramp_width", "initial_infected", "dt", "max_retries")

_DATE = {"type": "string", "pattern": r"^\d{4}-\d{2}-\d{2}$"}
_PATH = {"type": ["string", "null"]}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": _PATH, "panel": _PATH,
                **{k: _PATH for k in SOURCE_FILES},
            },
        },
        "lags": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "case_lag": {"type": "integer", "minimum": 1},
                "death_lag": {"type": "integer", "minimum": 1},
            },
        },
        "window": {"type": "array", "items": _DATE, "minItems": 2, "maxItems": 2},
        "dummies": {"enum": ["month", "week", "none"]},
        "log_zero_floor": {"type": "boolean"},
        "policy_mode": {"enum": ["start_only", "start_end"]},
        "outcome": {"enum": ["cases", "deaths"]},
        "national": {"type": "boolean"},
        "business": {"enum": ["composite", "split"]},
        "restrictions": {"type": ["boolean", "null"]},
        "specs": {"type": "array", "items": {"type": "string"}},
        "estimator": {"enum": ["cre", "fe", "fe_debiased"]},
        "bootstrap": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "B": {"type": "integer", "minimum": 0},
                "scheme": {"enum": ["pairs_cluster", "multiplier_cluster", "gaussian_asymptotic"]},
            },
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "scenarios": {"type": "array", "items": {"type": ["string", "object"]}},
        "quantiles": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 100},
                      "minItems": 2, "maxItems": 2},
        "dml": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "target": {"type": "string"},
                "folds": {"type": "integer", "minimum": 2},
                "lam": {"type": ["number", "null"], "minimum": 0},
                "grid": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}},
                "cross_fit": {"type": "boolean"},
                "learner": {"enum": ["lasso", "random_forest"]},
            },
        },
        "sensitivity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "variants": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 10}},
                "timings": {"type": "array", "items": {"enum": ["baseline", "alternative"]}},
                "outcomes": {"type": "array", "items": {"enum": ["cases", "deaths"]}},
                "infos": {"type": "array", "items": {"enum": ["own", "national"]}},
                "extra_columns": {"type": "object", "additionalProperties": {"type": "string"}},
                "dml_folds": {"type": "integer", "minimum": 2},
            },
        },
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {} for k in SYNTH_FIELDS},
        },
        "output_dir": {"type": "string"},
    },
}

DEFAULT_CONFIG: dict[str, Any] = {
    "data": {},
    "lags": {"case_lag": 14, "death_lag": 21},
    "window": ["2020-03-07", "2020-06-03"],
    "dummies": "month",
    "log_zero_floor": False,
    "policy_mode": "start_only",
    "outcome": "cases",
    "national": False,
    "business": "composite",
    "restrictions": None,
    "specs": [],
    "estimator": "cre",
    "bootstrap": {"B": 200, "scheme": "pairs_cluster"},
    "seed": 0,
    "scenarios": ["mask_march14", "no_business", "no_shelter"],
    "quantiles": [5.0, 95.0],
    "dml": {"target": "mask_employees", "folds": 5, "lam": None, "grid": None, "cross_fit": True, "learner": "lasso"},
    "sensitivity": {"variants": list(range(1, 11)), "timings": ["baseline", "alternative"],
                    "outcomes": ["cases", "deaths"], "infos": ["own", "national"], "extra_columns": {},
                    "dml_folds": 5},
    "synth": {},
    "output_dir": "out",
}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("synth", "extra_columns"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw: Any) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errs = sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errs:
        lines = []
        for e in errs:
            where = ".".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"config error at {where}: {e.message}")
        raise ConfigError("\n".join(lines))


def load_config(path: str | None) -> tuple[dict, bytes]:
    """Validated config merged over the defaults, plus the raw bytes."""
    raw_bytes = b"{}"
    raw: Any = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        raw_bytes = p.read_bytes()
        try:
            raw = json.loads(raw_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    validate_config(raw)
    cfg = _merge(DEFAULT_CONFIG, raw)
    if path:
        base = Path(path).resolve().parent
        for k, v in list(cfg["data"].items()):
            if v and not Path(v).is_absolute():
                cfg["data"][k] = str(base / v)
    return cfg, raw_bytes


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


class Run:
    """Bookkeeping for one command: inputs read, outputs written."""

    def __init__(self, command: str, cfg: dict, out: Path, seed: int):
        self.command, self.cfg, self.out, self.seed = command, cfg, out, seed
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def read(self, path: str | Path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"input file not found: {p}")
        self.inputs[str(p)] = file_digest(p)
        return p

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return p

    def manifest(self) -> Path:
        body = {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "config_sha256": config_hash(self.cfg),
            "config": self.cfg,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {p.name: file_digest(p) for p in sorted(set(self.outputs)) if p.is_file()},
        }
        text = json.dumps(body, indent=2, sort_keys=True)
        stamp = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
        # the timestamp sits alone on the final field line so diffs can ignore it
        text = text[:-2] + f',\n  "created_utc": "{stamp}"\n}}\n'
        p = self.out / "manifest.json"
        p.write_text(text, encoding="utf-8")
        return p


# --- shared helpers -------------------------------------------------------------

def _lags(cfg):
    from .transform import LagConfig
    return LagConfig(case_lag=cfg["lags"]["case_lag"], death_lag=cfg["lags"]["death_lag"])


def _options(cfg):
    from .transform import TransformOptions
    return TransformOptions(log_zero_floor=cfg["log_zero_floor"], window=tuple(cfg["window"]))


def _source_paths(cfg) -> dict[str, str | None]:
    data = cfg["data"]
    paths: dict[str, str | None] = {}
    base = Path(data["dir"]) if data.get("dir") else None
    for key, fname in SOURCE_FILES.items():
        v = data.get(key)
        if v is None and base is not None:
            cand = base / fname
            v = str(cand) if (cand.is_file() or key != "tests") else None
        paths[key] = v
    return paths


def load_input_panel(run: Run):
    from .ingest import load_panel_sources, read_panel, sidecar_path
    cfg = run.cfg
    if cfg["data"].get("panel"):
        p = run.read(cfg["data"]["panel"])
        side = sidecar_path(p)
        if side.is_file():
            run.read(side)
        panel = read_panel(p)
    else:
        paths = _source_paths(cfg)
        missing = [k for k, v in paths.items() if v is None and k != "tests"]
        if missing:
            raise ConfigError(f"no input for {', '.join(missing)}; set data.dir, data.panel or --data-dir")
        for v in paths.values():
            if v is not None:
                run.read(v)
        panel = load_panel_sources(paths["cases_deaths"], paths["policies"], paths["mobility"],
                                   paths["covariates"], paths["tests"], cfg["policy_mode"])
    for w in panel.warnings:
        logger.warning(w)
    return panel


def _equation_specs(cfg, restricted_default: bool = False):
    from .models import apply_restrictions, equation_set
    specs = equation_set(cfg["outcome"], cfg["national"], business=cfg["business"], dummies=cfg["dummies"])
    restricted = restricted_default if cfg["restrictions"] is None else cfg["restrictions"]
    if restricted:
        specs = apply_restrictions(specs)
    return specs


def _named_specs(cfg, run: Run):
    from .models import load_fixture
    from .transform import load_spec
    if not cfg["specs"]:
        return {spec.name: spec for spec in _equation_specs(cfg).values()}
    out = {}
    for s in cfg["specs"]:
        if s.endswith(".json"):
            spec = load_spec(run.read(s))
        else:
            spec = load_fixture(s)
        out[spec.name] = spec
    return out


def _num(v: float) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _effects(cfg, panel, seed, threads, restricted_default: bool = False):
    from .effects import estimate_effects
    B = cfg["bootstrap"]["B"]
    return estimate_effects(panel, _equation_specs(cfg, restricted_default), _lags(cfg), _options(cfg), B=B, seed=seed,
                            scheme=cfg["bootstrap"]["scheme"], threads=threads)


# --- commands -------------------------------------------------------------------

def cmd_ingest(run: Run, args) -> None:
    from .ingest import write_panel
    panel = load_input_panel(run)
    main_path, side = write_panel(panel, run.path("panel.csv"))
    if side is not None:
        run.outputs.append(side)


def cmd_estimate(run: Run, args) -> None:
    from .estimator import crossover_jackknife, fit_design, fit_fixed_effects
    from .transform import build_design
    cfg = run.cfg
    panel = load_input_panel(run)
    rows = []
    for key, spec in _named_specs(cfg, run).items():
        design = build_design(panel, spec, _lags(cfg), _options(cfg))
        if cfg["estimator"] == "cre":
            fit = fit_design(design)
        elif cfg["estimator"] == "fe":
            fit = fit_fixed_effects(design)
        else:
            fit = crossover_jackknife(design, cfg["bootstrap"]["B"] or None, run.seed).as_fit()
        run.write_text(f"fit_{spec.name}.json", fit.to_json())
        for name, est, se, stars in fit.table_rows():
            rows.append((spec.name, name, est, se, stars))
    _write_rows(run.path("coefficients.csv"), ("spec", "term", "estimate", "se", "stars"), rows)


def cmd_decompose(run: Run, args) -> None:
    panel = load_input_panel(run)
    table, eqs, _ = _effects(run.cfg, panel, run.seed, args.threads)
    table.to_csv(run.path("effects.csv"))
    run.write_text("effects.json", table.to_json())
    for key, eq in eqs.items():
        run.write_text(f"fit_{eq.spec.name}.json", eq.fit.to_json())


def _scenarios(cfg, run: Run):
    from .counterfactual import Scenario, get_scenario, load_scenario
    out = []
    for s in cfg["scenarios"]:
        if isinstance(s, dict):
            out.append(Scenario.from_dict(s))
        elif s.endswith(".json"):
            out.append(load_scenario(run.read(s)))
        else:
            out.append(get_scenario(s))
    names = [s.name for s in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate scenario names: {names}")
    return out


def cmd_counterfactual(run: Run, args) -> None:
    from .counterfactual import band_inference
    from .effects import recursion_coefficients, recursion_draws
    cfg = run.cfg
    scenarios = _scenarios(cfg, run)
    panel = load_input_panel(run)
    # the recursion defaults to the restricted equation set
    table, eqs, draws = _effects(cfg, panel, run.seed, args.threads, restricted_default=True)
    reduced = eqs["reduced"]
    ends = []
    for sc in scenarios:
        theta = recursion_coefficients(table, reduced, sc.coefficients)
        theta_draws = recursion_draws(table, reduced, draws["reduced"], sc.coefficients) if draws else None
        bands = band_inference(panel, reduced.design, theta, sc, theta_draws, _options(cfg),
                               tuple(cfg["quantiles"]), cfg["outcome"])
        bands.to_csv(run.path(f"counterfactual_{sc.name}_{cfg['outcome']}.csv"))
        ends.append(bands.endpoint())
    import pandas as pd
    pd.concat(ends, ignore_index=True).to_csv(run.path("endpoints.csv"), index=False, float_format="%.17g",
                                              lineterminator="\n")


def cmd_sird_synth(run: Run, args) -> None:
    from .sird import SynthConfig, synth_panel, write_synth
    known = {f.name for f in fields(SynthConfig)}
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in run.cfg["synth"].items() if k in known}
    try:
        config = SynthConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad synth settings: {exc}") from None
    result = synth_panel(config, seed=run.seed)
    for p in write_synth(result, run.out).values():
        run.outputs.append(p)


def cmd_dml(run: Run, args) -> None:
    from .dml import DmlSpec, dml_fit
    from .models import reduced_spec
    from .transform import build_design
    cfg = run.cfg
    d = cfg["dml"]
    spec = DmlSpec(d["target"], folds=d["folds"], learner=d["learner"], lam=d["lam"],
                   grid=tuple(d["grid"]) if d["grid"] else None, cross_fit=d["cross_fit"])
    panel = load_input_panel(run)
    model = reduced_spec(cfg["outcome"], cfg["national"], business=cfg["business"], dummies=cfg["dummies"])
    design = build_design(panel, model, _lags(cfg), _options(cfg))
    try:
        res = dml_fit(design, spec, run.seed)
    except NotImplementedError as exc:
        raise ConfigError(str(exc)) from None
    run.write_text("dml.json", res.to_json())


def cmd_sensitivity(run: Run, args) -> None:
    from .sensitivity import run_grid
    cfg = run.cfg
    s = cfg["sensitivity"]
    panel = load_input_panel(run)
    grid = run_grid(panel, s["variants"], s["timings"], s["outcomes"], s["infos"], s["extra_columns"],
                    tuple(cfg["window"]), run.seed, s["dml_folds"], args.threads)
    grid.to_csv(run.path("whisker.csv"))
    run.write_text("failures.json", grid.failures_json())


HANDLERS = {
    "ingest": cmd_ingest,
    "estimate": cmd_estimate,
    "decompose": cmd_decompose,
    "counterfactual": cmd_counterfactual,
    "sird-synth": cmd_sird_synth,
    "dml": cmd_dml,
    "sensitivity": cmd_sensitivity,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--data-dir", help="directory holding the raw CSV files")
    common.add_argument("--panel", help="canonical panel CSV written by 'ingest'")
    parser = _Parser(prog="covidsem", description="Policy, behavior and case growth panel models.",
                     parents=[common])
    parser.add_argument("--version", action="version", version=f"covidsem {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "ingest": "read raw CSV files and write the canonical panel",
        "estimate": "fit specifications and write coefficient tables",
        "decompose": "direct, indirect and total policy effects with bootstrap SEs",
        "counterfactual": "simulate policy scenarios and write trajectory bands",
        "sird-synth": "write a synthetic panel from the SIRD generator",
        "dml": "double machine learning estimate of one policy coefficient",
        "sensitivity": "robustness grid written as whisker.csv",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], parents=[common])
        if name == "estimate":
            p.add_argument("--spec", action="append", help="bundled spec name or spec JSON path (repeatable)")
            p.add_argument("--estimator", choices=["cre", "fe", "fe_debiased"])
        if name in ("estimate", "decompose", "counterfactual", "dml"):
            p.add_argument("--outcome", choices=["cases", "deaths"])
            p.add_argument("--national", action="store_true", default=None)
        if name == "counterfactual":
            p.add_argument("--scenario", action="append", help="built-in name or scenario JSON path (repeatable)")
        if name in ("decompose", "counterfactual"):
            p.add_argument("--draws", type=int, help="bootstrap draws B")
        if name == "dml":
            p.add_argument("--target", help="policy whose coefficient is estimated")
            p.add_argument("--folds", type=int)
        if name == "sensitivity":
            p.add_argument("--variant", type=int, action="append", help="variant id (repeatable)")
    return parser


def _apply_flags(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.data_dir:
        cfg["data"] = {"dir": str(Path(args.data_dir))}
    if args.panel:
        cfg["data"] = {"panel": str(Path(args.panel))}
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg["seed"] = args.seed
    if args.out:
        cfg["output_dir"] = args.out
    for flag, key in (("outcome", "outcome"), ("national", "national"), ("estimator", "estimator")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "spec", None):
        cfg["specs"] = list(args.spec)
    if getattr(args, "scenario", None):
        cfg["scenarios"] = list(args.scenario)
    if getattr(args, "draws", None) is not None:
        if args.draws < 0:
            raise UsageError("--draws must be >= 0")
        cfg["bootstrap"]["B"] = args.draws
    if getattr(args, "target", None):
        cfg["dml"]["target"] = args.target
    if getattr(args, "folds", None) is not None:
        cfg["dml"]["folds"] = args.folds
    if getattr(args, "variant", None):
        cfg["sensitivity"]["variants"] = list(args.variant)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    validate_config(cfg)
    return cfg


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        raise UsageError(parser.format_usage().strip())
    cfg, _ = load_config(args.config)
    cfg = _apply_flags(cfg, args)
    run = Run(args.command, cfg, Path(cfg["output_dir"]), int(cfg["seed"]))
    HANDLERS[args.command](run, args)
    run.manifest()
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(levelname)s: %(message)s")
    logging.captureWarnings(True)
    try:
        return run_command(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError, UnicodeDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NotImplementedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CovidSemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

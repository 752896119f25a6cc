"""Command-line entry point: config -> pipeline -> CSV, summary, expansion.

Exit codes: 0 success, 1 configuration error, 2 runtime invariant
violation, 3 acceptance-threshold miss.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import msgate, pipeline, propagate, qat

log = logging.getLogger("qatgate")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_THRESHOLD = 0, 1, 2, 3
SCENARIOS = ("fig2", "fig3-left", "fig3-right", "convergence", "custom")
PHYSICAL_KEYS = ("eta", "bases", "tones", "eta_scaled_bases", "initial", "eta_values")
REQUIRED_CUSTOM = ("eta", "bases", "tones")
TONE_KEYS = {"rabi", "detuning", "window", "sideband", "phi_plus", "phi_minus"}
CHECK_KEYS = {"peak_shift", "min_visible_deviation", "min_tracking", "min_f_avg", "gate_fidelity",
              "fast_deviation_factor", "min_shaping_improvement", "monotone_orders", "min_slope"}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "config"):
        self.line = line
        prefix = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(prefix + message)


# --------------------------------------------------------------------------
# config

@dataclass
class RunConfig:
    scenario: str
    eta: float
    bases: dict[str, float]
    tones: list[dict]
    orders: tuple[int, ...] = (1, 2, 3, 4)
    rule: str = "base"
    cutoff: float = 0.5
    n_max: int = 40
    n_max_check: int | None = None
    rel_tol: float = 1e-11
    samples: int = 2001
    span: float = 1.0
    check_samples: int = 201
    carrier_reference: bool = True
    initial: dict = field(default_factory=lambda: {"qubits": "gg", "alpha": [0.0, math.sqrt(5)]})
    eta_values: tuple[float, ...] = ()
    eta_scaled_bases: dict[str, float] = field(default_factory=dict)
    shaping_baseline: str | None = None
    output_dir: str = "qatgate-out"
    seed: int = 0
    checks: dict = field(default_factory=dict)

    def echo(self) -> dict:
        data = dataclasses.asdict(self)
        data["orders"] = list(self.orders)
        data["eta_values"] = list(self.eta_values)
        return data

    def settings(self) -> pipeline.RunSettings:
        alpha = complex(*self.initial["alpha"])
        return pipeline.RunSettings(rule=self.rule, cutoff=self.cutoff, orders=tuple(self.orders),
                                    samples=self.samples, span=self.span, rel_tol=self.rel_tol,
                                    qubits=self.initial["qubits"], alpha=alpha,
                                    carrier_reference=self.carrier_reference, n_max_check=self.n_max_check,
                                    check_samples=self.check_samples, seed=self.seed)

    def model(self, eta: float | None = None, n_max: int | None = None) -> msgate.MsModel:
        eta = self.eta if eta is None else eta
        bases = dict(self.bases)
        for name, coef in self.eta_scaled_bases.items():
            bases[name] = coef * eta
        tones = tuple(
            msgate.DriveTone(rabi=t["rabi"], detuning=t["detuning"], phi_plus=t.get("phi_plus", math.pi / 4),
                             phi_minus=t.get("phi_minus", 0.0), window=t.get("window", "flat"),
                             sideband=t.get("sideband", 1))
            for t in self.tones
        )
        return msgate.MsModel(eta=eta, tones=tones, bases=bases, n_max=n_max or self.n_max, order=max(self.orders))


_ANGLE = re.compile(r"^\s*(-?\d*\.?\d*)\s*\*?\s*pi\s*(?:/\s*(\d+\.?\d*))?\s*$")


def parse_angle(value) -> float:
    """Float, or ``"pi/4"``, ``"3*pi/2"``, ``"-pi"`` style strings."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        m = _ANGLE.match(value)
        if m:
            num = m.group(1)
            factor = -1.0 if num == "-" else float(num) if num else 1.0
            den = float(m.group(2)) if m.group(2) else 1.0
            return factor * math.pi / den
    raise ValueError(f"not an angle: {value!r}")


def _line_map(node, prefix=(), out=None) -> dict:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = prefix + (key.value,)
            out[path] = key.start_mark.line + 1
            _line_map(value, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            out[prefix + (i,)] = item.start_mark.line + 1
            _line_map(item, prefix + (i,), out)
    return out


def _parse_yaml(text: str, source: str) -> tuple[dict, dict]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from exc
    if data is None:
        return {}, {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    return data, _line_map(node)


def load_preset(name: str) -> dict:
    if name not in SCENARIOS or name == "custom":
        raise ConfigError(f"no preset named {name!r}")
    text = resources.files("qatgate").joinpath("presets", f"{name}.yaml").read_text()
    data, _ = _parse_yaml(text, f"preset {name}")
    return data


def _number(value, key, line, source, lo=None, hi=None, integer=False, lo_open=False):
    ok_type = isinstance(value, int) if integer else isinstance(value, (int, float))
    if isinstance(value, bool) or not ok_type:
        kind = "an integer" if integer else "a number"
        raise ConfigError(f"{key} must be {kind}, got {value!r}", line, source)
    if not math.isfinite(value):
        raise ConfigError(f"{key} must be finite", line, source)
    if lo is not None and (value <= lo if lo_open else value < lo):
        raise ConfigError(f"{key} = {value} is out of range (must be {'>' if lo_open else '>='} {lo})", line, source)
    if hi is not None and value > hi:
        raise ConfigError(f"{key} = {value} is out of range (must be <= {hi})", line, source)
    return int(value) if integer else float(value)


def _validate_tones(tones, bases, lines, source) -> list[dict]:
    if not isinstance(tones, list) or not tones:
        raise ConfigError("tones must be a non-empty list", lines.get(("tones",)), source)
    out = []
    for i, tone in enumerate(tones):
        line = lines.get(("tones", i))
        if not isinstance(tone, dict):
            raise ConfigError(f"tone {i} must be a mapping", line, source)
        unknown = set(tone) - TONE_KEYS
        if unknown:
            raise ConfigError(f"tone {i}: unknown key(s) {sorted(unknown)}", line, source)
        if "rabi" not in tone or "detuning" not in tone:
            raise ConfigError(f"tone {i} needs rabi and detuning", line, source)
        t = {"rabi": _number(tone["rabi"], f"tone {i} rabi", line, source, lo=0, lo_open=True)}
        det = tone["detuning"]
        if not isinstance(det, dict) or not all(isinstance(v, int) and not isinstance(v, bool) for v in det.values()):
            raise ConfigError(f"tone {i}: detuning must map base names to integers", line, source)
        missing = set(det) - set(bases)
        if missing:
            raise ConfigError(f"tone {i}: detuning uses undefined base(s) {sorted(missing)}", line, source)
        t["detuning"] = dict(det)
        window = tone.get("window", "flat")
        if window not in msgate.WINDOWS:
            raise ConfigError(f"tone {i}: window must be one of {msgate.WINDOWS}", line, source)
        t["window"] = window
        t["sideband"] = _number(tone.get("sideband", 1), f"tone {i} sideband", line, source, lo=1, hi=2,
                                integer=True)
        for key, default in (("phi_plus", math.pi / 4), ("phi_minus", 0.0)):
            try:
                t[key] = parse_angle(tone.get(key, default))
            except ValueError as exc:
                raise ConfigError(f"tone {i}: {exc}", line, source) from None
        out.append(t)
    return out


def normalize(data: dict, lines: dict | None = None, source: str = "config") -> RunConfig:
    """Apply the scenario preset, then the overrides in ``data``; validate everything."""
    lines = lines or {}
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - fields)
    if unknown:
        key = unknown[0]
        raise ConfigError(f"unknown key {key!r}" + (f" (and {unknown[1:]})" if unknown[1:] else ""),
                          lines.get((key,)), source)
    if "scenario" not in data:
        raise ConfigError("missing required key 'scenario' (one of " + ", ".join(SCENARIOS) + ")", None, source)
    scenario = data["scenario"]
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}", lines.get(("scenario",)), source)

    if scenario == "custom":
        merged = dict(data)
        missing = [k for k in REQUIRED_CUSTOM if k not in merged]
        if missing:
            raise ConfigError("custom scenario is missing required field(s): " + ", ".join(missing), None, source)
    else:
        preset = load_preset(scenario)
        for key in PHYSICAL_KEYS:
            if key in data and key in preset and data[key] != preset[key]:
                raise ConfigError(
                    f"{key!r} conflicts with the {scenario} preset; use scenario: custom to change "
                    f"physical parameters", lines.get((key,)), source)
        merged = {**preset, **data}
        # an n_max override keeps the preset's re-check margin
        if "n_max" in data and "n_max_check" not in data and preset.get("n_max_check") and \
                isinstance(data["n_max"], int):
            merged["n_max_check"] = data["n_max"] + preset["n_max_check"] - preset["n_max"]

    ln = lambda key: lines.get((key,))  # noqa: E731
    cfg: dict[str, Any] = {"scenario": scenario}
    cfg["eta"] = _number(merged["eta"], "eta", ln("eta"), source, lo=0, hi=0.5, lo_open=True)
    bases = merged["bases"]
    if not isinstance(bases, dict) or not bases:
        raise ConfigError("bases must be a mapping of name -> frequency", ln("bases"), source)
    cfg["bases"] = {str(k): _number(v, f"bases.{k}", lines.get(("bases", k)), source) for k, v in bases.items()}
    if cfg["bases"].get("nu") != 1.0:
        raise ConfigError("bases must contain nu: 1.0", ln("bases"), source)
    cfg["tones"] = _validate_tones(merged["tones"], cfg["bases"], lines, source)

    orders = merged.get("orders", [1, 2, 3, 4])
    if not isinstance(orders, list) or not orders:
        raise ConfigError("orders must be a non-empty list", ln("orders"), source)
    cfg["orders"] = tuple(sorted({_number(n, "orders entry", ln("orders"), source, 1, 4, integer=True)
                                  for n in orders}))
    if merged.get("rule", "base") not in ("base", "value"):
        raise ConfigError("rule must be 'base' or 'value'", ln("rule"), source)
    cfg["rule"] = merged.get("rule", "base")
    cfg["cutoff"] = _number(merged.get("cutoff", 0.5), "cutoff", ln("cutoff"), source, 0, 1, lo_open=True)
    cfg["n_max"] = _number(merged.get("n_max", 40), "n_max", ln("n_max"), source, 1, 400, integer=True)
    if merged.get("n_max_check") is not None:
        cfg["n_max_check"] = _number(merged["n_max_check"], "n_max_check", ln("n_max_check"), source,
                                     cfg["n_max"] + 1, 400, integer=True)
    cfg["rel_tol"] = _number(merged.get("rel_tol", 1e-11), "rel_tol", ln("rel_tol"), source, 1e-13, 1e-6)
    cfg["samples"] = _number(merged.get("samples", 2001), "samples", ln("samples"), source, 2, 100000, integer=True)
    cfg["span"] = _number(merged.get("span", 1.0), "span", ln("span"), source, 0, 10, lo_open=True)
    cfg["check_samples"] = _number(merged.get("check_samples", 201), "check_samples", ln("check_samples"), source,
                                   2, 100000, integer=True)
    cfg["carrier_reference"] = bool(merged.get("carrier_reference", True))
    cfg["seed"] = _number(merged.get("seed", 0), "seed", ln("seed"), source, 0, integer=True)
    cfg["output_dir"] = str(merged.get("output_dir", f"qatgate-out/{scenario}"))

    initial = merged.get("initial", {"qubits": "gg", "alpha": [0.0, math.sqrt(5)]})
    if (not isinstance(initial, dict) or set(initial) - {"qubits", "alpha"}
            or initial.get("qubits", "gg") not in pipeline.QUBIT_LABELS):
        raise ConfigError("initial must be {qubits: ee|eg|ge|gg, alpha: [re, im]}", ln("initial"), source)
    alpha = initial.get("alpha", [0.0, 0.0])
    if not isinstance(alpha, list) or len(alpha) != 2:
        raise ConfigError("initial.alpha must be [re, im]", ln("initial"), source)
    cfg["initial"] = {"qubits": initial.get("qubits", "gg"),
                      "alpha": [_number(x, "initial.alpha", ln("initial"), source) for x in alpha]}

    eta_values = merged.get("eta_values", [])
    if not isinstance(eta_values, list):
        raise ConfigError("eta_values must be a list", ln("eta_values"), source)
    cfg["eta_values"] = tuple(_number(x, "eta_values entry", ln("eta_values"), source, 0, 0.5, lo_open=True)
                              for x in eta_values)
    if scenario == "convergence" and len(cfg["eta_values"]) < 2:
        raise ConfigError("convergence needs at least two eta_values", ln("eta_values"), source)
    scaled = merged.get("eta_scaled_bases", {}) or {}
    if not isinstance(scaled, dict) or set(scaled) - set(cfg["bases"]) or "nu" in scaled:
        raise ConfigError("eta_scaled_bases must map existing non-nu bases to coefficients",
                          ln("eta_scaled_bases"), source)
    cfg["eta_scaled_bases"] = {k: _number(v, f"eta_scaled_bases.{k}", ln("eta_scaled_bases"), source)
                               for k, v in scaled.items()}
    baseline = merged.get("shaping_baseline")
    if baseline is not None and baseline not in SCENARIOS[:3]:
        raise ConfigError(f"shaping_baseline must name a preset, got {baseline!r}", ln("shaping_baseline"), source)
    cfg["shaping_baseline"] = baseline
    checks = merged.get("checks", {}) or {}
    if not isinstance(checks, dict) or set(checks) - CHECK_KEYS:
        bad = sorted(set(checks) - CHECK_KEYS) if isinstance(checks, dict) else checks
        raise ConfigError(f"unknown check(s) {bad}", ln("checks"), source)
    cfg["checks"] = dict(checks)

    config = RunConfig(**cfg)
    try:
        for eta in config.eta_values or (config.eta,):
            config.model(eta)
    except msgate.ConfigurationError as exc:
        raise ConfigError(str(exc), None, source) from exc
    return config


def validate_config(path=None, scenario: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML config (or just a scenario name) into a normalized :class:`RunConfig`."""
    data, lines, source = {}, {}, "config"
    if path is not None:
        path = Path(path)
        source = path.name
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", None, source) from exc
        data, lines = _parse_yaml(text, source)
        if not data:
            raise ConfigError("config is empty; required: scenario (" + ", ".join(SCENARIOS) + ")", None, source)
    if scenario is not None:
        data = {**data, "scenario": scenario}
    data.update(overrides or {})
    return normalize(data, lines, source)


# --------------------------------------------------------------------------
# running

@dataclass
class CheckResult:
    name: str
    passed: bool
    value: Any
    threshold: Any

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: value={self.value} threshold={self.threshold}"


def _fmt(x) -> str:
    return f"{x:.12e}" if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path: Path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    rows = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([f"{x:.12e}" for x in row])


def write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def write_summary(path: Path, config: RunConfig, sections: dict[str, dict], checks: list[CheckResult]) -> None:
    parts = ["# qatgate run summary", "", "[config]", yaml.safe_dump(config.echo(), sort_keys=True).rstrip()]
    for title, table in sections.items():
        parts += ["", f"[{title}]"] + [f"{k} = {_fmt(v)}" for k, v in sorted(table.items())]
    parts += ["", "[checks]"] + [c.line() for c in checks]
    path.write_text("\n".join(parts) + "\n")


def evaluate_checks(config: RunConfig, scalars: dict) -> list[CheckResult]:
    c = config.checks
    out = []
    if c.get("peak_shift"):
        out.append(CheckResult("peak_shift", scalars["peak_shift"] > scalars["peak_shift_tolerance"],
                               scalars["peak_shift"], scalars["peak_shift_tolerance"]))
    if "min_visible_deviation" in c:
        out.append(CheckResult("visible_deviation", scalars["max_deviation"] > c["min_visible_deviation"],
                               scalars["max_deviation"], c["min_visible_deviation"]))
    if "min_tracking" in c:
        out.append(CheckResult("envelope_tracking", scalars["tracking"] >= c["min_tracking"],
                               scalars["tracking"], c["min_tracking"]))
    top = max(config.orders)
    if "min_f_avg" in c:
        vals = [scalars[f"f_avg_min_{top}"]] + [scalars[k] for k in (f"f_avg_min_{top}_n_max_check",) if k in scalars]
        out.append(CheckResult("f_avg_min", min(vals) >= c["min_f_avg"], min(vals), c["min_f_avg"]))
    if "gate_fidelity" in c:
        lo, hi = c["gate_fidelity"]
        vals = [scalars["gate_fidelity"]] + [scalars[k] for k in ("gate_fidelity_n_max_check",) if k in scalars]
        out.append(CheckResult("gate_fidelity", all(lo <= v <= hi for v in vals),
                               scalars.get("gate_fidelity_text", scalars["gate_fidelity"]), [lo, hi]))
    if "fast_deviation_factor" in c:
        bound = c["fast_deviation_factor"] * config.eta**5
        vals = [scalars[f"fast_deviation_gate_{top}"]] + [
            scalars[k] for k in (f"fast_deviation_gate_{top}_n_max_check",) if k in scalars]
        out.append(CheckResult("fast_deviation_gate", max(vals) < bound, max(vals), bound))
    if "min_shaping_improvement" in c:
        out.append(CheckResult("shaping_improvement", scalars["shaping_improvement"] >= c["min_shaping_improvement"],
                               scalars["shaping_improvement"], c["min_shaping_improvement"]))
    if "monotone_orders" in c:
        out.append(CheckResult("monotone_in_order", bool(scalars["monotone"]), scalars["largest_eta_errors"],
                               c["monotone_orders"]))
    if "min_slope" in c:
        n, lo = c["min_slope"]["order"], c["min_slope"]["value"]
        out.append(CheckResult(f"slope_order_{n}", scalars[f"slope_{n}"] >= lo, scalars[f"slope_{n}"], lo))
    return out


def _run_dynamics(config: RunConfig, out: Path) -> tuple[dict, list[CheckResult]]:
    model = config.model()
    result = pipeline.run_dynamics(model, config.settings())
    scalars = dict(result.scalars)
    if "bell_eff_1" in result.columns:
        scalars.update(pipeline.fig2_metrics(result))
    if config.shaping_baseline:
        base = normalize({"scenario": config.shaping_baseline, "n_max": config.n_max, "rel_tol": config.rel_tol})
        benefit = pipeline.shaping_benefit(model, base.model(), config.settings())
        scalars.update({f"shaping_{k}": v for k, v in benefit.items()})
    write_csv(out / "trace.csv", result.columns)
    result.expansion.save(out / "expansion.npz")
    checks = evaluate_checks(config, scalars)
    sections = {"model": _flatten(model.describe()), "scalars": scalars, "invariants": result.invariants,
                "stats": result.stats, "expansion": _flatten(result.expansion.metadata)}
    write_summary(out / "summary.txt", config, sections, checks)
    return scalars, checks


def _run_convergence(config: RunConfig, out: Path) -> tuple[dict, list[CheckResult]]:
    models = {eta: config.model(eta) for eta in config.eta_values}
    res = pipeline.convergence(models, config.settings(), tuple(config.checks.get("monotone_orders", (1, 2, 4))))
    write_rows(out / "convergence.csv", res.rows)
    scalars = {f"slope_{n}": s for n, s in res.slopes.items()}
    scalars["monotone"] = res.monotone
    scalars["largest_eta_errors"] = {n: float(f"{e:.6e}") for n, e in res.errors(max(config.eta_values)).items()}
    checks = evaluate_checks(config, scalars)
    sections = {"scalars": scalars, "table": {f"eta={r['eta']} N={r['order']}": r["error"] for r in res.rows}}
    write_summary(out / "summary.txt", config, sections, checks)
    return scalars, checks


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, list):
            for i, item in enumerate(v):
                out.update(_flatten(item, f"{key}.{i}.") if isinstance(item, dict) else {f"{key}.{i}": item})
        else:
            out[key] = v
    return out


def run_scenario(config: RunConfig) -> int:
    """Run one scenario and write its artifacts; returns the exit status."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if config.scenario == "convergence":
            _, checks = _run_convergence(config, out)
        else:
            _, checks = _run_dynamics(config, out)
    except (pipeline.InvariantViolation, propagate.IntegrationError, qat.QatError) as exc:
        log.error("invariant violation: %s", exc)
        return EXIT_INVARIANT
    except msgate.ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    for c in checks:
        log.info(c.line())
    failed = [c for c in checks if not c.passed]
    if failed:
        log.error("%d acceptance check(s) failed: %s", len(failed), ", ".join(c.name for c in failed))
        return EXIT_THRESHOLD
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qatgate", description="Run a quantum-averaging gate scenario.")
    p.add_argument("config", nargs="?", help="YAML config file (optional when --scenario is given)")
    p.add_argument("-s", "--scenario", choices=SCENARIOS, help="scenario preset (overrides the config's)")
    p.add_argument("-o", "--output", help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="errors only")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.config is None and args.scenario is None:
        print("qatgate: give a config file or --scenario", file=sys.stderr)
        return EXIT_CONFIG
    overrides = {"output_dir": args.output} if args.output else None
    try:
        config = validate_config(args.config, args.scenario, overrides)
    except ConfigError as exc:
        print(f"qatgate: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_scenario(config)


if __name__ == "__main__":
    sys.exit(main())

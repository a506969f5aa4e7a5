"""Command-line driver: config file in, report bundle and manifest out."""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (DEFAULT_FLEX_LEVELS, DEFAULT_LAMBDA_GRID, DEFAULT_PF_SET, build_scenario, compare_fas_duals,
                       needs_assessment, reactive_impact, run_dispatch, sweep_loss_penalty, verified_states,
                       write_assessment, write_fas_vs_duals, write_pareto, write_reactive)
from .errors import (DnflexError, NoKneeError, ParseError, TopologyError, ValidationError, VerificationError)
from .fas import FasConfig, write_fas_csv
from .network import builtin_network, parse_network, parse_profiles, synth_profiles
from .powerflow import simulate_horizon, write_state_dump
from .rdopf import RdopfConfig, verify_ac_feasibility, write_dispatch
from .sensitivity import LoadScenarioSampler, estimate_nvs, write_sensitivity_csv

MODES = ("dispatch", "pareto-sweep", "needs-assessment", "reactive-study", "fas-only", "twin-only")

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_SOLVE, EXIT_VERIFY = 0, 2, 3, 4, 5

DEFAULT_CONFIG = {
    "_doc": {
        "network": "'builtin' or a path to a network JSON document",
        "profiles": "{'synth': {'seed', 'scale'}} or a path to a profile CSV",
        "fas": "flexibility activation signal settings (voltages pu, dt_perm percent)",
        "rdopf": "dispatch settings; lambda_loss may be a number or 'knee' (sweep first, use the knee)",
        "nvs": "sensitivity estimation: scenario count U, sampler seed, perturbation delta_kw",
        "mode": " | ".join(MODES),
        "flex_levels": "flexibility levels in percent of instantaneous load",
        "pf_set": "lagging load power factors for reactive-study",
        "lambda_grid": "loss-penalty grid for pareto-sweep and lambda_loss='knee'",
        "knee_flex_level": "flexibility level whose sweep supplies the knee",
        "output": "run directory",
    },
    "network": "builtin",
    "profiles": {"synth": {"seed": 1, "scale": 1.0}},
    "fas": {f.name: f.default for f in fields(FasConfig)},
    "rdopf": {"lambda_loss": 0.0, "kkt_tol": 1e-6, "cone_tol": 1e-8, "formulation": "AC", "gen_limits_kw": {}},
    "nvs": {"U": 100, "seed": 0, "delta_kw": 1.0},
    "mode": "dispatch",
    "flex_levels": list(DEFAULT_FLEX_LEVELS),
    "pf_set": list(DEFAULT_PF_SET),
    "lambda_grid": [round(x, 6) for x in DEFAULT_LAMBDA_GRID],
    "knee_flex_level": 25.0,
    "output": "dnflex-out",
}


class UsageError(Exception):
    pass


class StageError(Exception):
    """A pipeline stage failed; carries the stage name and the underlying error."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ParseError, ValidationError, TopologyError)):
        return EXIT_PARSE
    if isinstance(exc, VerificationError):
        return EXIT_VERIFY
    return EXIT_SOLVE


# --------------------------------------------------------------------------- config


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "gen_limits_kw":
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _number_list(values, name) -> list[float]:
    if not isinstance(values, list) or not values:
        raise ParseError("must be a non-empty list of numbers", name)
    try:
        return [float(v) for v in values]
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), name) from exc


def load_config(doc: dict) -> dict:
    """Fill defaults and validate types; raises UsageError for a bad mode, ParseError otherwise."""
    if not isinstance(doc, dict):
        raise ParseError("config must be a JSON object", "config")
    unknown = set(doc) - set(DEFAULT_CONFIG)
    if unknown:
        raise ParseError(f"unknown keys {sorted(unknown)}", "config")
    cfg = _merge(DEFAULT_CONFIG, doc)
    cfg.pop("_doc", None)
    if cfg["mode"] not in MODES:
        raise UsageError(f"mode must be one of {', '.join(MODES)}")
    for key in ("flex_levels", "pf_set", "lambda_grid"):
        cfg[key] = _number_list(cfg[key], key)
    bad_fas = set(cfg["fas"]) - {f.name for f in fields(FasConfig)}
    bad_rd = set(cfg["rdopf"]) - {f.name for f in fields(RdopfConfig)}
    if bad_fas or bad_rd:
        raise ParseError(f"unknown keys {sorted(bad_fas | bad_rd)}", "fas/rdopf")
    lam = cfg["rdopf"]["lambda_loss"]
    if not (lam == "knee" or isinstance(lam, (int, float))):
        raise ParseError("must be a number or 'knee'", "rdopf.lambda_loss")
    return cfg


def _fas_config(cfg) -> FasConfig:
    try:
        return FasConfig(**cfg["fas"])
    except TypeError as exc:
        raise ParseError(str(exc), "fas") from exc


def _rdopf_config(cfg, fas_cfg: FasConfig, lambda_loss: float) -> RdopfConfig:
    rd = {k: v for k, v in cfg["rdopf"].items() if k != "lambda_loss"}
    rd["gen_limits_kw"] = {int(k): tuple(v) for k, v in rd.get("gen_limits_kw", {}).items()}
    return RdopfConfig.from_fas(fas_cfg, lambda_loss=float(lambda_loss), **rd)


def _inputs(cfg):
    if cfg["network"] == "builtin":
        net = builtin_network()
    else:
        net = parse_network(cfg["network"])
    prof_spec = cfg["profiles"]
    if isinstance(prof_spec, dict) and "synth" in prof_spec:
        synth = {"seed": 1, "scale": 1.0, **prof_spec["synth"]}
        prof = synth_profiles(net, seed=int(synth["seed"]), scale=float(synth["scale"]))
    elif isinstance(prof_spec, str):
        prof = parse_profiles(prof_spec, net)
    else:
        raise ParseError("expected {'synth': {...}} or a path", "profiles")
    return net, prof


def _inputs_hash(cfg) -> str:
    h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode())
    for key in ("network", "profiles"):
        val = cfg[key]
        if isinstance(val, str) and val != "builtin":
            h.update(Path(val).read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- run


class _Run:
    """Tracks artifacts and stage so a failure can be recorded faithfully."""

    def __init__(self, out: Path):
        self.out = out
        self.artifacts: list[Path] = []
        self.stage = "setup"
        self.iterations: dict[str, int] = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(p)
        return p

    def step(self, stage: str, fn, *args, **kwargs):
        self.stage = stage
        try:
            return fn(*args, **kwargs)
        except DnflexError as exc:
            raise StageError(stage, exc) from exc


def _dispatch_levels(run: _Run, cfg, scn, heatmaps: bool):
    reports = {}
    for level in cfg["flex_levels"]:
        tag = f"flex{level:g}"
        res = run.step(f"dispatch[{tag}]", run_dispatch, scn, level)
        run.iterations[tag] = int(sum(r.iterations for r in res.soc) + sum(r.iterations for r in res.ac))
        results = res.ac if scn.rdopf_cfg.formulation == "AC" else res.soc
        write_dispatch(scn.net, results, run.path(f"dispatch_{tag}.csv"), run.path(f"dispatch_{tag}.json"))
        run.step(f"verify[{tag}]", _verify_all, scn, results)
        states = verified_states(scn, results)
        reports[level] = run.step(f"assessment[{tag}]", needs_assessment, scn.net, results, states, scn.fas_cfg,
                                  scn.states)
        cmp = run.step(f"fas-vs-duals[{tag}]", compare_fas_duals, res.fas, res.soc)
        write_fas_vs_duals(run.path(f"fas_vs_duals_{tag}.csv" if len(cfg["flex_levels"]) > 1
                                    else "fas_vs_duals.csv"), cmp)
    run.artifacts.extend(write_assessment(run.out, scn.net, reports, heatmaps=heatmaps))


def _verify_all(scn, results):
    loads = scn.profiles.p_load_kw + 1j * scn.profiles.q_load_kvar
    for r in results:
        rep = verify_ac_feasibility(scn.net, r, loads[:, r.t], scn.profiles.p_gen_kw[:, r.t], scn.rdopf_cfg)
        if not rep.passed:
            raise VerificationError(f"t={r.t}: dispatch violates limits (v {rep.max_v_violation:.3g} pu, "
                                    f"loading {rep.max_loading_pct:.4g}%)")


def execute(cfg: dict, run: _Run) -> _Run:
    net, prof = run.step("inputs", _inputs, cfg)
    mode = cfg["mode"]
    if mode == "twin-only":
        states = run.step("twin", simulate_horizon, net, prof)
        write_state_dump(net, states, run.path("states_voltage.csv"), run.path("states_branch.csv"))
        return run

    fas_cfg = run.step("config", _fas_config, cfg)
    nvs = cfg["nvs"]
    sampler = LoadScenarioSampler(seed=int(nvs.get("seed", 0)))
    sens = run.step("nvs", estimate_nvs, net, sampler, int(nvs.get("U", 100)), float(nvs.get("delta_kw", 1.0)))
    write_sensitivity_csv(sens, run.path("sensitivity.csv"), run.path("sensitivity_samples.csv"))
    lam = cfg["rdopf"]["lambda_loss"]
    rd_cfg = run.step("config", _rdopf_config, cfg, fas_cfg, 0.0 if lam == "knee" else lam)
    scn = run.step("twin", build_scenario, net, prof, fas_cfg, rd_cfg, sens)
    write_state_dump(net, scn.states, run.path("states_voltage.csv"), run.path("states_branch.csv"))
    write_fas_csv(net, scn.fas, run.path("fas.csv"))
    if mode == "fas-only":
        return run

    if mode == "pareto-sweep":
        curves = [run.step(f"sweep[flex{lv:g}]", sweep_loss_penalty, scn, cfg["lambda_grid"], lv)
                  for lv in cfg["flex_levels"]]
        write_pareto(run.path("pareto.csv"), curves)
        return run

    if lam == "knee":
        curve = run.step("knee-sweep", sweep_loss_penalty, scn, cfg["lambda_grid"], cfg["knee_flex_level"])
        write_pareto(run.path("pareto.csv"), [curve])
        if curve.knee is None:
            raise StageError("knee-sweep", NoKneeError("sweep produced no knee"))
        scn = replace(scn, rdopf_cfg=replace(scn.rdopf_cfg, lambda_loss=curve.knee))
    if mode == "reactive-study":
        impact = run.step("reactive", reactive_impact, scn, cfg["pf_set"], cfg["flex_levels"])
        write_reactive(run.path("reactive.csv"), impact)
        return run
    _dispatch_levels(run, cfg, scn, heatmaps=mode == "needs-assessment")
    return run


def _versions() -> dict:
    return {"dnflex": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def run_scenario(cfg: dict, out_dir=None) -> tuple[int, dict]:
    """Run one configured study; returns (exit code, manifest)."""
    cfg = load_config(cfg)
    out = Path(out_dir or cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    manifest = {
        "mode": cfg["mode"],
        "config": cfg,
        "seed": {"nvs": cfg["nvs"].get("seed", 0), "profiles": cfg["profiles"].get("synth", {}).get("seed")
                 if isinstance(cfg["profiles"], dict) else None},
        "versions": _versions(),
    }
    t0 = time.perf_counter()
    run = _Run(out)
    code = EXIT_OK
    try:
        manifest["inputs_sha256"] = _inputs_hash(cfg)
        execute(cfg, run)
        manifest["status"] = "ok"
    except StageError as exc:
        code = exit_code_for(exc.cause)
        manifest.update(status="failed", stage=exc.stage, error=type(exc.cause).__name__, cause=str(exc.cause))
    except OSError as exc:
        code = EXIT_PARSE
        manifest.update(status="failed", stage="inputs", error=type(exc).__name__, cause=str(exc))
    manifest["wall_time_s"] = round(time.perf_counter() - t0, 3)
    if code != EXIT_OK:
        # keep whatever was written, clearly marked as incomplete
        kept = []
        for p in dict.fromkeys(run.artifacts):
            if p.exists():
                target = p.with_name(p.name + ".partial")
                p.replace(target)
                kept.append(target.name)
        manifest["artifacts"] = kept
    else:
        manifest["artifacts"] = sorted({p.name for p in run.artifacts if p.exists()})
        manifest["iterations"] = run.iterations
    _write_json(out / "manifest.json", manifest)
    return code, manifest


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnflex", description="Flexibility activation, dispatch and needs assessment "
                                                            "for low-voltage distribution feeders.")
    p.add_argument("--config", type=Path, help="JSON scenario config (defaults apply for missing keys)")
    p.add_argument("--mode", choices=MODES, help="override the configured run mode")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="seed for synthetic profiles and the sensitivity sampler")
    p.add_argument("--flex", type=_csv_floats, help="flexibility levels in percent, e.g. 0,25,100")
    p.add_argument("--lambda-loss", type=str, help="loss penalty, a number or 'knee'")
    p.add_argument("--pf", type=_csv_floats, help="power factors for reactive-study, e.g. 0.98,0.9")
    p.add_argument("--print-default-config", action="store_true", help="print the default config and exit")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        json.dump(DEFAULT_CONFIG, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return EXIT_OK
    doc: dict = {}
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"dnflex: cannot read config: {exc}", file=sys.stderr)
            return EXIT_PARSE
    if not isinstance(doc, dict):
        print("dnflex: config must be a JSON object", file=sys.stderr)
        return EXIT_PARSE
    if args.mode:
        doc["mode"] = args.mode
    if args.flex is not None:
        doc["flex_levels"] = args.flex
    if args.pf is not None:
        doc["pf_set"] = args.pf
    if args.lambda_loss is not None:
        try:
            lam = args.lambda_loss if args.lambda_loss == "knee" else float(args.lambda_loss)
        except ValueError:
            parser.error("--lambda-loss must be a number or 'knee'")
        doc.setdefault("rdopf", {})["lambda_loss"] = lam
    if args.seed is not None:
        doc.setdefault("nvs", {})["seed"] = args.seed
        if isinstance(doc.get("profiles", {}), dict):
            doc.setdefault("profiles", {}).setdefault("synth", {})["seed"] = args.seed
    try:
        code, manifest = run_scenario(doc, args.out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dnflex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DnflexError as exc:
        print(f"dnflex: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    if code != EXIT_OK:
        print(f"dnflex: {manifest.get('stage')} failed: {manifest.get('cause')}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

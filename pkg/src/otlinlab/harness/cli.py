"""Command line entry point.

    otlinlab {verify|gen|ot|harmonic|restriction|multiscale} [--config PATH] [--set KEY=VALUE ...] [--out DIR]

Exit codes: 0 success, 1 identity failure, 2 input error, 3 hypothesis not met
(reports are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..measures import DiscreteMeasure, write_csv
from ..transport import TransportError, solve_exact
from . import experiments as ex
from .config import EXPERIMENTS, ConfigError, load_config
from .verify import run_suite

log = logging.getLogger("otlinlab")

EXIT_OK, EXIT_IDENTITY, EXIT_INPUT, EXIT_HYPOTHESIS = 0, 1, 2, 3


class InputError(Exception):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        json.dump(_jsonable(doc), fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _seed_dir(out, seed):
    return Path(out) / f"seed_{seed}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify(cfg) -> int:
    res = run_suite(faults=cfg.get("faults") or ())
    res["config"] = cfg
    write_json(Path(cfg["out"]) / "verify.json", res)
    print(json.dumps(_jsonable({"identities": res["identities"], "passed": res["passed"]}), indent=1))
    return EXIT_OK if res["passed"] else EXIT_IDENTITY


def cmd_gen(cfg) -> int:
    for seed in cfg["seeds"]:
        mu, lam = ex.generate(cfg, seed)
        d = _seed_dir(cfg["out"], seed)
        d.mkdir(parents=True, exist_ok=True)
        mu.to_csv(d / "mu.csv")
        lam.to_csv(d / "nu.csv")
        write_json(d / "gen_report.json", {"config": cfg, "seed": seed, "mu": _checksum(mu), "nu": _checksum(lam)})
        print(f"seed {seed}: {mu.size} + {lam.size} atoms -> {d}")
    return EXIT_OK


def _checksum(m: DiscreteMeasure) -> dict:
    return {"atoms": m.size, "mass": m.total_mass, "first_moment": m.first_moment().tolist()}


def _read_measure(path) -> DiscreteMeasure:
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing input file {path}")
    try:
        return DiscreteMeasure.from_csv(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def cmd_ot(cfg) -> int:
    inputs = cfg.get("inputs") or {}
    for seed in cfg["seeds"]:
        d = _seed_dir(cfg["out"], seed)
        mu = _read_measure(inputs.get("mu") or d / "mu.csv")
        nu = _read_measure(inputs.get("nu") or d / "nu.csv")
        try:
            pi, rep = solve_exact(mu, nu, **ex._solver_kw(cfg))
        except TransportError as exc:
            raise InputError(str(exc)) from exc
        d.mkdir(parents=True, exist_ok=True)
        pi.to_csv(d / "coupling.csv")
        src, tgt = pi.source_measure(), pi.target_measure()
        write_json(d / "ot_report.json", {"config": cfg, "seed": seed, "report": rep.to_dict(),
                                          "mu": _checksum(mu), "nu": _checksum(nu),
                                          "coupling_source": _checksum(src), "coupling_target": _checksum(tgt)})
        print(f"seed {seed}: cost {rep.cost:.17g}, {rep.edges} pairs -> {d}")
    return EXIT_OK


def _per_seed(cfg, fn, name, **kw):
    reports = ex.run_seeds(fn, cfg, cfg["seeds"], **kw)
    for r in reports:
        write_json(Path(cfg["out"]) / f"{name}_seed{r['seed']}.json", r)
        if "error" in r:
            log.error("seed %s failed: %s", r["seed"], r["error"])
    return reports


def cmd_harmonic(cfg) -> int:
    reports = _per_seed(cfg, ex.harmonic_experiment, "harmonic")
    for r in reports:
        if "error" not in r:
            print(f"seed {r['seed']}: E {r['E']:.6g} D {r['D']:.6g} R {r['R']:.6g} ratio {r['ratio']:.6g}"
                  + ("" if r["hypothesis_met"] else "  [hypothesis not met]"))
    if all("error" in r for r in reports):
        return EXIT_INPUT
    return EXIT_HYPOTHESIS if any(not r.get("hypothesis_met", True) for r in reports) else EXIT_OK


def cmd_restriction(cfg) -> int:
    reports = _per_seed(cfg, ex.restriction_experiment, "restriction")
    ok = [r for r in reports if "error" not in r]
    ratios = [r["ratio"] for r in ok if r["ratio"] is not None]
    summary = {"config": cfg, "ratios": ratios,
               "spread": (max(ratios) / min(ratios)) if ratios and min(ratios) > 0 else None}
    write_json(Path(cfg["out"]) / "restriction_summary.json", summary)
    for r in ok:
        rt = "undefined (0/0)" if r["ratio"] is None else f"{r['ratio']:.6g}"
        print(f"seed {r['seed']}: numerator {r['numerator']:.6g} D {r['D']:.6g} ratio {rt}")
    return EXIT_OK if ok else EXIT_INPUT


def cmd_multiscale(cfg) -> int:
    out = Path(cfg["out"])
    reports = _per_seed(cfg, ex.multiscale_experiment, "multiscale", out_dir=out)
    ok = [r for r in reports if "error" not in r]
    from .. import multiscale as ms
    lv_rows = [[r["seed"]] + [row[c] for c in ms.LEVEL_COLUMNS] for r in ok for row in r["levels"]]
    dg_rows = [[r["seed"]] + [row[c] for c in ms.DIAG_COLUMNS] for r in ok for row in r["diagnostics"]]
    write_csv(out / "levels_merged.csv", ["seed"] + ms.LEVEL_COLUMNS, np.array(lv_rows, float).reshape(-1, 1 + len(ms.LEVEL_COLUMNS)))
    write_csv(out / "diagnostics_merged.csv", ["seed"] + ms.DIAG_COLUMNS, np.array(dg_rows, float).reshape(-1, 1 + len(ms.DIAG_COLUMNS)))
    fits = ex.merged_fits(ok)
    write_json(out / "multiscale_fits.json", {"config": cfg, "fits": fits, "seeds": [r["seed"] for r in ok]})
    for r in ok:
        print(f"seed {r['seed']}: {len(r['levels'])} levels ({r['stop_reason']}), E/beta spread {r['E_spread']}")
    print(json.dumps(_jsonable(fits), indent=1))
    return EXIT_OK if ok else EXIT_INPUT


COMMANDS = {"verify": cmd_verify, "gen": cmd_gen, "ot": cmd_ot, "harmonic": cmd_harmonic,
            "restriction": cmd_restriction, "multiscale": cmd_multiscale}


def build_parser():
    p = argparse.ArgumentParser(prog="otlinlab", description="Optimal transport linearization experiments.")
    p.add_argument("command", choices=EXPERIMENTS)
    p.add_argument("--config", help="JSON config, or a previously written report to replay")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dotted path (value parsed as JSON when possible)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        if args.out:
            overrides.append(f"out={json.dumps(args.out)}")
        cfg = load_config(args.command, args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, InputError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

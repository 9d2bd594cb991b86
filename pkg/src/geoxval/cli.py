"""Command-line front end: simulate, xval, stratified-xval, report.

Every option can come from a YAML config (``--config``); flags given on the
command line override config values. Exit status is 0 on success, 1 for
invalid input and 2 for runtime failures; failures also print a JSON error
record on stderr (and write ``error.json`` into the output directory).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .discrepancy import DiscrepancyKind
from .errors import DesignError, GeoXvalError, SchemaError
from .estimators import run_mc, run_sir
from .geodata import read_dataset, write_dataset
from .mcmc import ChainConfig, PriorConfig
from .models import ModelKind
from .scenarios import PRESETS, build_scenario, scenario_config
from .splits import SplitBatch, StratifiedDesign, quadrant_labels, rectangle_labels, sample_split_batch

RESULTS_SCHEMA = "geoxval.results/1"
MODEL_KEYS = {ModelKind.M1: 1, ModelKind.M2: 2, ModelKind.M3: 3}
ESTIMATOR_KEYS = {"mc": 1, "sir": 2}


class UsageError(GeoXvalError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ config handling


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a mapping")
    return cfg


def _pick(args, cfg: dict, key: str, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return cfg.get(key, default)


def _as_list(value) -> list:
    if value is None:
        return []
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _dump(obj) -> str:
    return json.dumps(_to_jsonable(obj), indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ simulate


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    scenario = _pick(args, cfg, "scenario")
    if scenario is None:
        raise UsageError("simulate needs --scenario")
    seed = _pick(args, cfg, "seed")
    if seed is None:
        raise UsageError("a seed is required")
    overrides = dict(cfg.get("overrides") or {})
    for key in ("m", "n"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    sc = scenario_config(scenario, seed=int(seed), **overrides)
    out = Path(_pick(args, cfg, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    ds, _ = build_scenario(sc)
    path = write_dataset(ds, out / f"{sc.name}.csv")
    (out / f"{sc.name}.meta.json").write_text(_dump(ds.metadata), encoding="utf-8")
    print(str(path))
    return 0


# ------------------------------------------------------------------ xval


def _design(args, cfg: dict, data) -> StratifiedDesign:
    scfg = dict(cfg.get("strata") or {})
    rule = getattr(args, "rule", None) or scfg.get("rule") or ("column" if data.strata is not None else "quadrants")
    if rule == "column":
        if data.strata is None:
            raise DesignError("dataset has no stratum column")
        labels = data.strata
    elif rule == "quadrants":
        labels = quadrant_labels(data.coords)
    elif rule == "rectangles":
        labels = rectangle_labels(data.coords, scfg.get("rectangles") or [])
    else:
        raise UsageError(f"unknown strata rule {rule!r}")
    nvk = _as_list(getattr(args, "nvk", None) or scfg.get("n_valid_per_stratum"))
    if nvk:
        return StratifiedDesign(labels, tuple(int(v) for v in nvk))
    nv = _pick(args, cfg, "nv")
    if nv is None:
        raise UsageError("stratified-xval needs --nv (total) or --nvk (per stratum)")
    return StratifiedDesign.proportional(labels, int(nv))


def _settings(args, cfg: dict, stratified: bool) -> dict:
    data_path = _pick(args, cfg, "data")
    if data_path is None:
        raise UsageError("needs --data")
    seed = _pick(args, cfg, "seed")
    if seed is None:
        raise UsageError("a seed is required")
    models = [ModelKind.parse(m) for m in _as_list(_pick(args, cfg, "models", "m1"))]
    estimators = [e.lower() for e in _as_list(_pick(args, cfg, "estimators", "mc"))]
    for e in estimators:
        if e not in ESTIMATOR_KEYS:
            raise UsageError(f"unknown estimator {e!r}; expected mc or sir")
    discs = [DiscrepancyKind.parse(d) for d in _as_list(_pick(args, cfg, "discrepancies", "mse"))]
    if not models or not estimators or not discs:
        raise UsageError("need at least one model, estimator and discrepancy")
    J = _pick(args, cfg, "J")
    J_mc = _pick(args, cfg, "J_mc", J)
    J_sir = _pick(args, cfg, "J_sir", J)
    if "mc" in estimators and J_mc is None:
        raise UsageError("MC runs need an explicit --J or --J-mc")
    if "sir" in estimators and J_sir is None:
        raise UsageError("SIR runs need an explicit --J or --J-sir")
    H = int(_pick(args, cfg, "H", 5))
    I = _pick(args, cfg, "splits")
    prior_d = dict(cfg.get("prior") or {})
    if args.tau2 is not None:
        prior_d["tau2_fixed"] = args.tau2
    if args.nu_fixed is not None:
        prior_d["nu_fixed"] = args.nu_fixed
    chain_d = dict(cfg.get("chain") or {})
    for key in ("burn_in", "thin"):
        v = getattr(args, key)
        if v is not None:
            chain_d[key] = v
    chain_d.setdefault("burn_in", 1000)
    chain_d.setdefault("n_iter", chain_d["burn_in"] + 1)
    return {
        "command": "stratified-xval" if stratified else "xval",
        "data": str(data_path), "seed": int(seed),
        "models": [m.value for m in models], "estimators": estimators, "discrepancies": [d.value for d in discs],
        "nv": _pick(args, cfg, "nv"), "splits": None if I is None else int(I),
        "J_mc": None if J_mc is None else int(J_mc), "J_sir": None if J_sir is None else int(J_sir), "H": H,
        "prior": PriorConfig.from_dict(prior_d).to_dict(), "chain": ChainConfig.from_dict(chain_d).to_dict(),
        "splits_file": _pick(args, cfg, "splits_file"),
        "workers": int(_pick(args, cfg, "workers", 1)),
    }


def run_xval(settings: dict, out: Path, design: Optional[StratifiedDesign], data) -> dict:
    seed = settings["seed"]
    if settings["splits_file"]:
        splits = SplitBatch.read_csv(settings["splits_file"], design=design)
        if splits.n != data.n:
            raise DesignError(f"split file covers {splits.n} sites but the dataset has {data.n}")
    else:
        if settings["splits"] is None:
            raise UsageError("needs --splits (number of split vectors) or --splits-file")
        split_ss = np.random.SeedSequence(seed, spawn_key=(0,))
        if design is None:
            if settings["nv"] is None:
                raise UsageError("xval needs --nv")
            nv = int(settings["nv"])
            if not 1 <= nv < data.n:
                raise DesignError(f"n_V must satisfy 1 <= n_V < n = {data.n}, got {nv}")
            splits = sample_split_batch(settings["splits"], split_ss, n=data.n, n_V=nv)
        else:
            splits = sample_split_batch(settings["splits"], split_ss, design=design)
    prior = PriorConfig.from_dict(settings["prior"])
    chain = ChainConfig.from_dict(settings["chain"])
    kinds = [DiscrepancyKind.parse(d) for d in settings["discrepancies"]]
    entries, chains_rows, per_split_cols, timing = [], [], {}, {}
    for mname in settings["models"]:
        model = ModelKind.parse(mname)
        for est in settings["estimators"]:
            ss = np.random.SeedSequence(seed, spawn_key=(MODEL_KEYS[model], ESTIMATOR_KEYS[est]))
            if est == "mc":
                run = run_mc(model, data, splits, settings["J_mc"], kinds, prior, chain, ss, design=design,
                             workers=settings["workers"])
            else:
                run = run_sir(model, data, splits, settings["H"], settings["J_sir"], kinds, prior, chain, ss,
                              design=design, workers=settings["workers"])
            timing[f"{model.label}/{est}"] = run.elapsed
            for row in run.chains:
                chains_rows.append({"model": model.label, "estimator": est, **row})
            for kind in kinds:
                outp = run.stratified(kind) if design is not None else run.estimate(kind)
                entries.append(outp.to_dict())
                key = f"{model.label}_{est}_{kind.value}"
                ps = outp.per_split
                if ps.ndim == 1:
                    per_split_cols[key] = ps
                else:
                    for k, lab in enumerate(design.strata):
                        per_split_cols[f"{key}_k{lab}"] = ps[:, k]
    # worker count affects scheduling only; keep it out of the bit-exact document
    audit = {k: v for k, v in settings.items() if k != "workers"}
    results = {
        "schema": RESULTS_SCHEMA, "version": __version__, "config": audit,
        "dataset": {"path": settings["data"], "n": data.n, "name": data.name},
        "splits": {"I": len(splits), "n_V": splits.n_V, "n_T": splits.n_T, "descriptor": splits.descriptor},
        "design": None if design is None else {"table": design.table(), "f_V": design.f_V},
        "results": entries,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(_dump(results), encoding="utf-8")
    splits.write_csv(out / "splits.csv")
    _write_rows(out / "chains.csv", chains_rows)
    ps_rows = [{"split": i + 1, **{k: float(v[i]) for k, v in per_split_cols.items()}} for i in range(len(splits))]
    _write_rows(out / "per_split.csv", ps_rows)
    (out / "timing.json").write_text(_dump({"seconds": timing, "workers": settings["workers"]}), encoding="utf-8")
    return results


def _write_rows(path: Path, rows: list):
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in cols])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_xval(args, stratified: bool = False) -> int:
    cfg = load_config(args.config)
    settings = _settings(args, cfg, stratified)
    data = read_dataset(settings["data"])
    design = None
    if stratified:
        design = _design(args, cfg, data)
        settings["design"] = {"labels_rule": getattr(args, "rule", None) or (cfg.get("strata") or {}).get("rule"),
                              "n_Vk": list(design.n_valid)}
    out = Path(_pick(args, cfg, "out", "."))
    res = run_xval(settings, out, design, data)
    for e in res["results"]:
        se = e["std_error"]
        se_txt = "n/a" if se is None else f"{se:.4g}"
        print(f"{e['model']:>3} {e['estimator']:<15} {e['discrepancy']:<12} psi={e['psi_hat']:.6g} se={se_txt}")
    return 0


# ------------------------------------------------------------------ report


def load_results(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"results file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not a JSON document: {exc}") from None
    if not isinstance(doc, dict) or doc.get("schema") != RESULTS_SCHEMA:
        raise SchemaError(f"{path} has schema {doc.get('schema') if isinstance(doc, dict) else None!r}; "
                          f"expected {RESULTS_SCHEMA}")
    for e in doc.get("results", []):
        missing = {"model", "estimator", "discrepancy", "psi_hat", "std_error"} - set(e)
        if missing:
            raise SchemaError(f"{path}: result entry lacks {sorted(missing)}")
    return doc


def report_rows(docs: Sequence[dict]) -> list[dict]:
    """Flatten result documents; ``best`` marks the smallest psi among models per row group."""
    rows = []
    for doc in docs:
        ds = doc.get("dataset", {}).get("name") or doc.get("dataset", {}).get("path", "")
        for e in doc["results"]:
            rows.append({"dataset": ds, "model": e["model"], "estimator": e["estimator"],
                         "discrepancy": e["discrepancy"], "stratum": "all", "psi_hat": e["psi_hat"],
                         "std_error": e["std_error"], "best": False})
            for s in e.get("per_stratum") or []:
                rows.append({"dataset": ds, "model": e["model"], "estimator": e["estimator"],
                             "discrepancy": e["discrepancy"], "stratum": str(s["stratum"]),
                             "psi_hat": s["psi_hat"], "std_error": s["std_error"], "best": False})
    groups = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["estimator"], r["discrepancy"], r["stratum"]), []).append(r)
    for grp in groups.values():
        best = min(grp, key=lambda r: r["psi_hat"])
        best["best"] = True
    return rows


def format_table(rows: list[dict]) -> str:
    head = ["dataset", "model", "estimator", "discrepancy", "stratum", "psi_hat", "std_error", "min"]
    body = []
    for r in rows:
        se = r["std_error"]
        body.append([str(r["dataset"]), r["model"], r["estimator"], r["discrepancy"], r["stratum"],
                     f"{r['psi_hat']:.4f}", "n/a" if se is None else f"{se:.4g}", "*" if r["best"] else ""])
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths)).rstrip()]
    for b in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(b, widths)).rstrip())
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    if not args.results:
        raise UsageError("report needs at least one results document")
    docs = [load_results(p) for p in args.results]
    rows = report_rows(docs)
    text = format_table(rows)
    sys.stdout.write(text)
    if args.csv:
        _write_rows(Path(args.csv), rows)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geoxval", description="Bayesian cross-validation for geostatistical models.")
    p.add_argument("--version", action="version", version=f"geoxval {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a scenario dataset")
    s.add_argument("--config")
    s.add_argument("--scenario", choices=sorted(PRESETS))
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--m", type=int, help="lattice size")
    s.add_argument("--n", type=int, help="exact number of sites")

    for name in ("xval", "stratified-xval"):
        x = sub.add_parser(name, help=f"{'stratified ' if name != 'xval' else ''}cross-validation")
        x.add_argument("--config")
        x.add_argument("--data")
        x.add_argument("--models")
        x.add_argument("--estimator", "--estimators", dest="estimators")
        x.add_argument("--discrepancy", "--discrepancies", dest="discrepancies")
        x.add_argument("--nv", type=int, help="number of validation sites (total when stratified)")
        x.add_argument("--splits", type=int, help="number of split vectors I")
        x.add_argument("--splits-file", dest="splits_file")
        x.add_argument("--J", type=int, dest="J")
        x.add_argument("--J-mc", type=int, dest="J_mc")
        x.add_argument("--J-sir", type=int, dest="J_sir")
        x.add_argument("--H", type=int, dest="H")
        x.add_argument("--burn-in", type=int, dest="burn_in")
        x.add_argument("--thin", type=int)
        x.add_argument("--tau2", type=float)
        x.add_argument("--nu-fixed", type=float, dest="nu_fixed")
        x.add_argument("--seed", type=int)
        x.add_argument("--workers", type=int)
        x.add_argument("--out")
        if name == "stratified-xval":
            x.add_argument("--rule", choices=["column", "quadrants", "rectangles"])
            x.add_argument("--nvk", help="validation sites per stratum, comma separated")

    r = sub.add_parser("report", help="tabulate results documents")
    r.add_argument("results", nargs="*")
    r.add_argument("--csv")
    return p


def _error_record(exc: BaseException, kind: str) -> dict:
    rec = {"status": "error", "kind": kind, "type": type(exc).__name__, "message": str(exc)}
    for attr in ("row", "column", "index"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    cause = getattr(exc, "cause", None)
    if cause is not None:
        rec["cause"] = type(cause).__name__
    return rec


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out_dir = None
    try:
        args = build_parser().parse_args(argv)
        out_dir = getattr(args, "out", None)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "xval":
            return cmd_xval(args)
        if args.command == "stratified-xval":
            return cmd_xval(args, stratified=True)
        if args.command == "report":
            return cmd_report(args)
        raise UsageError("no command given; use simulate, xval, stratified-xval or report")
    except ValueError as exc:
        code, rec = 1, _error_record(exc, "validation")
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        code, rec = 2, _error_record(exc, "runtime")
    text = json.dumps(_to_jsonable(rec), sort_keys=True)
    sys.stderr.write(text + "\n")
    if out_dir:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``fdilab <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .attack import AttackConfig, LimitedAttackPlan, perturb, perturb_limited
from .detectors import LearnedDetector, evaluate_bypass, train_learned_detector
from .estimation import BddConfig
from .experiments import KINDS, ResultTable, SweepSpec, emit_report, make_estimator, run_sweep
from .grid import describe, load_case
from .models import (MaskConfig, load_model, save_model, train_masked_pgae, train_pgae,
                     train_standard_ae)
from .nn import TrainConfig
from .powerflow import NoiseModel
from .scenario import (Dataset, ScenarioConfig, generate_timeseries, read_series_csv,
                       schema_for, write_series_csv)


def _sidecar(path: str) -> str:
    return path.rsplit(".", 1)[0] + ".json"


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _load_dataset(path: str) -> Dataset:
    """Series CSV plus the JSON sidecar written by ``data gen``."""
    with open(_sidecar(path)) as fh:
        side = json.load(fh)
    cfg = ScenarioConfig.from_json(side["scenario"])
    case = load_case(side.get("case_path") or cfg.case)
    schema = schema_for(case, cfg.schema)
    labels, t, Z, _ = read_series_csv(path)
    if labels != schema.labels(case):
        raise SystemExit(f"{path}: column labels do not match the {cfg.schema!r} schema")
    n = len(t)
    empty = np.full((n, case.n_bus), np.nan)
    return Dataset(case, schema, Z, np.full_like(Z, np.nan), empty, empty.copy(),
                   NoiseModel(np.array(side["sigma"])), t, cfg, side)


def _train_config(args) -> TrainConfig:
    return TrainConfig(max_iterations=args.iterations, seed=args.seed,
                       iteration_unit=args.unit)


# ---------------------------------------------------------------------------
# commands

def cmd_case_parse(args) -> int:
    print(json.dumps(describe(load_case(args.file)), indent=2))
    return 0


def cmd_data_gen(args) -> int:
    if args.config:
        with open(args.config) as fh:
            cfg = ScenarioConfig.from_json(json.load(fh))
    else:
        cfg = ScenarioConfig(case=args.case, n_samples=args.n, noise_percent=args.noise,
                             seed=args.seed, schema=args.schema)
    ds = generate_timeseries(cfg)
    write_series_csv(args.out, ds.schema.labels(ds.case), ds.t, ds.Z)
    _write_json(_sidecar(args.out), {"scenario": cfg.to_json(), "sigma": ds.noise.sigma.tolist(),
                                     "schema_hash": ds.schema.digest(), **ds.meta})
    print(f"wrote {len(ds)} samples x {ds.schema.m} channels to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = _load_dataset(args.data)
    cfg = _train_config(args)
    if args.kind == "pgae":
        model = train_pgae(ds, ds.case, d=args.latent, config=cfg)
    elif args.kind == "ae":
        model = train_standard_ae(ds, args.latent or 2 * ds.case.n_bus - 2, cfg)
    elif args.kind == "masked":
        model, profile = train_masked_pgae(ds, ds.case, d=args.latent,
                                           mask=MaskConfig(args.keep or ds.schema.m, args.seed),
                                           config=cfg)
        model.meta["error_profile"] = profile.tolist()
    else:
        det = train_learned_detector(ds, args.alpha, cfg, d=args.latent)
        _write_json(args.out, det.to_json())
        print(f"detector threshold {det.tau:.6g} at alpha={args.alpha}")
        return 0
    save_model(model, args.out)
    print(f"saved {args.kind} model to {args.out} (final loss {model.meta['final_loss']:.6g})")
    return 0


def cmd_attack(args) -> int:
    ds = _load_dataset(args.data)
    model = load_model(args.model)
    c = [float(v) for v in args.c.split(",")] if "," in args.c else [float(args.c)] * model.d
    cfg = AttackConfig(tuple(c), args.gamma)
    if args.meters:
        plan = LimitedAttackPlan(tuple(int(i) for i in args.meters.split(",")))
        Za = perturb_limited(model, ds.Z, cfg, plan)
    else:
        plan = None
        Za = perturb(model, ds.Z, cfg)
    out = args.out
    labels = ds.schema.labels(ds.case)
    t = np.concatenate([ds.t, ds.t]) if args.with_nominal else ds.t
    rows = np.vstack([ds.Z, Za]) if args.with_nominal else Za
    prov = (["nominal"] * len(ds) if args.with_nominal else []) + ["attacked"] * len(ds)
    write_series_csv(out, labels, t, rows, prov)
    side = dict(ds.meta)
    side.update(attack=cfg.to_json(), model=args.model,
                meters=None if plan is None else list(plan.channels))
    _write_json(_sidecar(out), side)
    print(f"wrote attacked series to {out}")
    return 0


def cmd_detect(args) -> int:
    ds = _load_dataset(args.data)
    labels, t, Z, prov = read_series_csv(args.data)
    if prov is not None:
        Z = Z[[p == "attacked" for p in prov]]
    est = make_estimator(ds)
    bdd = BddConfig.for_estimator(est, args.alpha)
    det = None
    if args.learned:
        with open(args.learned) as fh:
            det = LearnedDetector.from_json(json.load(fh))
    rep = evaluate_bypass(Z, est, bdd, det, config={"data": args.data})
    sys.stdout.write(rep.csv_row())
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(rep.to_json())
    return 0


def cmd_sweep(args) -> int:
    grid = tuple(_parse_value(v) for v in args.grid.split(",")) if args.grid else ()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    spec = SweepSpec(args.kind, grid, seeds)
    scen = ScenarioConfig(case=args.case, n_samples=args.n, seed=args.data_seed)
    table = run_sweep(spec, scen, _train_config(args))
    for path in emit_report(table, args.out):
        print(path)
    _write_json(f"{args.out}/table.json", table.to_json())
    return 0


def cmd_report(args) -> int:
    with open(args.inp) as fh:
        table = ResultTable.from_json(json.load(fh))
    for path in emit_report(table, args.out):
        print(path)
    return 0


def _parse_value(s: str):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def _add_train_opts(p):
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--unit", choices=("epoch", "step"), default="epoch")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdilab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    case = sub.add_parser("case", help="inspect network cases")
    case_sub = case.add_subparsers(dest="action", required=True)
    p = case_sub.add_parser("parse", help="parse a MATPOWER case and print a summary")
    p.add_argument("file")
    p.set_defaults(func=cmd_case_parse)

    data = sub.add_parser("data", help="synthetic measurement series")
    data_sub = data.add_subparsers(dest="action", required=True)
    p = data_sub.add_parser("gen", help="generate a noisy time series")
    p.add_argument("--case", default="case14")
    p.add_argument("--n", type=int, default=1440)
    p.add_argument("--noise", type=float, default=2.0, help="noise in percent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schema", default="full", choices=("full", "p_inj"))
    p.add_argument("--config", help="JSON scenario config (overrides the flags)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data_gen)

    p = sub.add_parser("train", help="train an autoencoder or learned detector")
    p.add_argument("kind", choices=("pgae", "ae", "masked", "detector"))
    p.add_argument("--case", help="ignored; the case comes from the data sidecar")
    p.add_argument("--data", required=True)
    p.add_argument("--latent", type=int)
    p.add_argument("--keep", type=int, help="kept channels for masked training")
    p.add_argument("--alpha", type=float, default=0.05, help="detector significance")
    p.add_argument("--out", required=True)
    _add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="perturb a measurement series in latent space")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--c", default="0.1", help="scalar or comma-separated latent offset")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--meters", help="comma-separated channel indices to modify")
    p.add_argument("--with-nominal", action="store_true",
                   help="also write the nominal rows, tagged by provenance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("detect", help="bypass rates of BDD and an optional learned detector")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--learned", help="detector JSON from 'train detector'")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("sweep", help="run a sensitivity sweep")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--grid", help="comma-separated values (default per kind)")
    p.add_argument("--seeds", default="0")
    p.add_argument("--case", default="case14")
    p.add_argument("--n", type=int, default=1440)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_opts(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-emit report files from a saved table")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``fedmarket <verb> [options]``.

Exit status is 0 on success, 1 when an audit finds violations, 2 for bad
arguments or configs and 3 when a phase fails (the phase is named on stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .estimation import KINDS, SINGLE_SCALE_KINDS, fit, load_records, project_scale
from .feature_io import write_csv, write_fmkt
from .harness import (
    STUDIES,
    ConfigError,
    PhaseError,
    ScenarioConfig,
    build_world,
    load_config,
    load_pool,
    make_session,
    run_scenario,
    run_study,
    run_trials,
    serve_parties_in_threads,
    settle_log,
    tomllib,
    write_curves,
    write_table,
)
from .marketplace import run_formal_training, run_selection_phase, serve_party, write_report
from .protocol import DEFAULT_PORT, AuditLog, InProcTransport, TcpTransport, audit_no_raw_leak

EXIT_AUDIT_FAIL = 1
EXIT_USAGE = 2
EXIT_PHASE = 3


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise ConfigError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _literal(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _ratio(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(",")])


def config_from_args(args) -> ScenarioConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _literal(value.strip())
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output.dir"] = args.out
    return load_config(args.config, **overrides)


@contextmanager
def open_session(args, cfg: ScenarioConfig):
    """A platform session on the requested transport.

    ``--transport tcp --listen ADDR`` waits for parties started with
    ``fedmarket serve --connect ADDR``; plain ``--transport tcp`` hosts the
    parties on local threads behind an ephemeral relay.
    """
    world = build_world(cfg)
    if args.transport == "inproc":
        sess, _ = make_session(cfg, world)
        yield sess, world
        return
    if args.listen:
        tr = TcpTransport(*_address(args.listen), listen=True)
    else:
        tr = TcpTransport(port=0, listen=True)
        serve_parties_in_threads(cfg, world, tr.address)
    try:
        sess, _ = make_session(cfg, world, tr, remote=True)
        yield sess, world
    finally:
        tr.close()


def _finish(sess, out: Path) -> None:
    sess.close()
    if not isinstance(sess.transport, InProcTransport):
        settle_log(sess.log)
    sess.log.write(out / "audit.jsonl")


def _records_path(args, cfg) -> Path:
    return Path(args.records) if args.records else cfg.out_dir / "records.jsonl"


# ---------------------------------------------------------------- verbs


def cmd_gen_data(args, cfg):
    pool, val = load_pool(cfg)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write = write_csv if args.format == "csv" else write_fmkt
    for name, data in (("train", pool), ("val", val)):
        path = out / f"{name}.{args.format}"
        write(path, data)
        print(f"{path}  n={data.n} d={data.points.shape[1]}")


def cmd_trial_runs(args, cfg):
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open_session(args, cfg) as (sess, _):
        records = run_trials(cfg, sess, args.resume)
        _finish(sess, out)
    write_report(out / "report.csv", records)
    write_curves(out / "curves.csv", records, cfg.m)
    print(f"{len(records)} trial records in {out / 'records.jsonl'}")


def cmd_fit(args, cfg):
    records = load_records(_records_path(args, cfg))
    kind = args.kind or cfg["estimator.kind"]
    fits = []
    for n in sorted({r.n for r in records}):
        est = fit([r for r in records if r.n == n], kind, ridge=float(cfg["estimator.ridge"]))
        fits.append({"n": n, "records": sum(r.n == n for r in records), "params": est.params.tolist(),
                     "r2_train": est.r2_train})
        print(f"n={n:<6} r2={est.r2_train:.4f} params={np.round(est.params, 5).tolist()}")
    if kind not in SINGLE_SCALE_KINDS and len(fits) > 1:
        est = fit(records, kind, ridge=float(cfg["estimator.ridge"]))
        fits.append({"n": "all", "records": len(records), "params": est.params.tolist(), "r2_train": est.r2_train})
        print(f"n=all    r2={est.r2_train:.4f}")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "fit.json").write_text(json.dumps({"kind": kind, "fits": fits}, indent=2) + "\n")


def cmd_select(args, cfg):
    records = load_records(_records_path(args, cfg))
    n = args.budget or int(cfg["formal.budget"])
    with open_session(args, cfg) as (sess, _):
        sel = run_selection_phase(sess, records, n, args.kind or cfg["estimator.kind"], cfg.p0(),
                                  int(cfg["optimizer.steps"]), float(cfg["optimizer.alpha0"]),
                                  float(cfg["estimator.ridge"]))
        sess.close()
    out = cfg.out_dir
    write_table(out / "selection.csv", ["step", *(f"p_{i}" for i in range(cfg.m)), "projected"],
                [[k, *map(repr, map(float, p)), repr(float(v))] for k, (p, v) in enumerate(sel.trajectory)])
    result = {"p_star": sel.p_star.tolist(), "projected_accuracy": sel.projected, "n": n,
              "fit_budgets": list(sel.budgets)}
    (out / "selection.json").write_text(json.dumps(result, indent=2) + "\n")
    print(f"p* = {np.round(sel.p_star, 4).tolist()}  projected accuracy at N={n}: {sel.projected:.4f}")


def cmd_project(args, cfg):
    target = args.budget or int(cfg["formal.budget"])
    if args.values:
        v0, v1, n0, n1 = args.values
        print(repr(project_scale(v0, v1, n0, n1, target)))
        return
    records = load_records(_records_path(args, cfg))
    budgets = sorted({r.n for r in records})
    if len(budgets) < 2:
        raise ValueError("projection needs records at two budgets")
    n0, n1 = budgets[0], budgets[-1]
    by_ratio: dict = {}
    for r in records:
        by_ratio.setdefault(tuple(r.p.tolist()), {})[r.n] = r.v
    rows = [(p, v[n0], v[n1], project_scale(v[n0], v[n1], n0, n1, target))
            for p, v in by_ratio.items() if n0 in v and n1 in v]
    path = cfg.out_dir / "projection.csv"
    write_table(path, [*(f"p_{i}" for i in range(cfg.m)), f"v_{n0}", f"v_{n1}", f"projected_{target}"],
                [[repr(float(x)) for x in (*p, a, b, c)] for p, a, b, c in rows])
    print(f"{len(rows)} ratios projected from N={n0},{n1} to N={target}: {path}")


def cmd_formal_train(args, cfg):
    if args.ratio:
        p = _ratio(args.ratio)
    elif (cfg.out_dir / "selection.json").exists():
        p = np.array(json.loads((cfg.out_dir / "selection.json").read_text())["p_star"])
    else:
        p = cfg.p0()
    n = args.budget or int(cfg["formal.budget"])
    with open_session(args, cfg) as (sess, _):
        _, res = run_formal_training(sess, p, n)
        sess.close()
    result = {"p": p.tolist(), "n": n, "accuracy": res.accuracy, "loss": res.loss}
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "formal.json").write_text(json.dumps(result, indent=2) + "\n")
    print(f"p = {np.round(p, 4).tolist()}  N={n}  accuracy {res.accuracy:.4f}  loss {res.loss:.4f}")


def cmd_run(args, cfg):
    if args.transport == "inproc":
        res = run_scenario(cfg, args.resume)
    else:
        world = build_world(cfg)
        tr = TcpTransport(*_address(args.listen), listen=True) if args.listen else TcpTransport(port=0, listen=True)
        try:
            if not args.listen:
                serve_parties_in_threads(cfg, world, tr.address)
            res = run_scenario(cfg, args.resume, transport=tr, remote=True)
        finally:
            tr.close()
    print((res.out_dir / "summary.json").read_text(), end="")
    return 0 if res.audit_passed else EXIT_AUDIT_FAIL


def cmd_study(args, cfg):
    path = run_study(args.name, cfg)
    print(path.read_text(), end="")


def cmd_audit(args, cfg):
    log = AuditLog.read(args.log or cfg.out_dir / "audit.jsonl")
    report = audit_no_raw_leak(log, build_world(cfg).raw(), float(cfg["interp.t_min"]))
    print(report.summary())
    return 0 if report.passed else EXIT_AUDIT_FAIL


def cmd_serve(args, cfg):
    if not args.connect:
        raise ConfigError("serve needs --connect HOST:PORT")
    sellers, buyer = build_world(cfg).parties(cfg)
    parties = {p.id: p for p in [*sellers, buyer]}
    if args.party not in parties:
        raise ConfigError(f"unknown party {args.party!r}; choose from {', '.join(parties)}")
    print(f"{args.party} serving on {args.connect}", flush=True)
    transport = TcpTransport(*_address(args.connect))
    try:
        serve_party(parties[args.party], transport)
    finally:
        transport.close()


VERBS = {
    "gen-data": (cmd_gen_data, "write the training pool and validation set as feature files"),
    "trial-runs": (cmd_trial_runs, "run the trial phase and write records.jsonl"),
    "fit": (cmd_fit, "fit an estimator to trial records at each budget"),
    "select": (cmd_select, "choose a mixing ratio for the formal budget"),
    "project": (cmd_project, "project accuracies from two budgets to a larger one"),
    "formal-train": (cmd_formal_train, "train on the chosen ratio and report buyer-side accuracy"),
    "run": (cmd_run, "whole scenario: trials, selection, formal training, reports"),
    "study": (cmd_study, "run one of the batch studies"),
    "audit": (cmd_audit, "check an audit log for raw-data leaks"),
    "serve": (cmd_serve, "host one party for a platform started with --listen"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="label_skew.cfg",
                        help="scenario config, a path or bundled name (default label_skew.cfg)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="override output.dir")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (TOML value syntax)")
    common.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    common.add_argument("--listen", metavar="HOST:PORT", help=f"relay address for remote parties (port {DEFAULT_PORT} by convention)")
    common.add_argument("--connect", metavar="HOST:PORT", help="relay address a served party connects to")

    parser = argparse.ArgumentParser(prog="fedmarket", description="Federated data marketplace experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)
    subs = {verb: sub.add_parser(verb, parents=[common], help=text, description=text)
            for verb, (_, text) in VERBS.items()}
    subs["gen-data"].add_argument("--format", choices=("fmkt", "csv"), default="fmkt")
    for verb in ("trial-runs", "run"):
        subs[verb].add_argument("--resume", action="store_true", help="keep existing records.jsonl and continue")
    for verb in ("fit", "select", "project"):
        subs[verb].add_argument("--records", help="records file (default OUT/records.jsonl)")
    for verb in ("fit", "select"):
        subs[verb].add_argument("--kind", choices=KINDS)
    for verb in ("select", "project", "formal-train"):
        subs[verb].add_argument("--budget", type=int, help="target budget N (default formal.budget)")
    subs["project"].add_argument("--values", type=float, nargs=4, metavar=("V0", "V1", "N0", "N1"),
                                 help="project one pair of accuracies instead of a records file")
    subs["formal-train"].add_argument("--ratio", help="comma-separated mixing ratio (default: last selection, else p0)")
    subs["study"].add_argument("name", choices=STUDIES)
    subs["audit"].add_argument("--log", help="audit log (default OUT/audit.jsonl)")
    subs["serve"].add_argument("--party", required=True, help="party id, e.g. seller0 or buyer")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = VERBS[args.verb][0]
    try:
        cfg = config_from_args(args)
        return handler(args, cfg) or 0
    except ConfigError as exc:
        print(f"fedmarket: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PhaseError as exc:
        print(f"fedmarket: phase {exc.phase} failed: {exc.cause}", file=sys.stderr)
        return EXIT_PHASE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"fedmarket: phase {args.verb} failed: {exc}", file=sys.stderr)
        return EXIT_PHASE


if __name__ == "__main__":
    sys.exit(main())

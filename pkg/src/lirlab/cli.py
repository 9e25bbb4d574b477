"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or tolerance violation, 2 usage error.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys

from . import __version__
from .config import ConfigError, RunConfig, load_config, default_config, thread_cap, write_meta
from .pdg import Focus, PDGError, load_pdg, save_pdg

log = logging.getLogger("lirlab")

EVAL_COLUMNS = ("iter", "loss", "l1", "jsd", "mode_coverage")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _opt(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lirlab", description="PDG inconsistency, LIR and GFlowNet benchmarks.")
    p.add_argument("--version", action="version", version=f"lirlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(q):
        q.add_argument("--config", default=None, help="JSON config; explicit flags win")
        q.add_argument("--meta", default=None, help="meta.json path (default: next to the output)")
        q.add_argument("-v", "--verbose", action="store_true")

    q = sub.add_parser("inconsistency", help="gamma-inconsistency of a PDG file")
    _opt(q, "pdg", nargs="?")
    _opt(q, "--gamma", type=float)
    _opt(q, "--beta-override", dest="beta_override", nargs="+", metavar="ARC=VAL")
    _opt(q, "--out")
    common(q)

    q = sub.add_parser("lir", help="run LIR on a PDG file")
    _opt(q, "pdg", nargs="?")
    _opt(q, "--strategy", choices=["uniform", "partial", "hub", "smooth"])
    _opt(q, "--steps", type=int)
    _opt(q, "--seed", type=int)
    _opt(q, "--rate", type=float)
    _opt(q, "--trace", help="JSON-lines trace, one step per line")
    _opt(q, "--summary", help="CSV (step, value, tv_from_init)")
    _opt(q, "--out", help="write the updated PDG")
    q.add_argument("--no-timing", dest="timing", action="store_false", default=argparse.SUPPRESS)
    common(q)

    q = sub.add_parser("synth", help="synthetic strategy suite")
    _opt(q, "--spec", help="comma-separated chain_<n>v_<m>e names")
    _opt(q, "--strategies")
    _opt(q, "--seeds", type=int, help="number of seeds (0..N-1)")
    _opt(q, "--steps", type=int)
    _opt(q, "--workers", type=int)
    _opt(q, "--out")
    q.add_argument("--no-timing", dest="timing", action="store_false", default=argparse.SUPPRESS)
    common(q)

    q = sub.add_parser("gen", help="generate a synthetic chain PDG")
    _opt(q, "--spec")
    _opt(q, "--seed", type=int)
    _opt(q, "--out")
    common(q)

    from .verify import HARNESSES
    q = sub.add_parser("verify", help="run a reduction harness")
    _opt(q, "harness", nargs="?", choices=HARNESSES)
    _opt(q, "--seed", type=int)
    _opt(q, "--trials", type=int)
    common(q)

    g = sub.add_parser("gfn", help="tabular GFlowNets on HyperGrid")
    gsub = g.add_subparsers(dest="gfn_command", required=True, parser_class=_Parser)
    from .gflownet.env import VARIANTS
    from .gflownet.losses import LOSSES
    q = gsub.add_parser("train")
    _opt(q, "--env", choices=VARIANTS)
    _opt(q, "--d", type=int)
    _opt(q, "--height", type=int)
    _opt(q, "--loss", choices=LOSSES)
    _opt(q, "--iters", type=int)
    _opt(q, "--batch", type=int)
    _opt(q, "--rate", type=float)
    _opt(q, "--log-z-multiplier", dest="log_z_multiplier", type=float)
    _opt(q, "--eval-every", dest="eval_every", type=int)
    _opt(q, "--seed", type=int)
    _opt(q, "--out", help="JSON-lines, one evaluation per line")
    _opt(q, "--csv", help="eval CSV")
    common(q)
    q = gsub.add_parser("eval")
    _opt(q, "run", nargs="?", help="run.jsonl from gfn train")
    _opt(q, "--out", help="eval CSV (default stdout)")
    common(q)
    q = gsub.add_parser("modes")
    _opt(q, "--env", choices=VARIANTS)
    _opt(q, "--d", type=int)
    _opt(q, "--height", type=int)
    common(q)
    return p


# -- output helpers ----------------------------------------------------------------

def _emit(text: str, path):
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True) + "\n"


def _meta(cfg: RunConfig, explicit, *outputs):
    path = explicit
    if path is None:
        first = next((o for o in outputs if o), None)
        if first is None:
            return
        path = os.path.join(os.path.dirname(os.path.abspath(first)), "meta.json")
    write_meta(cfg, path)


def _require(cfg, key):
    if cfg.params.get(key) in (None, ""):
        raise ConfigError(f"{cfg.command}: missing required argument {key!r}")
    return cfg.params[key]


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x):
    return "" if x is None else f"{x:.10g}"


# -- commands ----------------------------------------------------------------------

def cmd_inconsistency(cfg: RunConfig) -> int:
    from .inconsistency import solve_inconsistency
    from .lir import analysis_config
    p = cfg.params
    pdg = load_pdg(_require(cfg, "pdg"))
    beta = {}
    for item in p["beta_override"] or []:
        arc, sep, val = str(item).partition("=")
        if not sep:
            raise ConfigError(f"--beta-override expects ARC=VAL, got {item!r}")
        pdg.arc(arc)
        try:
            beta[arc] = float(val)
        except ValueError:
            raise ConfigError(f"--beta-override {item!r}: value is not a number") from None
    focus = Focus.of(pdg, beta=beta, gamma=float(p["gamma"]))
    res = solve_inconsistency(pdg, focus, analysis_config())
    mu = res.mu_star
    doc = {"value": res.value, "converged": bool(res.converged),
           "mu_star": {"scope": list(mu.scope), "sizes": list(mu.sizes), "probs": mu.probs.tolist()}}
    _emit(_json(doc), p["out"])
    return 0


def cmd_lir(cfg: RunConfig) -> int:
    from .lir import OdeConfig, RefocusStrategy, lir_run, resolution_percentage, tv_distortion
    p = cfg.params
    pdg = load_pdg(_require(cfg, "pdg"))
    strat = RefocusStrategy(p["strategy"], seed=int(p["seed"]))
    tr = lir_run(pdg, strat, int(p["steps"]), OdeConfig(step_scale=float(p["rate"])), reset=False,
                 timing=bool(p["timing"]))
    if tr.aborted:
        raise PDGError(f"LIR aborted: {tr.error}")
    lines, rows = [], [(0, _fmt(tr.init_value), _fmt(0.0))]
    for r in tr.steps:
        tv = tv_distortion(tr.init_mu, r.full_mu)
        lines.append(_json({"step": r.step + 1, "value": r.full_value, "focus_value": r.value,
                            "tv_from_init": tv, "param_hash": r.param_hash,
                            "focus": r.focus.to_json(), "seconds": r.seconds}))
        rows.append((r.step + 1, _fmt(r.full_value), _fmt(tv)))
    if p["trace"]:
        _emit("".join(lines), p["trace"])
    if p["summary"]:
        _emit(_csv(("step", "value", "tv_from_init"), rows), p["summary"])
    if p["out"]:
        save_pdg(tr.pdg, p["out"])
    res = resolution_percentage(tr) if tr.init_value else 0.0
    sys.stdout.write(_json({"init": tr.init_value, "final": tr.final_value,
                            "resolution_pct": res, "steps": len(tr.steps)}))
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    from .synth import run_strategy_suite
    p = cfg.params
    specs = [s for s in str(p["spec"]).split(",") if s]
    strategies = [s for s in str(p["strategies"]).split(",") if s]
    seeds = list(range(int(p["seeds"])))
    rep = run_strategy_suite(specs, strategies, seeds, steps=int(p["steps"]), timing=bool(p["timing"]),
                             workers=thread_cap(p["workers"]))
    _emit(rep.to_csv(), p["out"])
    if p["out"]:
        sys.stdout.write(_json(rep.aggregate()))
    return 0


def cmd_gen(cfg: RunConfig) -> int:
    from .synth import MIN_INCONSISTENCY, GeneratorSpec, generate_chain_pdg
    p = cfg.params
    pdg = generate_chain_pdg(GeneratorSpec.parse(p["spec"], int(p["seed"])), MIN_INCONSISTENCY)
    _emit(pdg.dumps() + "\n", p["out"])
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    from .verify import run_verify
    p = cfg.params
    reports, ok = run_verify(_require(cfg, "harness"), int(p["seed"]), int(p["trials"]))
    for r in reports:
        sys.stdout.write(_json(r))
    if not ok:
        bad = [r["trial"] for r in reports if not r["ok"]]
        print(f"tolerance violated in trials {bad}", file=sys.stderr)
    return 0 if ok else 1


def _eval_rows(records):
    return [(r["iter"], _fmt(r["loss"]), _fmt(r["l1"]), _fmt(r["jsd"]), _fmt(r["mode_coverage"]))
            for r in records]


def cmd_gfn_train(cfg: RunConfig) -> int:
    from .gflownet import HyperGrid, RewardSpec, TabularGFN, TrainConfig, train
    p = cfg.params
    grid = HyperGrid(int(p["d"]), int(p["height"]))
    if grid.n_states > 10 ** 6:
        raise ConfigError("gfn train needs H^d <= 1e6 for exact evaluation")
    tc = TrainConfig(loss=p["loss"], iters=int(p["iters"]), batch=int(p["batch"]),
                     rate=float(p["rate"]), log_z_multiplier=float(p["log_z_multiplier"]),
                     eval_every=int(p["eval_every"]), seed=int(p["seed"]))
    tr = train(TabularGFN(grid), RewardSpec(p["env"]), tc)
    records = [dict(zip(EVAL_COLUMNS, e)) for e in tr.evals]
    _emit("".join(_json(r) for r in records), p["out"])
    if p["csv"]:
        _emit(_csv(EVAL_COLUMNS, _eval_rows(records)), p["csv"])
    return 0


def cmd_gfn_eval(cfg: RunConfig) -> int:
    p = cfg.params
    records = []
    with open(_require(cfg, "run")) as fh:
        for i, line in enumerate(fh):
            if line.strip():
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as err:
                    raise PDGError(f"line {i + 1} is not JSON: {err}") from None
                missing = [c for c in EVAL_COLUMNS if c not in rec]
                if missing:
                    raise PDGError(f"line {i + 1} lacks {missing}")
                records.append(rec)
    _emit(_csv(EVAL_COLUMNS, _eval_rows(records)), p["out"])
    return 0


def cmd_gfn_modes(cfg: RunConfig) -> int:
    from .gflownet import RewardSpec, enumerate_modes
    p = cfg.params
    n, _ = enumerate_modes(RewardSpec(p["env"]), int(p["d"]), int(p["height"]))
    print(n)
    return 0


COMMANDS = {"inconsistency": cmd_inconsistency, "lir": cmd_lir, "synth": cmd_synth, "gen": cmd_gen,
            "verify": cmd_verify, "gfn train": cmd_gfn_train, "gfn eval": cmd_gfn_eval,
            "gfn modes": cmd_gfn_modes}


def resolve(ns: argparse.Namespace) -> RunConfig:
    """Defaults, then the --config file, then explicit flags."""
    command = ns.command if ns.command != "gfn" else f"gfn {ns.gfn_command}"
    flags = {k: v for k, v in vars(ns).items()
             if k not in ("command", "gfn_command", "config", "meta", "verbose")}
    base = load_config(ns.config, command) if ns.config else default_config(command)
    return base.merged(flags)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns)
    except (ConfigError, OSError) as e:
        parser.print_usage(sys.stderr)
        print(f"lirlab: error: {e}", file=sys.stderr)
        return 2
    try:
        code = COMMANDS[cfg.command](cfg)
        _meta(cfg, ns.meta, *(cfg.params.get(k) for k in ("out", "trace", "summary", "csv")))
        return code
    except ConfigError as e:
        print(f"lirlab: error: {e}", file=sys.stderr)
        return 2
    except (PDGError, ValueError, KeyError, OSError) as e:
        print(f"lirlab: invalid input: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

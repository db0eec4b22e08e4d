"""Command-line interface: ``safegil {solve,collect,train,eval,ablate,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error or missing file,
3 value function solved for a different environment.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import bench, bench_io
from .collect import METHODS, CollectionPlan, collect
from .envmodels import BUILTIN_ENVS, Env, env_from_dict, load_env
from .experts import make_expert
from .policy import TrainConfig, train_on_dataset
from .reach import EnvMismatchError, SolverParams, check_env_match, solve_env
from .shield import FilterConfig, SafetyFilter

log = logging.getLogger("safegil")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISMATCH = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _env(ref: str) -> Env:
    path = Path(ref)
    if path.exists():
        return load_env(path)
    if ref in BUILTIN_ENVS:
        return env_from_dict(BUILTIN_ENVS[ref]())
    raise FileNotFoundError(f"no environment file {ref!r} (built-ins: {', '.join(BUILTIN_ENVS)})")


def _json(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _vf(path: str, env: Env):
    vf = bench_io.load_vf(path, env)
    check_env_match(vf, env)
    return vf


def cmd_solve(a) -> int:
    env = _env(a.env)
    params = SolverParams.from_dict({**env.solver, **_json(a.solver)})
    vf = solve_env(env, params, workers=a.workers)
    bench_io.save_vf(vf, a.out)
    m = vf.metadata
    print(f"solved {env.name}: horizon {m['horizon']:.3f} s, converged={m['converged']}, "
          f"{vf.wall_time:.1f} s -> {a.out}")
    return EXIT_OK


def _train_cfg(a) -> TrainConfig:
    raw = _json(getattr(a, "cfg", None))
    if getattr(a, "seed", None) is not None:
        raw["seed"] = a.seed
    return TrainConfig.from_dict(raw)


def cmd_collect(a) -> int:
    env = _env(a.env)
    vf = _vf(a.vf, env) if a.vf else None
    if a.method in ("safegil", "dagger_safegil") and vf is None:
        raise UsageError(f"method {a.method} needs --vf")
    plan = CollectionPlan(method=a.method, K=a.K, seed=a.seed, dbar_max=a.dbar_max, sigma=a.sigma,
                          dart_iterations=a.iterations, dagger_iterations=a.iterations)
    cfg = _train_cfg(a)
    ds = collect(env, make_expert(env), plan, vf=vf, train_fn=lambda d: train_on_dataset(d, env, cfg))
    bench_io.save_dataset(ds, a.out)
    print(f"collected {len(ds.demo_ids)} demonstrations, {len(ds)} records -> {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    ds = bench_io.load_dataset(a.data)
    env = _env(a.env) if a.env else None
    pol = train_on_dataset(ds, env, _train_cfg(a))
    bench_io.save_policy(pol, a.out)
    print(f"trained on {len(ds)} records, loss {pol.loss_curve[0]:.4g} -> {pol.loss_curve[-1]:.4g} -> {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    env = _env(a.env)
    vf = _vf(a.vf, env) if a.vf else None
    if a.filter and vf is None:
        raise UsageError("--filter needs --vf")
    pol = bench_io.load_policy(a.policy)
    shield = SafetyFilter(vf, FilterConfig(**_json(a.filter_cfg))) if a.filter else None
    report = bench.evaluate(env, bench.PolicyController(pol, shield), a.n, a.seed, vf)
    digest = hashlib.sha256(Path(a.policy).read_bytes()).hexdigest()[:16]
    report.update({"policy": Path(a.policy).name, "policy_sha256": digest, "filter": bool(a.filter),
                   "seed": a.seed, "env_hash": env.hash})
    text = json.dumps(_nan_to_none(report), sort_keys=True, indent=1) + "\n"
    if a.out:
        bench_io.atomic_write(a.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def _nan_to_none(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and v != v else v) for k, v in d.items()}


def cmd_ablate(a) -> int:
    spec_path = Path(a.spec)
    spec = json.loads(spec_path.read_text())
    out = Path(a.out or spec.get("out", spec_path.with_suffix("").name + "_out"))
    rows = bench.run_experiment(spec, out, base=spec_path.parent)
    sys.stdout.write(bench.summary_table(rows))
    failed = [r for r in rows if r.get("error")]
    if failed:
        print(f"{len(failed)} of {len(rows)} cells failed; see the report", file=sys.stderr)
    return EXIT_OK


def cmd_report(a) -> int:
    reports = sorted((Path(a.dir) / "reports").glob("*.csv"))
    if not reports:
        raise FileNotFoundError(f"no reports under {a.dir}/reports")
    for path in reports:
        rows = bench_io.read_report(path)
        hashes = sorted({r["env_hash"] for r in rows if r["env_hash"]})
        if len(hashes) > 1:
            raise EnvMismatchError(f"{path.name} mixes environments {', '.join(hashes)}")
        print(f"== {path.stem} ({len(rows)} cells)")
        sys.stdout.write(bench.summary_table(rows))
        bench.write_plots(rows, Path(a.dir) / "plots", path.stem)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safegil", description="Safety-guided imitation learning lab.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve the reachability problem for an environment")
    s.add_argument("--env", required=True, help="environment JSON or built-in name")
    s.add_argument("--out", required=True)
    s.add_argument("--solver", help="JSON file overriding solver parameters")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_solve)

    s = sub.add_parser("collect", help="collect demonstrations")
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--env", required=True)
    s.add_argument("--vf")
    s.add_argument("-K", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dbar-max", type=float)
    s.add_argument("--sigma", type=float, default=0.3)
    s.add_argument("--iterations", type=int, default=3, help="DART/DAgger tranches")
    s.add_argument("--cfg", help="training config for methods with a learner in the loop")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_collect)

    s = sub.add_parser("train", help="behavior-clone a policy from a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--cfg")
    s.add_argument("--env")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a policy in closed loop")
    s.add_argument("--policy", required=True)
    s.add_argument("--env", required=True)
    s.add_argument("--vf")
    s.add_argument("--filter", action="store_true")
    s.add_argument("--filter-cfg")
    s.add_argument("-n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="run an experiment sweep from a JSON spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("report", help="summarize reports and redraw plots")
    s.add_argument("--dir", required=True)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except EnvMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FileNotFoundError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

"""``loopsoup`` command line: sampling, estimation and verification runs.

Every subcommand writes a run directory with ``config.resolved``,
``observables.jsonl``, ``verdicts.jsonl`` and, when enabled, one
``snapshot-<replica>.v1`` per replica.  Exit status: 0 success, 2 config
error, 3 a statistical test failed, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import ConfigError, Run, apply_override, dumps_resolved, load_config
from .configuration import Configuration, N_obs, S_obs
from .interaction import EnergyCacheError, hamiltonian
from .io import OBSERVABLES_SCHEMA, JsonlSink, read_snapshot, write_snapshot, SnapshotError
from .kernels import GibbsChain, KernelError, MCMCConfig, RejectionCapError, estimate_Z, sample_gn
from .measures import sample_dirichlet, sample_free
from .rng import stream
from . import verification as V

EXIT_OK, EXIT_CONFIG, EXIT_STAT, EXIT_RUNTIME = 0, 2, 3, 4

KERNEL_ALIASES = {"dir": "dirichlet", "free": "free", "exc": "excursion"}
SUITES = ("free-gas", "consistency", "fkg", "tails", "tempered", "exp-moment", "kernel-equiv")


@dataclass
class ReplicaResult:
    observables: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    snapshot: Configuration | None = None


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.generic):
        return _clean(v.item())
    return v


def _obs(replica: int, step: int, eta: Configuration, run: Run, energy: dict, acceptance: dict | None = None) -> dict:
    return _clean(
        {
            "schema": OBSERVABLES_SCHEMA,
            "replica": replica,
            "step": step,
            "N": N_obs(eta, run.domain),
            "S": S_obs(eta, run.domain),
            "loops": len(eta),
            "energy": energy,
            "acceptance": acceptance or {},
        }
    )


# -- jobs: one call per replica ------------------------------------------------


def job_sample(kind: str):
    def job(run: Run, rep: int, seed: int, args) -> ReplicaResult:
        rng = stream(seed, rep, f"sample-{kind}")
        sampler = sample_free if kind == "free" else sample_dirichlet
        res = ReplicaResult()
        for k in range(run.cfg["sample"]["draws"]):
            eta = sampler(run.spec, rng)
            e = hamiltonian(eta, run.domain, run.potential).as_dict()
            res.observables.append(_obs(rep, k, eta, run, e))
            res.snapshot = eta
        return res

    return job


def _initial(args) -> Configuration | None:
    if getattr(args, "init", None):
        eta, _, _ = read_snapshot(args.init)
        return eta
    return None


def job_mcmc(run: Run, rep: int, seed: int, args) -> ReplicaResult:
    kind = KERNEL_ALIASES[args.kernel]
    chain = GibbsChain(run.spec, kind, _initial(args), run.mcmc, stream(seed, rep, f"mcmc-{kind}"))
    res = ReplicaResult()
    eta = None
    for eta in chain.samples():
        tr = chain.report.traces
        res.observables.append(
            _clean(
                {
                    "schema": OBSERVABLES_SCHEMA,
                    "replica": rep,
                    "step": tr["step"][-1],
                    "N": tr["N"][-1],
                    "S": tr["S"][-1],
                    "N_psi": tr["N_psi"][-1],
                    "loops": len(eta),
                    "energy": tr["energy"][-1],
                    "acceptance": chain.report.acceptance_rates(),
                }
            )
        )
    res.snapshot = eta
    return res


def job_estimate_z(run: Run, rep: int, seed: int, args) -> ReplicaResult:
    kind = KERNEL_ALIASES.get(args.kind, args.kind) if args.kind else run.cfg["estimate"]["kind"]
    est, se = estimate_Z(
        run.spec, _initial(args), run.cfg["estimate"]["samples"], kind, stream(seed, rep, "estimate-z"),
        cap=run.mcmc.rejection_cap,
    )
    return ReplicaResult([_clean({"schema": OBSERVABLES_SCHEMA, "replica": rep, "kind": kind, "Z": est, "se": se})])


def job_cphi(run: Run, rep: int, seed: int, args) -> ReplicaResult:
    b, se = V.estimate_cphi_bound(run.params, run.grid, run.cfg["estimate"]["samples"], stream(seed, rep, "cphi"))
    return ReplicaResult([_clean({"schema": OBSERVABLES_SCHEMA, "replica": rep, "cphi_bound": b, "se": se})])


def job_decay(run: Run, rep: int, seed: int, args) -> ReplicaResult:
    e = run.cfg["estimate"]
    fit = V.decay_fit(range(e["j_min"], e["j_max"] + 1), run.params, run.grid, e["samples"], stream(seed, rep, "decay"))
    return ReplicaResult([_clean({"schema": OBSERVABLES_SCHEMA, "replica": rep, **fit.as_dict()})])


def job_gn(run: Run, rep: int, seed: int, args) -> ReplicaResult:
    g = run.cfg["gn"]
    n = args.n if args.n is not None else g["n"]
    rng = stream(seed, rep, "gn")
    res = ReplicaResult()
    obs_box = run.cube(n * g["window"])
    for k in range(run.cfg["sample"]["draws"]):
        eta = sample_gn(n, run.spec, run.mcmc, rng, window=g["window"], shift=g["shift"])
        e = hamiltonian(eta, obs_box, run.potential).as_dict()
        rec = _obs(rep, k, eta, run, e)
        rec["N"] = N_obs(eta, obs_box)
        rec["S"] = _clean(S_obs(eta, obs_box))
        rec["n"] = n
        res.observables.append(rec)
        res.snapshot = eta
    return res


# -- verification suites ---------------------------------------------------------


def _outer_cfg(run: Run) -> MCMCConfig:
    v = run.cfg["verify"]
    m = run.mcmc
    return MCMCConfig(
        steps=m.burn_in + v["samples"] * m.thin,
        burn_in=m.burn_in,
        thin=m.thin,
        p_birth=m.p_birth,
        p_death=m.p_death,
        p_move=m.p_move,
        rejection_cap=m.rejection_cap,
        on_rejection_cap=m.on_rejection_cap,
        check_every=m.check_every,
    )


def _suite(run: Run, rep: int, seed: int, name: str) -> list[V.Verdict]:
    v = run.cfg["verify"]
    r = lambda tag: stream(seed, rep, f"verify-{name}-{tag}")  # noqa: E731
    spec = run.spec
    if name == "free-gas":
        if not run.potential.is_zero:
            raise ConfigError("potential.family", "the free-gas suite needs the zero potential")
        p_j, _ = V.containment_profile(run.domain, run.grid, spec.j_max, v["oracle_samples"], r("oracle"))
        return [
            V.free_gas_test(spec, "dirichlet", _outer_cfg(run), r("dir"), p_j=p_j),
            V.free_gas_test(spec, "free", _outer_cfg(run), r("free")),
        ]
    if name == "consistency":
        return [
            V.consistency_test(
                spec, run.window, _outer_cfg(run), v["inner_steps"], r(f"a-{k}"), r(f"b-{k}"), k, v["alpha"],
                drop_crossing=(k == "excursion"),
            )
            for k in ("dirichlet", "excursion")
        ]
    if name == "kernel-equiv":
        return [
            V.kernel_equivalence_test(
                spec, run.window, _outer_cfg(run), v["inner_steps"], r("a"), r("b"), r("c"), v["alpha"]
            )
        ]
    if name == "fkg":
        return [V.fkg_test(spec, _outer_cfg(run), v["ph_samples"], r("fkg"))]
    if name == "tails":
        out = [V.diameter_tail_test(j, run.params, run.grid, v["tail_samples"], r(f"j{j}")) for j in v["tail_j"]]
        out.append(V.tail_collapse_test(v["tail_j"][0], run.params, run.grid, v["tail_samples"], r("collapse")))
        return out
    if name == "tempered":
        big = spec.on(run.cube(v["n_max"]))
        ts, info = V.calibrate_tempered(big, v["tempered_alpha"], v["eps"], v["n_max"], r("calibrate"))
        total = passed = 0
        worst = {"N_margin": math.inf, "S_margin": math.inf}
        for n in range(1, v["n_max"] + 1):
            chain = GibbsChain(spec.on(run.cube(n)), "dirichlet", None, _outer_cfg(run), r(f"n{n}"))
            for eta in chain.samples():
                ok, margins = V.tempered_membership(eta, ts, run.params.d)
                total += 1
                passed += ok
                worst = {k: min(worst[k], margins[k]) for k in worst}
        freq = passed / total
        return [
            V.Verdict(
                "tempered",
                freq >= 1 - v["eps"],
                {"K": ts.K, "L": ts.L, "alpha": ts.alpha, "n_max": ts.n_max, "frequency": freq, "samples": total, **worst, **info},
            )
        ]
    if name == "exp-moment":
        N, _ = V.chain_N_samples(spec, "dirichlet", _outer_cfg(run), r("chain"))
        c = v["c"]
        q = np.array([V.single_loop_weight(j, run.params, run.grid, 2000, r(f"q{j}"))[0] for j in range(1, spec.j_max + 1)])
        out = [V.exp_moment_test(N, c, V.mh_exp_moment_bound(spec, c, q), v["z"], "exp_moment_bound")]
        if run.potential.is_zero and run.params.mu == 0:
            p_j, _ = V.containment_profile(run.domain, run.grid, spec.j_max, v["oracle_samples"], r("oracle"))
            ref = V.poisson_exp_moment(spec, c, p_j)
            y = np.exp(c * N)
            se = V.batch_means_se(y)
            out.append(
                V.Verdict(
                    "exp_moment_poisson",
                    abs(float(y.mean()) - ref) <= v["z"] * se,
                    {"mean": float(y.mean()), "se": se, "reference": ref, "c": c},
                )
            )
        return out
    raise ConfigError("suite", f"unknown suite {name!r}")


def job_verify(run: Run, rep: int, seed: int, args) -> ReplicaResult:
    verdicts = _suite(run, rep, seed, args.suite)
    res = ReplicaResult()
    for vd in verdicts:
        rec = vd.as_record()
        rec.update({"replica": rep, "suite": args.suite})
        res.verdicts.append(rec)
    return res


JOBS = {
    "sample-free": job_sample("free"),
    "sample-dirichlet": job_sample("dirichlet"),
    "mcmc": job_mcmc,
    "estimate-z": job_estimate_z,
    "estimate-cphi": job_cphi,
    "decay-fit": job_decay,
    "verify": job_verify,
    "gn-sample": job_gn,
}


# -- argument parsing and orchestration -------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loopsoup", description="Interacting Brownian loop soup Monte Carlo.")
    ap.add_argument("--version", action="version", version=f"loopsoup {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides seeds.master)")
    common.add_argument("--out", help="run directory (overrides outputs.dir)")
    common.add_argument("--replicas", type=int, help="number of replicas (overrides seeds.replicas)")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override one config field; VALUE uses TOML syntax",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("sample-free", parents=[common], help="Poisson loop soup draws")
    sub.add_parser("sample-dirichlet", parents=[common], help="Dirichlet (contained) loop soup draws")
    p = sub.add_parser("mcmc", parents=[common], help="run a Gibbs-kernel chain")
    p.add_argument("--kernel", choices=sorted(KERNEL_ALIASES), default="dir")
    p.add_argument("--init", help="conditioning configuration (snapshot.v1)")
    p = sub.add_parser("estimate-z", parents=[common], help="partition function by direct Monte Carlo")
    p.add_argument("--kind", choices=sorted(KERNEL_ALIASES) + ["dirichlet", "excursion"])
    p.add_argument("--init", help="boundary configuration (snapshot.v1)")
    sub.add_parser("estimate-cphi", parents=[common], help="Monte Carlo bound on the decay rate")
    sub.add_parser("decay-fit", parents=[common], help="fit the single-loop weight decay")
    p = sub.add_parser("verify", parents=[common], help="run a verification suite")
    p.add_argument("suite", choices=SUITES)
    p = sub.add_parser("gn-sample", parents=[common], help="draws from the periodized finite-volume state")
    p.add_argument("--n", type=int)
    return ap


def _resolve(args) -> dict:
    cfg = load_config(args.config)
    sets = list(args.overrides)
    if args.seed is not None:
        sets.append(f"seeds.master={args.seed}")
    if args.replicas is not None:
        sets.append(f"seeds.replicas={args.replicas}")
    cfg = apply_override(cfg, *sets)
    if args.out is not None:
        cfg["outputs"]["dir"] = args.out
    if getattr(args, "n", None) is not None and args.n < 1:
        raise ConfigError("gn.n", "must be >= 1")
    return cfg


def execute(args) -> int:
    cfg = _resolve(args)
    try:
        run = Run(cfg)
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None
    out = cfg["outputs"]["dir"]
    os.makedirs(out, exist_ok=True)
    meta = {"code_version": __version__, "command": args.command}
    for k in ("kernel", "kind", "suite", "n"):
        if getattr(args, k, None) is not None:
            meta[k] = getattr(args, k)
    meta["measure_metadata"] = _clean(run.spec.metadata())
    with open(os.path.join(out, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(dumps_resolved(cfg, {"run": meta}))

    seed = cfg["seeds"]["master"]
    reps = cfg["seeds"]["replicas"]
    job = JOBS[args.command]
    with ThreadPoolExecutor(max_workers=max(1, min(reps, os.cpu_count() or 1))) as pool:
        results = list(pool.map(lambda r: job(run, r, seed, args), range(reps)))

    with JsonlSink(os.path.join(out, "observables.jsonl")) as sink:
        for res in results:
            sink.write_all(res.observables)
    failed = False
    with JsonlSink(os.path.join(out, "verdicts.jsonl")) as sink:
        for res in results:
            for v in res.verdicts:
                failed |= not v["pass"]
                sink.write(v)
    if cfg["outputs"]["snapshots"]:
        for rep, res in enumerate(results):
            if res.snapshot is not None:
                write_snapshot(
                    os.path.join(out, f"snapshot-{rep:03d}.v1"), res.snapshot, run.grid,
                    {"code_version": __version__, "replica": rep}, cfg["outputs"]["snapshot_cap_bytes"],
                )
    return EXIT_STAT if failed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return execute(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RejectionCapError, EnergyCacheError, KernelError, SnapshotError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

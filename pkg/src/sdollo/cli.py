"""Command-line entry point: ``sdollo <command> ...``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    XvalReport,
    bayes_factor_xval,
    format_summary,
    majority_consensus,
    posterior_summary,
)
from .dollo import ModelParams, Posterior, normalizer_X, trait_terms
from .mcmc import ChainConfig, load_config, read_trace, run_chain
from .newick import NewickError, read_trees
from .phylotree import CalibrationSet, InfeasibleError, TreeStructureError, load_calibrations, random_tree
from .simulate import lambda_for_target, make_bundle
from .traitdata import RegistrationRule, read_trait_matrix


class CliError(Exception):
    """A data or configuration problem; reported with exit status 1."""


@dataclass
class RunManifest:
    subcommand: str
    inputs: dict
    config: str | None
    seed: int | None
    out: str
    version: str = __version__
    argv: list = field(default_factory=list)

    def write(self, outdir) -> Path:
        path = Path(outdir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# -- loading with file-named errors --------------------------------------------

def _load(path, loader, what: str):
    try:
        return loader(path)
    except FileNotFoundError:
        raise CliError(f"{path}: {what} file not found") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"{path}: {what}: {exc}") from None


def _read_json(path) -> dict:
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValueError("top level must be an object")
    return obj


def _read_params(path, languages) -> ModelParams:
    obj = _read_json(path)
    # a simulation truth record nests the parameters
    if "params" in obj and isinstance(obj["params"], dict):
        obj = obj["params"]
    return ModelParams.from_dict(obj, languages)


def _rule(text: str) -> RegistrationRule:
    try:
        return RegistrationRule.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _xi_arg(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad xi list {text!r}") from None


def _chain_config(args) -> ChainConfig:
    if args.config:
        cfg = _load(args.config, load_config, "chain config")
    else:
        cfg = ChainConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.iterations is not None:
        over["iterations"] = args.iterations
    if args.thin is not None:
        over["thin"] = args.thin
    try:
        return replace(cfg, **over) if over else cfg
    except ValueError as exc:
        raise CliError(f"{args.config or 'command line'}: chain config: {exc}") from None


def _params(args, languages) -> ModelParams:
    if args.params:
        return _load(args.params, lambda p: _read_params(p, languages), "parameters")
    missing = [f"--{n}" for n in ("mu", "kappa", "rho") if getattr(args, n) is None]
    if missing:
        raise CliError(f"parameters: give --params or all of {', '.join(missing)}")
    xi = args.xi if args.xi is not None else [1.0]
    if len(xi) == 1:
        xi = xi * len(languages)
    if len(xi) != len(languages):
        raise CliError(f"--xi: expected 1 or {len(languages)} values, got {len(xi)}")
    lam = getattr(args, "lam", None)
    return ModelParams(args.mu, args.kappa, args.rho, xi, lam)


def _chain_seeds(seed: int, n: int) -> list[int]:
    if n == 1:
        return [seed]
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def _run_one(job):
    data, rule, cals, cfg, outdir = job
    trace = run_chain(data, rule, cals, cfg)
    trace.write(outdir)
    return str(outdir), len(trace)


# -- commands ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    seeds = np.random.SeedSequence(args.seed).spawn(2)
    if args.tree:
        trees = _load(args.tree, read_trees, "tree")
        if not trees:
            raise CliError(f"{args.tree}: tree: file holds no tree")
        tree = trees[0]
    else:
        if args.leaves is None or args.root_age is None:
            raise CliError("simulate: give --tree or both --leaves and --root-age")
        labels = [f"L{j + 1}" for j in range(args.leaves)]
        tree = random_tree(labels, np.random.default_rng(seeds[0]), args.root_age)
    params = _params(args, tree.labels)
    if args.n_target is not None:
        params = params.replace(lam=lambda_for_target(tree, params, args.rule, args.n_target))
    if params.lam is None:
        raise CliError("simulate: give --lam, --n-target, or lambda in the parameter file")
    try:
        bundle = make_bundle(
            tree, params, args.rule, np.random.default_rng(seeds[1]), args.borrow, args.catastrophes
        )
    except ValueError as exc:
        raise CliError(f"simulate: {exc}") from None
    bundle.seed = args.seed
    bundle.write(args.out)
    RunManifest(
        "simulate", {"tree": args.tree, "params": args.params}, None, args.seed, args.out, argv=args.argv
    ).write(args.out)
    print(f"{bundle.data.n_classes} registered classes of {bundle.full.n_classes}; written to {args.out}")
    return 0


def _fit(args, prior_only: bool) -> int:
    data = _load(args.data, read_trait_matrix, "trait matrix")
    cals = _load(args.cals, load_calibrations, "calibrations")
    cfg = replace(_chain_config(args), prior_only=prior_only)
    try:
        Posterior(data, args.rule, cals, cfg.prior, prior_only=prior_only)
    except KeyError as exc:
        raise CliError(f"{args.cals}: calibrations: {exc.args[0]}") from None
    except ValueError as exc:
        raise CliError(f"{args.data}: trait matrix: {exc}") from None
    out = Path(args.out)
    seeds = _chain_seeds(cfg.seed, args.chains)
    if args.chains == 1:
        dirs = [out]
    else:
        dirs = [out / f"chain_{j + 1}" for j in range(args.chains)]
    jobs = [(data, args.rule, cals, replace(cfg, seed=s), d) for s, d in zip(seeds, dirs)]
    RunManifest(
        args.command,
        {"data": args.data, "cals": args.cals, "rule": str(args.rule), "chains": args.chains},
        args.config,
        cfg.seed,
        args.out,
        argv=args.argv,
    ).write(out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    try:
        if args.chains == 1 or args.workers == 1:
            results = [_run_one(j) for j in jobs]
        else:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                results = list(pool.map(_run_one, jobs))
    except InfeasibleError as exc:
        raise CliError(f"{args.cals}: calibrations: {exc}") from None
    for d, n in results:
        print(f"{d}: {n} samples")
    return 0


def cmd_fit(args) -> int:
    return _fit(args, prior_only=False)


def cmd_prior_sample(args) -> int:
    return _fit(args, prior_only=True)


def cmd_loglik(args) -> int:
    data = _load(args.data, read_trait_matrix, "trait matrix")
    trees = _load(args.tree, lambda p: read_trees(p, data.languages), "tree")
    if not trees:
        raise CliError(f"{args.tree}: tree: file holds no tree")
    tree = trees[0]
    if args.cals:
        cals = _load(args.cals, load_calibrations, "calibrations")
    else:
        cals = CalibrationSet((), args.root_cap if args.root_cap else max(2.0 * tree.root_age, 1.0))
    params = _params(args, data.languages)
    cfg = ChainConfig(iterations=1, rho_bounds=tuple(args.rho_bounds), mu_bounds=tuple(args.mu_bounds))
    try:
        post = Posterior(data, args.rule, cals, cfg.prior)
    except ValueError as exc:
        raise CliError(f"{args.data}: trait matrix: {exc}") from None
    value = post(tree, params)
    x = normalizer_X(tree, params, args.rule)
    tau = trait_terms(tree, params, data)
    y, q = data.column_counts()
    print(f"log_posterior\t{value!r}")
    print(f"log_prior\t{post.log_prior(tree, params)!r}")
    print(f"X\t{x!r}")
    print(f"N\t{data.n_classes}")
    print("column\tY\tQ\ttau")
    for lab, ya, qa, t in zip(data.classes, y, q, tau):
        print(f"{lab}\t{int(ya)}\t{int(qa)}\t{float(t)!r}")
    return 0


def cmd_consense(args) -> int:
    trees = _load(args.trees, read_trees, "trees")
    if not trees:
        raise CliError(f"{args.trees}: trees: file holds no tree")
    start = int(len(trees) * args.burnin)
    try:
        cons = majority_consensus(trees[start:], args.threshold)
    except ValueError as exc:
        raise CliError(f"{args.trees}: trees: {exc}") from None
    text = cons.to_newick()
    print(text)
    print(cons.support_table(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "consensus.nwk").write_text(text + "\n")
        (out / "support.tsv").write_text(cons.support_table())
        RunManifest("consense", {"trees": args.trees}, None, None, args.out, argv=args.argv).write(out)
    return 0


def cmd_xval(args) -> int:
    data = _load(args.data, read_trait_matrix, "trait matrix")
    cals = _load(args.cals, load_calibrations, "calibrations")
    cfg = _chain_config(args)
    names = args.drop or [c.label for c in cals.calibrations]
    report = XvalReport()
    for name in names:
        try:
            cals.index(name)
        except KeyError as exc:
            raise CliError(f"{args.cals}: calibrations: {exc.args[0]}") from None
        try:
            report.entries.append(bayes_factor_xval(data, args.rule, cals, name, cfg, args.burnin))
        except InfeasibleError as exc:
            raise CliError(f"{args.cals}: calibrations: {exc}") from None
        except ValueError as exc:
            raise CliError(f"{args.data}: trait matrix: {exc}") from None
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "xval.tsv").write_text(text)
        RunManifest(
            "xval",
            {"data": args.data, "cals": args.cals, "rule": str(args.rule), "drop": names},
            args.config,
            cfg.seed,
            args.out,
            argv=args.argv,
        ).write(out)
    return 0


def cmd_summary(args) -> int:
    try:
        trace = read_trace(args.run)
    except FileNotFoundError as exc:
        raise CliError(f"{exc.filename}: trace file not found") from None
    except (ValueError, KeyError, IndexError, NewickError) as exc:
        raise CliError(f"{args.run}: trace: {exc}") from None
    trace = trace.discard(args.burnin)
    if len(trace) == 0:
        raise CliError(f"{args.run}: trace: no samples left after burn-in")
    text = format_summary(posterior_summary(trace, args.level), args.level)
    print(text, end="")
    moves = {m: s for m, s in trace.stats.items() if s.proposed}
    for m, s in moves.items():
        rate = "nan" if math.isnan(s.rate) else f"{s.rate:.3f}"
        print(f"move {m}: proposed {s.proposed}, accepted {rate}, skipped {s.skipped}")
    return 0


# -- parser -----------------------------------------------------------------------

def _add_params(p, lam: bool = False):
    p.add_argument("--params", help="JSON parameter file with mu, kappa, rho, xi" + (", lambda" if lam else ""))
    p.add_argument("--mu", type=float, help="death rate per year")
    p.add_argument("--kappa", type=float, help="death probability at a catastrophe")
    p.add_argument("--rho", type=float, help="catastrophe rate per year")
    p.add_argument("--xi", type=_xi_arg, help="observation probability, one value or one per language")
    if lam:
        p.add_argument("--lam", type=float, help="birth rate per year")


def _add_chain(p):
    p.add_argument("--data", required=True, help="trait matrix (comma or tab delimited)")
    p.add_argument("--cals", required=True, help="calibration JSON file")
    p.add_argument("--rule", type=_rule, default=RegistrationRule.parse("1"), help="registration conditions, e.g. 1,2")
    p.add_argument("--config", help="chain config JSON")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--iterations", type=int, help="overrides the config iteration count")
    p.add_argument("--thin", type=int, help="overrides the config thinning")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdollo", description=__doc__)
    parser.add_argument("--version", action="version", version=f"sdollo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a synthetic dataset bundle")
    p.add_argument("--tree", help="Newick tree to simulate on")
    p.add_argument("--leaves", type=int, help="random tree with this many leaves (when --tree is absent)")
    p.add_argument("--root-age", type=float, help="root age of the random tree")
    _add_params(p, lam=True)
    p.add_argument("--n-target", type=float, help="choose lambda so the expected registered count is this")
    p.add_argument("--rule", type=_rule, default=RegistrationRule.parse("1"), help="registration conditions")
    p.add_argument("--borrow", type=float, default=0.0, help="borrowing rate per instance per year")
    p.add_argument(
        "--catastrophes", choices=("sample", "tree"), default="sample",
        help="sample catastrophes or use the counts annotated on the tree",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    for name, func, text in (
        ("fit", cmd_fit, "sample the posterior"),
        ("prior-sample", cmd_prior_sample, "sample the prior (data used for labels only)"),
    ):
        p = sub.add_parser(name, help=text)
        _add_chain(p)
        p.add_argument("--chains", type=int, default=1, help="independent chains, one directory each")
        p.add_argument("--workers", type=int, default=None, help="processes for --chains (default: one per CPU)")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("loglik", help="evaluate the log posterior at one tree and parameter set")
    p.add_argument("--data", required=True)
    p.add_argument("--tree", required=True, help="annotated Newick (first tree used)")
    p.add_argument("--rule", type=_rule, default=RegistrationRule.parse("1"))
    p.add_argument("--cals", help="calibration JSON (default: none, root cap twice the root age)")
    p.add_argument("--root-cap", type=float, help="root cap when --cals is absent")
    p.add_argument("--rho-bounds", type=float, nargs=2, default=(1e-9, 1e-2), metavar=("MIN", "MAX"))
    p.add_argument("--mu-bounds", type=float, nargs=2, default=(1e-12, 1.0), metavar=("MIN", "MAX"))
    _add_params(p)
    p.set_defaults(func=cmd_loglik)

    p = sub.add_parser("consense", help="majority-rule consensus of sampled trees")
    p.add_argument("--trees", required=True, help="one Newick tree per line")
    p.add_argument("--burnin", type=float, default=0.0, help="fraction of leading trees to drop")
    p.add_argument("--threshold", type=float, default=0.5, help="minimum split frequency")
    p.add_argument("--out", help="directory for consensus.nwk and support.tsv")
    p.set_defaults(func=cmd_consense)

    p = sub.add_parser("xval", help="leave-one-out Bayes factors for calibrations")
    _add_chain(p)
    p.add_argument("--drop", action="append", help="calibration name to test (repeatable; default all)")
    p.add_argument("--burnin", type=float, default=0.1, help="fraction of each chain to drop")
    p.add_argument("--out", help="directory for xval.tsv")
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("summary", help="posterior summary of a fitted run")
    p.add_argument("--run", required=True, help="directory written by fit")
    p.add_argument("--burnin", type=float, default=0.1)
    p.add_argument("--level", type=float, default=0.95, help="HPD level")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    if getattr(args, "chains", 1) < 1:
        parser.error("--chains must be at least 1")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"sdollo: error: {exc}", file=sys.stderr)
        return 1
    except (InfeasibleError, TreeStructureError, NewickError) as exc:
        print(f"sdollo: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

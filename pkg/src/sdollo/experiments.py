"""Seeded simulation studies shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .analysis import constraint_age, freed, hpd_interval, xval_from_samples
from .dollo import ModelParams
from .mcmc import ChainConfig, ess_geyer, run_chain
from .phylotree import Calibration, CalibrationSet, Phylogeny, random_tree
from .simulate import SyntheticBundle, lambda_for_target, make_bundle
from .traitdata import RegistrationRule

# rates estimated from the Indo-European lexicon
FITTED_MU = 1.86e-4
FITTED_KAPPA = 0.361
FITTED_RHO = 6.4e-5


@dataclass
class StudyConfig:
    leaves: tuple = (8, 10)
    root_age: tuple = (4000.0, 9000.0)
    n_target: tuple = (400.0, 900.0)
    mu: float = FITTED_MU
    kappa: float = FITTED_KAPPA
    rho: float = FITTED_RHO
    xi_low: float = 0.8
    rule: str = "1"
    n_calibrations: int = 2
    cal_spread: tuple = (0.05, 0.3)  # relative distance of each bound from the true age
    root_cap: float = 16000.0
    mu_bounds: tuple = (1e-12, 1.0)
    rho_bounds: tuple = (1e-9, 1e-2)
    iterations: int = 400_000
    prior_iterations: int = 400_000
    thin: int = 200
    burn: float = 0.25
    level: float = 0.95

    def to_dict(self) -> dict:
        return asdict(self)

    def chain(self, seed: int, **kw) -> ChainConfig:
        base = dict(
            iterations=self.iterations, thin=self.thin, seed=seed, check_every=0,
            mu_bounds=self.mu_bounds, rho_bounds=self.rho_bounds,
        )
        base.update(kw)
        return ChainConfig(**base)


def study_dataset(seed: int, cfg: StudyConfig) -> tuple[SyntheticBundle, CalibrationSet]:
    """Random tree, rates at the study values, clade calibrations bracketing true ages."""
    rng = np.random.default_rng([seed, 17])
    L = int(rng.integers(cfg.leaves[0], cfg.leaves[1] + 1))
    labels = [f"L{j}" for j in range(L)]
    tree = random_tree(labels, rng, float(rng.uniform(*cfg.root_age)))
    rule = RegistrationRule.parse(cfg.rule)
    xi = rng.uniform(cfg.xi_low, 1.0, L)
    params = ModelParams(cfg.mu, cfg.kappa, cfg.rho, xi)
    lam = lambda_for_target(tree, params, rule, float(rng.uniform(*cfg.n_target)))
    bundle = make_bundle(tree, params.replace(lam=lam), rule, seed=int(rng.integers(2**31)))
    cals = calibrations_for(bundle.tree, cfg, rng)
    return bundle, cals


def calibrations_for(tree: Phylogeny, cfg: StudyConfig, rng) -> CalibrationSet:
    """Interval calibrations on randomly chosen non-root clades, each containing the true age."""
    inner = list(range(tree.n_leaves, tree.n_nodes - 1))
    picks = rng.choice(inner, size=min(cfg.n_calibrations, len(inner)), replace=False)
    out = []
    for j, i in enumerate(sorted(int(v) for v in picks)):
        age = float(tree.ages[i])
        below, above = rng.uniform(*cfg.cal_spread, size=2)
        out.append(Calibration("clade", tree.clade(i), age * (1 - below), age * (1 + above), f"cal{j + 1}"))
    return CalibrationSet(tuple(out), cfg.root_cap)


@dataclass
class RecoveryResult:
    seed: int
    n_leaves: int
    n_classes: int
    root_true: float
    root_hpd: tuple
    mu_true: float
    mu_hpd: tuple
    ess_root: float
    ess_mu: float
    seconds: float

    @property
    def root_covered(self) -> bool:
        return self.root_hpd[0] <= self.root_true <= self.root_hpd[1]

    @property
    def mu_covered(self) -> bool:
        return self.mu_hpd[0] <= self.mu_true <= self.mu_hpd[1]

    HEADER = "seed\tL\tN\troot_true\troot_lo\troot_hi\tmu_true\tmu_lo\tmu_hi\tess_root\tess_mu\tseconds"

    def row(self) -> str:
        vals = [
            self.seed, self.n_leaves, self.n_classes, f"{self.root_true:.1f}",
            f"{self.root_hpd[0]:.1f}", f"{self.root_hpd[1]:.1f}",
            f"{self.mu_true:.4g}", f"{self.mu_hpd[0]:.4g}", f"{self.mu_hpd[1]:.4g}",
            f"{self.ess_root:.0f}", f"{self.ess_mu:.0f}", f"{self.seconds:.1f}",
        ]
        return "\t".join(str(v) for v in vals)


def recovery_run(seed: int, cfg: StudyConfig) -> RecoveryResult:
    """Fit one synthetic dataset and report whether the HPD intervals cover the truth."""
    bundle, cals = study_dataset(seed, cfg)
    chain = cfg.chain(seed)
    t0 = time.perf_counter()
    trace = run_chain(bundle.data, bundle.rule, cals, chain).discard(cfg.burn)
    root, mu = trace.column("root_age"), trace.column("mu")
    return RecoveryResult(
        seed,
        bundle.tree.n_leaves,
        bundle.data.n_classes,
        bundle.tree.root_age,
        hpd_interval(root, cfg.level),
        bundle.params.mu,
        hpd_interval(mu, cfg.level),
        ess_geyer(root),
        ess_geyer(mu),
        time.perf_counter() - t0,
    )


@dataclass
class XvalResult:
    seed: int
    true_bf: float
    true_bound: str
    false_bf: float
    false_bound: str
    shift_sd: float
    seconds: float

    HEADER = "seed\ttrue_2logB\ttrue_bound\tfalse_2logB\tfalse_bound\tshift_sd\tseconds"

    def row(self) -> str:
        return (
            f"{self.seed}\t{self.true_bf:.3f}\t{self.true_bound or '-'}\t{self.false_bf:.3f}"
            f"\t{self.false_bound or '-'}\t{self.shift_sd:.2f}\t{self.seconds:.1f}"
        )


def xval_run(seed: int, cfg: StudyConfig, shift_sd: float = 4.0) -> XvalResult:
    """Bayes factors for a calibration that holds and for one that excludes the truth.

    Both are scored on one pair of chains run without the constraint.  The
    false constraint is a lower bound on the same clade placed ``shift_sd``
    posterior standard deviations above the true age, with the standard
    deviation taken over samples in which the clade is monophyletic.
    """
    bundle, cals = study_dataset(seed, cfg)
    chain = cfg.chain(seed)
    target = cals.calibrations[0]
    loose = freed(cals, target.label)
    t0 = time.perf_counter()
    post = run_chain(bundle.data, bundle.rule, loose, chain).discard(cfg.burn)
    prior_cfg = cfg.chain(seed + 1, prior_only=True, iterations=cfg.prior_iterations)
    prior = run_chain(bundle.data, bundle.rule, loose, prior_cfg).discard(cfg.burn)
    truth = xval_from_samples(target, post.trees, prior.trees, cfg.level)
    ages = [constraint_age(t, target) for t in post.trees if target.leaves in t.clades()]
    sd = float(np.std(ages)) if len(ages) > 1 else float(np.std([constraint_age(t, target) for t in post.trees]))
    lo = constraint_age(bundle.tree, target) + shift_sd * sd
    wrong = xval_from_samples(Calibration("clade", target.leaves, lo, None, target.label), post.trees, prior.trees, cfg.level)
    seconds = time.perf_counter() - t0
    return XvalResult(seed, truth.two_log_bf, truth.bound, wrong.two_log_bf, wrong.bound, shift_sd, seconds)


def count(results, attr: str) -> int:
    return sum(bool(getattr(r, attr)) for r in results)

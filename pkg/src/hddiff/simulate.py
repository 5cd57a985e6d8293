"""Synthetic data generators and the false/true positive rate harness.

Settings:

* ``reg-synthetic``: AR(1) predictors ``Sigma_jj' = rho^|j-j'|``; under H0 both
  populations share five unit coefficients at random locations, under HA they
  share three and each has two further coefficients equal to ``alpha``.
* ``reg-external``: the same coefficient design on rows drawn from a
  user-supplied predictor matrix.
* ``ggm``: ``k`` symmetric off-diagonal precision entries at random locations;
  under HA only ``ceil(k * alpha)`` locations are shared.

Noise variance is chosen so that ``beta' Sigma beta / sigma2 = snr``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import permtest, testing
from .exceptions import DegenerateFitError, HddiffError, InvalidInputError
from .models import GGM, REGRESSION, Dataset, GgmParams, RegressionParams, always_active, ggm_position

log = logging.getLogger(__name__)

SETTINGS = ("reg-synthetic", "reg-external", "ggm")
METHODS = ("ordinary-lrt", "single-split", "multi-split", "permutation")


@dataclass(frozen=True)
class SimSpec:
    setting: str = "reg-synthetic"
    n: int = 200
    l: int = 10
    k: int = 10
    snr: float = 10.0
    alpha: float = 0.5
    hypothesis: str = "H0"
    seed: int = 0
    rho: float = 0.5
    offdiag: float = 0.5
    x_matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise InvalidInputError(f"unknown setting {self.setting!r}; choose from {SETTINGS}")
        if self.hypothesis not in ("H0", "HA"):
            raise InvalidInputError("hypothesis must be H0 or HA")
        if self.n < 4:
            raise InvalidInputError("n must be at least 4")
        if not self.snr > 0:
            raise InvalidInputError("snr must be positive")
        if self.setting == "ggm":
            if self.k < 5:
                raise InvalidInputError("ggm setting needs k >= 5")
            if self.hypothesis == "HA" and not 0 < self.alpha <= 1:
                raise InvalidInputError("alpha must lie in (0, 1] for the ggm setting")
        else:
            if self.setting == "reg-external":
                if self.x_matrix is None:
                    raise InvalidInputError("reg-external needs a predictor matrix")
                xm = np.asarray(self.x_matrix, dtype=float)
                if xm.ndim != 2 or not np.all(np.isfinite(xm)):
                    raise InvalidInputError("predictor matrix must be a finite 2-d array")
                object.__setattr__(self, "x_matrix", xm)
                object.__setattr__(self, "l", xm.shape[1])
            if self.l < 7:
                raise InvalidInputError("regression settings need l >= 7")

    @property
    def kind(self) -> str:
        return GGM if self.setting == "ggm" else REGRESSION

    @property
    def dim(self) -> int:
        return self.k if self.kind == GGM else self.l

    @property
    def n_params(self) -> int:
        return self.k * (self.k + 1) // 2 if self.kind == GGM else self.l + 1

    def key(self) -> dict:
        out = {"setting": self.setting, "hypothesis": self.hypothesis, "n": self.n}
        if self.kind == GGM:
            out["k"] = self.k
        else:
            out.update(l=self.l, snr=self.snr)
        if self.hypothesis == "HA":
            out["alpha"] = self.alpha
        return out


@dataclass(frozen=True)
class Truth:
    params_u: RegressionParams | GgmParams
    params_v: RegressionParams | GgmParams
    support_u: frozenset
    support_v: frozenset
    xx: np.ndarray | None = None
    identical: bool = False

    def supports(self) -> dict:
        return {"u": self.support_u, "v": self.support_v}


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tags))


def ar1_cov(l: int, rho: float) -> np.ndarray:
    idx = np.arange(l)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def regression_betas(spec: SimSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    loc = rng.choice(spec.l, size=7, replace=False)
    bu = np.zeros(spec.l)
    if spec.hypothesis == "H0":
        bu[loc[:5]] = 1.0
        return bu, bu.copy()
    bv = np.zeros(spec.l)
    bu[loc[:3]] = 1.0
    bv[loc[:3]] = 1.0
    bu[loc[3:5]] = spec.alpha
    bv[loc[5:7]] = spec.alpha
    return bu, bv


def gen_regression(spec: SimSpec, replicate: int = 0) -> tuple[Dataset, Dataset, Truth]:
    """Draw one (U, V) pair for a regression setting."""
    if spec.kind != REGRESSION:
        raise InvalidInputError("gen_regression needs a regression setting")
    rng = _rng(spec.seed, replicate)
    bu, bv = regression_betas(spec, rng)
    if spec.setting == "reg-synthetic":
        sigma = ar1_cov(spec.l, spec.rho)
        chol = np.linalg.cholesky(sigma)
        xu = rng.standard_normal((spec.n, spec.l)) @ chol.T
        xv = rng.standard_normal((spec.n, spec.l)) @ chol.T
    else:
        xm = spec.x_matrix
        sigma = xm.T @ xm / xm.shape[0]
        rows = rng.choice(xm.shape[0], size=2 * spec.n, replace=2 * spec.n > xm.shape[0])
        xu, xv = xm[rows[:spec.n]], xm[rows[spec.n:]]
    s2u = float(bu @ sigma @ bu) / spec.snr
    s2v = float(bv @ sigma @ bv) / spec.snr
    yu = xu @ bu + math.sqrt(s2u) * rng.standard_normal(spec.n)
    yv = xv @ bv + math.sqrt(s2v) * rng.standard_normal(spec.n)
    extra = always_active(REGRESSION, spec.l)
    truth = Truth(
        RegressionParams(bu, s2u), RegressionParams(bv, s2v),
        frozenset(np.flatnonzero(bu).tolist()) | extra,
        frozenset(np.flatnonzero(bv).tolist()) | extra,
        xx=sigma, identical=bool(np.array_equal(bu, bv) and s2u == s2v),
    )
    return Dataset(yu, xu), Dataset(yv, xv), truth


def make_precision(k: int, pairs, value: float = 0.5, min_eig: float = 0.1) -> np.ndarray:
    """Unit-diagonal precision with ``value`` on ``pairs``, shrunk until its eigenvalues are >= ``min_eig``.

    ``Omega = I + A / d`` with ``d = max(1, -lambda_min(A) / (1 - min_eig))``,
    i.e. diagonal loading followed by rescaling to unit diagonal.
    """
    a = np.zeros((k, k))
    for j, jp in pairs:
        a[j, jp] = a[jp, j] = value
    lo = float(np.linalg.eigvalsh(a)[0]) if k else 0.0
    d = max(1.0, -lo / (1.0 - min_eig))
    return np.eye(k) + a / d


def ggm_pairs_for(spec: SimSpec, rng: np.random.Generator) -> tuple[list, list]:
    upper = [(j, jp) for j in range(spec.k) for jp in range(j)]
    if spec.hypothesis == "H0":
        need, shared = spec.k, spec.k
    else:
        shared = math.ceil(spec.k * spec.alpha - 1e-9)
        need = shared + 2 * (spec.k - shared)
    if need > len(upper):
        raise InvalidInputError(f"k={spec.k} leaves too few off-diagonal slots for this design")
    pick = rng.choice(len(upper), size=need, replace=False)
    chosen = [upper[i] for i in pick]
    if spec.hypothesis == "H0":
        return chosen, chosen
    own = spec.k - shared
    return chosen[:shared] + chosen[shared:shared + own], chosen[:shared] + chosen[shared + own:]


def gen_ggm(spec: SimSpec, replicate: int = 0) -> tuple[Dataset, Dataset, Truth]:
    """Draw one (U, V) pair for the GGM setting."""
    if spec.kind != GGM:
        raise InvalidInputError("gen_ggm needs the ggm setting")
    rng = _rng(spec.seed, replicate)
    pu, pv = ggm_pairs_for(spec, rng)
    om_u = make_precision(spec.k, pu, spec.offdiag)
    om_v = make_precision(spec.k, pv, spec.offdiag)
    gu, gv = GgmParams(om_u), GgmParams(om_v)
    yu = rng.standard_normal((spec.n, spec.k)) @ np.linalg.cholesky(gu.sigma).T
    yv = rng.standard_normal((spec.n, spec.k)) @ np.linalg.cholesky(gv.sigma).T
    diag = always_active(GGM, spec.k)
    truth = Truth(
        gu, gv,
        frozenset(ggm_position(j, jp) for j, jp in pu) | diag,
        frozenset(ggm_position(j, jp) for j, jp in pv) | diag,
        identical=bool(np.array_equal(om_u, om_v)),
    )
    return Dataset(yu), Dataset(yv), truth


def generate(spec: SimSpec, replicate: int = 0):
    return gen_ggm(spec, replicate) if spec.kind == GGM else gen_regression(spec, replicate)


# --------------------------------------------------------------------------- #
# Experiment harness
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ExperimentConfig:
    test: testing.TestConfig = field(default_factory=testing.TestConfig)
    n_perm: int = 100
    level: float = 0.05
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise InvalidInputError("level must lie in (0, 1)")
        if self.n_perm < 1:
            raise InvalidInputError("n_perm must be at least 1")
        if self.threads < 1:
            raise InvalidInputError("threads must be at least 1")


def _run_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(replicate, 1))
               .generate_state(1, np.uint64)[0] >> 1)


def ordinary_applicable(spec: SimSpec) -> bool:
    return spec.n > (spec.n_params if spec.kind == REGRESSION else spec.k)


def run_method(method: str, u: Dataset, v: Dataset, truth: Truth, spec: SimSpec,
               config: ExperimentConfig, seed: int) -> dict:
    """One method on one replicate; returns a record with ``p_value`` or ``status``."""
    rec = {"method": method, "status": "ok", "p_value": None}
    try:
        if method == "ordinary-lrt":
            if not ordinary_applicable(spec):
                rec["status"] = "not-applicable"
                return rec
            lr, p, df = testing.ordinary_lrt(u, v)
            rec.update(p_value=p, lr=lr, df=df)
        elif method in ("single-split", "multi-split"):
            k = 1 if method == "single-split" else config.test.k_splits
            cfg = dataclasses.replace(config.test, k_splits=k, seed=seed, threads=1)
            report = testing.multi_split_test(u, v, cfg, truth=truth.supports())
            hits = [o.diagnostics.screening_hits for o in report.outcomes
                    if o.diagnostics is not None and o.diagnostics.screening_hits is not None]
            rec.update(
                p_value=report.pvalue,
                n_invalid=report.n_invalid,
                screening_hits={s: sum(h[s] for h in hits) for s in ("u", "v", "uv")},
                n_screened=len(hits),
                clamp_events=sum(o.diagnostics.clamp_events for o in report.outcomes if o.diagnostics),
                jitter_events=sum(o.diagnostics.jitter_events for o in report.outcomes if o.diagnostics),
            )
        elif method == "permutation":
            pc = permtest.PermConfig(config.n_perm, seed, screening=config.test.screening)
            res = permtest.perm_test(u, v, pc)
            rec.update(p_value=res.pvalue, statistic=res.statistic, exceedances=res.exceedances)
        else:
            raise InvalidInputError(f"unknown method {method!r}")
    except DegenerateFitError as exc:
        if method == "ordinary-lrt":
            rec.update(status="not-applicable", error=str(exc))
        else:
            rec.update(status="error", error=f"{type(exc).__name__}: {exc}")
    except (HddiffError, np.linalg.LinAlgError) as exc:
        rec.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return rec


def _replicate(spec: SimSpec, replicate: int, methods, config: ExperimentConfig) -> dict:
    u, v, truth = generate(spec, replicate)
    seed = _run_seed(spec.seed, replicate)
    return {"replicate": replicate, "identical_truth": truth.identical,
            "methods": [run_method(m, u, v, truth, spec, config, seed) for m in methods]}


def run_cell(spec: SimSpec, runs: int, methods, config: ExperimentConfig) -> dict:
    """All replicates of one grid cell, reduced to rejection rates."""
    if runs < 1:
        raise InvalidInputError("runs must be at least 1")
    unknown = set(methods) - set(METHODS)
    if unknown or not methods:
        raise InvalidInputError(f"methods must be a nonempty subset of {METHODS}")
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            reps = list(pool.map(lambda r: _replicate(spec, r, methods, config), range(runs)))
    else:
        reps = [_replicate(spec, r, methods, config) for r in range(runs)]
    rate_name = "fpr" if spec.hypothesis == "H0" else "tpr"
    summary = []
    for mi, method in enumerate(methods):
        recs = [rep["methods"][mi] for rep in reps]
        ok = [r for r in recs if r["status"] == "ok"]
        rej = sum(r["p_value"] <= config.level for r in ok)
        rate = rej / len(ok) if ok else None
        row = {
            **spec.key(), "method": method, "runs": runs, "valid": len(ok),
            "errors": sum(r["status"] == "error" for r in recs),
            "not_applicable": sum(r["status"] == "not-applicable" for r in recs),
            "rejections": rej, "rate_name": rate_name, "rate": rate,
            "se": math.sqrt(rate * (1 - rate) / len(ok)) if ok else None,
        }
        screened = [r for r in ok if "screening_hits" in r]
        if screened:
            total = sum(r["n_screened"] for r in screened)
            row["screening_hit_rate"] = {
                s: sum(r["screening_hits"][s] for r in screened) / total if total else None
                for s in ("u", "v", "uv")
            }
            row["invalid_splits"] = sum(r["n_invalid"] for r in screened)
        summary.append(row)
    return {"cell": spec.key(), "summary": summary, "replicates": reps}


def run_experiment(spec_grid, runs: int, methods, config: ExperimentConfig = ExperimentConfig()) -> dict:
    """Rejection rates for every (spec, method) pair in the grid."""
    cells = [run_cell(spec, runs, list(methods), config) for spec in spec_grid]
    return {
        "schema_version": testing.SCHEMA_VERSION,
        "runs": runs,
        "level": config.level,
        "methods": list(methods),
        "config": {**config.test.as_dict(), "n_perm": config.n_perm},
        "table": [row for cell in cells for row in cell["summary"]],
        "cells": cells,
    }


TABLE_COLUMNS = ("setting", "hypothesis", "n", "l", "k", "snr", "alpha", "method", "runs", "valid",
                 "errors", "not_applicable", "rejections", "rate_name", "rate", "se")


def table_csv(results: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in results["table"]:
        writer.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in TABLE_COLUMNS})
    return buf.getvalue()


def results_json(results: dict) -> str:
    return json.dumps(results, indent=2, sort_keys=True)

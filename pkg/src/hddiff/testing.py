"""Single- and multi-split screen-then-test procedure.

Each split halves both populations, screens on the first halves and
evaluates the restricted likelihood ratio and its estimated null
distribution on the second halves. Split p-values are combined with the
quantile-aggregation rule

    P_agg = min(c * inf_{gamma in (gamma_min, 1)} q_gamma({P_k / gamma}), 1),

``c = 1 - gamma_min`` unless overridden.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import models, nulldist
from .exceptions import HddiffError, InvalidInputError
from .models import Dataset, check_compatible, concat
from .screening import ActiveSets, ScreeningConfig, screen_all

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
ESTIMATORS = ("plugin", "sample")
P_FLOOR = 1e-300


@dataclass(frozen=True)
class TestConfig:
    k_splits: int = 50
    gamma_min: float = 0.05
    b_estimator: str = "plugin"
    seed: int = 0
    screening: ScreeningConfig = field(default_factory=ScreeningConfig)
    screen_size: int | None = None
    agg_constant: float | None = None
    threads: int = 1

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.k_splits < 1:
            raise InvalidInputError("k_splits must be at least 1")
        if not 0 < self.gamma_min < 1:
            raise InvalidInputError("gamma_min must lie in (0, 1)")
        if self.b_estimator not in ESTIMATORS:
            raise InvalidInputError(f"b_estimator must be one of {ESTIMATORS}")
        if self.screen_size is not None and self.screen_size < 2:
            raise InvalidInputError("screen_size must be at least 2")
        if self.threads < 1:
            raise InvalidInputError("threads must be at least 1")

    def as_dict(self) -> dict:
        return {
            "k_splits": self.k_splits,
            "gamma_min": self.gamma_min,
            "b_estimator": self.b_estimator,
            "seed": self.seed,
            "screen_size": self.screen_size,
            "agg_constant": self.agg_constant,
            "screening": self.screening.as_dict(),
        }


@dataclass(frozen=True)
class SplitDiagnostics:
    sizes: dict
    jitter_events: int = 0
    clamp_events: int = 0
    max_clamp: float = 0.0
    screening_hits: dict | None = None

    def as_dict(self) -> dict:
        out = {
            "sizes": self.sizes,
            "jitter_events": self.jitter_events,
            "clamp_events": self.clamp_events,
            "max_clamp": self.max_clamp,
        }
        if self.screening_hits is not None:
            out["screening_hits"] = self.screening_hits
        return out


@dataclass(frozen=True)
class SplitOutcome:
    split_id: int
    valid: bool
    active_sets: ActiveSets | None = None
    lr: float | None = None
    nu: nulldist.NullWeights | None = None
    pvalue: float | None = None
    diagnostics: SplitDiagnostics | None = None
    error: str | None = None

    @property
    def r(self) -> int | None:
        return None if self.active_sets is None else self.active_sets.r

    def as_dict(self, labels=None, kind=None) -> dict:
        out = {"split_id": self.split_id, "valid": self.valid, "error": self.error}
        if self.active_sets is not None:
            out["r"] = self.r
            out["active_sets"] = {
                name: _names(getattr(self.active_sets, name), labels, kind)
                for name in ("i_u", "i_v", "i_uv")
            }
        if self.valid:
            out["lr"] = self.lr
            out["p_value"] = self.pvalue
            out["nu"] = [float(v) for v in self.nu.nu]
            out["structure"] = self.nu.structure
        if self.diagnostics is not None:
            out["diagnostics"] = self.diagnostics.as_dict()
        return out


def _names(positions, labels, kind):
    positions = sorted(positions)
    if labels is None:
        return positions
    return [models.param_label(kind, p, labels) for p in positions]


@dataclass
class TestReport:
    outcomes: list
    pvalue: float
    config: TestConfig
    kind: str
    labels: tuple
    n_u: int
    n_v: int
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    __test__ = False

    @property
    def valid_pvalues(self) -> list:
        return [o.pvalue for o in self.outcomes if o.valid]

    @property
    def n_invalid(self) -> int:
        return sum(not o.valid for o in self.outcomes)

    def as_dict(self, include_timing: bool = False) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "method": "single-split" if self.config.k_splits == 1 else "multi-split",
            "model": self.kind,
            "labels": list(self.labels),
            "n_u": self.n_u,
            "n_v": self.n_v,
            "config": self.config.as_dict(),
            "p_value": self.pvalue,
            "n_splits": len(self.outcomes),
            "n_valid": len(self.outcomes) - self.n_invalid,
            "n_invalid": self.n_invalid,
            "split_p_values": self.valid_pvalues,
            "splits": [o.as_dict(self.labels, self.kind) for o in self.outcomes],
        }
        out.update(self.extra)
        if include_timing:
            out["wall_clock_seconds"] = self.wall_clock
        return out


# --------------------------------------------------------------------------- #
# Statistic and weights
# --------------------------------------------------------------------------- #


def restricted_lr(u_out: Dataset, v_out: Dataset, sets: ActiveSets) -> tuple[float, dict]:
    """Twice the log-likelihood gap between the individual and joint restricted fits."""
    check_compatible(u_out, v_out)
    fit_u = models.fit_restricted_mle(u_out, sets.i_u)
    fit_v = models.fit_restricted_mle(v_out, sets.i_v)
    pooled = concat(u_out, v_out)
    fit_uv = models.fit_restricted_mle(pooled, sets.i_uv)
    ind = models.loglik(fit_u, u_out) + models.loglik(fit_v, v_out)
    joint = models.loglik(fit_uv, u_out) + models.loglik(fit_uv, v_out)
    return 2.0 * (ind - joint), {"u": fit_u, "v": fit_v, "uv": fit_uv}


def moment_function(fits: dict, u_out: Dataset, v_out: Dataset, estimator: str = "plugin"):
    """Cross-moment callback ``(c, a, b, rows, cols) -> B^c_{rows, cols}(phi_a; phi_b)``."""
    data = {"u": u_out, "v": v_out}
    if estimator == "plugin":
        def moment(c, a, b, rows, cols):
            return models.cross_moment_plugin(fits[c], fits[a], fits[b], rows, cols, data[c].x)
    elif estimator == "sample":
        def moment(c, a, b, rows, cols):
            return models.cross_moment_sample(fits[a], fits[b], rows, cols, data[c])
    else:
        raise InvalidInputError(f"unknown estimator {estimator!r}")
    return moment


def estimate_weights(fits: dict, u_out: Dataset, v_out: Dataset, sets: ActiveSets,
                     estimator: str = "plugin", events: nulldist.EventLog | None = None):
    moment = moment_function(fits, u_out, v_out, estimator)
    q = nulldist.build_qblocks(moment, sets, events)
    return nulldist.weights_prop2(q, sets, events)


# --------------------------------------------------------------------------- #
# Splitting
# --------------------------------------------------------------------------- #


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tags))


def split_permutations(n_u: int, n_v: int, seed: int, split_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Row permutations for one split; each depends only on (seed, split_id, population)."""
    return _rng(seed, split_id, 0).permutation(n_u), _rng(seed, split_id, 1).permutation(n_v)


def _n_in(n: int, config: TestConfig) -> int:
    if config.screen_size is not None:
        return config.screen_size
    return (n + 1) // 2


def single_split_test(u: Dataset, v: Dataset, config: TestConfig, split_id: int,
                      truth: dict | None = None, perms=None) -> SplitOutcome:
    """Screen on one random half, test on the other.

    ``perms`` overrides the seeded row permutations (first ``n_in`` rows of
    each permutation form the screening half). ``truth`` maps "u"/"v" to the
    true supports and enables screening-hit diagnostics.
    """
    check_compatible(u, v)
    if min(u.n, v.n) < 4:
        raise InvalidInputError("each population needs at least 4 rows")
    if perms is None:
        perms = split_permutations(u.n, v.n, config.seed, split_id)
    pu, pv = perms
    nu_in, nv_in = _n_in(u.n, config), _n_in(v.n, config)
    if nu_in >= u.n or nv_in >= v.n:
        raise InvalidInputError("screening half leaves no rows for testing")
    u_in, u_out = u.take(np.sort(pu[:nu_in])), u.take(np.sort(pu[nu_in:]))
    v_in, v_out = v.take(np.sort(pv[:nv_in])), v.take(np.sort(pv[nv_in:]))
    scfg = dataclasses.replace(config.screening, seed=config.seed)
    events = nulldist.EventLog()
    sets = None
    try:
        sets = screen_all(u_in, v_in, scfg, stream=(split_id,))
        hits = _screening_hits(sets, truth)
        lr, fits = restricted_lr(u_out, v_out, sets)
        weights = estimate_weights(fits, u_out, v_out, sets, config.b_estimator, events)
        p = nulldist.pvalue(lr, weights.nu)
    except (HddiffError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.info("split %d invalid: %s", split_id, exc)
        diag = None
        if sets is not None:
            diag = SplitDiagnostics(sets.sizes(), events.jitter, events.clamp, events.max_clamp,
                                    _screening_hits(sets, truth))
        return SplitOutcome(split_id, False, sets, diagnostics=diag, error=f"{type(exc).__name__}: {exc}")
    diag = SplitDiagnostics(sets.sizes(), events.jitter, events.clamp, events.max_clamp, hits)
    return SplitOutcome(split_id, True, sets, lr, weights, p, diag)


def _screening_hits(sets: ActiveSets, truth: dict | None) -> dict | None:
    if truth is None:
        return None
    su, sv = frozenset(truth["u"]), frozenset(truth["v"])
    return {"u": su <= sets.i_u, "v": sv <= sets.i_v, "uv": (su | sv) <= sets.i_uv}


# --------------------------------------------------------------------------- #
# Aggregation
# --------------------------------------------------------------------------- #


def aggregate_pvalues(pvals, gamma_min: float = 0.05, constant: float | None = None) -> float:
    """Quantile aggregation of split p-values.

    ``q_gamma`` is the ceil(gamma K)-th order statistic; the objective is
    piecewise decreasing in gamma between the breakpoints ``i / K``, so the
    infimum is the minimum of ``p_(i) K / i`` over ``i >= ceil(gamma_min K)``.
    """
    p = np.sort(np.asarray(pvals, dtype=float).ravel())
    if p.size == 0:
        raise InvalidInputError("no p-values to aggregate")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise InvalidInputError("p-values must lie in [0, 1]")
    if not 0 < gamma_min < 1:
        raise InvalidInputError("gamma_min must lie in (0, 1)")
    k = p.size
    i_lo = max(1, math.ceil(gamma_min * k - 1e-9))
    i = np.arange(i_lo, k + 1)
    inf = float(np.min(p[i - 1] * k / i))
    c = (1.0 - gamma_min) if constant is None else float(constant)
    return float(min(max(c * inf, P_FLOOR), 1.0))


def multi_split_test(u: Dataset, v: Dataset, config: TestConfig, truth: dict | None = None) -> TestReport:
    """Run ``config.k_splits`` independent splits and aggregate their p-values."""
    check_compatible(u, v)
    t0 = time.perf_counter()
    ids = list(range(1, config.k_splits + 1))

    def run(split_id):
        return single_split_test(u, v, config, split_id, truth)

    if config.threads > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(run, ids))
    else:
        outcomes = [run(i) for i in ids]
    valid = [o.pvalue for o in outcomes if o.valid]
    if not valid:
        raise HddiffError(f"all {len(outcomes)} splits were invalid; first error: {outcomes[0].error}")
    if config.k_splits == 1:
        p = max(valid[0], P_FLOOR)
    else:
        p = aggregate_pvalues(valid, config.gamma_min, config.agg_constant)
    return TestReport(outcomes, p, config, u.kind, u.labels, u.n, v.n, time.perf_counter() - t0)


# --------------------------------------------------------------------------- #
# Classical comparison
# --------------------------------------------------------------------------- #


def ordinary_lrt(u: Dataset, v: Dataset) -> tuple[float, float, int]:
    """Unrestricted likelihood-ratio statistic with its chi-square(p) p-value.

    Returns ``(lr, p_value, df)``. Raises :class:`DegenerateFitError` when
    the unrestricted MLE does not exist.
    """
    full = frozenset(range(u.n_params))
    lr, _ = restricted_lr(u, v, ActiveSets(full, full, full))
    df = u.n_params
    return lr, float(stats.chi2.sf(lr, df)), df


def pseudo_populations(data: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Randomly halve one dataset into two pseudo-populations (back-testing)."""
    if data.n < 8:
        raise InvalidInputError("back-testing needs at least 8 rows")
    perm = _rng(seed, 0, 2).permutation(data.n)
    half = (data.n + 1) // 2
    return data.take(np.sort(perm[:half])), data.take(np.sort(perm[half:]))


def backtest(data: Dataset, config: TestConfig) -> TestReport:
    """Multi-split test between two random halves of the same sample.

    A calibrated procedure should return large p-values here.
    """
    u, v = pseudo_populations(data, config.seed)
    report = multi_split_test(u, v, config)
    report.extra["backtest"] = True
    return report

"""Lifelong policy learning over a stream of harvesting tasks.

Each trained task policy is compressed into a sparse code over a shared
linear basis, weighted by the task's local return curvature so that
directions the return actually cares about dominate the fit. Running
second-moment statistics of the codes are kept as exponential moving
averages, and the basis is refit from those moments after every task.
A new task then warm-starts from the basis instead of from scratch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_rng, check_scalar, check_vector
from .env import SystemConfig, TaskProfile
from .exceptions import ConvergenceError, DivergenceError
from .policy import POLICY_DIM, PolicyParams
from .rl import RLHyperparams, estimate_curvature, train_task

logger = logging.getLogger(__name__)

_PSD_TOL = 1e-8       # how negative an eigenvalue may be before Q is rejected
_DIAG_FLOOR = 1e-12   # division guard for zero-curvature coordinates


@dataclass(frozen=True)
class LifelongHyperparams:
    """Knobs for the encoding and knowledge-base updates."""

    latent_dim: int = 4
    l1_penalty: float = 0.01
    ridge_penalty: float = 0.01
    ema_rate: float = 0.1
    lasso_tol: float = 1e-6
    lasso_max_iter: int = 1000

    def __post_init__(self):
        if not isinstance(self.latent_dim, int) or self.latent_dim < 1:
            raise ValueError(f"latent_dim must be a positive int, got {self.latent_dim}")
        check_scalar("l1_penalty", self.l1_penalty, minimum=0.0)
        check_scalar("ridge_penalty", self.ridge_penalty, minimum=0.0)
        check_scalar("ema_rate", self.ema_rate, minimum=0.0, maximum=1.0,
                      strict_min=True, strict_max=True)
        check_scalar("lasso_tol", self.lasso_tol, minimum=0.0, strict_min=True)
        if not isinstance(self.lasso_max_iter, int) or self.lasso_max_iter < 1:
            raise ValueError(f"lasso_max_iter must be a positive int, got {self.lasso_max_iter}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class KnowledgeBase:
    """Shared basis plus the EMA moments it is refit from.

    ``code_moment`` is the EMA of code outer products (symmetric PSD),
    ``cross_moment`` the EMA of weight-code outer products. Arrays are
    stored read-only; updates produce new instances.
    """

    basis: np.ndarray         # (weight_dim, latent_dim)
    code_moment: np.ndarray   # (latent_dim, latent_dim)
    cross_moment: np.ndarray  # (weight_dim, latent_dim)
    ema_rate: float
    tasks_seen: int = 0

    def __post_init__(self):
        basis = check_matrix("basis", self.basis)
        d, z = basis.shape
        code = check_matrix("code_moment", self.code_moment, shape=(z, z))
        cross = check_matrix("cross_moment", self.cross_moment, shape=(d, z))
        check_scalar("ema_rate", self.ema_rate, minimum=0.0, maximum=1.0,
                     strict_min=True, strict_max=True)
        if not isinstance(self.tasks_seen, int) or self.tasks_seen < 0:
            raise ValueError(f"tasks_seen must be a nonnegative int, got {self.tasks_seen}")
        object.__setattr__(self, "basis", _frozen(basis))
        object.__setattr__(self, "code_moment", _frozen(code))
        object.__setattr__(self, "cross_moment", _frozen(cross))

    @property
    def weight_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[1]


def init_kb(weight_dim: int, hp: LifelongHyperparams, rng) -> KnowledgeBase:
    """Fresh knowledge base: basis entries i.i.d. uniform on [-0.1, 0.1],
    zero moment matrices, zero tasks seen."""
    rng = check_rng(rng)
    basis = rng.uniform(-0.1, 0.1, size=(weight_dim, hp.latent_dim))
    z = hp.latent_dim
    return KnowledgeBase(basis=basis, code_moment=np.zeros((z, z)),
                         cross_moment=np.zeros((weight_dim, z)),
                         ema_rate=hp.ema_rate, tasks_seen=0)


@dataclass(frozen=True)
class TaskEncoding:
    """Sparse code of one task's policy over the basis."""

    coefficients: np.ndarray
    objective_value: float
    active_set: np.ndarray  # indices of nonzero coefficients

    def __post_init__(self):
        object.__setattr__(self, "coefficients", _frozen(self.coefficients))
        active = np.asarray(self.active_set, dtype=np.intp)
        active.flags.writeable = False
        object.__setattr__(self, "active_set", active)


def _soft_threshold(x: float, threshold: float) -> float:
    if x > threshold:
        return x - threshold
    if x < -threshold:
        return x + threshold
    return 0.0


def _kkt_satisfied(gram: np.ndarray, lin: np.ndarray, v: np.ndarray,
                   l1_penalty: float, tol: float) -> bool:
    grad = 2.0 * (gram @ v - lin)
    for i in range(v.shape[0]):
        if v[i] != 0.0:
            if abs(grad[i] + l1_penalty * np.sign(v[i])) > tol:
                return False
        elif abs(grad[i]) > l1_penalty + tol:
            return False
    return True


def _cd_lasso(gram: np.ndarray, lin: np.ndarray, l1_penalty: float,
              tol: float, max_iter: int):
    """Cyclic coordinate descent on ``v' gram v - 2 lin' v + l1 ||v||_1``.

    Returns (v, sweeps_used, converged, per-sweep objective trace in the
    same reduced form). Each coordinate update is an exact minimisation,
    so the trace is non-increasing up to float rounding.
    """
    z = lin.shape[0]
    v = np.zeros(z)
    diag = np.maximum(np.diag(gram), _DIAG_FLOOR)
    trace = []
    half_l1 = 0.5 * l1_penalty
    for sweep in range(max_iter):
        for i in range(z):
            partial = gram[i] @ v - gram[i, i] * v[i]
            v[i] = _soft_threshold(lin[i] - partial, half_l1) / diag[i]
        trace.append(float(v @ gram @ v - 2.0 * lin @ v + l1_penalty * np.abs(v).sum()))
        if _kkt_satisfied(gram, lin, v, l1_penalty, tol):
            return v, sweep + 1, True, trace
    return v, max_iter, False, trace


def encode_task(weights, curvature, basis, l1_penalty: float,
                tol: float = 1e-6, max_iter: int = 1000) -> TaskEncoding:
    """Sparse-code trained weights over the basis under the
    curvature-weighted norm: minimise
    ``(w - B v)' Q (w - B v) + l1_penalty * ||v||_1``.

    ``curvature`` must be symmetric PSD (eigenvalues above -1e-8).
    Raises :class:`ConvergenceError` with the best iterate attached if
    the sweep budget runs out before the KKT conditions hold at ``tol``.
    """
    weights = check_vector("weights", weights)
    d = weights.shape[0]
    curvature = check_matrix("curvature", curvature, shape=(d, d))
    basis = check_matrix("basis", basis)
    if basis.shape[0] != d:
        raise ValueError(
            f"basis rows ({basis.shape[0]}) must match weight length ({d})")
    check_scalar("l1_penalty", l1_penalty, minimum=0.0)
    check_scalar("tol", tol, minimum=0.0, strict_min=True)
    if np.min(np.linalg.eigvalsh(0.5 * (curvature + curvature.T))) < -_PSD_TOL:
        raise ValueError("curvature matrix must be positive semidefinite")

    weighted = curvature @ basis               # (d, z)
    gram = basis.T @ weighted                  # (z, z)
    gram = 0.5 * (gram + gram.T)
    lin = weighted.T @ weights                 # (z,)

    v, _, converged, _ = _cd_lasso(gram, lin, l1_penalty, tol, max_iter)
    resid = weights - basis @ v
    objective = float(resid @ curvature @ resid + l1_penalty * np.abs(v).sum())
    encoding = TaskEncoding(coefficients=v, objective_value=objective,
                            active_set=np.flatnonzero(v))
    if not converged:
        raise ConvergenceError(
            f"coordinate descent did not meet tol={tol} within {max_iter} sweeps",
            encoding=encoding)
    return encoding


def task_statistics(coefficients, weights) -> tuple[np.ndarray, np.ndarray]:
    """One task's moment contributions: (code outer product,
    weight-code outer product)."""
    v = check_vector("coefficients", coefficients)
    w = check_vector("weights", weights)
    return np.outer(v, v), np.outer(w, v)


def update_statistics(kb: KnowledgeBase, code_stat, cross_stat) -> KnowledgeBase:
    """Fold one task's statistics into the EMA moments; counts the task."""
    z, d = kb.latent_dim, kb.weight_dim
    code_stat = check_matrix("code_stat", code_stat, shape=(z, z))
    cross_stat = check_matrix("cross_stat", cross_stat, shape=(d, z))
    keep = 1.0 - kb.ema_rate
    return replace(
        kb,
        code_moment=keep * kb.code_moment + kb.ema_rate * code_stat,
        cross_moment=keep * kb.cross_moment + kb.ema_rate * cross_stat,
        tasks_seen=kb.tasks_seen + 1,
    )


def pinv(matrix, rcond=None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse by SVD, truncating singular values
    below ``rcond`` times the largest (delegates to numpy; None uses
    numpy's dimension-scaled machine-epsilon default)."""
    matrix = check_matrix("matrix", matrix)
    if rcond is None:
        return np.linalg.pinv(matrix)
    return np.linalg.pinv(matrix, rcond=rcond)


def refit_kb(kb: KnowledgeBase, ridge: float = 0.0) -> KnowledgeBase:
    """Refit the basis from the EMA moments.

    With ``ridge == 0`` this is the minimum-norm least-squares solution
    ``cross_moment @ pinv(code_moment)``; with ``ridge > 0`` it solves
    the ridge-regularised normal equations
    ``basis @ (code_moment + ridge I) = cross_moment`` exactly.
    """
    check_scalar("ridge", ridge, minimum=0.0)
    if ridge == 0.0:
        basis = kb.cross_moment @ pinv(kb.code_moment)
    else:
        lhs = kb.code_moment + ridge * np.eye(kb.latent_dim)
        basis = np.linalg.solve(lhs, kb.cross_moment.T).T
    return replace(kb, basis=basis)


def mean_encoding(encodings) -> np.ndarray:
    """Mean coefficient vector over a collection of task encodings."""
    if len(encodings) == 0:
        raise ValueError("need at least one encoding")
    return np.mean([e.coefficients for e in encodings], axis=0)


@dataclass(frozen=True)
class WarmStartResult:
    """Outcome of probing a new task against a frozen knowledge base."""

    weights: np.ndarray       # basis @ code: the transferred initialisation
    probe_curve: np.ndarray   # returns logged during the short probe
    encoding: TaskEncoding


def warm_start(kb: KnowledgeBase, mean_code, task: TaskProfile,
               cfg: SystemConfig, rl_hp: RLHyperparams,
               ll_hp: LifelongHyperparams, probe_budget: int, rng,
               curvature_hp: RLHyperparams | None = None,
               epsilon: float = 1e-4, psd_floor: float = 1e-6,
               rollout_fn=None) -> WarmStartResult:
    """Transfer the knowledge base to an unseen task without mutating it.

    Starting from the basis applied to the mean training code, run a
    short probe of ``probe_budget`` updates, estimate the probe policy's
    curvature, sparse-code it over the frozen basis, and return the
    basis reconstruction as the warm initialisation. The result always
    lies in the basis column space.
    """
    if kb.tasks_seen < 1:
        raise ValueError("knowledge base has no tasks; train before warm starting")
    if probe_budget < 1:
        raise ValueError(f"probe_budget must be >= 1, got {probe_budget}")
    rng = check_rng(rng)
    mean_code = check_vector("mean_code", mean_code, size=kb.latent_dim)

    start = kb.basis @ mean_code
    probe_params, probe_curve = train_task(start, task, cfg, probe_budget,
                                           rl_hp, rng, rollout_fn=rollout_fn)
    curv = estimate_curvature(probe_params.weights, task, cfg,
                              curvature_hp if curvature_hp is not None else rl_hp,
                              rng, epsilon=epsilon, psd_floor=psd_floor,
                              rollout_fn=rollout_fn)
    encoding = encode_task(probe_params.weights, curv.matrix, kb.basis,
                           ll_hp.l1_penalty, tol=ll_hp.lasso_tol,
                           max_iter=ll_hp.lasso_max_iter)
    return WarmStartResult(weights=kb.basis @ encoding.coefficients,
                           probe_curve=probe_curve, encoding=encoding)


def adapt_task(kb: KnowledgeBase, mean_code, task: TaskProfile,
               cfg: SystemConfig, rl_hp: RLHyperparams,
               ll_hp: LifelongHyperparams, total_iterations: int,
               probe_budget: int, rng,
               curvature_hp: RLHyperparams | None = None,
               epsilon: float = 1e-4, psd_floor: float = 1e-6,
               rollout_fn=None) -> tuple[PolicyParams, np.ndarray]:
    """Full adaptation on an unseen task: probe + warm start + fine-tune.

    The returned curve has exactly ``total_iterations`` points (probe
    iterations first), so it is directly comparable with a cold-start
    curve of the same length. The knowledge base is never modified.
    """
    if total_iterations < probe_budget:
        raise ValueError("total_iterations must be >= probe_budget")
    ws = warm_start(kb, mean_code, task, cfg, rl_hp, ll_hp, probe_budget, rng,
                    curvature_hp=curvature_hp, epsilon=epsilon,
                    psd_floor=psd_floor, rollout_fn=rollout_fn)
    params, rest = train_task(ws.weights, task, cfg,
                              total_iterations - probe_budget, rl_hp, rng,
                              rollout_fn=rollout_fn)
    return params, np.concatenate([ws.probe_curve, rest])


@dataclass
class LifelongRunResult:
    """Everything the training phase produced."""

    kb: KnowledgeBase
    encodings: list[TaskEncoding]
    policies: list[PolicyParams]
    curves: list[np.ndarray]
    skipped_task_ids: list[int]


def run_mt_l2rl(tasks, cfg: SystemConfig, rl_hp: RLHyperparams,
                ll_hp: LifelongHyperparams, train_iterations: int, rng,
                curvature_hp: RLHyperparams | None = None,
                epsilon: float = 1e-4, psd_floor: float = 1e-6,
                rollout_fn=None, weight_dim: int = POLICY_DIM,
                callback=None) -> LifelongRunResult:
    """Consume a task stream: train, encode, update moments, refit.

    Per task: train a policy from zero weights, estimate its curvature,
    sparse-code it against the current basis, EMA the code statistics,
    and refit the basis (ridge ``ll_hp.ridge_penalty``). A task whose
    training diverges or whose encoding fails to converge is logged and
    skipped; the knowledge base simply ignores it.

    Per-task randomness comes from child seeds drawn up front, so a
    skipped task does not shift later tasks' streams.
    """
    rng = check_rng(rng)
    if train_iterations < 1:
        raise ValueError(f"train_iterations must be >= 1, got {train_iterations}")
    kb = init_kb(weight_dim, ll_hp, rng)
    child_seeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=len(tasks))]

    encodings: list[TaskEncoding] = []
    policies: list[PolicyParams] = []
    curves: list[np.ndarray] = []
    skipped: list[int] = []
    for task, child_seed in zip(tasks, child_seeds):
        task_rng = np.random.default_rng(child_seed)
        try:
            params, curve = train_task(np.zeros(weight_dim), task, cfg,
                                       train_iterations, rl_hp, task_rng,
                                       rollout_fn=rollout_fn)
            curv = estimate_curvature(params.weights, task, cfg,
                                      curvature_hp if curvature_hp is not None else rl_hp,
                                      task_rng, epsilon=epsilon,
                                      psd_floor=psd_floor, rollout_fn=rollout_fn)
            encoding = encode_task(params.weights, curv.matrix, kb.basis,
                                   ll_hp.l1_penalty, tol=ll_hp.lasso_tol,
                                   max_iter=ll_hp.lasso_max_iter)
        except (DivergenceError, ConvergenceError) as exc:
            logger.warning("skipping task %s: %s", task.task_id, exc)
            skipped.append(task.task_id)
            continue
        code_stat, cross_stat = task_statistics(encoding.coefficients, params.weights)
        kb = update_statistics(kb, code_stat, cross_stat)
        kb = refit_kb(kb, ridge=ll_hp.ridge_penalty)
        encodings.append(encoding)
        policies.append(params)
        curves.append(curve)
        if callback is not None:
            callback(task, kb, encoding, curve)
    return LifelongRunResult(kb=kb, encodings=encodings, policies=policies,
                             curves=curves, skipped_task_ids=skipped)


class LifelongLearner(BaseEstimator):
    """Estimator facade: ``fit`` consumes a task list and builds the
    knowledge base; ``adapt`` transfers it to an unseen task.

    Fitted attributes: ``kb_``, ``encodings_`` (codes as rows),
    ``curves_``, ``policies_``, ``mean_code_``, ``skipped_task_ids_``.
    """

    def __init__(self, cfg: SystemConfig | None = None,
                 rl_params: RLHyperparams | None = None,
                 lifelong_params: LifelongHyperparams | None = None,
                 train_iterations: int = 100,
                 adapt_iterations: int = 100,
                 probe_budget: int = 5,
                 curvature_params: RLHyperparams | None = None,
                 epsilon: float = 1e-4,
                 psd_floor: float = 1e-6,
                 random_state=None):
        self.cfg = cfg
        self.rl_params = rl_params
        self.lifelong_params = lifelong_params
        self.train_iterations = train_iterations
        self.adapt_iterations = adapt_iterations
        self.probe_budget = probe_budget
        self.curvature_params = curvature_params
        self.epsilon = epsilon
        self.psd_floor = psd_floor
        self.random_state = random_state

    def _resolved(self):
        return (self.cfg if self.cfg is not None else SystemConfig(),
                self.rl_params if self.rl_params is not None else RLHyperparams(),
                self.lifelong_params if self.lifelong_params is not None
                else LifelongHyperparams())

    def fit(self, tasks, y=None):
        cfg, rl_hp, ll_hp = self._resolved()
        tasks = list(tasks)
        if len(tasks) == 0:
            raise ValueError("need at least one training task")
        result = run_mt_l2rl(tasks, cfg, rl_hp, ll_hp, self.train_iterations,
                             check_rng(self.random_state),
                             curvature_hp=self.curvature_params,
                             epsilon=self.epsilon, psd_floor=self.psd_floor)
        if len(result.encodings) == 0:
            raise RuntimeError("every training task failed; knowledge base is empty")
        self.kb_ = result.kb
        self.encodings_ = np.array([e.coefficients for e in result.encodings])
        self.curves_ = result.curves
        self.policies_ = result.policies
        self.skipped_task_ids_ = result.skipped_task_ids
        self.mean_code_ = self.encodings_.mean(axis=0)
        return self

    def adapt(self, task: TaskProfile, random_state=None) -> tuple[PolicyParams, np.ndarray]:
        """Warm-start and fine-tune on an unseen task; the stored
        knowledge base stays frozen."""
        check_is_fitted(self)
        cfg, rl_hp, ll_hp = self._resolved()
        return adapt_task(self.kb_, self.mean_code_, task, cfg, rl_hp, ll_hp,
                          self.adapt_iterations, self.probe_budget,
                          check_rng(random_state),
                          curvature_hp=self.curvature_params,
                          epsilon=self.epsilon, psd_floor=self.psd_floor)

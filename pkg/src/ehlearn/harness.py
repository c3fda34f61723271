"""Experiment orchestration: configs, task streams, the train/test
protocol, metrics, and persistence.

Every run is a pure function of (config, master seed). The master seed
fans out to named substreams through a documented splitting rule
(:func:`substream`), test runs across (task, seed, method) use
independent substreams so they can execute in any order or in parallel,
and all metric files are written atomically with deterministic bytes.
Wall-clock measurements live in their own file (``timings.csv``) so the
metric files stay byte-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from ._validation import check_rng, check_scalar
from .baselines import LyapunovConfig, run_lyapunov, vanilla_rl
from .env import SystemConfig, TaskProfile
from .exceptions import EHLearnError, SnapshotFormatError, SnapshotVersionError
from .lifelong import (KnowledgeBase, LifelongHyperparams, LifelongRunResult,
                       adapt_task, run_mt_l2rl)
from .rl import RLHyperparams

logger = logging.getLogger(__name__)

METHOD_LIFELONG = "mt-l2rl"
METHOD_COLD = "vanilla-rl"
METHOD_DRIFT = "lyapunov"
METHODS = (METHOD_LIFELONG, METHOD_COLD, METHOD_DRIFT)

CURVES_FILE = "curves.csv"
TRAIN_CURVES_FILE = "train_curves.csv"
MEAN_CURVES_FILE = "mean_curves.csv"
SUMMARY_FILE = "summary.json"
TIMINGS_FILE = "timings.csv"
KB_FILE = "kb.bin"
CONFIG_FILE = "config.json"

OUT_DIR_ENV = "EHLEARN_OUT"
THREADS_ENV = "EHLEARN_THREADS"


def substream(master_seed: int, *parts) -> np.random.Generator:
    """Named substream of the master seed.

    The stream's seed is the first 8 bytes (little-endian) of
    ``sha256("{master_seed}:{part0/part1/...}")``. Stable across
    processes and platforms, unlike Python's builtin ``hash``.
    """
    label = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def generate_training_tasks(n: int, rng,
                            eh_scale_range=(0.5, 1.5),
                            efficiency_range=(0.3, 0.6)) -> list[TaskProfile]:
    """Draw ``n`` i.i.d. training tasks with uniform harvesting-channel
    scale and conversion efficiency (one uniform call per parameter)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = check_rng(rng)
    scales = rng.uniform(eh_scale_range[0], eh_scale_range[1], size=n)
    effs = rng.uniform(efficiency_range[0], efficiency_range[1], size=n)
    return [TaskProfile(task_id=i, eh_scale=float(scales[i]),
                        conversion_efficiency=float(effs[i]))
            for i in range(n)]


def test_tasks() -> tuple[TaskProfile, ...]:
    """The four held-out evaluation tasks, ordered easy to hard; scale
    and efficiency are paired positionally."""
    pairs = ((0.6, 0.35), (1.0, 0.45), (1.4, 0.55), (1.8, 0.65))
    return tuple(TaskProfile(task_id=100 + i, eh_scale=s, conversion_efficiency=e)
                 for i, (s, e) in enumerate(pairs))


def trailing_mean(curve, window: int) -> np.ndarray:
    """Trailing moving average with partial windows at the start."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 1 or curve.shape[0] == 0:
        raise ValueError("curve must be a non-empty 1-D sequence")
    if not isinstance(window, int) or window < 1:
        raise ValueError(f"window must be a positive int, got {window}")
    n = curve.shape[0]
    csum = np.concatenate([[0.0], np.cumsum(curve)])
    idx = np.arange(n)
    start = np.maximum(idx - window + 1, 0)
    return (csum[idx + 1] - csum[start]) / (idx - start + 1)


def convergence_iteration(curve, fraction: float = 0.9, window: int = 10) -> int:
    """Smallest index whose trailing-smoothed return reaches the final
    smoothed value up to a (1 - fraction) band.

    The band is ``final - (1 - fraction) * |final|``, which equals
    ``fraction * final`` for nonnegative finals and extends the same
    definition to negative ones. Returns ``len(curve)`` as a sentinel if
    no point reaches the band (only possible for non-finite curves).
    """
    fraction = check_scalar("fraction", fraction, minimum=0.0, maximum=1.0,
                            strict_min=True)
    smoothed = trailing_mean(curve, window)
    final = smoothed[-1]
    threshold = final - (1.0 - fraction) * abs(final)
    hits = np.flatnonzero(smoothed >= threshold)
    return int(hits[0]) if hits.size else int(smoothed.shape[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a full run needs. ``rl.horizon`` is the per-task slot
    count (shared by rollouts and controller episodes).

    ``curvature_trajectories`` optionally shrinks the rollout batch used
    for curvature probes only (None keeps ``rl.n_trajectories``).
    """

    system: SystemConfig = SystemConfig()
    rl: RLHyperparams = RLHyperparams()
    lifelong: LifelongHyperparams = LifelongHyperparams()
    lyapunov: LyapunovConfig = LyapunovConfig()
    master_seed: int = 0
    n_train_tasks: int = 25
    train_iterations: int = 100
    test_iterations: int = 200
    probe_budget: int = 5
    seeds: tuple[int, ...] = tuple(range(10))
    eh_scale_range: tuple[float, float] = (0.5, 1.5)
    efficiency_range: tuple[float, float] = (0.3, 0.6)
    test_profiles: tuple[TaskProfile, ...] = test_tasks()
    curvature_trajectories: int | None = None
    epsilon: float = 1e-4
    psd_floor: float = 1e-6
    convergence_fraction: float = 0.9
    smoothing_window: int = 10
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "eh_scale_range", tuple(self.eh_scale_range))
        object.__setattr__(self, "efficiency_range", tuple(self.efficiency_range))
        object.__setattr__(self, "test_profiles", tuple(self.test_profiles))
        if not isinstance(self.master_seed, int):
            raise ValueError("master_seed must be an int")
        for name in ("n_train_tasks", "train_iterations", "test_iterations",
                     "probe_budget"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive int, got {value}")
        if self.probe_budget > self.test_iterations:
            raise ValueError("probe_budget must not exceed test_iterations")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if len(self.test_profiles) < 1:
            raise ValueError("need at least one test task")
        if self.curvature_trajectories is not None and (
                not isinstance(self.curvature_trajectories, int)
                or self.curvature_trajectories < 1):
            raise ValueError("curvature_trajectories must be a positive int or None")
        check_scalar("epsilon", self.epsilon, minimum=0.0, strict_min=True)
        check_scalar("psd_floor", self.psd_floor, minimum=0.0)
        check_scalar("convergence_fraction", self.convergence_fraction,
                     minimum=0.0, maximum=1.0, strict_min=True)
        if not isinstance(self.smoothing_window, int) or self.smoothing_window < 1:
            raise ValueError("smoothing_window must be a positive int")

    def curvature_hp(self) -> RLHyperparams:
        if self.curvature_trajectories is None:
            return self.rl
        return replace(self.rl, n_trajectories=self.curvature_trajectories)


def default_experiment_config() -> ExperimentConfig:
    """The shipped full-protocol configuration.

    Physical constants follow the standard setup (5 MHz, -120 dBm,
    1 kb/s, 30 mW / 10 mW, 5 J battery, 500-slot tasks, 25 training
    tasks). The link scales fold in path loss and are sized so the
    untrained policy starts with roughly 2.5x service margin: queues
    then stay bounded from the first slot and policy-gradient descent is
    stable. The reward uses hinge penalties with a weight that puts
    backlog terms on the same footing as transmit energy, and the l1 /
    ridge penalties of the encoder are scaled to the resulting
    curvature magnitudes.
    """
    return ExperimentConfig(
        system=SystemConfig(penalty_mode="hinge", penalty_weight=3e-6,
                            link0_scale=7.4e-17, link1_scale=1.11e-16),
        rl=RLHyperparams(learning_rate=3.0, n_trajectories=8, horizon=500),
        lifelong=LifelongHyperparams(l1_penalty=1e-6, ridge_penalty=0.01),
        lyapunov=LyapunovConfig(),
        train_iterations=80,
        test_iterations=150,
        probe_budget=5,
        seeds=tuple(range(10)),
        curvature_trajectories=4,
    )


_CONFIG_SECTIONS = {
    "system": SystemConfig,
    "rl": RLHyperparams,
    "lifelong": LifelongHyperparams,
    "lyapunov": LyapunovConfig,
}
_EXPERIMENT_KEYS = ("master_seed", "n_train_tasks", "train_iterations",
                    "test_iterations", "probe_budget", "seeds",
                    "eh_scale_range", "efficiency_range", "test_profiles",
                    "curvature_trajectories", "epsilon", "psd_floor",
                    "convergence_fraction", "smoothing_window", "out_dir")


def noise_dbm_to_watts(dbm: float) -> float:
    """Convert a noise level in dBm to linear watts."""
    return 10.0 ** (dbm / 10.0) * 1e-3


def config_to_dict(config: ExperimentConfig) -> dict:
    """Plain-JSON view of a config (inverse of :func:`config_from_dict`)."""
    out: dict = {}
    for section, cls in _CONFIG_SECTIONS.items():
        obj = getattr(config, section)
        out[section] = {f.name: getattr(obj, f.name) for f in fields(cls)}
    exp: dict = {}
    for key in _EXPERIMENT_KEYS:
        value = getattr(config, key)
        if key == "test_profiles":
            value = [[t.eh_scale, t.conversion_efficiency] for t in value]
        elif isinstance(value, tuple):
            value = list(value)
        exp[key] = value
    out["experiment"] = exp
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config from the documented nested-dict schema.

    Omitted sections and keys fall back to the shipped defaults
    (:func:`default_experiment_config`), so a partial file overrides
    only what it names. Unknown sections or keys raise ``ValueError``.
    The system section accepts ``noise_dbm`` as an alternative to
    ``noise_power_w``.
    """
    if not isinstance(data, dict):
        raise ValueError("config root must be a JSON object")
    known_sections = set(_CONFIG_SECTIONS) | {"experiment"}
    for section in data:
        if section not in known_sections:
            raise ValueError(f"unknown config section {section!r}")
    base = config_to_dict(default_experiment_config())

    kwargs: dict = {}
    for section, cls in _CONFIG_SECTIONS.items():
        section_data = dict(data.get(section, {}))
        allowed = {f.name for f in fields(cls)}
        if section == "system" and "noise_dbm" in section_data:
            if "noise_power_w" in section_data:
                raise ValueError("give either noise_dbm or noise_power_w, not both")
            section_data["noise_power_w"] = noise_dbm_to_watts(
                section_data.pop("noise_dbm"))
        for key in section_data:
            if key not in allowed:
                raise ValueError(f"unknown key {key!r} in config section {section!r}")
        kwargs[section] = cls(**{**base[section], **section_data})

    exp = dict(data.get("experiment", {}))
    for key in exp:
        if key not in _EXPERIMENT_KEYS:
            raise ValueError(f"unknown key {key!r} in config section 'experiment'")
    exp = {**base["experiment"], **exp}
    if "test_profiles" in exp:
        profiles = []
        for i, pair in enumerate(exp["test_profiles"]):
            scale, eff = pair
            profiles.append(TaskProfile(task_id=100 + i, eh_scale=float(scale),
                                        conversion_efficiency=float(eff)))
        exp["test_profiles"] = tuple(profiles)
    for key in ("seeds", "eh_scale_range", "efficiency_range"):
        if key in exp:
            exp[key] = tuple(exp[key])
    return ExperimentConfig(**kwargs, **exp)


def load_experiment_config(path) -> ExperimentConfig:
    """Read a JSON config file (see README for the schema)."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def config_digest(config: ExperimentConfig) -> str:
    """Stable content hash of a config (canonical JSON, sorted keys)."""
    text = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunRecord:
    """One test run's logged outcome."""

    method: str
    task_id: int
    seed: int
    curve: np.ndarray
    wall_clock_s: float
    convergence_iteration: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        curve = np.asarray(self.curve, dtype=np.float64)
        if not np.all(np.isfinite(curve)):
            raise ValueError("curve must be finite")
        if self.convergence_iteration > curve.shape[0]:
            raise ValueError("convergence_iteration must be <= curve length")
        self.curve = curve


@dataclass
class FailureRecord:
    """A test run that raised; the experiment carries on without it."""

    method: str
    task_id: int
    seed: int
    error: str


# ---------------------------------------------------------------------------
# Knowledge-base snapshots


SNAPSHOT_MAGIC = b"EHKB"
SNAPSHOT_VERSION = 1


def _atomic_write_bytes(path: str, payload: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_kb(kb: KnowledgeBase, path, encodings=None, seed_lineage=None) -> None:
    """Write a knowledge-base snapshot.

    Binary layout: 4-byte magic, uint32 little-endian header length, a
    JSON header (format version, EMA rate, dimensions, tasks seen, seed
    lineage, array manifest), then the arrays as row-major float64 in
    manifest order. Stored training encodings ride along (possibly
    empty) so transfer to new tasks can reconstruct the mean code.
    The write is atomic (temp file + rename).
    """
    if encodings is None:
        encodings = np.zeros((0, kb.latent_dim))
    encodings = np.asarray(encodings, dtype=np.float64)
    if encodings.ndim != 2 or encodings.shape[1] != kb.latent_dim:
        raise ValueError(
            f"encodings must be (n, {kb.latent_dim}), got {encodings.shape}")
    arrays = [("basis", kb.basis), ("code_moment", kb.code_moment),
              ("cross_moment", kb.cross_moment), ("encodings", encodings)]
    header = {
        "format": "ehlearn-kb",
        "version": SNAPSHOT_VERSION,
        "ema_rate": kb.ema_rate,
        "latent_dim": kb.latent_dim,
        "weight_dim": kb.weight_dim,
        "tasks_seen": kb.tasks_seen,
        "seed_lineage": seed_lineage,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    _atomic_write_bytes(os.fspath(path), buf.getvalue())


class KBSnapshot(NamedTuple):
    kb: KnowledgeBase
    encodings: np.ndarray
    header: dict


def load_kb(path) -> KBSnapshot:
    """Read a snapshot written by :func:`save_kb`.

    Raises :class:`SnapshotFormatError` on any structural damage
    (magic, header, truncation, trailing bytes) and
    :class:`SnapshotVersionError` on an unsupported format version;
    never returns a partially populated knowledge base.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != SNAPSHOT_MAGIC:
        raise SnapshotFormatError(f"{path} is not a knowledge-base snapshot")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if 8 + header_len > len(blob):
        raise SnapshotFormatError(f"{path} is truncated inside its header")
    try:
        header = json.loads(blob[8:8 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotFormatError(f"{path} has an unreadable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != "ehlearn-kb":
        raise SnapshotFormatError(f"{path} has an unrecognised header")
    version = header.get("version")
    if version != SNAPSHOT_VERSION:
        raise SnapshotVersionError(
            f"{path} has format version {version}; this build reads "
            f"version {SNAPSHOT_VERSION}",
            found=version, supported=SNAPSHOT_VERSION)

    offset = 8 + header_len
    arrays: dict[str, np.ndarray] = {}
    try:
        manifest = list(header["arrays"])
        for entry in manifest:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = count * 8
            chunk = blob[offset:offset + nbytes]
            if len(chunk) != nbytes:
                raise SnapshotFormatError(f"{path} is truncated inside array "
                                          f"{entry.get('name')!r}")
            arrays[str(entry["name"])] = np.frombuffer(chunk, dtype=np.float64) \
                .reshape(shape).copy()
            offset += nbytes
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotFormatError(f"{path} has a malformed array manifest: {exc}") from exc
    if offset != len(blob):
        raise SnapshotFormatError(f"{path} has {len(blob) - offset} trailing bytes")
    for name in ("basis", "code_moment", "cross_moment", "encodings"):
        if name not in arrays:
            raise SnapshotFormatError(f"{path} is missing array {name!r}")
    try:
        kb = KnowledgeBase(basis=arrays["basis"], code_moment=arrays["code_moment"],
                           cross_moment=arrays["cross_moment"],
                           ema_rate=float(header["ema_rate"]),
                           tasks_seen=int(header["tasks_seen"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotFormatError(f"{path} holds an invalid knowledge base: {exc}") from exc
    return KBSnapshot(kb=kb, encodings=arrays["encodings"], header=header)


def file_hash(path) -> str:
    """SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def kb_state_hash(kb: KnowledgeBase) -> str:
    """SHA-256 over an in-memory knowledge base's arrays and metadata."""
    digest = hashlib.sha256()
    for arr in (kb.basis, kb.code_moment, kb.cross_moment):
        digest.update(np.ascontiguousarray(arr).tobytes())
    digest.update(struct.pack("<dq", kb.ema_rate, kb.tasks_seen))
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Protocol phases


def run_training(config: ExperimentConfig, verbose: bool = False
                 ) -> tuple[LifelongRunResult, list[TaskProfile]]:
    """Training phase: draw the task stream and run the lifelong learner.

    Substreams: ``task-gen`` for the stream draw, ``train`` for basis
    init and per-task child seeds.
    """
    tasks = generate_training_tasks(config.n_train_tasks,
                                    substream(config.master_seed, "task-gen"),
                                    eh_scale_range=config.eh_scale_range,
                                    efficiency_range=config.efficiency_range)
    if verbose:
        logger.info("training on %d tasks, %d iterations each",
                    len(tasks), config.train_iterations)
    result = run_mt_l2rl(tasks, config.system, config.rl, config.lifelong,
                         config.train_iterations,
                         substream(config.master_seed, "train"),
                         curvature_hp=config.curvature_hp(),
                         epsilon=config.epsilon, psd_floor=config.psd_floor)
    if len(result.encodings) == 0:
        raise EHLearnError("every training task failed; no knowledge base to save")
    return result, tasks


def _run_one_test(config: ExperimentConfig, kb: KnowledgeBase,
                  mean_code: np.ndarray, method: str, task: TaskProfile,
                  seed: int) -> RunRecord:
    rng = substream(config.master_seed, "test", method, task.task_id, seed)
    started = time.perf_counter()
    if method == METHOD_LIFELONG:
        _, curve = adapt_task(kb, mean_code, task, config.system, config.rl,
                              config.lifelong, config.test_iterations,
                              config.probe_budget, rng,
                              curvature_hp=config.curvature_hp(),
                              epsilon=config.epsilon, psd_floor=config.psd_floor)
    elif method == METHOD_COLD:
        _, curve = vanilla_rl(task, config.system, config.test_iterations,
                              config.rl, rng)
    elif method == METHOD_DRIFT:
        trace = run_lyapunov(task, config.system, config.lyapunov,
                             horizon=config.rl.horizon, rng=rng)
        curve = np.array([trace.mean_return()])
    else:
        raise ValueError(f"unknown method {method!r}")
    elapsed = time.perf_counter() - started
    return RunRecord(
        method=method, task_id=task.task_id, seed=seed, curve=curve,
        wall_clock_s=elapsed,
        convergence_iteration=convergence_iteration(
            curve, config.convergence_fraction, config.smoothing_window))


def _test_job(args):
    config, kb, mean_code, method, task, seed = args
    try:
        return _run_one_test(config, kb, mean_code, method, task, seed)
    except Exception as exc:  # noqa: BLE001 - per-run isolation is the contract
        return FailureRecord(method=method, task_id=task.task_id, seed=seed,
                             error=f"{type(exc).__name__}: {exc}")


def run_test_phase(config: ExperimentConfig, kb: KnowledgeBase, mean_code,
                   threads: int = 1, verbose: bool = False
                   ) -> tuple[list[RunRecord], list[FailureRecord]]:
    """Test phase: every (method, test task, seed) once, knowledge base
    frozen throughout. Results are sorted (method, task, seed) so output
    bytes do not depend on execution order or thread count."""
    mean_code = np.asarray(mean_code, dtype=np.float64)
    jobs = [(config, kb, mean_code, method, task, seed)
            for method in METHODS
            for task in config.test_profiles
            for seed in config.seeds]
    if verbose:
        logger.info("test phase: %d runs (%d threads)", len(jobs), threads)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_test_job, jobs))
    else:
        results = [_test_job(job) for job in jobs]
    records = [r for r in results if isinstance(r, RunRecord)]
    failures = [r for r in results if isinstance(r, FailureRecord)]
    for failure in failures:
        logger.warning("run failed (%s, task %d, seed %d): %s", failure.method,
                       failure.task_id, failure.seed, failure.error)
    key = (lambda r: (r.method, r.task_id, r.seed))
    return sorted(records, key=key), sorted(failures, key=key)


# ---------------------------------------------------------------------------
# Metric files


def _atomic_write_text(path: str, text: str):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_curves_csv(records: list[RunRecord], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "task_id", "seed", "iteration", "return"])
    for rec in records:
        for i, value in enumerate(rec.curve):
            writer.writerow([rec.method, rec.task_id, rec.seed, i, _fmt(value)])
    _atomic_write_text(os.fspath(path), buf.getvalue())


def write_train_curves_csv(curves, task_ids, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task_id", "iteration", "return"])
    for task_id, curve in zip(task_ids, curves):
        for i, value in enumerate(curve):
            writer.writerow([task_id, i, _fmt(value)])
    _atomic_write_text(os.fspath(path), buf.getvalue())


def write_mean_curves_csv(records: list[RunRecord], path) -> None:
    """Seed-averaged curves per (method, task), for plotting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "task_id", "iteration", "mean_return", "std_return"])
    groups: dict[tuple[str, int], list[np.ndarray]] = {}
    for rec in records:
        groups.setdefault((rec.method, rec.task_id), []).append(rec.curve)
    for (method, task_id) in sorted(groups):
        curves = np.stack(groups[(method, task_id)])
        means = curves.mean(axis=0)
        stds = curves.std(axis=0)
        for i in range(curves.shape[1]):
            writer.writerow([method, task_id, i, _fmt(means[i]), _fmt(stds[i])])
    _atomic_write_text(os.fspath(path), buf.getvalue())


def write_timings_csv(records: list[RunRecord], path, extra_rows=()) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "task_id", "seed", "wall_clock_s"])
    for row in extra_rows:
        writer.writerow(list(row))
    for rec in records:
        writer.writerow([rec.method, rec.task_id, rec.seed, _fmt(rec.wall_clock_s)])
    _atomic_write_text(os.fspath(path), buf.getvalue())


def final_smoothed_return(curve, window: int) -> float:
    """The curve's end value after trailing smoothing (the 'final
    return' used in comparisons)."""
    return float(trailing_mean(curve, window)[-1])


def summarize(records: list[RunRecord], failures: list[FailureRecord],
              config: ExperimentConfig, kb_section: dict | None = None,
              skipped_training_tasks=()) -> dict:
    """Aggregate records into the summary document.

    Per task and method: mean convergence iteration (and 1-based count)
    and mean final smoothed return over seeds. Speedups against each
    baseline are ratios of mean convergence counts (baseline over
    transfer learner, so above 1 means the transfer learner is faster).
    """
    window = config.smoothing_window
    per_task: dict[str, dict] = {}
    task_ids = sorted({rec.task_id for rec in records})
    for task_id in task_ids:
        entry: dict = {}
        for method in METHODS:
            rows = [r for r in records if r.task_id == task_id and r.method == method]
            if not rows:
                continue
            convs = np.array([r.convergence_iteration for r in rows], dtype=np.float64)
            finals = np.array([final_smoothed_return(r.curve, window) for r in rows])
            entry[method] = {
                "n_seeds": len(rows),
                "mean_convergence_iteration": float(convs.mean()),
                "mean_convergence_count": float((convs + 1.0).mean()),
                "mean_final_return": float(finals.mean()),
            }
        lifelong = entry.get(METHOD_LIFELONG)
        for baseline in (METHOD_COLD, METHOD_DRIFT):
            base = entry.get(baseline)
            if lifelong and base:
                entry[f"speedup_vs_{baseline}"] = (
                    base["mean_convergence_count"]
                    / lifelong["mean_convergence_count"])
        if lifelong and entry.get(METHOD_COLD):
            entry["faster_than_vanilla"] = (
                lifelong["mean_convergence_iteration"]
                < entry[METHOD_COLD]["mean_convergence_iteration"])
        if lifelong and entry.get(METHOD_DRIFT):
            entry["return_ge_lyapunov"] = (
                lifelong["mean_final_return"]
                >= entry[METHOD_DRIFT]["mean_final_return"])
        per_task[str(task_id)] = entry

    speedups = [per_task[t]["speedup_vs_" + METHOD_COLD] for t in per_task
                if "speedup_vs_" + METHOD_COLD in per_task[t]]
    aggregate = {
        "n_test_tasks": len(task_ids),
        "n_records": len(records),
        "n_failures": len(failures),
        "mean_speedup_vs_vanilla-rl": float(np.mean(speedups)) if speedups else None,
        "n_tasks_faster_than_vanilla": sum(
            1 for t in per_task if per_task[t].get("faster_than_vanilla")),
        "n_tasks_return_ge_lyapunov": sum(
            1 for t in per_task if per_task[t].get("return_ge_lyapunov")),
    }
    summary = {
        "schema": 1,
        "config_digest": config_digest(config),
        "master_seed": config.master_seed,
        "metric": {"convergence_fraction": config.convergence_fraction,
                   "smoothing_window": config.smoothing_window},
        "kb": kb_section,
        "skipped_training_tasks": sorted(int(t) for t in skipped_training_tasks),
        "failures": [{"method": f.method, "task_id": f.task_id, "seed": f.seed,
                      "error": f.error} for f in failures],
        "per_task": per_task,
        "aggregate": aggregate,
    }
    return summary


def write_summary(summary: dict, path) -> None:
    _atomic_write_text(os.fspath(path),
                       json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Whole protocol


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    failures: list[FailureRecord]
    summary: dict
    kb: KnowledgeBase
    out_dir: str


def _seed_lineage(config: ExperimentConfig) -> dict:
    return {
        "master_seed": config.master_seed,
        "rule": "sha256('{master}:{stream}') first 8 bytes little-endian",
        "streams": ["task-gen", "train", "test/{method}/{task_id}/{seed}"],
    }


def run_experiment(config: ExperimentConfig, out_dir=None, threads: int = 1,
                   verbose: bool = False) -> ExperimentResult:
    """Full protocol: train, snapshot, test with the snapshot frozen,
    summarize. Writes all metric files into ``out_dir``.

    The knowledge-base snapshot hash is recorded before and after the
    test phase; the test phase cannot modify it (value-semantic,
    read-only arrays), and the summary records both hashes as evidence.
    """
    out_dir = os.fspath(out_dir if out_dir is not None else config.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write_text(os.path.join(out_dir, CONFIG_FILE),
                       json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")

    train_started = time.perf_counter()
    train_result, train_tasks = run_training(config, verbose=verbose)
    train_elapsed = time.perf_counter() - train_started

    kb_path = os.path.join(out_dir, KB_FILE)
    encodings = np.array([e.coefficients for e in train_result.encodings])
    save_kb(train_result.kb, kb_path, encodings=encodings,
            seed_lineage=_seed_lineage(config))
    trained_ids = [t.task_id for t in train_tasks
                   if t.task_id not in set(train_result.skipped_task_ids)]
    write_train_curves_csv(train_result.curves, trained_ids,
                           os.path.join(out_dir, TRAIN_CURVES_FILE))

    hash_before = file_hash(kb_path)
    mean_code = encodings.mean(axis=0)
    records, failures = run_test_phase(config, train_result.kb, mean_code,
                                       threads=threads, verbose=verbose)
    hash_after = file_hash(kb_path)

    kb_section = {
        "tasks_seen": train_result.kb.tasks_seen,
        "state_hash": kb_state_hash(train_result.kb),
        "snapshot_hash_before_test": hash_before,
        "snapshot_hash_after_test": hash_after,
        "frozen_during_test": hash_before == hash_after,
    }
    summary = summarize(records, failures, config, kb_section=kb_section,
                        skipped_training_tasks=train_result.skipped_task_ids)

    write_curves_csv(records, os.path.join(out_dir, CURVES_FILE))
    write_mean_curves_csv(records, os.path.join(out_dir, MEAN_CURVES_FILE))
    write_summary(summary, os.path.join(out_dir, SUMMARY_FILE))
    write_timings_csv(records, os.path.join(out_dir, TIMINGS_FILE),
                      extra_rows=[["train-phase", -1, -1, _fmt(train_elapsed)]])
    return ExperimentResult(records=records, failures=failures, summary=summary,
                            kb=train_result.kb, out_dir=out_dir)


def run_training_to_dir(config: ExperimentConfig, out_dir,
                        verbose: bool = False) -> LifelongRunResult:
    """Training phase only (the ``train`` subcommand): writes the
    snapshot, the training curves, and the resolved config."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write_text(os.path.join(out_dir, CONFIG_FILE),
                       json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")
    started = time.perf_counter()
    result, tasks = run_training(config, verbose=verbose)
    elapsed = time.perf_counter() - started
    encodings = np.array([e.coefficients for e in result.encodings])
    save_kb(result.kb, os.path.join(out_dir, KB_FILE), encodings=encodings,
            seed_lineage=_seed_lineage(config))
    trained_ids = [t.task_id for t in tasks
                   if t.task_id not in set(result.skipped_task_ids)]
    write_train_curves_csv(result.curves, trained_ids,
                           os.path.join(out_dir, TRAIN_CURVES_FILE))
    write_timings_csv([], os.path.join(out_dir, TIMINGS_FILE),
                      extra_rows=[["train-phase", -1, -1, _fmt(elapsed)]])
    return result


def run_testing(config: ExperimentConfig, kb_path, out_dir, threads: int = 1,
                verbose: bool = False) -> ExperimentResult:
    """Test phase against a previously saved snapshot (the ``test``
    subcommand). Writes curves, mean curves, summary, and timings."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    snapshot = load_kb(kb_path)
    if snapshot.encodings.shape[0] > 0:
        mean_code = snapshot.encodings.mean(axis=0)
    else:
        logger.warning("snapshot %s stores no encodings; warm starts use a "
                       "zero code", kb_path)
        mean_code = np.zeros(snapshot.kb.latent_dim)

    hash_before = file_hash(kb_path)
    records, failures = run_test_phase(config, snapshot.kb, mean_code,
                                       threads=threads, verbose=verbose)
    hash_after = file_hash(kb_path)
    kb_section = {
        "tasks_seen": snapshot.kb.tasks_seen,
        "state_hash": kb_state_hash(snapshot.kb),
        "snapshot_hash_before_test": hash_before,
        "snapshot_hash_after_test": hash_after,
        "frozen_during_test": hash_before == hash_after,
    }
    summary = summarize(records, failures, config, kb_section=kb_section)
    write_curves_csv(records, os.path.join(out_dir, CURVES_FILE))
    write_mean_curves_csv(records, os.path.join(out_dir, MEAN_CURVES_FILE))
    write_summary(summary, os.path.join(out_dir, SUMMARY_FILE))
    write_timings_csv(records, os.path.join(out_dir, TIMINGS_FILE))
    return ExperimentResult(records=records, failures=failures, summary=summary,
                            kb=snapshot.kb, out_dir=out_dir)


def read_curves_csv(path) -> list[RunRecord]:
    """Rebuild RunRecords from a curves file (wall clock not recoverable;
    convergence is recomputed by the caller's metric parameters)."""
    rows: dict[tuple[str, int, int], list[tuple[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["method", "task_id", "seed", "iteration", "return"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path} has header {reader.fieldnames}, "
                             f"expected {expected}")
        for row in reader:
            key = (row["method"], int(row["task_id"]), int(row["seed"]))
            rows.setdefault(key, []).append((int(row["iteration"]),
                                             float(row["return"])))
    records = []
    for (method, task_id, seed), points in sorted(rows.items()):
        points.sort()
        curve = np.array([v for _, v in points])
        records.append(RunRecord(method=method, task_id=task_id, seed=seed,
                                 curve=curve, wall_clock_s=float("nan"),
                                 convergence_iteration=0))
    return records


def report(in_dir, config: ExperimentConfig | None = None) -> dict:
    """Regenerate the summary and plot CSVs from an output directory.

    Metric parameters come from the given config, else the directory's
    saved ``config.json``, else the defaults. The knowledge-base section
    reports the current snapshot hash; the frozen-during-test attestation
    is preserved from an existing summary when present.
    """
    in_dir = os.fspath(in_dir)
    if config is None:
        config_path = os.path.join(in_dir, CONFIG_FILE)
        if os.path.exists(config_path):
            config = load_experiment_config(config_path)
        else:
            config = default_experiment_config()
    records = read_curves_csv(os.path.join(in_dir, CURVES_FILE))
    for rec in records:
        rec.convergence_iteration = convergence_iteration(
            rec.curve, config.convergence_fraction, config.smoothing_window)

    kb_section = None
    kb_path = os.path.join(in_dir, KB_FILE)
    if os.path.exists(kb_path):
        kb_section = {"snapshot_hash": file_hash(kb_path)}
        summary_path = os.path.join(in_dir, SUMMARY_FILE)
        if os.path.exists(summary_path):
            with open(summary_path, encoding="utf-8") as fh:
                try:
                    old = json.load(fh)
                except json.JSONDecodeError:
                    old = {}
            if isinstance(old.get("kb"), dict):
                kb_section = {**old["kb"], "snapshot_hash": file_hash(kb_path)}

    summary = summarize(records, [], config, kb_section=kb_section)
    write_summary(summary, os.path.join(in_dir, SUMMARY_FILE))
    write_mean_curves_csv(records, os.path.join(in_dir, MEAN_CURVES_FILE))
    return summary

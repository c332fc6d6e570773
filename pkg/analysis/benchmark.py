"""
analysis.benchmark
Benchmark battery and ablations over closed-loop servo episodes.

Every controller runs on the same seeds per level (paired comparison). Setups
are prepared sequentially in the parent process; episodes may run in a
process pool, and results are reduced in (controller, level, seed) order so a
report depends only on its inputs and seed.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from components.autograd import Tensor
from components.layers import FusionMode, Mlp, ParamStore, cluster_cross_attention, full_cross_attention, \
    fusion_mult_adds
from servo_trainer.controllers import ControllerSpec, build_controller, describe
from servo_trainer.geometry import DeviationLevel
from servo_trainer.graph import ServoGraph, build_graph
from servo_trainer.observation import DepthProvider, match_keypoints, observe
from servo_trainer.scene import ObjectModel
from servo_trainer.simulation import EpisodeConfig, EpisodeResult, EpisodeSetup, prepare_episode, run_episode

logger = logging.getLogger(__name__)

RUNS_PER_LEVEL = 50
# Camera distance (multiple of the region height) separating the near and far depth buckets.
NEAR_FAR_SPLIT = 1.6


@dataclass(frozen=True)
class BenchmarkConfig:
    levels: Tuple[str, ...] = ("S", "M", "L")
    runs_per_level: int = RUNS_PER_LEVEL
    seed: int = 0
    workers: int = 1
    episode: EpisodeConfig = EpisodeConfig()

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(DeviationLevel.parse(name).name for name in self.levels))
        if self.runs_per_level < 1:
            raise ValueError(f"runs_per_level must be >= 1, got {self.runs_per_level}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def to_dict(self) -> Dict[str, Any]:
        ep = self.episode
        return {
            "levels": list(self.levels),
            "runs_per_level": self.runs_per_level,
            "seed": self.seed,
            "episode": {
                "dt": ep.dt, "max_steps": ep.max_steps, "hold_steps": ep.hold_steps,
                "feature_error_threshold": ep.feature_error_threshold,
                "rotation_threshold_deg": ep.rotation_threshold_deg,
                "translation_threshold_m": ep.translation_threshold_m,
                "provider": {"mode": ep.provider.mode.value, "a": ep.provider.a, "b": ep.provider.b,
                             "noise_amp": ep.provider.noise_amp},
                "noise": asdict(ep.noise),
                "use_hpr": ep.use_hpr, "hpr_gamma": ep.hpr.gamma,
            },
        }


@dataclass(frozen=True)
class LevelAggregate:
    """One report row; te/re/ts are means over successful runs (nan without successes)."""
    controller: str
    level: str
    runs: int
    successes: int
    sr: float
    te: float
    re: float
    ts: float
    mtt: float


@dataclass
class BenchmarkReport:
    rows: List[LevelAggregate]
    episodes: List[EpisodeResult]
    seeds: Dict[str, List[int]]
    skipped: Dict[str, List[int]]
    config: Dict[str, Any]
    controllers: List[Dict[str, Any]]
    wall_time: float = 0.0
    extra: Dict[str, Any] = field(default_factory=dict)

    def row(self, controller: str, level: str) -> LevelAggregate:
        for r in self.rows:
            if r.controller == controller and r.level == level:
                return r
        raise KeyError(f"no row for controller {controller!r} at level {level!r}")

    def success_rate(self, controller: str) -> float:
        """SR over all levels of ``controller``."""
        runs = [e for e in self.episodes if e.controller == controller]
        return 100.0 * sum(e.success for e in runs) / len(runs) if runs else float("nan")


def episode_seed(base_seed: int, level: str, index: int) -> int:
    """Deterministic per-episode seed, shared by all controllers."""
    level_idx = [lv.name for lv in DeviationLevel].index(level)
    return int(np.random.SeedSequence([int(base_seed), level_idx, int(index)]).generate_state(1)[0])


def prepare_setups(models: Sequence[ObjectModel], config: BenchmarkConfig,
                   level: str) -> Tuple[List[EpisodeSetup], List[int]]:
    """
    ``runs_per_level`` servoable setups for ``level``. A seed whose setup cannot be
    made visible is skipped, logged and replaced by the next seed index.
    """
    ep_config = replace(config.episode, level=DeviationLevel[level])
    setups: List[EpisodeSetup] = []
    skipped: List[int] = []
    index = 0
    limit = 2 * config.runs_per_level + 10
    while len(setups) < config.runs_per_level and index < limit:
        seed = episode_seed(config.seed, level, index)
        setup = prepare_episode(models, ep_config, seed)
        if setup is None:
            skipped.append(seed)
        else:
            setups.append(setup)
        index += 1
    if len(setups) < config.runs_per_level:
        logger.warning("level %s: only %d of %d setups could be prepared", level, len(setups),
                       config.runs_per_level)
    return setups, skipped


def _run_task(task: Tuple[ControllerSpec, EpisodeSetup, EpisodeConfig]) -> EpisodeResult:
    spec, setup, ep_config = task
    return run_episode(setup, build_controller(spec), ep_config)


def aggregate(results: Sequence[EpisodeResult], controller: str, level: str, dt: float) -> LevelAggregate:
    """Exact aggregation over stored episode results."""
    runs = [r for r in results if r.controller == controller and r.level == level]
    ok = [r for r in runs if r.success]
    n = len(runs)

    def mean(values):
        return float(np.mean(values)) if values else float("nan")

    return LevelAggregate(
        controller=controller,
        level=level,
        runs=n,
        successes=len(ok),
        sr=100.0 * len(ok) / n if n else float("nan"),
        te=mean([r.te for r in ok]),
        re=mean([r.re for r in ok]),
        ts=mean([r.ts for r in ok]),
        mtt=mean([r.steps * dt for r in runs]),
    )


def run_benchmark(specs: Sequence[ControllerSpec], models: Sequence[ObjectModel],
                  config: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkReport:
    """Runs every controller on the same ``runs_per_level`` setups of every level."""
    if not specs:
        raise ValueError("run_benchmark needs at least one controller")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"controller names must be unique, got {labels}")
    started = time.perf_counter()
    tasks = []
    seeds: Dict[str, List[int]] = {}
    skipped: Dict[str, List[int]] = {}
    for level in config.levels:
        setups, skipped[level] = prepare_setups(models, config, level)
        seeds[level] = [s.seed for s in setups]
        ep_config = replace(config.episode, level=DeviationLevel[level])
        for spec in specs:
            tasks.extend((spec, setup, ep_config) for setup in setups)
    logger.info("benchmark: %d controllers x %s levels, %d episodes, %d workers",
                len(specs), ",".join(config.levels), len(tasks), config.workers)

    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * config.workers))))
    else:
        results = [_run_task(t) for t in tasks]

    rows = [aggregate(results, label, level, config.episode.dt) for label in labels for level in config.levels]
    for r in rows:
        logger.info("%s level %s: SR %.2f%% TE %.4f RE %.3f TS %.1f", r.controller, r.level, r.sr, r.te, r.re, r.ts)
    return BenchmarkReport(rows, results, seeds, skipped, config.to_dict(), [describe(s) for s in specs],
                           time.perf_counter() - started)


# --- fusion cost ---

@dataclass(frozen=True)
class FusionCost:
    block_sizes: Tuple[int, ...]
    analytic: Dict[str, int]
    measured: Dict[str, int]


def fusion_cost(graph: ServoGraph, width: int = 32, seed: int = 0) -> FusionCost:
    """Analytic and measured (matmul) multiply-adds of every fusion mode on ``graph``."""
    sizes = tuple(stop - start for start, stop in graph.blocks)
    rng = np.random.default_rng(seed)
    x_pos = Tensor(rng.uniform(-1, 1, size=(graph.node_count, width)))
    x_z = Tensor(rng.uniform(-1, 1, size=(graph.node_count, width)))
    phi = Mlp(ParamStore(seed), "phi", [width, 1], final_activation=True)
    measured = {
        FusionMode.CLUSTER.value: cluster_cross_attention(x_pos, x_z, graph.blocks, phi).mult_adds,
        FusionMode.FULL.value: full_cross_attention(x_pos, x_z, phi).mult_adds,
        FusionMode.CONCAT.value: 0,
    }
    analytic = {mode.value: fusion_mult_adds(sizes, width, mode) for mode in FusionMode}
    return FusionCost(sizes, analytic, measured)


def benchmark_graphs(models: Sequence[ObjectModel], config: BenchmarkConfig) -> List[ServoGraph]:
    """Initial-pose graphs of the benchmark setups."""
    graphs = []
    ep = config.episode
    for level in config.levels:
        setups, _ = prepare_setups(models, config, level)
        for setup in setups:
            target = observe(setup.scene, setup.target, ep.intrinsics, DepthProvider(), ep.hpr, use_hpr=ep.use_hpr)
            current = observe(setup.scene, setup.initial, ep.intrinsics, DepthProvider(), ep.hpr,
                              use_hpr=ep.use_hpr)
            graphs.append(build_graph(match_keypoints(current, target)))
    return graphs


# --- ablations ---

@dataclass
class AblationTable:
    title: str
    columns: List[str]
    rows: List[Dict[str, Any]]
    notes: List[str] = field(default_factory=list)
    report: Optional[BenchmarkReport] = None


def _overall(report: BenchmarkReport, label: str, dt: float) -> LevelAggregate:
    agg = aggregate([replace(e, level="all") for e in report.episodes if e.controller == label], label, "all", dt)
    return agg


def ablation_fusion(specs: Mapping[str, ControllerSpec], models: Sequence[ObjectModel],
                    config: BenchmarkConfig = BenchmarkConfig(), width: int = 32) -> AblationTable:
    """
    Benchmarks models that differ only in their fusion mode and adds the mean
    multiply-add counts of each mode over the benchmark graphs.

    ``specs`` maps a fusion mode (cluster, full, concat) to its trained controller.
    The SR ordering cluster >= full >= concat is checked and reported as a warning.
    """
    modes = [FusionMode.parse(m).value for m in specs]
    named = [replace(spec, name=f"fusion-{mode}") for mode, spec in zip(modes, specs.values())]
    report = run_benchmark(named, models, config)
    costs = [fusion_cost(g, width) for g in benchmark_graphs(models, config)]
    rows = []
    sr: Dict[str, float] = {}
    for mode, spec in zip(modes, named):
        agg = _overall(report, spec.label, config.episode.dt)
        sr[mode] = agg.sr
        rows.append({
            "fusion": mode, "sr": agg.sr, "te": agg.te, "re": agg.re, "ts": agg.ts,
            "mult_adds_analytic": float(np.mean([c.analytic[mode] for c in costs])) if costs else 0.0,
            "mult_adds_measured": float(np.mean([c.measured[mode] for c in costs])) if costs else 0.0,
        })
    notes = []
    order = [m for m in (FusionMode.CLUSTER.value, FusionMode.FULL.value, FusionMode.CONCAT.value) if m in sr]
    holds = all(sr[a] >= sr[b] for a, b in zip(order[:-1], order[1:]))
    if not holds:
        message = "expected SR ordering cluster >= full >= concat does not hold: " + \
                  ", ".join(f"{m}={sr[m]:.2f}" for m in order)
        logger.warning(message)
        notes.append(message)
    multi = [c for c in costs if len(c.block_sizes) >= 2]
    if any(c.analytic["cluster"] >= c.analytic["full"] for c in multi):
        notes.append("cluster attention was not cheaper than full attention on some multi-cluster graph")
    table = AblationTable("Fusion ablation",
                          ["fusion", "sr", "te", "re", "ts", "mult_adds_analytic", "mult_adds_measured"],
                          rows, notes, report)
    table.report.extra["ordering_holds"] = holds
    return table


def ablation_hpr(with_hpr: ControllerSpec, without_hpr: ControllerSpec, models: Sequence[ObjectModel],
                 config: BenchmarkConfig = BenchmarkConfig()) -> AblationTable:
    """Benchmarks a model trained with HPR visibility against one trained with the frustum only."""
    named = [replace(with_hpr, name="with-hpr"), replace(without_hpr, name="without-hpr")]
    report = run_benchmark(named, models, config)
    rows = []
    for spec in named:
        for level in config.levels:
            r = report.row(spec.label, level)
            rows.append({"data": spec.label, "level": level, "sr": r.sr, "te": r.te, "re": r.re, "ts": r.ts})
    return AblationTable("HPR data-processing ablation", ["data", "level", "sr", "te", "re", "ts"], rows,
                         report=report)


def ablation_depth(spec: ControllerSpec, models: Sequence[ObjectModel],
                   config: BenchmarkConfig = BenchmarkConfig(),
                   camera: DepthProvider = DepthProvider("camera-noise", noise_amp=0.002, min_range=0.1,
                                                         max_range=2.0),
                   estimator: DepthProvider = DepthProvider("affine-relative", a=1.7, b=0.4, noise_amp=0.002)
                   ) -> AblationTable:
    """
    Evaluates one controller with a depth-camera provider and with an
    affine-relative estimator provider, split into near and far buckets by the
    initial camera distance (threshold 1.6 x region height).
    """
    split = NEAR_FAR_SPLIT * config.episode.region.height
    rows = []
    reports = {}
    for source, provider in (("camera", camera), ("estimator", estimator)):
        cfg = replace(config, episode=replace(config.episode, provider=provider))
        report = run_benchmark([replace(spec, name=f"depth-{source}")], models, cfg)
        reports[source] = report
        for bucket, pick in (("near", lambda e: e.initial_distance < split),
                             ("far", lambda e: e.initial_distance >= split)):
            picked = [replace(e, level=bucket) for e in report.episodes if pick(e)]
            agg = aggregate(picked, f"depth-{source}", bucket, config.episode.dt)
            rows.append({"depth": source, "bucket": bucket, "runs": agg.runs, "sr": agg.sr,
                         "te": agg.te, "re": agg.re, "ts": agg.ts})
    table = AblationTable("Depth source ablation", ["depth", "bucket", "runs", "sr", "te", "re", "ts"], rows,
                          notes=[f"near/far split at {split:.3f} m from the region center"],
                          report=reports["camera"])
    table.report.extra["estimator_report"] = reports["estimator"]
    return table


def format_value(value: Any) -> str:
    if isinstance(value, float):
        return "-" if math.isnan(value) else f"{value:.4f}"
    return str(value)

"""Evaluation and analysis: displacement errors over stochastic samples,
graph statistics, edge-quality audits, graph-selection heuristics, and the
Monte-Carlo verifier for the recursive error bounds.

Displacement metrics are reported in denormalized (source) units. All
sampling is reproducible: every (scene group, sample) pair draws from its
own derived stream, so thread scheduling cannot change any number.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import autodiff as ad
from .autodiff import DArray
from .data import Normalizer, Scene
from .encoder import InteractionGraphSample
from .errors import ConfigError, ContractError
from .graph_complexity import graph_entropy, r_density
from .model import TrajectoryModel
from .rng import STREAM_EVAL, STREAM_THEORY, RngStream


def ade_fde(truth: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent average and final displacement error over (N, T_f, 2)."""
    if truth.shape != pred.shape:
        raise ContractError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    dist = np.linalg.norm(truth - pred, axis=-1)      # (N, T_f)
    return dist.mean(axis=-1), dist[:, -1]


@dataclass
class MetricsRecord:
    min_ade: float
    min_fde: float
    mean_ade: float
    mean_fde: float
    avg_entropy: float
    avg_density: float
    per_category: dict[int, dict[str, float]] = field(default_factory=dict)
    n_scenes: int = 0
    n_samples: int = 0


def _hard_graph_stats(graphs: list[InteractionGraphSample], scene_row: int) -> tuple[float, float]:
    ents, dens = [], []
    for g in graphs:
        z = g.z.data[scene_row]
        ents.append(graph_entropy(z))
        dens.append(r_density(z))
    return float(np.mean(ents)), float(np.mean(dens))


def sampled_metrics(model: TrajectoryModel, scenes: list[Scene],
                    normalizer: Normalizer, n_samples: int = 20,
                    seed: int = 0, threads: int = 1,
                    sample_mode: str = "sample") -> MetricsRecord:
    """Min/mean ADE and FDE over stochastic rollouts, plus graph statistics.

    Per scene, each sample redraws relations, edge features, and head
    noise; the minimum and mean are taken over samples of the scene-level
    (agent-averaged) errors, then averaged over scenes.
    """
    if n_samples < 1:
        raise ConfigError("need at least one evaluation sample")
    root = RngStream(seed).child(STREAM_EVAL)
    groups = TrajectoryModel.batch_scenes(scenes)
    t_hist = model.cfg.t_history

    def run_one(args):
        gi, k = args
        pos, cats, _ = groups[gi]
        n = pos.shape[1]
        out, graphs = model.predict_batch(pos, cats, root.child(n, k),
                                          sample_mode=sample_mode)
        truth_d = normalizer.denormalize(pos[:, :, t_hist:])
        pred_d = normalizer.denormalize(out[:, :, t_hist:])
        rows = []
        for b in range(pos.shape[0]):
            a, f = ade_fde(truth_d[b], pred_d[b])
            ent, den = _hard_graph_stats(graphs, b)
            rows.append((a, f, ent, den, cats[b]))
        return gi, k, rows

    jobs = [(gi, k) for gi in range(len(groups)) for k in range(n_samples)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, jobs))
    else:
        results = [run_one(j) for j in jobs]

    # organize per scene: ade/fde arrays (n_samples, N)
    per_scene: dict[tuple[int, int], list] = {}
    for gi, k, rows in results:
        for b, row in enumerate(rows):
            per_scene.setdefault((gi, b), [None] * n_samples)[k] = row

    scene_min_ade, scene_mean_ade = [], []
    scene_min_fde, scene_mean_fde = [], []
    ent_all, den_all = [], []
    cat_acc: dict[int, dict[str, list]] = {}
    for key in sorted(per_scene):
        rows = per_scene[key]
        ades = np.stack([r[0] for r in rows])        # (K, N)
        fdes = np.stack([r[1] for r in rows])
        ent_all.append(np.mean([r[2] for r in rows]))
        den_all.append(np.mean([r[3] for r in rows]))
        cats = rows[0][4]
        scene_ade = ades.mean(axis=1)                # (K,)
        scene_fde = fdes.mean(axis=1)
        scene_min_ade.append(scene_ade.min())
        scene_mean_ade.append(scene_ade.mean())
        scene_min_fde.append(scene_fde.min())
        scene_mean_fde.append(scene_fde.mean())
        for c in np.unique(cats):
            sel = cats == c
            ca = ades[:, sel].mean(axis=1)
            cf = fdes[:, sel].mean(axis=1)
            acc = cat_acc.setdefault(int(c), {"min_ade": [], "mean_ade": [],
                                              "min_fde": [], "mean_fde": []})
            acc["min_ade"].append(ca.min())
            acc["mean_ade"].append(ca.mean())
            acc["min_fde"].append(cf.min())
            acc["mean_fde"].append(cf.mean())

    per_category = {c: {k: float(np.mean(v)) for k, v in acc.items()}
                    for c, acc in sorted(cat_acc.items())}
    return MetricsRecord(
        min_ade=float(np.mean(scene_min_ade)),
        min_fde=float(np.mean(scene_min_fde)),
        mean_ade=float(np.mean(scene_mean_ade)),
        mean_fde=float(np.mean(scene_mean_fde)),
        avg_entropy=float(np.mean(ent_all)),
        avg_density=float(np.mean(den_all)),
        per_category=per_category,
        n_scenes=len(per_scene), n_samples=n_samples)


METRICS_HEADER = ("dataset,strategy,gamma,min_ade,min_fde,mean_ade,mean_fde,"
                  "avg_entropy,avg_density")
CATEGORY_HEADER = ("dataset,strategy,gamma,category,min_ade,min_fde,"
                   "mean_ade,mean_fde")


def metrics_csv_rows(record: MetricsRecord, dataset: str, strategy: str,
                     gamma: float) -> tuple[str, list[str]]:
    main = ",".join([dataset, strategy, repr(float(gamma)),
                     repr(record.min_ade), repr(record.min_fde),
                     repr(record.mean_ade), repr(record.mean_fde),
                     repr(record.avg_entropy), repr(record.avg_density)])
    cats = []
    for c, vals in record.per_category.items():
        cats.append(",".join([dataset, strategy, repr(float(gamma)), str(c),
                              repr(vals["min_ade"]), repr(vals["min_fde"]),
                              repr(vals["mean_ade"]), repr(vals["mean_fde"])]))
    return main, cats


# ------------------------------------------------------------ graph quality

class ModelGraphProbe:
    """Adapter giving the quality audit a fixed-graph view of the model.

    Graphs are inferred once per scene in deterministic MAP mode with the
    edge-feature noise disabled, so edited copies differ from the baseline
    only in the edited relation.
    """

    def __init__(self, model: TrajectoryModel, n_rollouts: int):
        self.model = model
        self.n_rollouts = n_rollouts

    def infer_graphs(self, scene: Scene, rng: RngStream) -> list[InteractionGraphSample]:
        pos = scene.positions[None]
        cats = scene.categories[None]
        _, graphs = self.model.predict_batch(pos, cats, rng, sample_mode="map",
                                             edge_noise_scale=0.0)
        return graphs

    def rollout_ades(self, scene: Scene, graphs: list[InteractionGraphSample],
                     rng: RngStream) -> np.ndarray:
        """Mean ADE of each of n_rollouts noisy rollouts under fixed graphs."""
        k = self.n_rollouts
        pos = np.repeat(scene.positions[None], k, axis=0)
        cats = np.repeat(scene.categories[None], k, axis=0)
        tiled = [InteractionGraphSample(
            probs=g.probs, z=_tile_rows(g.z, k), edge_feats=_tile_rows(g.edge_feats, k),
            hard=g.hard) for g in graphs]
        with ad.no_grad():
            preds = self.model.rollout(pos, cats, tiled, rng,
                                       input_mode="free_run", train=False)
        t_hist = self.model.cfg.t_history
        err = np.linalg.norm(preds.data[:, :, t_hist:] - pos[:, :, t_hist:], axis=-1)
        return err.mean(axis=(1, 2))   # (K,)


def _tile_rows(arr, k: int) -> DArray:
    return DArray(np.repeat(arr.data, k, axis=0))


def _edit_graphs(graphs: list[InteractionGraphSample], i: int, j: int,
                 value: float) -> list[InteractionGraphSample]:
    out = []
    for g in graphs:
        z = g.z.data.copy()
        z[:, i, j] = value
        out.append(InteractionGraphSample(g.probs, DArray(z), g.edge_feats, g.hard))
    return out


@dataclass
class GraphQualityReport:
    n_edges: int            # E: inferred directed edges (in any window)
    n_redundant: int        # E1
    n_missing: int          # E2
    n_scenes: int
    n_skipped: int          # scenes with no inferred edge

    @property
    def denominator(self) -> int:
        return self.n_edges - self.n_redundant + self.n_missing

    @property
    def redundant_rate(self) -> float:
        d = self.denominator
        return self.n_redundant / d if d > 0 else math.inf if self.n_redundant else 0.0

    @property
    def missing_rate(self) -> float:
        d = self.denominator
        return self.n_missing / d if d > 0 else math.inf if self.n_missing else 0.0


def graph_quality(probe, scenes: list[Scene], significance: float = 0.05,
                  seed: int = 0) -> GraphQualityReport:
    """Edge necessity/sufficiency audit via removal and addition probes.

    An inferred edge is redundant when removing it (from every window)
    does not significantly increase the rollout error distribution; an
    absent edge is missing when adding it significantly decreases it.
    One-sided Mann-Whitney U at the given significance level.
    """
    root = RngStream(seed).child(STREAM_EVAL, 777)
    e_total = e1 = e2 = skipped = 0
    for si, scene in enumerate(scenes):
        rng = root.child(si)
        graphs = probe.infer_graphs(scene, rng.child(0))
        n = scene.n_agents
        present = np.zeros((n, n), dtype=bool)
        for g in graphs:
            present |= g.z.data[0] > 0.5
        np.fill_diagonal(present, False)
        if not present.any():
            skipped += 1
            continue
        base = probe.rollout_ades(scene, graphs, rng.child(1))
        pair_idx = 2
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                pair_idx += 1
                if present[i, j]:
                    e_total += 1
                    edited = _edit_graphs(graphs, i, j, 0.0)
                    errs = probe.rollout_ades(scene, edited, rng.child(pair_idx))
                    p = sps.mannwhitneyu(errs, base, alternative="greater").pvalue
                    if p >= significance:     # no significant increase
                        e1 += 1
                else:
                    edited = _edit_graphs(graphs, i, j, 1.0)
                    errs = probe.rollout_ades(scene, edited, rng.child(pair_idx))
                    p = sps.mannwhitneyu(errs, base, alternative="less").pvalue
                    if p < significance:      # significant decrease
                        e2 += 1
    return GraphQualityReport(n_edges=e_total, n_redundant=e1, n_missing=e2,
                              n_scenes=len(scenes), n_skipped=skipped)


# --------------------------------------------------------- graph selection

def select_graph(probs: np.ndarray, previous: np.ndarray | None = None,
                 theta_low: float = 0.2, theta_high: float = 0.8,
                 heuristic: str = "entropy",
                 max_exhaustive: int = 16) -> np.ndarray:
    """Pick a hard graph from edge probabilities.

    Edges with p < theta_low are excluded and p > theta_high included;
    the uncertain rest are completed by exhaustive search (up to
    max_exhaustive uncertain edges) minimizing the graph entropy, or by
    l1-similarity to the previous window's graph.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    if not ((probs >= 0) & (probs <= 1)).all():
        raise ContractError("probabilities must lie in [0, 1]")
    offdiag = ~np.eye(n, dtype=bool)
    certain = (probs > theta_high) & offdiag
    uncertain = list(zip(*np.nonzero((probs >= theta_low)
                                     & (probs <= theta_high) & offdiag)))
    base = certain.astype(np.float64)
    if not uncertain:
        return base

    if heuristic == "similarity":
        if previous is None:
            raise ContractError("similarity heuristic needs the previous graph")
        # l1 distance decomposes per edge: copy the previous decision
        out = base.copy()
        for i, j in uncertain:
            out[i, j] = 1.0 if previous[i, j] > 0.5 else 0.0
        return out
    if heuristic != "entropy":
        raise ConfigError(f"unknown selection heuristic: {heuristic}")

    if len(uncertain) > max_exhaustive:
        warnings.warn(
            f"{len(uncertain)} uncertain edges exceed the exhaustive limit "
            f"({max_exhaustive}); falling back to greedy selection")
        out = base.copy()
        for i, j in uncertain:
            with_edge = out.copy()
            with_edge[i, j] = 1.0
            if graph_entropy(with_edge) < graph_entropy(out):
                out = with_edge
        return out

    best = None
    best_h = math.inf
    for mask in range(1 << len(uncertain)):
        cand = base.copy()
        for bit, (i, j) in enumerate(uncertain):
            if mask >> bit & 1:
                cand[i, j] = 1.0
        h = graph_entropy(cand)
        if h < best_h:
            best_h = h
            best = cand
    return best


# -------------------------------------------------- recursive error bounds

@dataclass
class BoundScenario:
    lipschitz: float     # L_f
    eps: float           # single-step error bound
    horizon: int         # n
    gap: float           # initial deviation norm

    def __post_init__(self):
        if self.lipschitz <= 0 or self.eps < 0 or self.horizon < 1 or self.gap < 0:
            raise ContractError("invalid bound scenario")


def _geometric_factor(lipschitz: float, n: int) -> float:
    if abs(lipschitz - 1.0) < 1e-12:
        return float(n)
    return (lipschitz ** n - 1.0) / (lipschitz - 1.0)


def theorem_bounds(s: BoundScenario) -> tuple[float, float, float]:
    """Upper bounds for (free-run, mixed-start expected, imitation expected)
    n-step deviations of a Lipschitz recursive predictor."""
    ln = s.lipschitz ** s.horizon
    geo = _geometric_factor(s.lipschitz, s.horizon) * s.eps
    b1 = ln * s.gap + geo
    b2 = 0.5 * ln * s.gap + geo
    b3 = 0.5 * ln * s.gap
    return b1, b2, b3


@dataclass
class BoundsReport:
    trials: int
    violations_pathwise: int
    violations_mixed: int
    violations_imitation: int
    violations_ordering: int

    @property
    def passed(self) -> bool:
        return (self.violations_pathwise == 0 and self.violations_mixed == 0
                and self.violations_imitation == 0 and self.violations_ordering == 0)


def verify_bounds(seed: int = 0, trials: int = 1000, dim: int = 4,
                  lam_samples: int = 200, tol: float = 1e-9) -> BoundsReport:
    """Monte-Carlo check of the recursive error bounds on affine systems.

    The learned map f(x) = A x + b has operator norm ||A|| as its exact
    Lipschitz constant; the ground-truth trajectory follows f plus a
    disturbance of norm <= eps, so the single-step error bound holds by
    construction. The pathwise bound must never fail; the two expectation
    bounds are checked against the lambda-sample mean plus 3-sigma slack.
    """
    root = RngStream(seed).child(STREAM_THEORY)
    v1 = v2 = v3 = v_ord = 0
    alphas = np.array([0.5, 1.0, 2.0, 10.0])
    for t in range(trials):
        rng = root.child(t)
        lip = float(rng.uniform(0.3, 2.0))
        a = rng.normal(size=(dim, dim))
        a *= lip / np.linalg.svd(a, compute_uv=False)[0]
        b = rng.normal(size=dim)
        eps = float(rng.uniform(0.0, 0.2))
        gap = float(rng.uniform(0.0, 1.0))
        horizon = int(rng.integers(1, 9))
        alpha = float(alphas[rng.integers(0, len(alphas))])

        x_true = rng.normal(size=dim)
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        x_hat = x_true + gap * direction

        # ground truth: learned map plus bounded disturbance
        truth = [x_true]
        for j in range(horizon):
            d = rng.normal(size=dim)
            d *= float(rng.uniform(0.0, 1.0)) * eps / np.linalg.norm(d)
            truth.append(a @ truth[-1] + b + d)

        y = x_hat.copy()
        for j in range(horizon):
            y = a @ y + b
        b1, b2, b3 = theorem_bounds(BoundScenario(lip, eps, horizon, gap))
        if not (b3 <= b2 + tol and b2 <= b1 + tol):
            v_ord += 1
        if np.linalg.norm(y - truth[-1]) > b1 * (1 + 1e-12) + tol:
            v1 += 1

        lams = np.array([rng.beta(alpha, alpha) for _ in range(lam_samples)])
        mixed = lams[:, None] * x_hat + (1 - lams[:, None]) * x_true  # (m, dim)
        z = mixed.copy()
        for j in range(horizon):
            z = z @ a.T + b
        dev_mixed = np.linalg.norm(z - truth[-1], axis=1)
        dev_imit = np.linalg.norm(z - y, axis=1)
        for dev, bound, count in ((dev_mixed, b2, 2), (dev_imit, b3, 3)):
            mean = dev.mean()
            se = dev.std(ddof=1) / math.sqrt(lam_samples)
            if mean > bound + 3 * se + tol:
                if count == 2:
                    v2 += 1
                else:
                    v3 += 1
    return BoundsReport(trials=trials, violations_pathwise=v1,
                        violations_mixed=v2, violations_imitation=v3,
                        violations_ordering=v_ord)

"""Loss assembly, the two-update mixup strategy, teacher-forcing baselines,
and the outer training loop with best-checkpoint retention.

Strategies:
  plain     free-run reconstruction loss only;
  GE        plain plus the graph-complexity penalty;
  mixup     two updates per batch: (1) reconstruction of the rollout whose
            window seeds are mixed with ground truth, (2) the free-run
            rollout imitating a stop-gradient copy of the mixed rollout;
  GE_mixup  mixup with the penalty added to the first update;
  TF        ground truth fed at every step;
  TF_plus   ground truth fed only at window boundaries.

All losses are normalized like the reconstruction loss (per agent, per
future step) so the logged columns are directly comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DArray
from .data import Scene
from .errors import ConfigError, ContractError, NumericalError, ShapeError
from .graph_complexity import regularized_loss
from .model import TrajectoryModel
from .nn import gradients
from .optim import Adam
from .rng import STREAM_EVAL, STREAM_TRAIN, RngStream

STRATEGIES = ("plain", "mixup", "TF", "TF_plus", "GE", "GE_mixup")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    gamma: float = 0.0
    penalty: str = "entropy"
    strategy: str = "plain"
    alpha_init: float = 10.0
    alpha_decay_interval: int = 10
    alpha_decay_factor: float = 0.5
    alpha_floor: float = 0.1
    seed: int = 0
    val_samples: int = 3

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; "
                              f"expected one of {STRATEGIES}")
        if self.alpha_init <= 0:
            raise ConfigError("alpha_init must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    @property
    def uses_mixup(self) -> bool:
        return self.strategy in ("mixup", "GE_mixup")

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.strategy in ("GE", "GE_mixup") else 0.0


@dataclass
class MixState:
    """Current Beta(alpha, alpha) concentration and its decay schedule."""

    alpha: float
    epoch: int = 0
    decay_interval: int = 10
    decay_factor: float = 0.5
    floor: float = 0.1

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "MixState":
        return cls(alpha=cfg.alpha_init, epoch=0,
                   decay_interval=cfg.alpha_decay_interval,
                   decay_factor=cfg.alpha_decay_factor, floor=cfg.alpha_floor)


def decay_alpha(state: MixState) -> MixState:
    """Advance one epoch; decay alpha on every interval boundary."""
    epoch = state.epoch + 1
    alpha = state.alpha
    if epoch % state.decay_interval == 0:
        alpha = max(alpha * state.decay_factor, state.floor)
    return MixState(alpha, epoch, state.decay_interval, state.decay_factor,
                    state.floor)


def reconstruction_loss(truth: np.ndarray, preds: DArray, t_history: int) -> DArray:
    """Mean squared future error per agent per step, averaged over scenes."""
    if tuple(truth.shape) != tuple(preds.shape):
        raise ShapeError(f"truth {truth.shape} vs predictions {preds.shape}")
    t_future = truth.shape[2] - t_history
    n = truth.shape[1]
    sl = (slice(None), slice(None), slice(t_history, None))
    diff = preds[sl] - DArray(truth[:, :, t_history:])
    per_scene = (diff * diff).sum(axis=(1, 2, 3)) / float(n * t_future)
    return per_scene.mean()


def sample_beta(alpha: float, rng: RngStream) -> float:
    """One draw of the symmetric Beta(alpha, alpha) mixing coefficient."""
    if alpha <= 0:
        raise ContractError("beta concentration must be positive")
    return rng.beta(alpha, alpha)


def mix(pred, truth, lam: float):
    """Convex combination lam * pred + (1 - lam) * truth."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError("mixing coefficient must lie in [0, 1]")
    return lam * pred + (1.0 - lam) * truth


def relaxed_graph_stats(graphs) -> tuple[float, float]:
    """Mean (entropy, density) of the sampled adjacencies, for logging."""
    ent, den = [], []
    for g in graphs:
        z = g.z.data
        n = z.shape[-1]
        d = z.sum(axis=-2)
        total = d.sum(axis=-1, keepdims=True)
        p = d / np.maximum(total, 1e-12)
        plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
        ent.append((-plogp.sum(axis=-1) / math.log(n)).mean())
        den.append(z.sum(axis=(-2, -1)).mean() / (n * (n - 1)))
    return float(np.mean(ent)), float(np.mean(den))


def _strategy_losses(model: TrajectoryModel, pos: np.ndarray, cats: np.ndarray,
                     rng: RngStream, cfg: TrainConfig, alpha: float,
                     optimizer: Adam) -> dict:
    """Run one batch under the configured strategy; returns logged scalars."""
    t_hist = model.cfg.t_history
    gamma = cfg.effective_gamma
    b, n = pos.shape[0], pos.shape[1]

    if cfg.uses_mixup:
        lam = sample_beta(alpha, rng.child(0))
        # first update: reconstruct from boundary-corrected rollouts
        graphs = model.infer_graphs_from_truth(pos, rng.child(1))
        preds = model.rollout(pos, cats, graphs, rng.child(2),
                              input_mode="boundary", lam=lam)
        l1 = reconstruction_loss(pos, preds, t_hist)
        loss1 = regularized_loss(l1, [g.z for g in graphs], gamma, cfg.penalty)
        _finite_or_raise(loss1)
        optimizer.step(gradients(loss1, model.store))
        # second update: free-run imitates the corrected rollout (frozen)
        graphs2 = model.infer_graphs_from_truth(pos, rng.child(3))
        eps = model.draw_eps_schedule(rng.child(4), b, n)
        free = model.rollout(pos, cats, graphs2, rng.child(4),
                             input_mode="free_run", eps_schedule=eps)
        with ad.no_grad():
            target = model.rollout(pos, cats, graphs2, rng.child(4),
                                   input_mode="boundary", lam=lam,
                                   eps_schedule=eps)
        l2 = reconstruction_loss(target.data, free, t_hist)
        _finite_or_raise(l2)
        optimizer.step(gradients(l2, model.store))
        ent, den = relaxed_graph_stats(graphs)
        return {"loss": l1.item(), "l1": l1.item(), "l2": l2.item(),
                "entropy": ent, "density": den}

    graphs = model.infer_graphs_from_truth(pos, rng.child(1))
    if cfg.strategy == "TF":
        preds = model.rollout(pos, cats, graphs, rng.child(2), input_mode="teacher")
    elif cfg.strategy == "TF_plus":
        preds = model.rollout(pos, cats, graphs, rng.child(2),
                              input_mode="boundary", lam=0.0)
    else:  # plain / GE
        preds = model.rollout(pos, cats, graphs, rng.child(2), input_mode="free_run")
    recon = reconstruction_loss(pos, preds, t_hist)
    loss = regularized_loss(recon, [g.z for g in graphs], gamma, cfg.penalty)
    _finite_or_raise(loss)
    optimizer.step(gradients(loss, model.store))
    ent, den = relaxed_graph_stats(graphs)
    return {"loss": recon.item(), "l1": recon.item(), "l2": 0.0,
            "entropy": ent, "density": den}


def _finite_or_raise(loss: DArray):
    if not np.isfinite(loss.data).all():
        raise NumericalError(
            "loss became non-finite; try a lower learning rate or weaker coupling")


def make_batches(scenes: list[Scene], batch_size: int, rng: RngStream):
    """Shuffle scenes, then batch same-size scenes densely."""
    order = rng.permutation(len(scenes))
    by_n: dict[int, list[int]] = {}
    for i in order:
        by_n.setdefault(scenes[i].n_agents, []).append(int(i))
    batches = []
    for n in sorted(by_n):
        idx = by_n[n]
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo:lo + batch_size]
            pos = np.stack([scenes[i].positions for i in chunk])
            cats = np.stack([scenes[i].categories for i in chunk])
            batches.append((pos, cats))
    return batches


def validation_scores(model: TrajectoryModel, scenes: list[Scene],
                      n_samples: int, rng: RngStream) -> tuple[float, float]:
    """(free-run loss, mean ADE over samples) on normalized coordinates."""
    if not scenes:
        return math.nan, math.nan
    t_hist = model.cfg.t_history
    losses, ades = [], []
    for pos, cats, idx in TrajectoryModel.batch_scenes(scenes):
        batch_ades = []
        for k in range(n_samples):
            out, _ = model.predict_batch(pos, cats, rng.child(k, idx[0]))
            err = np.linalg.norm(out[:, :, t_hist:] - pos[:, :, t_hist:], axis=-1)
            batch_ades.append(err.mean(axis=(1, 2)))
            if k == 0:
                sq = ((out[:, :, t_hist:] - pos[:, :, t_hist:]) ** 2).sum(axis=(1, 2, 3))
                losses.extend(sq / (pos.shape[1] * (pos.shape[2] - t_hist)))
        ades.extend(np.mean(batch_ades, axis=0))
    return float(np.mean(losses)), float(np.mean(ades))


@dataclass
class TrainResult:
    history: list[dict]
    best_state: dict[str, np.ndarray]
    best_val_ade: float
    final_state: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray]
    mix_state: MixState
    epochs_done: int


def train(model: TrajectoryModel, cfg: TrainConfig, train_scenes: list[Scene],
          val_scenes: list[Scene], start_epoch: int = 0,
          optimizer_state: dict | None = None,
          mix_state: MixState | None = None,
          log_fn=None) -> TrainResult:
    """Run the selected strategy; keeps the best-validation parameters.

    `start_epoch`, `optimizer_state`, and `mix_state` allow resuming a run
    with continued epoch numbering and identical downstream behavior.
    """
    if not train_scenes:
        raise ContractError("training needs at least one scene")
    optimizer = Adam(model.store, lr=cfg.learning_rate)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    state = mix_state if mix_state is not None else MixState.from_config(cfg)
    root = RngStream(cfg.seed)
    history: list[dict] = []
    best_val = math.inf
    best_state = model.state_dict()

    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        batch_rng = root.child(STREAM_TRAIN, epoch)
        batches = make_batches(train_scenes, cfg.batch_size, batch_rng.child(0))
        sums = {"loss": 0.0, "l1": 0.0, "l2": 0.0, "entropy": 0.0, "density": 0.0}
        n_scenes = 0
        for bi, (pos, cats) in enumerate(batches):
            metrics = _strategy_losses(model, pos, cats, batch_rng.child(1 + bi),
                                       cfg, state.alpha, optimizer)
            w = pos.shape[0]
            n_scenes += w
            for k in sums:
                sums[k] += metrics[k] * w
        means = {k: v / n_scenes for k, v in sums.items()}

        val_loss, val_ade = validation_scores(
            model, val_scenes, cfg.val_samples, root.child(STREAM_EVAL, epoch))
        row = {"epoch": epoch, "strategy": cfg.strategy,
               "train_loss": means["loss"], "val_loss": val_loss,
               "L1": means["l1"], "L2": means["l2"],
               "entropy": means["entropy"], "density": means["density"],
               "alpha": state.alpha, "gamma": cfg.effective_gamma}
        history.append(row)
        if log_fn is not None:
            log_fn(row)
        if val_scenes and val_ade < best_val:
            best_val = val_ade
            best_state = model.state_dict()
        state = decay_alpha(state)

    if not val_scenes:
        best_state = model.state_dict()
    return TrainResult(history=history, best_state=best_state,
                       best_val_ade=best_val, final_state=model.state_dict(),
                       optimizer_state=optimizer.state_dict(), mix_state=state,
                       epochs_done=start_epoch + cfg.epochs)

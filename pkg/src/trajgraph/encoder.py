"""Latent interaction-graph encoder.

Per time window the encoder embeds each agent's trajectory fragment, runs
a two-pass GNN over the complete directed graph to produce edge
representations, evolves a per-edge GRU across windows, and emits both
relation probabilities and sampled adjacencies. Training uses the relaxed
binary-concrete sample so gradients reach the encoder; testing draws hard
Bernoulli edges (or thresholds them in the deterministic "map" mode).

Array convention: batches of same-size scenes, so node tensors are
(B, N, H) and edge tensors (B, N, N, ...) with index [b, i, j] meaning the
directed pair i -> j. Diagonals are never read; masked batch-norm keeps
them out of normalization statistics too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DArray
from .errors import ConfigError, ContractError
from .nn import MLP, GRUStack, ParamStore
from .rng import RngStream

# rng child tags so draw order never depends on call interleaving
RK_EDGE_NOISE = 0
RK_RELATION = 1
RK_STEP_NOISE = 2


@dataclass
class InteractionGraphSample:
    """One window's inferred graph: probabilities, sample, edge features."""

    probs: DArray        # (B, N, N), zero diagonal
    z: DArray            # (B, N, N); relaxed in train mode, {0,1} otherwise
    edge_feats: DArray   # (B, N, N, D), zero diagonal
    hard: bool

    @property
    def n_agents(self) -> int:
        return self.z.shape[-1]


def _offdiag_mask(b: int, n: int) -> np.ndarray:
    m = 1.0 - np.eye(n)
    return np.broadcast_to(m, (b, n, n)).copy()


class GraphEncoder:
    def __init__(self, store: ParamStore, n_categories: int, tau: int,
                 hidden_dim: int, edge_dim: int, gru_layers: int,
                 temperature: float, rng: RngStream):
        if temperature <= 0:
            raise ConfigError("relation sampling temperature must be positive")
        self.tau = tau
        self.hidden = hidden_dim
        self.edge_dim = edge_dim
        self.temperature = temperature
        two_blocks = lambda w: [(w, "elu", True), (w, "elu", True)]  # noqa: E731
        self.f_emb = MLP(store, "enc.emb", 2 * tau, two_blocks(hidden_dim), rng)
        self.f_e = MLP(store, "enc.edge1", hidden_dim, two_blocks(hidden_dim), rng)
        self.f_v = MLP(store, "enc.node", hidden_dim, two_blocks(hidden_dim), rng)
        self.f_e2 = MLP(store, "enc.edge2", hidden_dim, two_blocks(edge_dim), rng)
        self.edge_gru = GRUStack(store, "enc.edgegru", edge_dim, hidden_dim,
                                 gru_layers, rng)
        self.f_proj = MLP(store, "enc.proj", hidden_dim,
                          [(hidden_dim, "elu", True), (hidden_dim, "elu", True),
                           (1, None, False)], rng)

    # ----------------------------------------------------------- operations
    def embed_window(self, window, train: bool) -> DArray:
        """(B, N, tau, 2) trajectory fragment -> (B, N, H) node embeddings."""
        if not isinstance(window, DArray):
            window = DArray(window)
        b, n, t, _ = window.shape
        if t != self.tau:
            raise ContractError(f"window has {t} steps, expected tau={self.tau}")
        flat = window.reshape(b, n, 2 * self.tau)
        return self.f_emb(flat, train=train)

    def gnn_pass(self, v: DArray, train: bool) -> tuple[DArray, DArray]:
        """Node update and edge embeddings from pairwise latent differences."""
        b, n, h = v.shape
        if n < 2:
            raise ContractError("gnn pass needs at least 2 agents")
        mask = _offdiag_mask(b, n)[..., None]          # (B, N, N, 1)
        diffs = v.reshape(b, n, 1, h) - v.reshape(b, 1, n, h)   # v_i - v_j
        msg = self.f_e(diffs, train=train, mask=mask) * DArray(mask)
        agg = msg.sum(axis=1)                          # sum over sources i
        v_t = self.f_v(agg, train=train)
        tdiffs = v_t.reshape(b, n, 1, h) - v_t.reshape(b, 1, n, h)
        e_t = self.f_e2(tdiffs, train=train, mask=mask) * DArray(mask)
        return v_t, e_t

    def sample_edge_features(self, e_tilde: DArray, rng: RngStream,
                             noise_scale: float = 1.0) -> DArray:
        """Reparameterized Gaussian around the edge embeddings."""
        if noise_scale == 0.0:
            return e_tilde
        noise = rng.normal(scale=noise_scale, size=e_tilde.shape)
        b, n = e_tilde.shape[0], e_tilde.shape[1]
        noise *= _offdiag_mask(b, n)[..., None]
        return e_tilde + DArray(noise)

    def update_relations(self, e_tilde: DArray, state: list[DArray] | None,
                         train: bool = True) -> tuple[DArray, list[DArray]]:
        """Advance the per-edge GRU and project to relation logits."""
        b, n, _, d = e_tilde.shape
        flat = e_tilde.reshape(b * n * n, d)
        if state is None:
            state = self.edge_gru.init_state((b * n * n,))
        out, new_state = self.edge_gru(flat, state)
        mask = _offdiag_mask(b, n).reshape(b * n * n, 1)
        logits = self.f_proj(out, train=train, mask=mask)
        return logits.reshape(b, n, n), new_state

    def sample_relations(self, logits: DArray, mode: str,
                         rng: RngStream) -> tuple[DArray, DArray]:
        """Relation probabilities plus a sampled adjacency.

        train: relaxed binary-concrete sample (differentiable);
        sample: hard Bernoulli draw per ordered pair;
        map:    deterministic threshold at probability 1/2.
        """
        b, n = logits.shape[0], logits.shape[-1]
        mask = _offdiag_mask(b, n)
        probs = ad.sigmoid(logits) * DArray(mask)
        if mode == "train":
            noise = rng.logistic(size=logits.shape) * mask
            z = ad.sigmoid((logits + DArray(noise)) / self.temperature) * DArray(mask)
        elif mode == "sample":
            draw = rng.uniform(size=logits.shape)
            z = DArray(((draw < probs.data) * mask).astype(np.float64))
        elif mode == "map":
            z = DArray(((probs.data > 0.5) * mask).astype(np.float64))
        else:
            raise ConfigError(f"unknown relation sampling mode: {mode}")
        return probs, z


class EncoderRun:
    """Stateful window-by-window pass; edge GRU state persists per scene."""

    def __init__(self, encoder: GraphEncoder, edge_noise_scale: float = 1.0):
        self.encoder = encoder
        self.edge_noise_scale = edge_noise_scale
        self.state: list[DArray] | None = None
        self.window_index = 0

    def step(self, window, rng: RngStream, mode: str, train: bool) -> InteractionGraphSample:
        enc = self.encoder
        w = self.window_index
        v = enc.embed_window(window, train=train)
        _, e_tilde = enc.gnn_pass(v, train=train)
        edge_feats = enc.sample_edge_features(
            e_tilde, rng.child(RK_EDGE_NOISE, w), self.edge_noise_scale)
        logits, self.state = enc.update_relations(e_tilde, self.state, train=train)
        probs, z = enc.sample_relations(logits, mode, rng.child(RK_RELATION, w))
        self.window_index += 1
        return InteractionGraphSample(probs, z, edge_feats, hard=(mode != "train"))

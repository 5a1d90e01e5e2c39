import numpy as np
import pytest

from trajgraph.autodiff import DArray
from trajgraph.checkpoint import load_checkpoint, save_checkpoint
from trajgraph.encoder import InteractionGraphSample
from trajgraph.errors import ConfigError, ContractError
from trajgraph.model import ModelConfig, TrajectoryModel
from trajgraph.rng import RngStream

from conftest import small_model_config

rng_np = np.random.default_rng(61)


def batch_from(scenes, n_agents):
    chosen = [s for s in scenes if s.n_agents == n_agents]
    pos = np.stack([s.positions for s in chosen])
    cats = np.stack([s.categories for s in chosen])
    return pos, cats


def test_infer_graphs_one_per_window(small_model, tiny_scenes):
    scenes, _ = tiny_scenes
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    graphs = small_model.infer_graphs_from_truth(pos, RngStream(1).child(0))
    assert len(graphs) == small_model.plan.n_windows == 3
    for g in graphs:
        assert g.z.shape == (pos.shape[0], pos.shape[1], pos.shape[1])
        assert np.abs(np.diagonal(g.z.data, axis1=1, axis2=2)).max() == 0


def test_rollout_requires_enough_graphs(small_model, tiny_scenes):
    scenes, _ = tiny_scenes
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    graphs = small_model.infer_graphs_from_truth(pos, RngStream(1).child(0))
    with pytest.raises(ContractError):
        small_model.rollout(pos, cats, graphs[:1], RngStream(2))


def test_rollout_rejects_unknown_mode(small_model, tiny_scenes):
    scenes, _ = tiny_scenes
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    graphs = small_model.infer_graphs_from_truth(pos, RngStream(1).child(0))
    with pytest.raises(ConfigError):
        small_model.rollout(pos, cats, graphs, RngStream(2), input_mode="x")
    with pytest.raises(ContractError):
        small_model.rollout(pos, cats, graphs, RngStream(2),
                            input_mode="boundary")  # lam missing


def test_zero_head_free_run_is_stationary(tiny_scenes):
    scenes, _ = tiny_scenes
    model = TrajectoryModel(small_model_config(), seed=7)
    model.store["dec.fout.2.W"].data[...] = 0.0
    model.store["dec.fout.2.b"].data[...] = 0.0
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    graphs = model.infer_graphs_from_truth(pos, RngStream(1).child(0))
    preds = model.rollout(pos, cats, graphs, RngStream(2), input_mode="free_run")
    t_hist = model.cfg.t_history
    last_obs = pos[:, :, t_hist - 1:t_hist]
    np.testing.assert_array_equal(preds.data[:, :, t_hist:],
                                  np.repeat(last_obs, 10, axis=2))


def test_boundary_lam_zero_reseeds_from_truth(tiny_scenes):
    # zero-increment decoder: every window's predictions equal the ground
    # truth position at the window's seed step
    scenes, _ = tiny_scenes
    model = TrajectoryModel(small_model_config(), seed=7)
    model.store["dec.fout.2.W"].data[...] = 0.0
    model.store["dec.fout.2.b"].data[...] = 0.0
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    graphs = model.infer_graphs_from_truth(pos, RngStream(1).child(0))
    preds = model.rollout(pos, cats, graphs, RngStream(2),
                          input_mode="boundary", lam=0.0).data
    tau, t_hist = 5, 5
    np.testing.assert_array_equal(
        preds[:, :, 5:10], np.repeat(pos[:, :, 4:5], 5, axis=2))
    np.testing.assert_array_equal(
        preds[:, :, 10:15], np.repeat(pos[:, :, 9:10], 5, axis=2))


def test_teacher_mode_feeds_truth_everywhere(tiny_scenes):
    scenes, _ = tiny_scenes
    model = TrajectoryModel(small_model_config(), seed=7)
    model.store["dec.fout.2.W"].data[...] = 0.0
    model.store["dec.fout.2.b"].data[...] = 0.0
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    graphs = model.infer_graphs_from_truth(pos, RngStream(1).child(0))
    preds = model.rollout(pos, cats, graphs, RngStream(2),
                          input_mode="teacher").data
    # zero increment: prediction at t+1 equals truth at t
    np.testing.assert_array_equal(preds[:, :, 1:], pos[:, :, :-1])


def test_eps_schedule_makes_rollouts_identical(small_model, tiny_scenes):
    scenes, _ = tiny_scenes
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    graphs = small_model.infer_graphs_from_truth(pos, RngStream(1).child(0))
    eps = small_model.draw_eps_schedule(RngStream(3).child(0), pos.shape[0],
                                        pos.shape[1])
    a = small_model.rollout(pos, cats, graphs, RngStream(4), eps_schedule=eps)
    b = small_model.rollout(pos, cats, graphs, RngStream(5), eps_schedule=eps)
    np.testing.assert_array_equal(a.data, b.data)


def test_window_graph_ablation_changes_predictions(trained_small):
    model, scenes, _, _ = trained_small
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    graphs = model.infer_graphs_from_truth(pos, RngStream(1).child(0),
                                           mode="sample", train=False)
    # ensure the second window has at least one edge to ablate
    if graphs[1].z.data.sum() == 0:
        z = graphs[1].z.data.copy()
        z[:, 0, 1] = 1.0
        graphs[1] = InteractionGraphSample(graphs[1].probs, DArray(z),
                                           graphs[1].edge_feats, True)
    zeroed = [g for g in graphs]
    zeroed[1] = InteractionGraphSample(
        graphs[1].probs, DArray(np.zeros_like(graphs[1].z.data)),
        graphs[1].edge_feats, True)
    kept = model.rollout(pos, cats, graphs, RngStream(6), noise=False,
                         train=False).data
    cut = model.rollout(pos, cats, zeroed, RngStream(6), noise=False,
                        train=False).data
    assert np.abs(kept - cut).max() > 1e-9


def test_predict_batch_keeps_history_and_shapes(small_model, tiny_scenes):
    scenes, _ = tiny_scenes
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    out, graphs = small_model.predict_batch(pos, cats, RngStream(9).child(1))
    assert out.shape == pos.shape
    np.testing.assert_array_equal(out[:, :, :5], pos[:, :, :5])
    assert len(graphs) == 2   # windows consumed for prediction only
    assert all(set(np.unique(g.z.data)) <= {0.0, 1.0} for g in graphs)


def test_predict_batch_deterministic_given_stream(small_model, tiny_scenes):
    scenes, _ = tiny_scenes
    pos, cats = batch_from(scenes, scenes[0].n_agents)
    a, _ = small_model.predict_batch(pos, cats, RngStream(9).child(1))
    b, _ = small_model.predict_batch(pos, cats, RngStream(9).child(1))
    np.testing.assert_array_equal(a, b)


def test_full_rollout_permutation_equivariance(tiny_scenes):
    scenes, _ = tiny_scenes
    model = TrajectoryModel(small_model_config(), seed=13)
    worst = 0.0
    for case in range(10):
        scene = scenes[case % len(scenes)]
        perm = np.random.default_rng(case).permutation(scene.n_agents)
        base, _ = model.predict_batch(scene.positions[None],
                                      scene.categories[None],
                                      RngStream(0), sample_mode="map",
                                      noise=False, edge_noise_scale=0.0)
        permuted, _ = model.predict_batch(scene.positions[perm][None],
                                          scene.categories[perm][None],
                                          RngStream(0), sample_mode="map",
                                          noise=False, edge_noise_scale=0.0)
        worst = max(worst, np.abs(permuted[0] - base[0][perm]).max())
    assert worst < 1e-9


def test_model_state_checkpoint_round_trip(tmp_path, small_model):
    state = small_model.state_dict()
    save_checkpoint(tmp_path / "m.ckpt", state)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    other = TrajectoryModel(small_model.cfg, seed=99)
    other.load_state_dict(loaded)
    for k, v in other.store.items():
        assert v.data.tobytes() == small_model.store[k].data.tobytes()


def test_scene_step_mismatch_rejected(small_model):
    with pytest.raises(ContractError):
        small_model.infer_graphs_from_truth(np.zeros((1, 3, 12, 2)),
                                            RngStream(0))

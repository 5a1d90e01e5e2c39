"""Command-line interface.

Subcommands: gen-data, train, evaluate, verify-theory, analyze-graphs,
sweep-gamma. Every command is deterministic given its config and seed.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure, 4 theory-check violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import DEFAULTS, RunConfig, load_config, parse_float_list
from .data import (Normalizer, Scene, SyntheticConfig, generate_synthetic,
                   load_csv, save_csv, split_scenes)
from .errors import (ConfigError, ContractError, DataError, GenerationError,
                     NumericalError, ShapeError, TrajGraphError)
from .evaluation import (CATEGORY_HEADER, METRICS_HEADER, ModelGraphProbe,
                         graph_quality, metrics_csv_rows, sampled_metrics,
                         select_graph, verify_bounds)
from .graph_complexity import (graph_entropy, min_graph_entropy, r_density,
                               random_majorizing_pair, verify_hlp)
from .model import ModelConfig, TrajectoryModel
from .plots import trajectory_svg
from .rng import STREAM_EVAL, STREAM_THEORY, RngStream
from .training import STRATEGIES, MixState, TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_THEORY = 4

LOG_HEADER = "epoch,strategy,train_loss,val_loss,L1,L2,entropy,density,alpha,gamma"


# ------------------------------------------------------- checkpoint helpers

def _model_state_with_config(model: TrajectoryModel, strategy: str,
                             gamma: float) -> dict[str, np.ndarray]:
    state = {}
    for f in dataclasses.fields(ModelConfig):
        state[f"cfg.{f.name}"] = np.array([float(getattr(model.cfg, f.name))])
    state["cfg.strategy_index"] = np.array([float(STRATEGIES.index(strategy))])
    state["cfg.gamma"] = np.array([float(gamma)])
    state.update(model.state_dict())
    return state


def _split_meta(state: dict) -> tuple[ModelConfig, str, float, dict]:
    cfg_kwargs = {}
    params = {}
    strategy = "plain"
    gamma = 0.0
    for key, value in state.items():
        if key == "cfg.strategy_index":
            strategy = STRATEGIES[int(value[0])]
        elif key == "cfg.gamma":
            gamma = float(value[0])
        elif key.startswith("cfg."):
            cfg_kwargs[key[4:]] = value[0]
        else:
            params[key] = value
    fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    typed = {}
    for name, raw in cfg_kwargs.items():
        if name not in fields:
            raise DataError(f"checkpoint carries unknown config field {name}")
        kind = fields[name]
        if kind == "bool":
            typed[name] = bool(raw)
        elif kind == "int":
            typed[name] = int(raw)
        else:
            typed[name] = float(raw)
    return ModelConfig(**typed), strategy, gamma, params


def load_model(path) -> tuple[TrajectoryModel, str, float]:
    cfg, strategy, gamma, params = _split_meta(load_checkpoint(path))
    model = TrajectoryModel(cfg, seed=0)
    model.load_state_dict(params)
    return model, strategy, gamma


# ------------------------------------------------------------ data plumbing

def _load_split(data_dir, split: str, n_categories: int | None = None
                ) -> tuple[list[Scene], Normalizer]:
    data_dir = Path(data_dir)
    csv_path = data_dir / f"{split}.csv"
    if not csv_path.exists():
        raise DataError(f"missing dataset file: {csv_path}")
    scenes = load_csv(csv_path, n_categories=n_categories)
    norm = Normalizer.from_file(data_dir / "normalization.txt")
    return scenes, norm


def _synthetic_config(cfg: RunConfig) -> SyntheticConfig:
    d = cfg["data"]
    c = d["n_categories"]
    coupling = parse_float_list(d["coupling"], c * c, "[data] coupling")
    damping = parse_float_list(d["damping"], c, "[data] damping")
    return SyntheticConfig(
        n_scenes=d["n_scenes"], n_agents_min=d["n_agents_min"],
        n_agents_max=d["n_agents_max"], n_categories=c,
        t_history=d["t_history"], t_future=d["t_future"],
        coupling=None if coupling is None else np.array(coupling).reshape(c, c),
        damping=None if damping is None else np.array(damping),
        edge_prob=d["edge_prob"], dt=d["dt"], seed=d["seed"],
        init_box=d["init_box"], init_vel=d["init_vel"])


def _model_config(cfg: RunConfig) -> ModelConfig:
    d, m = cfg["data"], cfg["model"]
    return ModelConfig(
        n_categories=d["n_categories"], t_history=d["t_history"],
        t_future=d["t_future"], tau=m["tau"], hidden_dim=m["hidden_dim"],
        edge_dim=m["edge_dim"], attn_dim=m["attn_dim"],
        gru_layers=m["gru_layers"], temperature=m["temperature"],
        homogeneous=m["homogeneous"],
        edge_noise_scale=m["edge_noise_scale"], step_noise=m["step_noise"])


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"],
        learning_rate=t["learning_rate"], gamma=t["gamma"],
        penalty=t["penalty"], strategy=t["strategy"],
        alpha_init=t["alpha_init"],
        alpha_decay_interval=t["alpha_decay_interval"],
        alpha_decay_factor=t["alpha_decay_factor"],
        alpha_floor=t["alpha_floor"], seed=t["seed"],
        val_samples=t["val_samples"])


def _threads(cfg: RunConfig, flag: int | None) -> int:
    value = flag if flag is not None else cfg["eval"]["threads"]
    return value if value and value > 0 else (os.cpu_count() or 1)


# --------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {("data", "seed"): args.seed})
    d = cfg["data"]
    ratios = (d["split_train"], d["split_val"], d["split_test"])
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes, norm = generate_synthetic(_synthetic_config(cfg))
    train_s, val_s, test_s = split_scenes(scenes, ratios, seed=d["seed"])
    save_csv(train_s, out / "train.csv")
    save_csv(val_s, out / "val.csv")
    save_csv(test_s, out / "test.csv")
    norm.to_file(out / "normalization.txt")
    print(f"wrote {len(train_s)}/{len(val_s)}/{len(test_s)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {("train", "seed"): args.seed,
                 ("train", "strategy"): args.strategy,
                 ("train", "gamma"): args.gamma}
    cfg = load_config(args.config, overrides)
    tcfg = _train_config(cfg)
    mcfg = _model_config(cfg)
    train_scenes, _ = _load_split(args.data, "train", mcfg.n_categories)
    val_scenes, _ = _load_split(args.data, "val", mcfg.n_categories)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"

    model = TrajectoryModel(mcfg, seed=tcfg.seed)
    start_epoch = 0
    optimizer_state = None
    mix_state = None
    prev_best = math.inf
    if args.resume:
        state = load_checkpoint(args.resume)
        rcfg, _, _, params = _split_meta(
            {k: v for k, v in state.items() if not k.startswith(("opt.", "meta."))})
        if dataclasses.asdict(rcfg) != dataclasses.asdict(mcfg):
            raise ConfigError("resume checkpoint was built with a different "
                              "model configuration")
        model.load_state_dict(params)
        optimizer_state = {k: v for k, v in state.items() if k.startswith("opt.")}
        start_epoch = int(state["meta.epoch"][0])
        prev_best = float(state["meta.best_val"][0])
        mix_state = MixState(alpha=float(state["meta.alpha"][0]),
                             epoch=start_epoch,
                             decay_interval=tcfg.alpha_decay_interval,
                             decay_factor=tcfg.alpha_decay_factor,
                             floor=tcfg.alpha_floor)

    mode = "a" if args.resume and log_path.exists() else "w"
    with open(log_path, mode) as log_file:
        if mode == "w":
            log_file.write(LOG_HEADER + "\n")

        def log_fn(row):
            log_file.write(",".join([
                str(row["epoch"]), row["strategy"], repr(row["train_loss"]),
                repr(row["val_loss"]), repr(row["L1"]), repr(row["L2"]),
                repr(row["entropy"]), repr(row["density"]), repr(row["alpha"]),
                repr(row["gamma"])]) + "\n")

        result = train(model, tcfg, train_scenes, val_scenes,
                       start_epoch=start_epoch, optimizer_state=optimizer_state,
                       mix_state=mix_state, log_fn=log_fn)

    # best-of-run checkpoint (kept from the previous run segment if better)
    if result.best_val_ade <= prev_best:
        best = TrajectoryModel(mcfg, seed=tcfg.seed)
        best.load_state_dict(result.best_state)
        save_checkpoint(out / "model.ckpt",
                        _model_state_with_config(best, tcfg.strategy, tcfg.gamma))
    resume_state = _model_state_with_config(model, tcfg.strategy, tcfg.gamma)
    resume_state.update(result.optimizer_state)
    resume_state["meta.epoch"] = np.array([float(result.epochs_done)])
    resume_state["meta.alpha"] = np.array([float(result.mix_state.alpha)])
    resume_state["meta.best_val"] = np.array(
        [float(min(result.best_val_ade, prev_best))])
    save_checkpoint(out / "last.ckpt", resume_state)
    print(f"trained {tcfg.epochs} epochs ({tcfg.strategy}); "
          f"best val ADE {result.best_val_ade:.6f}; artifacts in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, {("eval", "samples"): args.samples,
                                    ("eval", "seed"): args.seed})
    model, strategy, gamma = load_model(args.checkpoint)
    split = cfg["eval"]["split"] if args.split is None else args.split
    scenes, norm = _load_split(args.data, split, model.cfg.n_categories)
    threads = _threads(cfg, args.threads)
    record = sampled_metrics(model, scenes, norm,
                             n_samples=cfg["eval"]["samples"],
                             seed=cfg["eval"]["seed"], threads=threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = Path(args.data).name
    main_row, cat_rows = metrics_csv_rows(record, dataset, strategy, gamma)
    (out / "metrics.csv").write_text(METRICS_HEADER + "\n" + main_row + "\n")
    (out / "metrics_by_category.csv").write_text(
        CATEGORY_HEADER + "\n" + "\n".join(cat_rows) + "\n")
    if args.export_trajectories:
        _export_trajectories(model, scenes, norm, cfg["eval"]["samples"],
                             cfg["eval"]["seed"], out / "trajectories.csv")
    print(f"min ADE {record.min_ade:.4f}, mean ADE {record.mean_ade:.4f}, "
          f"min FDE {record.min_fde:.4f}, mean FDE {record.mean_fde:.4f}")
    return EXIT_OK


def _export_trajectories(model: TrajectoryModel, scenes: list[Scene],
                         norm: Normalizer, n_samples: int, seed: int, path):
    root = RngStream(seed).child(STREAM_EVAL)
    t_hist = model.cfg.t_history
    lines = ["scene_id,sample_id,agent_id,t,x,y"]
    rows = {}
    for pos, cats, idx in TrajectoryModel.batch_scenes(scenes):
        for k in range(n_samples):
            out, _ = model.predict_batch(pos, cats, root.child(pos.shape[1], k))
            denorm = norm.denormalize(out[:, :, t_hist:])
            for row, scene_index in enumerate(idx):
                rows.setdefault(scene_index, []).append(denorm[row])
    for scene_index in sorted(rows):
        scene = scenes[scene_index]
        for k, pred in enumerate(rows[scene_index]):
            for a in range(scene.n_agents):
                for t in range(pred.shape[1]):
                    lines.append(
                        f"{scene.scene_id},{k},{a},{t_hist + t},"
                        f"{float(pred[a, t, 0])!r},{float(pred[a, t, 1])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_verify_theory(args) -> int:
    checks = args.checks.split(",")
    unknown = set(checks) - {"entropy", "bounds", "majorization"}
    if unknown:
        raise ConfigError(f"unknown theory checks: {sorted(unknown)}")
    ok = True

    if "entropy" in checks:
        from .graph_complexity import min_entropy_degree_profile
        print("graph entropy minimizer: closed form vs brute force")
        print(f"{'N':>3} {'|E|':>4} {'closed':>12} {'brute':>12} match")
        for n in range(2, args.max_nodes + 1):
            for e in range(0, n * (n - 1) + 1):
                closed = min_graph_entropy(n, e)
                brute = _brute_force_min_entropy(n, e)
                match = abs(closed - brute) <= 1e-12
                ok = ok and match
                print(f"{n:>3} {e:>4} {closed:>12.8f} {brute:>12.8f} "
                      f"{'yes' if match else 'NO'}")
        # monotonicity in |E| for each N
        for n in range(2, args.max_nodes + 1):
            values = [min_graph_entropy(n, e) for e in range(n * (n - 1) + 1)]
            mono = all(b >= a - 1e-15 for a, b in zip(values, values[1:]))
            ok = ok and mono
            print(f"monotone in |E| for N={n}: {'yes' if mono else 'NO'}")

    if "majorization" in checks:
        rng = RngStream(args.seed).child(STREAM_THEORY, 1)
        violations = 0
        for _ in range(args.trials):
            x, y = random_majorizing_pair(rng, int(rng.integers(3, 9)))
            if not verify_hlp(x, y):
                violations += 1
        print(f"majorization inequality: {args.trials} constructed pairs, "
              f"{violations} violations")
        ok = ok and violations == 0

    if "bounds" in checks:
        report = verify_bounds(seed=args.seed, trials=args.trials)
        print(f"error bounds: {report.trials} trials; violations: "
              f"pathwise {report.violations_pathwise}, "
              f"mixed {report.violations_mixed}, "
              f"imitation {report.violations_imitation}, "
              f"ordering {report.violations_ordering}")
        ok = ok and report.passed

    print("overall:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_THEORY


def _brute_force_min_entropy(n_nodes: int, n_edges: int) -> float:
    """Exhaustive minimum over in-degree vectors (the CLI's oracle route)."""
    if n_edges == 0:
        return 0.0
    best = math.inf

    def rec(remaining, max_part, degrees):
        nonlocal best
        slots = n_nodes - len(degrees)
        if slots == 0:
            if remaining == 0:
                z = np.asarray(degrees, dtype=np.float64)
                p = z[z > 0] / n_edges
                best = min(best, float(-(p * np.log(p)).sum() / math.log(n_nodes)))
            return
        if remaining > max_part * slots:
            return
        for d in range(min(max_part, remaining), -1, -1):
            rec(remaining - d, d, degrees + [d])

    rec(n_edges, n_nodes - 1, [])
    return best


def cmd_analyze_graphs(args) -> int:
    cfg = load_config(args.config, {("eval", "samples"): args.samples,
                                    ("eval", "seed"): args.seed})
    model, _, _ = load_model(args.checkpoint)
    split = cfg["eval"]["split"] if args.split is None else args.split
    scenes, norm = _load_split(args.data, split, model.cfg.n_categories)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["eval"]["seed"]
    root = RngStream(seed).child(STREAM_EVAL, 31)

    # per-scene per-window hard-graph statistics (MAP inference)
    lines = ["scene_id,window,n_edges,density,entropy"]
    for si, scene in enumerate(scenes):
        pos, cats = scene.positions[None], scene.categories[None]
        _, graphs = model.predict_batch(pos, cats, root.child(si),
                                        sample_mode="map", edge_noise_scale=0.0)
        for w, g in enumerate(graphs):
            z = g.z.data[0]
            lines.append(f"{scene.scene_id},{w},{int(z.sum())},"
                         f"{r_density(z)!r},{graph_entropy(z)!r}")
    (out / "graph_stats.csv").write_text("\n".join(lines) + "\n")

    # edge quality audit on a capped number of scenes
    quality_scenes = scenes[:args.quality_scenes]
    probe = ModelGraphProbe(model, n_rollouts=cfg["eval"]["samples"])
    report = graph_quality(probe, quality_scenes, seed=seed)
    q_lines = [
        "metric,value",
        f"scenes,{report.n_scenes}",
        f"skipped,{report.n_skipped}",
        f"edges,{report.n_edges}",
        f"redundant,{report.n_redundant}",
        f"missing,{report.n_missing}",
        f"redundant_rate,{report.redundant_rate!r}",
        f"missing_rate,{report.missing_rate!r}",
    ]
    (out / "quality.csv").write_text("\n".join(q_lines) + "\n")

    if args.svg:
        for si, scene in enumerate(scenes[:args.svg_scenes]):
            pos, cats = scene.positions[None], scene.categories[None]
            samples = []
            for k in range(min(cfg["eval"]["samples"], 10)):
                pred, _ = model.predict_batch(pos, cats, root.child(9000 + si, k))
                samples.append(norm.denormalize(pred[0, :, model.cfg.t_history:]))
            trajectory_svg(norm.denormalize(scene.positions), samples,
                           model.cfg.t_history, out / f"{scene.scene_id}.svg")
    print(f"graph analysis written to {out} (redundant rate "
          f"{report.redundant_rate:.4f}, missing rate {report.missing_rate:.4f})")
    return EXIT_OK


def cmd_sweep_gamma(args) -> int:
    cfg = load_config(args.config, {("train", "seed"): args.seed,
                                    ("train", "strategy"): args.strategy})
    try:
        gammas = [float(g) for g in args.gammas.split(",")]
    except ValueError as e:
        raise ConfigError("--gammas expects comma-separated numbers") from e
    mcfg = _model_config(cfg)
    tcfg = _train_config(cfg)
    if tcfg.strategy not in ("GE", "GE_mixup"):
        tcfg = dataclasses.replace(tcfg, strategy="GE")
    train_scenes, _ = _load_split(args.data, "train", mcfg.n_categories)
    val_scenes, _ = _load_split(args.data, "val", mcfg.n_categories)
    test_scenes, norm = _load_split(args.data, "test", mcfg.n_categories)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["gamma,mean_ade,min_ade,mean_fde,min_fde,avg_entropy,avg_density,"
            "final_train_loss"]
    for gamma in gammas:
        run_cfg = dataclasses.replace(tcfg, gamma=gamma)
        model = TrajectoryModel(mcfg, seed=run_cfg.seed)
        result = train(model, run_cfg, train_scenes, val_scenes)
        model.load_state_dict(result.best_state)
        record = sampled_metrics(model, test_scenes, norm,
                                 n_samples=cfg["eval"]["samples"],
                                 seed=cfg["eval"]["seed"],
                                 threads=_threads(cfg, args.threads))
        rows.append(",".join(repr(v) for v in [
            gamma, record.mean_ade, record.min_ade, record.mean_fde,
            record.min_fde, record.avg_entropy, record.avg_density,
            result.history[-1]["train_loss"]]))
        print(f"gamma={gamma}: mean ADE {record.mean_ade:.4f}, "
              f"density {record.avg_density:.4f}")
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajgraph",
        description="Heterogeneous multi-agent trajectory forecasting with "
                    "latent interaction graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="sectioned key=value file")
        p.add_argument("--seed", type=int, default=None, help="override seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap for evaluation/generation")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--resume", default=None, help="resume from last.ckpt")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="compute displacement metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None, choices=["train", "val", "test"])
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--export-trajectories", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("verify-theory", help="run the theory checkers")
    p.add_argument("--config", default=None)
    p.add_argument("--checks", default="entropy,bounds,majorization")
    p.add_argument("--max-nodes", type=int, default=6)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify_theory)

    p = sub.add_parser("analyze-graphs", help="graph statistics and quality")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None, choices=["train", "val", "test"])
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--quality-scenes", type=int, default=4)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--svg-scenes", type=int, default=4)
    p.set_defaults(fn=cmd_analyze_graphs)

    p = sub.add_parser("sweep-gamma", help="trade-off table over gamma values")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.add_argument("--gammas", default="0,0.1,1,10")
    p.set_defaults(fn=cmd_sweep_gamma)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GenerationError, ShapeError, ContractError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

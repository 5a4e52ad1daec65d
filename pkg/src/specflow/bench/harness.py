"""End-to-end pipeline: dataset, training, benchmark grids, single episodes.

Everything here is driven by the config mapping and explicit seeds; given
the same inputs the produced datasets, checkpoints, traces, and reports are
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..actions import Standardizer
from ..conveyor import (
    LAYOUT,
    ConveyorEnv,
    DemoDataset,
    EnvConfig,
    SpeedGrid,
    generate_dataset,
)
from ..draft import DraftModel, DraftTrainConfig, teacher_targets, train_draft
from ..flowpolicy import (
    ContextEncoder,
    DenoiseConfig,
    FlowTrainConfig,
    ObsNormalizer,
    VelocityField,
    fit_flow_field,
)
from ..latency import LatencyCoupling, get_profile
from ..nets import flop_count, init_mlp, n_params
from ..runtime import Models, RuntimePolicy, run_episode
from ..verifier import VerifierConfig
from . import checkpoint as ckpt
from .config import fingerprint
from .reports import (
    ConditionResult,
    SuiteReport,
    apply_speedup,
    condition_from_records,
)

_ENV_STREAM = 2


def speed_grid(config: dict) -> SpeedGrid:
    env = config["env"]
    return SpeedGrid(speeds=dict(env["speeds"]), scale=float(env["speed_scale"]))


def variant_names(config: dict) -> list[str]:
    return list(config["bench"]["variants"])


def make_env_config(config: dict, variant: str, speed_name: str) -> EnvConfig:
    env = config["env"]
    if variant not in env["grasp_radius"]:
        raise KeyError(f"unknown variant {variant!r}")
    variants = variant_names(config)
    return EnvConfig(
        belt_speed=speed_grid(config).units_per_tick(speed_name),
        grasp_radius=float(env["grasp_radius"][variant]),
        variant=variant,
        task_id=variants.index(variant),
        x_min=float(env["x_min"]),
        x_max=float(env["x_max"]),
        y_min=float(env["y_min"]),
        y_max=float(env["y_max"]),
        belt_y=float(env["belt_y"]),
        object_start_min=float(env["object_start_min"]),
        object_start_max=float(env["object_start_max"]),
        gripper_home_x=float(env["gripper_home_x"]),
        gripper_home_y=float(env["gripper_home_y"]),
        gripper_jitter=float(env["gripper_jitter"]),
        bin_x=float(env["bin_x"]),
        bin_y=float(env["bin_y"]),
        max_step=float(env["max_step"]),
        max_ticks=int(env["max_ticks"]),
    )


def build_dataset(config: dict) -> DemoDataset:
    ds = config["dataset"]
    return generate_dataset(
        make_cfg=lambda variant: make_env_config(config, variant, ds["speed"]),
        variants=variant_names(config),
        episodes_per_variant=int(ds["episodes_per_variant"]),
        horizon=int(config["chunk"]["horizon"]),
        replan=int(config["chunk"]["replan_size"]),
        seed=int(ds["seed"]),
        speed_name=ds["speed"],
    )


@dataclass
class TrainingArrays:
    """Dataset featurized for the nets, plus the fitted scalers."""

    enc_inputs: np.ndarray  # (N, world+tasks)
    draft_features: np.ndarray  # (N, world+tasks+state)
    states: np.ndarray  # (N, state) normalized
    targets_std: np.ndarray  # (N, H, D) standardized expert chunks
    masks: np.ndarray  # (N, H) 1.0 where the expert episode was still live
    standardizer: Standardizer
    normalizer: ObsNormalizer
    n_tasks: int


def build_training_arrays(
    config: dict,
    dataset: DemoDataset,
    standardizer: Standardizer | None = None,
    normalizer: ObsNormalizer | None = None,
) -> TrainingArrays:
    """Featurize the dataset; scalers are fitted here unless supplied.

    Supplying the scalers keeps later training stages (e.g. the draft)
    consistent with the ones frozen into an existing main checkpoint.
    """
    horizon = int(config["chunk"]["horizon"])
    n_tasks = len(variant_names(config))
    raw_chunks = np.stack([p.chunk_raw for p in dataset.pairs])
    if standardizer is None:
        standardizer = Standardizer.fit(raw_chunks.reshape(-1, LAYOUT.dim))
    world = np.stack([p.obs.world_features for p in dataset.pairs])
    state = np.stack([p.obs.robot_state for p in dataset.pairs])
    if normalizer is None:
        normalizer = ObsNormalizer.fit(world, state)
    onehot = np.zeros((len(dataset.pairs), n_tasks))
    for i, p in enumerate(dataset.pairs):
        onehot[i, p.obs.task_id] = 1.0
    norm_world = normalizer.norm_world(world)
    norm_state = normalizer.norm_state(state)
    masks = np.zeros((len(dataset.pairs), horizon))
    for i, p in enumerate(dataset.pairs):
        masks[i, : p.valid_steps] = 1.0
    return TrainingArrays(
        enc_inputs=np.concatenate([norm_world, onehot], axis=1),
        draft_features=np.concatenate([norm_world, onehot, norm_state], axis=1),
        states=norm_state,
        targets_std=standardizer.apply(raw_chunks.reshape(-1, LAYOUT.dim)).reshape(
            raw_chunks.shape
        ),
        masks=masks,
        standardizer=standardizer,
        normalizer=normalizer,
        n_tasks=n_tasks,
    )


def save_dataset(path: str | Path, dataset: DemoDataset, config: dict) -> None:
    """Persist training pairs and replayable demonstrations in the array container."""
    pairs = dataset.pairs
    demo_lengths = [d.actions.shape[0] for d in dataset.demos]
    offsets = np.concatenate([[0], np.cumsum(demo_lengths)]).astype(np.int64)
    arrays = {
        "pair.world": np.stack([p.obs.world_features for p in pairs]),
        "pair.state": np.stack([p.obs.robot_state for p in pairs]),
        "pair.task": np.array([p.obs.task_id for p in pairs], dtype=np.int64),
        "pair.chunk": np.stack([p.chunk_raw for p in pairs]),
        "pair.valid": np.array([p.valid_steps for p in pairs], dtype=np.int64),
        "demo.actions": (
            np.concatenate([d.actions for d in dataset.demos])
            if dataset.demos
            else np.zeros((0, LAYOUT.dim))
        ),
        "demo.offsets": offsets,
        "demo.object_x": np.array([d.initial_object_x for d in dataset.demos]),
        "demo.gripper": np.stack([d.initial_gripper for d in dataset.demos]),
        "demo.seed": np.array([d.seed for d in dataset.demos], dtype=np.int64),
        "demo.task": np.array([d.cfg.task_id for d in dataset.demos], dtype=np.int64),
        "demo.success": np.array(
            [1 if d.success else 0 for d in dataset.demos], dtype=np.int64
        ),
    }
    meta = {
        "kind": "dataset",
        "seed": dataset.seed,
        "speed": dataset.speed_name,
        "excluded_failures": dataset.excluded_failures,
        "variants": variant_names(config),
        "config_fingerprint": fingerprint(config),
    }
    ckpt.save_arrays(path, arrays, meta)


def load_dataset(path: str | Path, config: dict) -> DemoDataset:
    from ..conveyor import Demonstration, TrainingPair
    from ..flowpolicy import Observation

    arrays, meta = ckpt.load_arrays(path)
    if meta.get("kind") != "dataset":
        raise ckpt.CheckpointError(f"{path}: expected a dataset file")
    variants = meta["variants"]
    speed = meta["speed"]
    pairs = [
        TrainingPair(
            obs=Observation(
                world_features=arrays["pair.world"][i],
                task_id=int(arrays["pair.task"][i]),
                robot_state=arrays["pair.state"][i],
            ),
            chunk_raw=arrays["pair.chunk"][i],
            valid_steps=int(arrays["pair.valid"][i]),
        )
        for i in range(arrays["pair.task"].shape[0])
    ]
    demos = []
    offsets = arrays["demo.offsets"]
    for j in range(arrays["demo.seed"].shape[0]):
        task = int(arrays["demo.task"][j])
        cfg = make_env_config(config, variants[task], speed)
        demos.append(
            Demonstration(
                cfg=cfg,
                initial_object_x=float(arrays["demo.object_x"][j]),
                initial_gripper=arrays["demo.gripper"][j],
                actions=arrays["demo.actions"][offsets[j] : offsets[j + 1]],
                observations=[],  # not persisted; recoverable via replay()
                seed=int(arrays["demo.seed"][j]),
                speed_name=speed,
                success=bool(arrays["demo.success"][j]),
            )
        )
    return DemoDataset(
        pairs=pairs,
        demos=demos,
        excluded_failures=int(meta["excluded_failures"]),
        seed=int(meta["seed"]),
        speed_name=speed,
    )


def build_main_models(
    config: dict, arrays: TrainingArrays, rng: np.random.Generator
) -> tuple[ContextEncoder, VelocityField]:
    tm = config["train_main"]
    horizon = int(config["chunk"]["horizon"])
    embed = int(tm["embed_dim"])
    enc_sizes = [arrays.enc_inputs.shape[1], *[int(h) for h in tm["encoder_hidden"]], embed]
    encoder = ContextEncoder(
        net=init_mlp(enc_sizes, rng), n_tasks=arrays.n_tasks, normalizer=arrays.normalizer
    )
    state_dim = arrays.states.shape[1]
    field_in = horizon * LAYOUT.dim + 1 + encoder.embed_dim + state_dim
    field_sizes = [field_in, *[int(h) for h in tm["field_hidden"]], horizon * LAYOUT.dim]
    field = VelocityField(
        net=init_mlp(field_sizes, rng),
        horizon=horizon,
        dim=LAYOUT.dim,
        emb_dim=encoder.embed_dim,
        state_dim=state_dim,
        layout=LAYOUT,
    )
    return encoder, field


def train_main(
    config: dict, arrays: TrainingArrays
) -> tuple[ContextEncoder, VelocityField, list[float]]:
    tm = config["train_main"]
    rng = np.random.default_rng(np.random.SeedSequence([int(tm["seed"])]))
    encoder, field = build_main_models(config, arrays, rng)
    cfg = FlowTrainConfig(
        epochs=int(tm["epochs"]),
        learning_rate=float(tm["learning_rate"]),
        batch_size=int(tm["batch_size"]),
        weight_decay=float(tm["weight_decay"]),
    )
    losses = fit_flow_field(
        field, encoder, arrays.enc_inputs, arrays.states, arrays.targets_std, cfg, rng
    )
    return encoder, field, losses


def build_draft_model(
    config: dict, arrays: TrainingArrays, rng: np.random.Generator
) -> DraftModel:
    td = config["train_draft"]
    horizon = int(config["chunk"]["horizon"])
    sizes = [
        arrays.draft_features.shape[1],
        *[int(h) for h in td["hidden"]],
        horizon * LAYOUT.dim,
    ]
    return DraftModel(
        net=init_mlp(sizes, rng),
        layout=LAYOUT,
        horizon=horizon,
        n_tasks=arrays.n_tasks,
        normalizer=arrays.normalizer,
    )


def draft_train_config(config: dict) -> DraftTrainConfig:
    td = config["train_draft"]
    return DraftTrainConfig(
        huber_beta=float(td["huber_beta"]),
        gamma_prefix=float(td["gamma_prefix"]),
        tail_weight=float(td["tail_weight"]),
        max_prefix=int(td["max_prefix"]),
        learning_rate=float(td["learning_rate"]),
        weight_decay=float(td["weight_decay"]),
        epochs=int(td["epochs"]),
        batch_size=int(td["batch_size"]),
        target_source=str(td["target_source"]),
        val_fraction=float(td["val_fraction"]),
        select_steps=int(td["select_steps"]),
    )


def train_draft_model(
    config: dict,
    encoder: ContextEncoder,
    field: VelocityField,
    arrays: TrainingArrays,
) -> tuple[DraftModel, list[float]]:
    td = config["train_draft"]
    cfg = draft_train_config(config)
    rng = np.random.default_rng(np.random.SeedSequence([int(td["seed"])]))
    model = build_draft_model(config, arrays, rng)
    if cfg.target_source == "teacher":
        targets = teacher_targets(
            field,
            encoder,
            arrays.enc_inputs,
            arrays.states,
            DenoiseConfig(num_steps=int(config["denoise"]["num_steps"])),
            seed=int(td["seed"]),
        )
    else:
        targets = arrays.targets_std
    return train_draft(model, arrays.draft_features, targets, cfg, rng)


@dataclass
class PreparedModels:
    models: Models
    info: dict


def prepare_models(config: dict, models_dir: str | Path | None = None) -> PreparedModels:
    """Train (or load, if checkpoints exist) the full model bundle.

    The draft must stay strictly lighter than the main policy: the parameter
    ratio and a proposal-vs-denoise FLOP budget are asserted here.
    """
    main_path = draft_path = None
    if models_dir is not None:
        models_dir = Path(models_dir)
        models_dir.mkdir(parents=True, exist_ok=True)
        main_path = models_dir / "main.ckpt"
        draft_path = models_dir / "draft.ckpt"
    info: dict = {"config_fingerprint": fingerprint(config)}

    if main_path is not None and main_path.exists() and draft_path.exists():
        encoder, field, standardizer, meta = ckpt.load_main_checkpoint(main_path)
        draft_model, _ = ckpt.load_draft_checkpoint(draft_path)
        info["loaded_from"] = str(models_dir)
    else:
        dataset = build_dataset(config)
        arrays = build_training_arrays(config, dataset)
        encoder, field, losses = train_main(config, arrays)
        draft_model, rms_curve = train_draft_model(config, encoder, field, arrays)
        standardizer = arrays.standardizer
        info.update(
            {
                "dataset_pairs": len(dataset.pairs),
                "dataset_excluded_failures": dataset.excluded_failures,
                "flow_loss_first": losses[0],
                "flow_loss_last": losses[-1],
                "draft_val_rms_best": min(rms_curve),
            }
        )
        lineage = {
            "dataset_seed": int(config["dataset"]["seed"]),
            "main_seed": int(config["train_main"]["seed"]),
            "draft_seed": int(config["train_draft"]["seed"]),
        }
        if main_path is not None:
            ckpt.save_main_checkpoint(
                main_path,
                encoder,
                field,
                standardizer,
                meta={"train_config": config["train_main"], "seeds": lineage},
            )
            ckpt.save_draft_checkpoint(
                draft_path,
                draft_model,
                meta={"train_config": config["train_draft"], "seeds": lineage},
            )

    main_params = n_params(encoder.net) + n_params(field.net)
    draft_params = n_params(draft_model.net)
    info["main_params"] = main_params
    info["draft_params"] = draft_params
    if draft_params >= 0.5 * main_params:
        raise AssertionError(
            f"draft/main parameter ratio {draft_params / main_params:.3f} is not < 0.5"
        )
    denoise_flops = flop_count(field.net) * int(config["denoise"]["num_steps"])
    if flop_count(draft_model.net) >= denoise_flops / 5:
        raise AssertionError("draft proposal FLOPs are not below a fifth of a denoise pass")
    models = Models(
        encoder=encoder, field=field, standardizer=standardizer, draft=draft_model
    )
    return PreparedModels(models=models, info=info)


def runtime_policy(config: dict, mode: str | None = None) -> RuntimePolicy:
    ver = config["verifier"]
    run = config["runtime"]
    return RuntimePolicy(
        mode=mode if mode is not None else str(run["mode"]),
        replan_size=int(config["chunk"]["replan_size"]),
        periodic_refresh=int(run["periodic_refresh"]),
        phase_fallback=bool(run["phase_fallback"]),
        verifier_cfg=VerifierConfig(
            timesteps=tuple(float(t) for t in ver["timesteps"]),
            delta=float(ver["delta"]),
            metric=str(ver["metric"]),
            gripper_window=ver["gripper_window"],
        ),
        denoise_cfg=DenoiseConfig(num_steps=int(config["denoise"]["num_steps"])),
        prefix_cap=bool(run["prefix_cap"]),
        fallback_accounting=str(run["fallback_accounting"]),
    )


def episode_seed_for_trial(bench_seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([int(bench_seed), int(trial)]).generate_state(1)[0])


def run_single_episode(
    config: dict,
    models: Models,
    episode_seed: int,
    speed: str,
    variant: str,
    mode: str | None = None,
    profile_name: str | None = None,
):
    """One latency-coupled episode; returns (stats, RoundRecord list)."""
    env_cfg = make_env_config(config, variant, speed)
    env = ConveyorEnv.reset(
        env_cfg,
        np.random.default_rng(np.random.SeedSequence([int(episode_seed), _ENV_STREAM])),
    )
    policy = runtime_policy(config, mode=mode)
    profile = get_profile(profile_name or str(config["latency"]["profile"]))
    coupling = LatencyCoupling(tick_ms=float(config["latency"]["tick_ms"]))
    baseline = get_profile(str(config["latency"]["baseline_profile"])).full_total
    return run_episode(
        env, policy, models, profile, coupling, episode_seed, baseline_full_ms=baseline
    )


def condition_id(method_name: str, speed: str, variant: str) -> str:
    return f"{method_name}__{speed}__{variant}"


def run_benchmark(
    config: dict,
    models: Models,
    bench_seed: int,
    trials: int | None = None,
) -> tuple[SuiteReport, dict[str, list[dict]]]:
    """Run the configured (method x speed x variant) grid.

    Returns the report plus the per-condition trace records (one dict per
    round, annotated with condition and episode metadata). Episode seeds are
    shared across conditions so methods face identical worlds.
    """
    bench = config["bench"]
    n_trials = int(trials if trials is not None else bench["trials"])
    replan = int(config["chunk"]["replan_size"])
    baseline_ms = get_profile(str(config["latency"]["baseline_profile"])).full_total
    coupling = LatencyCoupling(tick_ms=float(config["latency"]["tick_ms"]))
    seeds = [episode_seed_for_trial(bench_seed, t) for t in range(n_trials)]

    conditions: list[ConditionResult] = []
    traces: dict[str, list[dict]] = {}
    episodes: list[dict] = []
    for method in bench["methods"]:
        profile = get_profile(str(method["profile"]))
        policy = runtime_policy(config, mode=str(method["mode"]))
        for speed in bench["speeds"]:
            for variant in bench["variants"]:
                cid = condition_id(str(method["name"]), speed, variant)
                env_cfg = make_env_config(config, variant, speed)
                trial_records: list[list[dict]] = []
                for trial, ep_seed in enumerate(seeds):
                    env = ConveyorEnv.reset(
                        env_cfg,
                        np.random.default_rng(
                            np.random.SeedSequence([int(ep_seed), _ENV_STREAM])
                        ),
                    )
                    stats, records = run_episode(
                        env,
                        policy,
                        models,
                        profile,
                        coupling,
                        ep_seed,
                        baseline_full_ms=baseline_ms,
                    )
                    recs = [
                        r.to_record(
                            condition_id=cid,
                            method=str(method["name"]),
                            mode=str(method["mode"]),
                            profile=profile.name,
                            speed=speed,
                            variant=variant,
                            trial=trial,
                            episode_seed=ep_seed,
                        )
                        for r in records
                    ]
                    trial_records.append(recs)
                    episodes.append(
                        {
                            "condition_id": cid,
                            "trial": trial,
                            "episode_seed": ep_seed,
                            "success": stats.success,
                            "rounds": stats.rounds,
                            "flash_rate": stats.flash_rate,
                            "acc": stats.acc,
                            "lat_ms": stats.lat_ms,
                            "per_action_ms": stats.per_action_ms,
                            "executed_actions": stats.executed_actions,
                        }
                    )
                meta = {
                    "condition_id": cid,
                    "method": str(method["name"]),
                    "mode": str(method["mode"]),
                    "profile": profile.name,
                    "speed": speed,
                    "variant": variant,
                }
                conditions.append(
                    condition_from_records(meta, trial_records, seeds, replan)
                )
                traces[cid] = [rec for trial in trial_records for rec in trial]

    final = apply_speedup(conditions, str(bench["baseline"]))
    report = SuiteReport(
        conditions=final,
        config_fingerprint=fingerprint(config),
        seed=int(bench_seed),
        code_version=__version__,
        replan_size=replan,
        episodes=episodes,
    )
    return report, traces

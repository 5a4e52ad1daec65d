"""Conveyor-intercept environment, analytic expert, and dataset generation.

A 2-D kinematic world: an object rides a belt along ``y = belt_y`` at a fixed
speed per tick, a point gripper moves by clamped position deltas, and the
gripper channel toggles open/closed by thresholding the command at zero. The
episode succeeds when the gripper closes within the grasp radius of the
object and later opens within the same radius of the bin, before the object
leaves the workspace or the tick budget runs out.

Latency-coupled control is what this world exists to stress: while a policy
"thinks", the belt keeps moving, so stale chunks close behind the object.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .actions import RAW, ActionChunk, ChannelLayout
from .flowpolicy import Observation

LAYOUT = ChannelLayout(pos_dims=2, rot_dims=0)

PHASE_APPROACH = "approach"
PHASE_GRASP = "grasp"
PHASE_TRANSPORT = "transport"
PHASE_RELEASE = "release"
PHASE_DONE = "done"

OPEN = -1.0
CLOSED = 1.0


@dataclass(frozen=True)
class SpeedGrid:
    """Named belt speeds in the benchmark's reporting units, mapped to env units/tick."""

    speeds: dict[str, float] = field(
        default_factory=lambda: {"demo": 6.0, "medium": 10.0, "high": 13.0, "extra_high": 15.0}
    )
    scale: float = 0.004  # env units/tick per reporting unit

    def __post_init__(self) -> None:
        vals = list(self.speeds.values())
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("speed grid must be strictly increasing")
        if self.scale <= 0.0:
            raise ValueError("speed scale must be positive")

    def units_per_tick(self, name: str) -> float:
        if name not in self.speeds:
            raise KeyError(f"unknown speed {name!r}; grid: {sorted(self.speeds)}")
        return self.speeds[name] * self.scale

    @property
    def names(self) -> list[str]:
        return list(self.speeds)


@dataclass(frozen=True)
class EnvConfig:
    belt_speed: float  # units per tick
    grasp_radius: float
    variant: str = "large"
    task_id: int = 0
    x_min: float = 0.0
    x_max: float = 8.0
    y_min: float = -3.0
    y_max: float = 3.0
    belt_y: float = 0.0
    object_start_min: float = 0.4
    object_start_max: float = 1.2
    gripper_home_x: float = 4.0
    gripper_home_y: float = 2.0
    gripper_jitter: float = 0.25
    bin_x: float = 1.2
    bin_y: float = -2.0
    max_step: float = 0.3
    max_ticks: int = 500


class ConveyorEnv:
    """Mutable episode state; one instance is strictly single-threaded."""

    def __init__(self, cfg: EnvConfig, object_x: float, gripper_pos: np.ndarray) -> None:
        self.cfg = cfg
        self.tick = 0
        self.object_pos = np.array([object_x, cfg.belt_y])
        self.gripper_pos = np.asarray(gripper_pos, dtype=np.float64).copy()
        self.gripper_state = OPEN
        self.holding = False
        self.terminal = False
        self.success = False
        self.phase = PHASE_APPROACH

    @classmethod
    def reset(cls, cfg: EnvConfig, rng: np.random.Generator) -> "ConveyorEnv":
        """Seeded initial state: object start and gripper home jitter."""
        object_x = rng.uniform(cfg.object_start_min, cfg.object_start_max)
        jitter = rng.uniform(-cfg.gripper_jitter, cfg.gripper_jitter, size=2)
        gripper = np.array([cfg.gripper_home_x, cfg.gripper_home_y]) + jitter
        return cls(cfg, object_x, gripper)

    def clone(self) -> "ConveyorEnv":
        return copy.deepcopy(self)

    @property
    def bin_pos(self) -> np.ndarray:
        return np.array([self.cfg.bin_x, self.cfg.bin_y])

    def observe(self) -> Observation:
        belt_vx = 0.0 if (self.holding or self.terminal) else self.cfg.belt_speed
        world = np.array(
            [self.object_pos[0], self.object_pos[1], belt_vx, self.cfg.bin_x, self.cfg.bin_y]
        )
        state = np.array([self.gripper_pos[0], self.gripper_pos[1], self.gripper_state])
        return Observation(world_features=world, task_id=self.cfg.task_id, robot_state=state)

    def hold_action(self) -> np.ndarray:
        """No motion, gripper command keeps the current state."""
        return np.array([0.0, 0.0, self.gripper_state])

    def _clamp_move(self, delta: np.ndarray) -> np.ndarray:
        norm = float(np.hypot(delta[0], delta[1]))
        if norm > self.cfg.max_step:
            delta = delta * (self.cfg.max_step / norm)
        return delta

    def step(self, action: np.ndarray) -> tuple[Observation, str, bool]:
        """Advance one control tick under a raw per-step action [dx, dy, g]."""
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (LAYOUT.dim,):
            raise ValueError(f"action must have shape ({LAYOUT.dim},)")
        if self.terminal:
            return self.observe(), self.phase, True
        cfg = self.cfg

        # 1. gripper motion, clamped per tick and to the workspace
        move = self._clamp_move(a[:2])
        self.gripper_pos = np.array(
            [
                min(max(self.gripper_pos[0] + move[0], cfg.x_min), cfg.x_max),
                min(max(self.gripper_pos[1] + move[1], cfg.y_min), cfg.y_max),
            ]
        )

        # 2. gripper command thresholded at zero
        prev_state = self.gripper_state
        self.gripper_state = CLOSED if a[2] > 0.0 else OPEN
        close_edge = prev_state == OPEN and self.gripper_state == CLOSED
        open_edge = prev_state == CLOSED and self.gripper_state == OPEN

        # 3. grasp/release rules (evaluated before the belt advances)
        if close_edge and not self.holding:
            if float(np.linalg.norm(self.gripper_pos - self.object_pos)) <= cfg.grasp_radius:
                self.holding = True
        elif open_edge and self.holding:
            self.holding = False
            if float(np.linalg.norm(self.gripper_pos - self.bin_pos)) <= cfg.grasp_radius:
                self.success = True
                self.terminal = True
                self.phase = PHASE_RELEASE
            else:
                self.terminal = True  # dropped away from the bin

        # 4. object kinematics
        if self.holding:
            self.object_pos = self.gripper_pos.copy()
        elif not self.terminal:
            self.object_pos = self.object_pos + np.array([cfg.belt_speed, 0.0])

        # 5. terminal checks
        self.tick += 1
        if not self.terminal:
            if not self.holding and self.object_pos[0] > cfg.x_max:
                self.terminal = True  # object left the reachable region
            elif self.tick >= cfg.max_ticks:
                self.terminal = True

        if self.terminal:
            if self.phase != PHASE_RELEASE or not self.success:
                self.phase = PHASE_DONE
            else:
                self.phase = PHASE_DONE
        elif self.holding:
            self.phase = PHASE_TRANSPORT
        elif self.gripper_state == CLOSED:
            self.phase = PHASE_GRASP
        else:
            self.phase = PHASE_APPROACH
        return self.observe(), self.phase, self.terminal


_GRASP_TRIGGER = 0.12  # close once the chased object is this close
_RELEASE_TRIGGER = 0.05  # open once this close to the bin
_RAMP_ZONE = 0.6  # final bin approach switches to a constant slow ramp here
_RAMP_SPEED = 0.05  # slow-ramp speed: open-timing errors cost this much per step
_CHASE_FLOOR = 0.05  # minimum overtake speed above the belt during the chase
_CHASE_CAP = 0.10  # maximum overtake speed: the grasp happens at low closure
_CHASE_GAIN = 0.35
_BEHIND_OFFSET = 0.6  # the transit lands this far upstream of the object's path
_PURSUIT_GAIN = 0.35
_TRANSIT_CAP = 0.2  # expert cruise speed, below the hardware step limit


def _pursuit_step(gap: np.ndarray, cap: float) -> np.ndarray:
    step = _PURSUIT_GAIN * gap
    norm = float(np.hypot(step[0], step[1]))
    if norm > cap:
        step = step * (cap / norm)
    return step


def expert_action(env: ConveyorEnv) -> np.ndarray:
    """One step of the analytic tail-chase controller.

    The gripper transits to a landing point slightly upstream of where the
    object will pass, then overtakes it from behind at a small speed margin
    above the belt and closes once the gap undercuts the trigger. Chasing
    from behind makes late closes harmless (the gripper is still gaining on
    the object), keeps the closure rate nearly belt-speed independent (the
    margin, not the belt, sets it), and turns inference latency into the
    classic failure: while the policy thinks, the object slips ahead, so a
    stale close fires with the object a stall's worth of belt travel out of
    reach. The release approaches the static bin through a constant slow
    ramp, and the gripper departs the belt slowly right after the grasp, so
    all rows flanking a gripper transition are low-speed and easy to imitate.
    """
    cfg = env.cfg
    if env.terminal:
        return env.hold_action()
    if env.holding:
        to_bin = env.bin_pos - env.gripper_pos
        d_bin = float(np.linalg.norm(to_bin))
        if d_bin <= _RELEASE_TRIGGER:
            return np.array([to_bin[0], to_bin[1], OPEN])  # parked at the bin: release
        if abs(env.gripper_pos[1] - cfg.belt_y) < _RAMP_ZONE:
            # depart slowly right after the grasp: rows adjacent to the close
            # stay low-speed, so transition blur cannot drag the grasp point
            step = to_bin * (_RAMP_SPEED / d_bin)
        elif d_bin <= _RAMP_ZONE:
            step = to_bin * (_RAMP_SPEED / d_bin) if d_bin > _RAMP_SPEED else to_bin
        else:
            step = _pursuit_step(to_bin, _TRANSIT_CAP)
        step = env._clamp_move(step)
        return np.array([step[0], step[1], CLOSED])
    to_obj = env.object_pos - env.gripper_pos
    d_obj = float(np.linalg.norm(to_obj))
    if d_obj <= _GRASP_TRIGGER:
        return np.array([to_obj[0], to_obj[1], CLOSED])  # chased into reach: grasp
    if env.object_pos[0] >= env.gripper_pos[0] - _GRASP_TRIGGER:
        # the object is ahead: overtake it along the belt at a small margin
        excess = min(max(_CHASE_GAIN * d_obj, _CHASE_FLOOR), _CHASE_CAP)
        direction = to_obj / d_obj
        step = env._clamp_move(direction * excess + np.array([cfg.belt_speed, 0.0]))
        return np.array([step[0], step[1], OPEN])
    step = env._clamp_move(_pursuit_step(_landing_point(env) - env.gripper_pos, _TRANSIT_CAP))
    return np.array([step[0], step[1], OPEN])


def _landing_point(env: ConveyorEnv) -> np.ndarray:
    """Belt position slightly upstream of the object's path, reachable in time.

    Solved as a fixed point: the earliest spot a transit at cruise speed can
    occupy while the object is still ``_BEHIND_OFFSET`` short of it, so the
    chase starts from behind the moment the gripper lands.
    """
    cfg = env.cfg
    for t in range(1, cfg.max_ticks):
        spot = env.object_pos + np.array(
            [cfg.belt_speed * t - _BEHIND_OFFSET, 0.0]
        )
        if float(np.linalg.norm(spot - env.gripper_pos)) <= _TRANSIT_CAP * t:
            return spot
    return env.object_pos  # unreachable; chase directly


def expert_chunk(env: ConveyorEnv, horizon: int) -> tuple[np.ndarray, int]:
    """Roll the expert ``horizon`` steps on a cloned environment.

    Returns the raw H x D action matrix and the number of steps executed
    before the clone terminated; rows past that point are hold actions
    (zero motion, gripper kept open).
    """
    sim = env.clone()
    values = np.zeros((horizon, LAYOUT.dim))
    valid = 0
    for h in range(horizon):
        if not sim.terminal:
            valid = h + 1
        a = expert_action(sim)
        values[h] = a
        sim.step(a)
    return values, valid


@dataclass
class Demonstration:
    """A replayable expert episode: initial state, actions, and observations."""

    cfg: EnvConfig
    initial_object_x: float
    initial_gripper: np.ndarray
    actions: np.ndarray  # (T, D) raw
    observations: list[Observation]
    seed: int
    speed_name: str
    success: bool

    def start_env(self) -> ConveyorEnv:
        return ConveyorEnv(self.cfg, self.initial_object_x, self.initial_gripper.copy())


def replay(demo: Demonstration) -> list[Observation]:
    """Re-execute a demonstration's actions from its initial state."""
    env = demo.start_env()
    obs = [env.observe()]
    for a in demo.actions:
        next_obs, _, _ = env.step(a)
        obs.append(next_obs)
    return obs


@dataclass
class TrainingPair:
    """One replanning point: the observation and the next H expert actions."""

    obs: Observation
    chunk_raw: np.ndarray  # (H, D)
    valid_steps: int

    def chunk(self) -> ActionChunk:
        return ActionChunk(values=self.chunk_raw, layout=LAYOUT, space=RAW)


def run_expert_episode(
    cfg: EnvConfig, seed: int, horizon: int, replan: int, speed_name: str = "demo"
) -> tuple[Demonstration, list[TrainingPair]]:
    """Expert episode with zero-latency open-loop replanning every ``replan`` steps.

    At each replanning point the expert plans a fresh H-step chunk and
    executes its first ``replan`` actions, mirroring how the learned policy
    will be deployed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    env = ConveyorEnv.reset(cfg, rng)
    demo_actions: list[np.ndarray] = []
    observations = [env.observe()]
    pairs: list[TrainingPair] = []
    while not env.terminal:
        chunk, valid = expert_chunk(env, horizon)
        pairs.append(TrainingPair(obs=env.observe(), chunk_raw=chunk, valid_steps=valid))
        for h in range(min(replan, horizon)):
            if env.terminal:
                break
            obs, _, _ = env.step(chunk[h])
            demo_actions.append(chunk[h])
            observations.append(obs)
    demo = Demonstration(
        cfg=cfg,
        initial_object_x=pairs[0].obs.world_features[0] if pairs else env.object_pos[0],
        initial_gripper=np.asarray(observations[0].robot_state[:2]).copy(),
        actions=np.array(demo_actions) if demo_actions else np.zeros((0, LAYOUT.dim)),
        observations=observations,
        seed=seed,
        speed_name=speed_name,
        success=env.success,
    )
    return demo, pairs


@dataclass
class DemoDataset:
    pairs: list[TrainingPair]
    demos: list[Demonstration]
    excluded_failures: int
    seed: int
    speed_name: str


def generate_dataset(
    make_cfg,
    variants: list[str],
    episodes_per_variant: int,
    horizon: int,
    replan: int,
    seed: int,
    speed_name: str = "demo",
) -> DemoDataset:
    """Seeded expert dataset across object variants; failed episodes are dropped.

    ``make_cfg(variant)`` must return the EnvConfig for a variant at the
    dataset's belt speed. Regenerating with the same seed is bit-identical.
    """
    pairs: list[TrainingPair] = []
    demos: list[Demonstration] = []
    excluded = 0
    for v_index, variant in enumerate(variants):
        cfg = make_cfg(variant)
        for e in range(episodes_per_variant):
            episode_seed = seed + 10_000 * v_index + e
            demo, ep_pairs = run_expert_episode(cfg, episode_seed, horizon, replan, speed_name)
            if not demo.success:
                excluded += 1
                continue
            demos.append(demo)
            pairs.extend(ep_pairs)
    if not pairs:
        raise RuntimeError("expert produced no successful episodes; check env config")
    return DemoDataset(
        pairs=pairs, demos=demos, excluded_failures=excluded, seed=seed, speed_name=speed_name
    )

"""Deterministic 2D manipulation world.

An agent (disk) moves in the unit square under velocity commands, grabs
the instructed object by proximity, and carries it to a goal corner.
The dynamic variant drifts non-carried objects along a belt velocity.
Inverse dynamics is exactly linear, which gives every learned-action
test an analytic ground truth.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DataError, NumericError, WorldError
from .serialization import dumps_17g, images_from_b64, images_to_b64

ACTION_LIMIT = 0.1
CONTACT_RADIUS = 0.04
SUCCESS_RADIUS = 0.05
BELT_LIMIT = 0.05

AGENT_RADIUS = 0.06
OBJECT_SIDE = 0.08
GOAL_OUTER = 0.12
GOAL_INNER = 0.08

BACKGROUND = (0.1, 0.1, 0.1)
AGENT_COLOR = (1.0, 1.0, 1.0)
GOAL_COLOR = (0.2, 0.85, 0.85)
PALETTE = (
    (0.9, 0.15, 0.15),
    (0.15, 0.8, 0.25),
    (0.2, 0.35, 0.95),
    (0.9, 0.8, 0.2),
)

GOAL_ANCHORS = (
    (0.15, 0.15),
    (0.85, 0.15),
    (0.15, 0.85),
    (0.85, 0.85),
)

# instruction token blocks over a 32-symbol vocabulary
VOCAB_SIZE = 32
_TEMPLATE_BASE = 1
_COLOR_BASE = 8
_TARGET_BASE = 16
N_TEMPLATES = 3


@dataclass(frozen=True)
class WorldObject:
    pos: tuple
    color_id: int
    movable: bool = True


@dataclass(frozen=True)
class WorldState:
    agent_pos: tuple
    objects: tuple
    goal_pos: tuple
    belt_velocity: tuple = (0.0, 0.0)
    time_step: int = 0

    def __post_init__(self):
        for p in (self.agent_pos, self.goal_pos, *(o.pos for o in self.objects)):
            if not (0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0):
                raise WorldError(f"position {p} outside unit square")
        if float(np.hypot(*self.belt_velocity)) > BELT_LIMIT + 1e-12:
            raise WorldError(f"belt velocity {self.belt_velocity} exceeds {BELT_LIMIT}")


@dataclass(frozen=True)
class InstructionSpec:
    template_id: int
    object_color_id: int
    target_id: int

    def tokens(self) -> tuple:
        toks = (
            _TEMPLATE_BASE + self.template_id,
            _COLOR_BASE + self.object_color_id,
            _TARGET_BASE + self.target_id,
        )
        if any(t < 0 or t >= VOCAB_SIZE for t in toks):
            raise ConfigError(f"instruction ids out of vocabulary: {self}")
        return toks


@dataclass
class Trajectory:
    observations: np.ndarray  # (T+1, H, W, 3) float32 in [0,1]
    actions: np.ndarray  # (T, 2)
    proprio: np.ndarray  # (T+1, 2)
    instruction: tuple
    success: bool


@dataclass
class WorldConfig:
    n_trajectories: int = 100
    horizon: int = 40
    dynamic_fraction: float = 0.0
    resolution: int = 32
    n_objects: int = 2
    belt_speed_min: float = 0.006
    belt_speed_max: float = 0.014

    def __post_init__(self):
        if self.resolution not in (16, 32, 64):
            raise ConfigError(f"unsupported resolution {self.resolution}")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ConfigError("dynamic_fraction must be in [0,1]")
        if self.belt_speed_max > BELT_LIMIT:
            raise ConfigError(f"belt_speed_max exceeds {BELT_LIMIT}")
        if self.n_objects < 1:
            raise ConfigError("scenes need at least one object")


@dataclass
class Dataset:
    manifest: dict
    trajectories: list = field(default_factory=list)


def _clamp01(v: np.ndarray) -> np.ndarray:
    return np.clip(v, 0.0, 1.0)


def step(state: WorldState, action) -> WorldState:
    """Advance one tick. Actions are clamped, never rejected."""
    a = np.clip(np.asarray(action, dtype=np.float64), -ACTION_LIMIT, ACTION_LIMIT)
    agent = np.asarray(state.agent_pos, dtype=np.float64)
    new_agent = _clamp01(agent + a)
    delta = new_agent - agent
    carried = [
        float(np.hypot(o.pos[0] - agent[0], o.pos[1] - agent[1])) <= CONTACT_RADIUS
        for o in state.objects
    ]
    belt = np.asarray(state.belt_velocity, dtype=np.float64)
    new_objects = []
    for o, c in zip(state.objects, carried):
        p = np.asarray(o.pos, dtype=np.float64)
        if c:
            p = _clamp01(p + delta)
        elif o.movable:
            p = _clamp01(p + belt)
        new_objects.append(WorldObject(tuple(p), o.color_id, o.movable))
    return WorldState(
        agent_pos=tuple(new_agent),
        objects=tuple(new_objects),
        goal_pos=state.goal_pos,
        belt_velocity=state.belt_velocity,
        time_step=state.time_step + 1,
    )


def render(state: WorldState, resolution: int = 32) -> np.ndarray:
    """Rasterize to (res, res, 3) float32 in [0,1].

    Pixel centers sit at (j + 0.5)/res, so a scene and its point-mirrored
    twin (positions p -> 1-p on a dyadic grid) render as exact 180-degree
    rotations of each other. Draw order: goal, objects, agent.
    """
    if resolution not in (16, 32, 64):
        raise ConfigError(f"unsupported resolution {resolution}")
    res = resolution
    centers = (np.arange(res, dtype=np.float64) + 0.5) / res
    x = centers[None, :]  # columns
    y = centers[:, None]  # rows, y grows downward
    img = np.empty((res, res, 3), dtype=np.float64)
    img[:] = BACKGROUND

    gx, gy = state.goal_pos
    outer = np.maximum(np.abs(x - gx), np.abs(y - gy)) <= GOAL_OUTER / 2
    inner = np.maximum(np.abs(x - gx), np.abs(y - gy)) <= GOAL_INNER / 2
    img[outer & ~inner] = GOAL_COLOR

    for o in state.objects:
        ox, oy = o.pos
        m = np.maximum(np.abs(x - ox), np.abs(y - oy)) <= OBJECT_SIDE / 2
        img[m] = PALETTE[o.color_id % len(PALETTE)]

    ax, ay = state.agent_pos
    m = (x - ax) ** 2 + (y - ay) ** 2 <= AGENT_RADIUS**2
    img[m] = AGENT_COLOR

    # quantize to the uint8 lattice so rendered and round-tripped images match
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return u8.astype(np.float32) / 255.0


def _target_object(state: WorldState, instruction: InstructionSpec):
    for o in state.objects:
        if o.color_id == instruction.object_color_id:
            return o
    raise WorldError(f"no object with color {instruction.object_color_id} in scene")


def is_carried(state: WorldState, obj: WorldObject) -> bool:
    return float(np.hypot(obj.pos[0] - state.agent_pos[0], obj.pos[1] - state.agent_pos[1])) <= CONTACT_RADIUS


def is_success(state: WorldState, instruction: InstructionSpec) -> bool:
    obj = _target_object(state, instruction)
    near_goal = float(np.hypot(obj.pos[0] - state.goal_pos[0], obj.pos[1] - state.goal_pos[1])) <= SUCCESS_RADIUS
    return near_goal and is_carried(state, obj)


def scripted_expert(state: WorldState, instruction: InstructionSpec) -> np.ndarray:
    """Proportional controller: approach the instructed object, then the goal.

    On belt scenes the grasp waypoint is the object's position extrapolated
    one step ahead.
    """
    obj = _target_object(state, instruction)
    if is_carried(state, obj):
        waypoint = np.asarray(state.goal_pos, dtype=np.float64)
    else:
        waypoint = np.asarray(obj.pos, dtype=np.float64)
        if obj.movable and (state.belt_velocity[0] != 0.0 or state.belt_velocity[1] != 0.0):
            waypoint = waypoint + np.asarray(state.belt_velocity, dtype=np.float64)
    raw = 0.5 * (waypoint - np.asarray(state.agent_pos, dtype=np.float64))
    return np.clip(raw, -ACTION_LIMIT, ACTION_LIMIT)


def oracle_inverse_dynamics(prev: WorldState, nxt: WorldState) -> np.ndarray:
    """Exact action recovery for unclamped adjacent transitions."""
    if nxt.time_step != prev.time_step + 1:
        raise WorldError(f"states are not adjacent: {prev.time_step} -> {nxt.time_step}")
    delta = np.asarray(nxt.agent_pos, dtype=np.float64) - np.asarray(prev.agent_pos, dtype=np.float64)
    if np.any(np.abs(delta) > ACTION_LIMIT + 1e-12):
        raise WorldError(f"delta {delta} exceeds the action limit; transition not reachable")
    for c in nxt.agent_pos:
        if c == 0.0 or c == 1.0:
            raise WorldError("next state touches the boundary; clamping makes the action ambiguous")
    return delta


def sample_scene(cfg: WorldConfig, rng: np.random.Generator) -> tuple:
    """Random solvable scene + instruction. Positions keep a margin from
    walls and from each other so expert rollouts never clamp."""
    agent = rng.uniform(0.12, 0.88, size=2)
    colors = rng.choice(len(PALETTE), size=cfg.n_objects, replace=False)
    positions = []
    for _ in range(cfg.n_objects):
        for _attempt in range(1000):
            p = rng.uniform(0.18, 0.82, size=2)
            ok = np.hypot(*(p - agent)) > 0.12 and all(np.hypot(*(p - q)) > 0.14 for q in positions)
            if ok:
                positions.append(p)
                break
        else:
            raise WorldError("could not place objects with required separation")
    objects = tuple(WorldObject(tuple(p), int(c)) for p, c in zip(positions, colors))
    target_id = int(rng.integers(0, len(GOAL_ANCHORS)))
    goal = GOAL_ANCHORS[target_id]
    if rng.uniform() < cfg.dynamic_fraction:
        ang = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(cfg.belt_speed_min, cfg.belt_speed_max)
        belt = (speed * np.cos(ang), speed * np.sin(ang))
    else:
        belt = (0.0, 0.0)
    which = int(rng.integers(0, cfg.n_objects))
    instr = InstructionSpec(
        template_id=int(rng.integers(0, N_TEMPLATES)),
        object_color_id=int(objects[which].color_id),
        target_id=target_id,
    )
    state = WorldState(tuple(agent), objects, goal, belt)
    return state, instr


def rollout_expert(cfg: WorldConfig, state: WorldState, instr: InstructionSpec) -> Trajectory:
    obs = [render(state, cfg.resolution)]
    proprio = [np.asarray(state.agent_pos, dtype=np.float64)]
    actions = []
    success = False
    for _ in range(cfg.horizon):
        a = scripted_expert(state, instr)
        state = step(state, a)
        actions.append(a)
        obs.append(render(state, cfg.resolution))
        proprio.append(np.asarray(state.agent_pos, dtype=np.float64))
        if is_success(state, instr):
            success = True
            break
    return Trajectory(
        observations=np.stack(obs).astype(np.float32),
        actions=np.asarray(actions, dtype=np.float64),
        proprio=np.stack(proprio),
        instruction=instr.tokens(),
        success=success,
    )


def generate_dataset(cfg: WorldConfig, seed: int) -> Dataset:
    """Pure function of (config, seed); per-trajectory RNG is seeded with
    (seed, index) so order of generation cannot matter."""
    if cfg.n_trajectories <= 0:
        raise ConfigError("n_trajectories must be positive")
    trajs = []
    for i in range(cfg.n_trajectories):
        rng = np.random.default_rng((seed, i))
        state, instr = sample_scene(cfg, rng)
        trajs.append(rollout_expert(cfg, state, instr))
    manifest = {
        "version": "f1lab-ds-1",
        "seed": int(seed),
        "config": asdict(cfg),
        "count": len(trajs),
        "image_shape": [cfg.resolution, cfg.resolution, 3],
        "success_count": int(sum(t.success for t in trajs)),
    }
    return Dataset(manifest=manifest, trajectories=trajs)


def save_dataset(ds: Dataset, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        f.write(dumps_17g(ds.manifest, indent=1))
        f.write("\n")
    with open(os.path.join(path, "trajs.jsonl"), "w") as f:
        for t in ds.trajectories:
            rec = {
                "instruction": list(t.instruction),
                "success": bool(t.success),
                "actions": t.actions,
                "proprio": t.proprio,
                "obs_shape": list(t.observations.shape),
                "obs_b64": images_to_b64(t.observations),
            }
            f.write(dumps_17g(rec))
            f.write("\n")


def load_dataset(path: str) -> Dataset:
    mpath = os.path.join(path, "manifest.json")
    tpath = os.path.join(path, "trajs.jsonl")
    if not (os.path.exists(mpath) and os.path.exists(tpath)):
        raise DataError(f"{path} is not a dataset directory")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("version") != "f1lab-ds-1":
        raise DataError(f"unknown dataset version {manifest.get('version')!r}")
    trajs = []
    with open(tpath) as f:
        for line in f:
            rec = json.loads(line)
            obs = images_from_b64(rec["obs_b64"], rec["obs_shape"])
            actions = np.asarray(rec["actions"], dtype=np.float64)
            if actions.size and np.abs(actions).max() > ACTION_LIMIT + 1e-12:
                raise DataError("dataset action exceeds limit")
            trajs.append(
                Trajectory(
                    observations=obs,
                    actions=actions.reshape(-1, 2),
                    proprio=np.asarray(rec["proprio"], dtype=np.float64),
                    instruction=tuple(rec["instruction"]),
                    success=bool(rec["success"]),
                )
            )
    if len(trajs) != manifest.get("count"):
        raise DataError(f"manifest count {manifest.get('count')} != {len(trajs)} records")
    return Dataset(manifest=manifest, trajectories=trajs)

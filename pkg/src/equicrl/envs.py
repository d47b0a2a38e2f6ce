"""Planar grid manipulation suite: four task groups, each a D2 orbit.

Tasks live on a 15x15 cell arena with centered integer coordinates
x = col - 7 (rightward), y = row - 7 (downward in the image).  The odd side
length keeps reflections exact bijections with a fixed center, which the
strided equivariant convolutions require.

Groups: goal reach (goal only in the auxiliary vector), button press
(press with a closed gripper), drawer close (push the drawer shut along
its axis), plate slide (push the plate onto the drawn goal marker).
Reflections/rotation of a task give its orbit siblings; dynamics and
rewards commute with the group action exactly, by construction on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .groups import GroupElement, SpatialAction, compose, d2, elements, inverse

ARENA = 15
HALF = ARENA // 2
GROUPS = ("reach", "press", "close", "slide")

SHAPING_COEF = 0.1
SUCCESS_BONUS = 10.0
DEAD_ZONE = 0.3
GRIP_CLOSED = -0.5
DEFAULT_HORIZON = 100

# plane intensities: static scene content renders much brighter than the
# moving agent so group identity dominates behavior noise in feature space
AGENT_VALUE = 0.3
OBJECT_VALUE = 5.0
INNER_VALUE = 3.0
FIXTURE_VALUE = 2.0
GOAL_VALUE = 5.0

# image planes
P_AGENT, P_OBJECT, P_GOAL, P_WALLS = 0, 1, 2, 3
N_PLANES = 4

_BASE = {
    "reach": {"goal": (5, 2)},
    "press": {"button": (4, 4)},
    "close": {"front": (2, 3), "axis": (0, 1), "travel": 2},
    "slide": {"plate": (-3, -2), "goal": (3, 2)},
}

_D2 = d2()
_ACTION = SpatialAction(_D2)


def _rot(g: GroupElement, pos) -> tuple[int, int]:
    m = _ACTION.coord_matrix(g)
    x, y = pos
    return (int(m[0, 0] * x + m[0, 1] * y), int(m[1, 0] * x + m[1, 1] * y))


@dataclass(frozen=True)
class TaskInstance:
    """One task variant: a group id plus the orbit element applied to the base."""

    group: str
    orbit: GroupElement = field(default_factory=_D2.identity)
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown task group {self.group!r}")

    def placement(self) -> dict:
        base = _BASE[self.group]
        g = self.orbit
        out = {}
        for key, val in base.items():
            out[key] = _rot(g, val) if isinstance(val, tuple) else val
        return out


def make_task(group: str, orbit_index: int = 0,
              horizon: int = DEFAULT_HORIZON) -> TaskInstance:
    return TaskInstance(group, _D2.element(orbit_index), horizon)


def transform_task(task: TaskInstance, g: GroupElement) -> TaskInstance:
    """The orbit sibling reached by applying g on top of the task's element."""
    return replace(task, orbit=compose(g, task.orbit))


def task_orbit(task: TaskInstance) -> list[TaskInstance]:
    return [transform_task(task, g) for g in elements(_D2)]


@dataclass
class Observation:
    """Agent-facing observation; carries no task-group information."""

    image: np.ndarray          # (4, 15, 15) current occupancy planes
    initial_image: np.ndarray  # same planes captured at reset
    state: np.ndarray          # (x, y, z, gripper), coordinates in [-1, 1]
    auxiliary: np.ndarray      # goal 3-vector, zero outside the reach group


@dataclass
class EnvState:
    agent: tuple[int, int]
    gripper: float
    t: int
    succeeded: bool
    button: tuple[int, int] | None = None
    front: tuple[int, int] | None = None
    axis: tuple[int, int] | None = None
    closed_pos: tuple[int, int] | None = None
    plate: tuple[int, int] | None = None
    goal: tuple[int, int] | None = None


def transform_state(g: GroupElement, s: EnvState) -> EnvState:
    def tp(p):
        return None if p is None else _rot(g, p)
    return EnvState(agent=tp(s.agent), gripper=s.gripper, t=s.t,
                    succeeded=s.succeeded, button=tp(s.button), front=tp(s.front),
                    axis=tp(s.axis), closed_pos=tp(s.closed_pos),
                    plate=tp(s.plate), goal=tp(s.goal))


def transform_action(g: GroupElement, action: np.ndarray) -> np.ndarray:
    """K_g: sign flips on the x/y deltas, z and gripper untouched."""
    m = _ACTION.coord_matrix(g)
    out = np.array(action, dtype=np.float64)
    out[0], out[1] = m[0, 0] * action[0] + m[0, 1] * action[1], \
        m[1, 0] * action[0] + m[1, 1] * action[1]
    return out


def transform_observation(g: GroupElement, obs: Observation) -> Observation:
    m = _ACTION.coord_matrix(g)
    signs4 = np.array([m[0, 0], m[1, 1], 1.0, 1.0])
    signs3 = np.array([m[0, 0], m[1, 1], 1.0])
    return Observation(image=_ACTION.apply(g, obs.image),
                       initial_image=_ACTION.apply(g, obs.initial_image),
                       state=obs.state * signs4,
                       auxiliary=obs.auxiliary * signs3)


def _dist(a, b) -> float:
    return float(np.hypot(abs(a[0] - b[0]), abs(a[1] - b[1])))


def _clip_cell(p) -> tuple[int, int]:
    return (int(np.clip(p[0], -HALF, HALF)), int(np.clip(p[1], -HALF, HALF)))


def _in_arena(p) -> bool:
    return abs(p[0]) <= HALF and abs(p[1]) <= HALF


def _step_of(delta: float) -> int:
    if delta > DEAD_ZONE:
        return 1
    if delta < -DEAD_ZONE:
        return -1
    return 0


class TaskEnv:
    """Deterministic single-task environment over integer cells."""

    def __init__(self, task: TaskInstance):
        self.task = task
        self.state: EnvState | None = None
        self._initial_image: np.ndarray | None = None

    # -- episode control -------------------------------------------------

    def reset(self, seed: int) -> Observation:
        rng = np.random.default_rng(seed)
        jitter = tuple(int(v) for v in rng.integers(-1, 2, size=2))
        start = _rot(self.task.orbit, jitter)
        place = self.task.placement()
        self.state = EnvState(agent=start, gripper=0.0, t=0, succeeded=False)
        if self.task.group == "press":
            self.state.button = place["button"]
        elif self.task.group == "close":
            self.state.front = place["front"]
            self.state.axis = place["axis"]
            travel = place["travel"]
            self.state.closed_pos = (place["front"][0] + travel * place["axis"][0],
                                     place["front"][1] + travel * place["axis"][1])
        elif self.task.group == "slide":
            self.state.plate = place["plate"]
            self.state.goal = place["goal"]
        elif self.task.group == "reach":
            self.state.goal = place["goal"]
        self._initial_image = self._render()
        return self.observe()

    def get_state(self) -> EnvState:
        return replace(self.state)

    def set_state(self, state: EnvState):
        self.state = replace(state)
        if self._initial_image is None:
            self._initial_image = self._render()

    # -- observation -----------------------------------------------------

    def _render(self) -> np.ndarray:
        img = np.zeros((N_PLANES, ARENA, ARENA))
        img[P_WALLS, 0, :] = img[P_WALLS, -1, :] = 1.0
        img[P_WALLS, :, 0] = img[P_WALLS, :, -1] = 1.0
        s = self.state

        def put(plane, pos, value):
            img[plane, pos[1] + HALF, pos[0] + HALF] = value

        put(P_AGENT, s.agent, AGENT_VALUE)
        if s.button is not None:
            put(P_OBJECT, s.button, OBJECT_VALUE)
            # console the button sits on
            bx, by = s.button
            for cell in ((bx - 1, by), (bx + 1, by), (bx, by + (1 if by > 0 else -1))):
                if _in_arena(cell):
                    put(P_OBJECT, cell, FIXTURE_VALUE)
        if s.front is not None:
            put(P_OBJECT, s.front, OBJECT_VALUE)
            inner = (s.front[0] + s.axis[0], s.front[1] + s.axis[1])
            put(P_OBJECT, inner, INNER_VALUE)
            # cabinet the drawer slides into: a row behind the closed position
            px, py = -s.axis[1], s.axis[0]
            back = (s.closed_pos[0] + s.axis[0], s.closed_pos[1] + s.axis[1])
            for cell in ((back[0] - px, back[1] - py), back, (back[0] + px, back[1] + py)):
                if _in_arena(cell):
                    put(P_OBJECT, cell, FIXTURE_VALUE)
        if s.plate is not None:
            put(P_OBJECT, s.plate, OBJECT_VALUE)
        if self.task.group == "slide":
            put(P_GOAL, s.goal, GOAL_VALUE)
            gx, gy = s.goal
            for cell in ((gx - 1, gy), (gx + 1, gy), (gx, gy - 1), (gx, gy + 1)):
                if _in_arena(cell):
                    put(P_GOAL, cell, FIXTURE_VALUE)
        return img

    def observe(self) -> Observation:
        s = self.state
        state_vec = np.array([s.agent[0] / HALF, s.agent[1] / HALF, 0.0, s.gripper])
        if self.task.group == "reach":
            aux = np.array([s.goal[0] / HALF, s.goal[1] / HALF, 0.0])
        else:
            aux = np.zeros(3)
        return Observation(image=self._render(), initial_image=self._initial_image.copy(),
                           state=state_vec, auxiliary=aux)

    # -- dynamics ----------------------------------------------------------

    def _drawer_cells(self, s: EnvState) -> set:
        inner = (s.front[0] + s.axis[0], s.front[1] + s.axis[1])
        return {s.front, inner}

    def _move(self, s: EnvState, step: tuple[int, int]) -> EnvState:
        """Pure transition on cells; task interactions resolved here."""
        target = _clip_cell((s.agent[0] + step[0], s.agent[1] + step[1]))
        if self.task.group == "slide" and target == s.plate:
            pushed = (s.plate[0] + step[0], s.plate[1] + step[1])
            if _in_arena(pushed):
                s.plate = pushed
                s.agent = target
            return s  # blocked push: nobody moves
        if self.task.group == "close":
            closed = s.front == s.closed_pos
            if target == s.front:
                if step == s.axis and not closed:
                    s.front = (s.front[0] + s.axis[0], s.front[1] + s.axis[1])
                    s.agent = target
                return s  # pushing off-axis or a shut drawer: blocked
            if target in self._drawer_cells(s):
                return s
        s.agent = target
        return s

    def step(self, action) -> tuple[Observation, float, bool, dict]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (4,):
            raise ValueError("action must be a 4-vector (dx, dy, dz, gripper)")
        action = np.clip(action, -1.0, 1.0)
        s = self.state
        step_vec = (_step_of(action[0]), _step_of(action[1]))
        s = self._move(s, step_vec)
        s.gripper = float(action[3])
        s.t += 1

        group = self.task.group
        success_now = False
        if group == "reach":
            shaped = _dist(s.agent, s.goal)
            if s.agent == s.goal and not s.succeeded:
                success_now = True
        elif group == "press":
            # distance to the button, plus a closure gap while hovering on it
            shaped = _dist(s.agent, s.button)
            if s.agent == s.button:
                shaped += 0.5 * (s.gripper + 1.0)
            if s.agent == s.button and s.gripper <= GRIP_CLOSED and not s.succeeded:
                success_now = True
        elif group == "close":
            remaining = abs(s.closed_pos[0] - s.front[0]) + abs(s.closed_pos[1] - s.front[1])
            approach = (s.front[0] - s.axis[0], s.front[1] - s.axis[1])
            shaped = _dist(s.agent, approach) + 2.0 * remaining
            if remaining == 0 and not s.succeeded:
                success_now = True
        else:  # slide
            if s.plate == s.goal:
                shaped = 0.0  # delivered; the episode ends on the success latch
            else:
                push = (int(np.sign(s.goal[0] - s.plate[0])),
                        int(np.sign(s.goal[1] - s.plate[1])))
                pocket = (s.plate[0] - push[0], s.plate[1] - push[1])
                shaped = _dist(s.agent, pocket) + 2.0 * _dist(s.plate, s.goal)
            if s.plate == s.goal and not s.succeeded:
                success_now = True
        reward = -SHAPING_COEF * shaped + (SUCCESS_BONUS if success_now else 0.0)
        if success_now:
            s.succeeded = True
        done = s.succeeded or s.t >= self.task.horizon
        self.state = s
        info = {"group": group, "orbit": self.task.orbit.index,
                "success": s.succeeded, "success_now": success_now,
                "timeout": done and not s.succeeded}
        return self.observe(), reward, done, info


# -- scripted experts (test oracles) ------------------------------------------

def _nav_step(agent, target, blocked) -> tuple[int, int]:
    """Greedy step toward target; sidestep cells in `blocked`."""
    dx = np.sign(target[0] - agent[0])
    dy = np.sign(target[1] - agent[1])
    candidates = [(dx, dy), (dx, 0), (0, dy), (dx, -dy), (-dx, dy)]
    for cand in candidates:
        cand = (int(cand[0]), int(cand[1]))
        if cand == (0, 0):
            continue
        nxt = _clip_cell((agent[0] + cand[0], agent[1] + cand[1]))
        if nxt not in blocked:
            return cand
    return (0, 0)


def expert_action(env: TaskEnv) -> np.ndarray:
    """A hand-coded policy that solves every task variant within the horizon."""
    s = env.state
    group = env.task.group
    act = np.zeros(4)

    def emit(step):
        act[0] = 0.9 * step[0]
        act[1] = 0.9 * step[1]
        return act

    if group == "reach":
        return emit(_nav_step(s.agent, s.goal, blocked=set()))
    if group == "press":
        if s.agent == s.button:
            act[3] = -1.0
            return act
        return emit(_nav_step(s.agent, s.button, blocked=set()))
    if group == "close":
        approach = (s.front[0] - s.axis[0], s.front[1] - s.axis[1])
        if s.agent == approach and s.front != s.closed_pos:
            return emit(s.axis)
        return emit(_nav_step(s.agent, approach, blocked=env._drawer_cells(s)))
    # slide
    if s.plate == s.goal:
        return act
    push = (int(np.sign(s.goal[0] - s.plate[0])), int(np.sign(s.goal[1] - s.plate[1])))
    approach = (s.plate[0] - push[0], s.plate[1] - push[1])
    if s.agent == approach:
        return emit(push)
    return emit(_nav_step(s.agent, approach, blocked={s.plate}))

"""Task-free policy assignment: grow/recall policies via feature distances.

The controller keeps a collection of (policy, frame buffer) pairs.  Between
triggers it samples episodes into the online rollout buffer; every
`update_interval_episodes` loop iterations it rolls out `rollout_steps`
further steps, keeps the first k frames of each episode, picks the stored
policy whose buffer is nearest in 1-Wasserstein distance over invariant
features (each candidate measured through its own extractor), spawns a
fresh policy when the minimum distance exceeds d_eps, and then PPO-updates
the selected policy on everything collected since the previous trigger.

Distances to an empty buffer are +inf, so the first trigger always takes
the spawn path; that first spawn reuses the never-trained initial
placeholder so the collection ends with one entry per discovered group.
"""

from __future__ import annotations

import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam
from .policy import PolicyBundle
from .ppo import PpoConfig, RolloutBuffer, collect_episode, update
from .transport import buffer_distance

WORKERS_ENV_VAR = "EQUICRL_WORKERS"


@dataclass
class ControllerConfig:
    """Assignment knobs.  The distance threshold and frame count follow the
    reference configuration (d_eps = 1.0, k = 4).  Triggers fire every
    `update_interval_episodes` loop iterations; each trigger rolls out
    `rollout_episodes` episodes of the instant's task (one from the schedule
    clock plus parallel replicas), the episode-level desk equivalent of a
    1000-step parallel collection at horizon 100."""

    d_eps: float = 1.0
    initial_frames: int = 4            # k: frames kept per episode for matching
    update_interval_episodes: int = 10  # N_u: loop iterations between triggers
    rollout_episodes: int = 10         # N_s / horizon: episodes per trigger
    buffer_capacity: int = 512

    def __post_init__(self):
        if self.d_eps <= 0 or self.initial_frames < 1 \
                or self.update_interval_episodes < 1 or self.rollout_episodes < 1:
            raise ValueError("ControllerConfig values out of range")


class _IteratorScheduleAdapter:
    """Wraps a plain (env, seed, meta) iterator into the stream protocol;
    replicas rebuild fresh environments of the last-seen task."""

    _REPLICA_SEED_BASE = 2_000_000_000

    def __init__(self, iterator):
        self._it = iter(iterator)
        self._last = None
        self._counter = 0

    def next_main(self):
        item = next(self._it)
        self._last = item
        return item

    def replicate_current(self, count: int):
        out = []
        if self._last is None:
            return out
        env, _, meta = self._last
        for _ in range(max(0, count)):
            self._counter += 1
            out.append((type(env)(env.task),
                        self._REPLICA_SEED_BASE + self._counter, dict(meta)))
        return out


def _as_schedule_stream(stream):
    if hasattr(stream, "next_main") and hasattr(stream, "replicate_current"):
        return stream
    return _IteratorScheduleAdapter(stream)


class FrameBuffer:
    """Bounded FIFO of raw observations; features are extracted lazily at
    comparison time, so they always reflect the current extractor weights."""

    def __init__(self, capacity: int = 512):
        self.capacity = capacity
        self.frames: deque = deque(maxlen=capacity)

    def extend(self, observations):
        self.frames.extend(observations)

    def __len__(self):
        return len(self.frames)


@dataclass
class PolicyEntry:
    bundle: PolicyBundle
    buffer: FrameBuffer
    created_episode: int
    optimizer: Adam
    updates: int = 0
    recalls: int = 0


@dataclass
class AssignmentDecision:
    episode: int
    distances: list[float]
    chosen: int
    spawned: bool
    wall_time: float
    n_policies: int
    meta: list = field(default_factory=list)  # opaque episode metadata of O


@dataclass
class IntervalStats:
    episodes: int
    decisions: int
    updates: int


class PolicyCollection:
    def __init__(self):
        self.entries: list[PolicyEntry] = []
        self.cur_index: int = 0

    def __len__(self):
        return len(self.entries)

    @property
    def current(self) -> PolicyEntry:
        return self.entries[self.cur_index]


class AssignmentController:
    """Runs the streaming loop over an episode stream.

    assign_mode: "wasserstein" (task-free matching), "ground_truth" (labels
    from episode metadata pick the policy), or "none" (single policy, no
    assignment; used by the single-bundle baselines).
    """

    def __init__(self, bundle_factory, cfg: ControllerConfig, ppo_cfg: PpoConfig,
                 seed: int, assign_mode: str = "wasserstein",
                 group_label_fn=None):
        if assign_mode not in ("wasserstein", "ground_truth", "none"):
            raise ValueError(f"unknown assign mode {assign_mode!r}")
        self.cfg = cfg
        self.ppo_cfg = ppo_cfg
        self.assign_mode = assign_mode
        self.bundle_factory = bundle_factory
        self.seed = seed
        self.group_label_fn = group_label_fn or (lambda meta: meta.get("group"))
        self._bundle_seeds = iter(range(seed * 100_003 + 1, seed * 100_003 + 100_000))
        self.update_rng = np.random.default_rng(
            np.random.SeedSequence([seed, 0xD15C]))
        self.collection = PolicyCollection()
        first = self._new_entry(created_episode=0)
        self.collection.entries.append(first)
        self._placeholder_armed = True
        self._gt_labels: dict = {}
        self.online_buffer = RolloutBuffer()
        self.n_episode = 0        # loop iterations (episodes sampled outside triggers)
        self.episode_counter = 0  # every episode experienced, including trigger rollouts
        self.decisions: list[AssignmentDecision] = []
        self.n_updates = 0
        self.episode_callback = None
        self.decision_callback = None

    # -- construction helpers -------------------------------------------------

    def _new_entry(self, created_episode: int) -> PolicyEntry:
        bundle = self.bundle_factory(next(self._bundle_seeds))
        return PolicyEntry(bundle=bundle,
                           buffer=FrameBuffer(self.cfg.buffer_capacity),
                           created_episode=created_episode,
                           optimizer=Adam(bundle.store, lr=self.ppo_cfg.learning_rate))

    def _episode_rng(self, episode_seed: int) -> np.random.Generator:
        # keyed on the stream's episode seed only (unique per episode within a
        # run), so rollout results do not depend on the worker count
        return np.random.default_rng(
            np.random.SeedSequence([self.seed, int(episode_seed) & 0x7FFFFFFF]))

    # -- data collection --------------------------------------------------------

    def _run_episode(self, env, episode_seed: int, meta: dict):
        bundle = self.collection.current.bundle
        rng = self._episode_rng(episode_seed)
        transitions, total, info = collect_episode(env, bundle, episode_seed, rng)
        self.online_buffer.add_episode(transitions, info["bootstrap_value"])
        record = {
            "episode": self.episode_counter,
            "group": meta.get("group"),
            "orbit": meta.get("orbit"),
            "policy": self.collection.cur_index,
            "reward": total,
            "success": bool(info.get("success")),
            "steps": info["episode_len"],
            "n_policies": len(self.collection),
        }
        self.episode_counter += 1
        if self.episode_callback:
            self.episode_callback(record)
        return transitions, info, record

    def _rollout_for_trigger(self, stream):
        """Roll `rollout_episodes` episodes of the trigger instant's task:
        the next scheduled episode plus parallel replicas of its phase."""
        frames: list = []
        metas: list = []
        try:
            first = stream.next_main()
        except StopIteration:
            return frames, metas, True
        batch = [first]
        batch.extend(stream.replicate_current(self.cfg.rollout_episodes - 1))
        workers = max(1, int(os.environ.get(WORKERS_ENV_VAR, "1")))
        if workers > 1 and len(batch) > 1:
            bundle = self.collection.current.bundle
            rngs = [self._episode_rng(b[1]) for b in batch]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(
                    lambda args: collect_episode(args[0][0], bundle,
                                                 args[0][1], args[1]),
                    zip(batch, rngs)))
            for (env, eseed, meta), (transitions, total, info) in zip(batch, results):
                self._absorb_trigger_episode(transitions, total, info, meta,
                                             frames, metas)
        else:
            for env, eseed, meta in batch:
                transitions, info, _ = self._run_episode(env, eseed, meta)
                k = self.cfg.initial_frames
                frames.extend(tr.obs for tr in transitions[:k])
                metas.append(meta)
        return frames, metas, False

    def _absorb_trigger_episode(self, transitions, total, info, meta, frames, metas):
        self.online_buffer.add_episode(transitions, info["bootstrap_value"])
        record = {
            "episode": self.episode_counter,
            "group": meta.get("group"),
            "orbit": meta.get("orbit"),
            "policy": self.collection.cur_index,
            "reward": total,
            "success": bool(info.get("success")),
            "steps": info["episode_len"],
            "n_policies": len(self.collection),
        }
        self.episode_counter += 1
        if self.episode_callback:
            self.episode_callback(record)
        k = self.cfg.initial_frames
        frames.extend(tr.obs for tr in transitions[:k])
        metas.append(meta)

    # -- the assignment rule -----------------------------------------------------

    def decide(self, frames, metas) -> AssignmentDecision:
        """Pick or spawn a policy given the trigger's initial frames."""
        t0 = time.time()
        if self.assign_mode == "ground_truth":
            return self._decide_ground_truth(frames, metas, t0)
        distances = []
        for entry in self.collection.entries:
            if len(entry.buffer) == 0 or not frames:
                distances.append(float("inf"))
            else:
                distances.append(buffer_distance(frames, entry.buffer,
                                                 entry.bundle.extractor))
        j = int(np.argmin(distances))  # ties resolve to the lowest index
        spawned = bool(distances[j] > self.cfg.d_eps)
        if spawned:
            self._spawn(frames)
        else:
            self.collection.cur_index = j
            entry = self.collection.entries[j]
            entry.buffer.extend(frames)
            entry.recalls += 1
        decision = AssignmentDecision(
            episode=self.episode_counter, distances=distances,
            chosen=self.collection.cur_index, spawned=spawned,
            wall_time=time.time() - t0, n_policies=len(self.collection),
            meta=list(metas))
        self.decisions.append(decision)
        if self.decision_callback:
            self.decision_callback(decision)
        return decision

    def _spawn(self, frames):
        if self._placeholder_armed and self.collection.entries[0].updates == 0 \
                and len(self.collection.entries[0].buffer) == 0:
            # first-ever spawn: claim the untouched initial policy
            entry = self.collection.entries[0]
            entry.created_episode = self.episode_counter
            self.collection.cur_index = 0
        else:
            entry = self._new_entry(created_episode=self.episode_counter)
            self.collection.entries.append(entry)
            self.collection.cur_index = len(self.collection.entries) - 1
        self._placeholder_armed = False
        entry.buffer.extend(frames)

    def _decide_ground_truth(self, frames, metas, t0) -> AssignmentDecision:
        labels = [self.group_label_fn(m) for m in metas]
        label = max(sorted(set(labels)), key=labels.count) if labels else None
        if label in self._gt_labels:
            j = self._gt_labels[label]
            self.collection.cur_index = j
            self.collection.entries[j].buffer.extend(frames)
            self.collection.entries[j].recalls += 1
            spawned = False
        else:
            self._spawn(frames)
            self._gt_labels[label] = self.collection.cur_index
            spawned = True
        decision = AssignmentDecision(
            episode=self.episode_counter, distances=[], chosen=self.collection.cur_index,
            spawned=spawned, wall_time=time.time() - t0,
            n_policies=len(self.collection), meta=list(metas))
        self.decisions.append(decision)
        if self.decision_callback:
            self.decision_callback(decision)
        return decision

    # -- the streaming loop ---------------------------------------------------------

    def _update_current(self):
        if len(self.online_buffer) == 0:
            return
        entry = self.collection.current
        update(entry.bundle, self.online_buffer, self.ppo_cfg,
               self.update_rng, optimizer=entry.optimizer)
        entry.updates += 1
        self.n_updates += 1
        self.online_buffer = RolloutBuffer()

    def run(self, stream) -> IntervalStats:
        """Drive the full loop until the schedule stream is exhausted.

        The stream must expose next_main() raising StopIteration at the end,
        and replicate_current(count) yielding parallel episodes of the phase
        of the most recent main episode.
        """
        stream = _as_schedule_stream(stream)
        while True:
            self.n_episode += 1
            if self.n_episode % self.cfg.update_interval_episodes == 0:
                frames, metas, exhausted = self._rollout_for_trigger(stream)
                if frames and self.assign_mode != "none":
                    self.decide(frames, metas)
                self._update_current()
                if exhausted:
                    break
            else:
                try:
                    env, eseed, meta = stream.next_main()
                except StopIteration:
                    self._update_current()
                    break
                self._run_episode(env, eseed, meta)
        return IntervalStats(episodes=self.episode_counter,
                             decisions=len(self.decisions), updates=self.n_updates)

    def assignment_trace(self) -> list[tuple[int, int]]:
        """Immutable (episode, chosen policy index) log, one entry per decision."""
        return [(d.episode, d.chosen) for d in self.decisions]

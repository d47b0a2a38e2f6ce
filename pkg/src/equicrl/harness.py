"""Experiment driver: runs method configurations over task schedules,
records per-episode metrics (CSV) and assignment decisions (JSONL), scores
per-group success/reward at convergence windows, and renders SVG charts.

Methods: covers (task-free Wasserstein assignment), covers_gt (ground-truth
labels), covers_cnn (unconstrained extractor swap), equi and cnn (single
bundle, no assignment).  3rl and clear are reserved names of replay-based
baselines that are intentionally not implemented here.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import save_checkpoint
from .controller import WORKERS_ENV_VAR, AssignmentController, ControllerConfig
from .envs import DEFAULT_HORIZON, GROUPS, TaskEnv, make_task
from .layers import ExtractorConfig
from .policy import PolicyBundle
from .ppo import PpoConfig, collect_episode

METHODS = {
    "covers": ("wasserstein", "equivariant"),
    "covers_gt": ("ground_truth", "equivariant"),
    "covers_cnn": ("wasserstein", "cnn"),
    "equi": ("none", "equivariant"),
    "cnn": ("none", "cnn"),
}
RESERVED_METHODS = {"3rl", "clear"}

METRICS_FIELDS = ["episode", "group", "orbit", "policy", "reward", "success",
                  "steps", "n_policies"]

GROUP_COLORS = {"reach": "#cfe8ff", "press": "#ffd9c9", "close": "#d9f2d0",
                "slide": "#ecd9f7"}


class MethodNotImplementedError(NotImplementedError):
    pass


@dataclass
class RunConfig:
    method: str
    schedule: list = field(default_factory=lambda: default_schedule())
    seeds: list = field(default_factory=lambda: [0])
    horizon: int = DEFAULT_HORIZON
    controller: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)
    extractor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method in RESERVED_METHODS:
            raise MethodNotImplementedError(
                f"method {self.method!r} is a reserved replay-based baseline "
                "and is not implemented in this package")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; "
                             f"choose from {sorted(METHODS)}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        for phase in self.schedule:
            if phase["group"] not in GROUPS:
                raise ValueError(f"schedule references unknown group {phase['group']!r}")
            orbit = phase.get("orbit", "all")
            if orbit != "all" and orbit not in (0, 1, 2, 3):
                raise ValueError(f"orbit must be 'all' or 0..3, got {orbit!r}")
            if int(phase["episodes"]) < 0:
                raise ValueError("phase episode count must be >= 0")

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(**self.controller)

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(**self.ppo)

    def extractor_config(self) -> ExtractorConfig:
        return ExtractorConfig(**self.extractor)


def default_schedule(episodes_per_phase: int = 200, cycles: int = 2) -> list:
    """Phase per group, repeated for the requested number of cycles."""
    return [{"group": g, "orbit": "all", "episodes": episodes_per_phase}
            for _ in range(cycles) for g in GROUPS]


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return RunConfig(**raw)


class ScheduleStream:
    """Schedule clock plus parallel sampling of the current phase.

    next_main() advances through the configured phases (one episode per
    call); replicate_current(count) yields extra episodes of the phase the
    clock currently points at, standing in for parallel rollout workers.
    All episode seeds are unique within a run and independent of worker
    count, so runs are reproducible bit-for-bit.
    """

    _REPLICA_BASE = 500_000

    def __init__(self, config: RunConfig, run_seed: int):
        self.config = config
        self.run_seed = run_seed
        self._mains = []
        for phase in config.schedule:
            orbit = phase.get("orbit", "all")
            for i in range(int(phase["episodes"])):
                ob = (i % 4) if orbit == "all" else int(orbit)
                self._mains.append((phase["group"], ob, orbit))
        self._idx = 0
        self._replica_count = 0
        self._replica_orbit = 0

    def _make(self, group: str, orbit: int, episode_seed: int):
        task = make_task(group, orbit, horizon=self.config.horizon)
        return TaskEnv(task), episode_seed, {"group": group, "orbit": orbit}

    def next_main(self):
        if self._idx >= len(self._mains):
            raise StopIteration
        group, orbit, _ = self._mains[self._idx]
        seed = self.run_seed * 1_000_003 + self._idx
        self._idx += 1
        return self._make(group, orbit, seed)

    def replicate_current(self, count: int):
        """Episodes of the phase of the most recent main episode."""
        out = []
        if self._idx == 0:
            return out
        group, orbit, orbit_mode = self._mains[self._idx - 1]
        for _ in range(max(0, count)):
            if orbit_mode == "all":
                orbit = self._replica_orbit % 4
                self._replica_orbit += 1
            seed = (self.run_seed * 1_000_003 + self._REPLICA_BASE
                    + self._replica_count)
            self._replica_count += 1
            out.append(self._make(group, orbit, seed))
        return out


def episode_stream(config: RunConfig, run_seed: int) -> ScheduleStream:
    return ScheduleStream(config, run_seed)


def _bundle_factory(config: RunConfig):
    kind = METHODS[config.method][1]
    ext_cfg = config.extractor_config()

    def factory(seed: int) -> PolicyBundle:
        return PolicyBundle(seed, kind=kind, cfg=ext_cfg)
    return factory


def run(config: RunConfig, out_dir: str) -> str:
    """Execute the configured schedule for every seed; returns out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    resolved = asdict(config)
    resolved["workers"] = int(os.environ.get(WORKERS_ENV_VAR, "1"))
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)
    assign_mode = METHODS[config.method][0]
    for seed in config.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        ctrl = AssignmentController(
            _bundle_factory(config), config.controller_config(),
            config.ppo_config(), seed=seed, assign_mode=assign_mode)
        metrics_path = os.path.join(seed_dir, "metrics.csv")
        decisions_path = os.path.join(seed_dir, "decisions.jsonl")
        with open(metrics_path, "w", newline="") as mfh, \
                open(decisions_path, "w") as dfh:
            writer = csv.writer(mfh)
            writer.writerow(METRICS_FIELDS)

            def on_episode(rec):
                writer.writerow([rec["episode"], rec["group"], rec["orbit"],
                                 rec["policy"], repr(rec["reward"]),
                                 int(rec["success"]), rec["steps"],
                                 rec["n_policies"]])

            def on_decision(dec):
                groups = [m.get("group") for m in dec.meta]
                dfh.write(json.dumps({
                    "episode": dec.episode,
                    "distances": [d if np.isfinite(d) else None
                                  for d in dec.distances],
                    "chosen": dec.chosen,
                    "spawned": dec.spawned,
                    "wall_time": dec.wall_time,
                    "o_groups": groups,
                }) + "\n")

            ctrl.episode_callback = on_episode
            ctrl.decision_callback = on_decision
            ctrl.run(episode_stream(config, seed))
        ckpt_root = os.path.join(seed_dir, "checkpoints")
        for i, entry in enumerate(ctrl.collection.entries):
            save_checkpoint(entry.bundle.store,
                            os.path.join(ckpt_root, f"policy_{i}"),
                            extra={"bundle_index": i, "method": config.method,
                                   "kind": entry.bundle.kind,
                                   "buffer_size": len(entry.buffer),
                                   "created_episode": entry.created_episode,
                                   "updates": entry.updates})
    return out_dir


def evaluate_bundle(bundle: PolicyBundle, task, episodes: int, seed0: int,
                    deterministic: bool = True) -> dict:
    """Frozen-policy evaluation on one task; success rate and mean reward."""
    rng = np.random.default_rng(seed0)
    succ, rews = [], []
    env = TaskEnv(task)
    for i in range(episodes):
        _, total, info = collect_episode(env, bundle, seed0 + i, rng,
                                         deterministic=deterministic)
        succ.append(float(info["success"]))
        rews.append(total)
    return {"success_rate": float(np.mean(succ)), "avg_reward": float(np.mean(rews)),
            "episodes": episodes}


# -- scoring ------------------------------------------------------------------

def _read_metrics(seed_dir: str) -> list[dict]:
    rows = []
    with open(os.path.join(seed_dir, "metrics.csv")) as fh:
        for rec in csv.DictReader(fh):
            rec["episode"] = int(rec["episode"])
            rec["policy"] = int(rec["policy"])
            rec["reward"] = float(rec["reward"])
            rec["success"] = bool(int(rec["success"]))
            rec["steps"] = int(rec["steps"])
            rec["n_policies"] = int(rec["n_policies"])
            rows.append(rec)
    return rows


def _read_decisions(seed_dir: str) -> list[dict]:
    path = os.path.join(seed_dir, "decisions.jsonl")
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _phase_windows(rows: list[dict], window_frac: float = 0.2):
    """Split the episode stream into contiguous same-group phases and return
    (group, window_rows) pairs, each window the last fraction of its phase."""
    phases = []
    current = []
    for row in rows:
        if current and row["group"] != current[-1]["group"]:
            phases.append(current)
            current = []
        current.append(row)
    if current:
        phases.append(current)
    out = []
    for phase in phases:
        k = max(1, int(round(window_frac * len(phase))))
        out.append((phase[0]["group"], phase[-k:]))
    return out


def _mean_se(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "se": se,
            "per_seed": [float(v) for v in arr]}


def _decision_accuracy(decisions: list[dict], first_cycle_end: int):
    """Label each policy by the majority group of its spawning O; a decision
    is correct when its chosen policy's label matches its own majority."""
    labels: dict[int, str] = {}
    total = correct = post = post_correct = 0
    for dec in decisions:
        groups = [g for g in dec.get("o_groups", []) if g]
        if not groups:
            continue
        majority = max(sorted(set(groups)), key=groups.count)
        if dec["spawned"]:
            labels[dec["chosen"]] = majority
        ok = labels.get(dec["chosen"]) == majority
        total += 1
        correct += ok
        if dec["episode"] >= first_cycle_end:
            post += 1
            post_correct += ok
    return {
        "decisions": total,
        "accuracy": correct / total if total else 1.0,
        "post_first_cycle_accuracy": post_correct / post if post else 1.0,
        "spawns": sum(1 for d in decisions if d["spawned"]),
    }


def score(run_dir: str) -> dict:
    """Aggregate per-group success and reward over convergence windows
    (the last 20% of each schedule phase), with standard errors over seeds."""
    cfg_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(f"no config.json under {run_dir}")
    with open(cfg_path) as fh:
        config = json.load(fh)
    seed_dirs = sorted(d for d in os.listdir(run_dir) if d.startswith("seed_"))
    if not seed_dirs:
        raise FileNotFoundError("no seed directories to score")
    distinct_groups = []
    for phase in config["schedule"]:
        if phase["group"] not in distinct_groups:
            distinct_groups.append(phase["group"])
    first_cycle_end = 0
    seen = set()
    for phase in config["schedule"]:
        first_cycle_end += int(phase["episodes"])
        seen.add(phase["group"])
        if len(seen) == len(distinct_groups):
            break

    per_seed_group: dict[str, dict[str, list[float]]] = {}
    per_seed_avg_succ, per_seed_avg_rew = [], []
    assignments, final_policies = [], []
    for sd in seed_dirs:
        rows = _read_metrics(os.path.join(run_dir, sd))
        if not rows:
            continue
        windows = _phase_windows(rows)
        group_rows: dict[str, list[dict]] = {}
        for group, wrows in windows:
            group_rows.setdefault(group, []).extend(wrows)
        for group, wrows in group_rows.items():
            succ = float(np.mean([r["success"] for r in wrows]))
            rew = float(np.mean([r["reward"] for r in wrows]))
            per_seed_group.setdefault(group, {}).setdefault("success", []).append(succ)
            per_seed_group[group].setdefault("reward", []).append(rew)
        all_window_rows = [r for _, wrows in windows for r in wrows]
        per_seed_avg_succ.append(float(np.mean([r["success"] for r in all_window_rows])))
        per_seed_avg_rew.append(float(np.mean([r["reward"] for r in all_window_rows])))
        final_policies.append(rows[-1]["n_policies"])
        decisions = _read_decisions(os.path.join(run_dir, sd))
        if decisions:
            assignments.append(_decision_accuracy(decisions, first_cycle_end))

    result = {
        "method": config["method"],
        "seeds": [int(d.split("_")[1]) for d in seed_dirs],
        "per_group": {
            g: {"success_rate": _mean_se(v["success"]),
                "avg_reward": _mean_se(v["reward"])}
            for g, v in sorted(per_seed_group.items())
        },
        "average": ({"success_rate": _mean_se(per_seed_avg_succ),
                     "avg_reward": _mean_se(per_seed_avg_rew)}
                    if per_seed_avg_succ else {}),
        "final_policies": final_policies,
    }
    if assignments:
        result["assignment"] = {
            "accuracy": _mean_se([a["accuracy"] for a in assignments]),
            "post_first_cycle_accuracy": _mean_se(
                [a["post_first_cycle_accuracy"] for a in assignments]),
            "spawns": [a["spawns"] for a in assignments],
        }
    with open(os.path.join(run_dir, "score.json"), "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
    return result


def format_score_table(result: dict) -> str:
    lines = [f"method: {result['method']}   seeds: {result['seeds']}"]
    header = f"{'group':8s} {'success':>16s} {'avg reward':>20s}"
    lines.append(header)
    lines.append("-" * len(header))
    for group, stats in result["per_group"].items():
        s, r = stats["success_rate"], stats["avg_reward"]
        lines.append(f"{group:8s} {s['mean']:7.3f} ± {s['se']:5.3f} "
                     f"{r['mean']:11.2f} ± {r['se']:6.2f}")
    if result.get("average"):
        s, r = result["average"]["success_rate"], result["average"]["avg_reward"]
        lines.append(f"{'average':8s} {s['mean']:7.3f} ± {s['se']:5.3f} "
                     f"{r['mean']:11.2f} ± {r['se']:6.2f}")
    if "assignment" in result:
        a = result["assignment"]
        lines.append(f"assignment accuracy {a['accuracy']['mean']:.3f} "
                     f"(post-first-cycle {a['post_first_cycle_accuracy']['mean']:.3f}), "
                     f"spawns {a['spawns']}")
    lines.append(f"final policy counts: {result['final_policies']}")
    return "\n".join(lines)


# -- SVG plotting (no interactivity, data-driven) --------------------------------

def _svg_header(width, height):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n')


def _polyline(points, color, width=1.0, opacity=1.0):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{width}" '
            f'stroke-opacity="{opacity}" points="{pts}"/>\n')


class _Axes:
    def __init__(self, width=900, height=300, margin=45):
        self.w, self.h, self.m = width, height, margin

    def x(self, v, lo, hi):
        span = (hi - lo) or 1.0
        return self.m + (v - lo) / span * (self.w - 2 * self.m)

    def y(self, v, lo, hi):
        span = (hi - lo) or 1.0
        return self.h - self.m - (v - lo) / span * (self.h - 2 * self.m)

    def frame(self, title, xlabel, ylabel):
        return (f'<rect x="{self.m}" y="{self.m}" width="{self.w - 2 * self.m}" '
                f'height="{self.h - 2 * self.m}" fill="none" stroke="black"/>\n'
                f'<text x="{self.w / 2:.0f}" y="{self.m - 12}" text-anchor="middle" '
                f'font-size="13">{title}</text>\n'
                f'<text x="{self.w / 2:.0f}" y="{self.h - 8}" text-anchor="middle" '
                f'font-size="11">{xlabel}</text>\n'
                f'<text x="14" y="{self.h / 2:.0f}" font-size="11" '
                f'transform="rotate(-90 14 {self.h / 2:.0f})" '
                f'text-anchor="middle">{ylabel}</text>\n')


def _phase_bands(ax, rows, x_lo, x_hi):
    out = []
    if not rows:
        return out
    start = rows[0]["episode"]
    group = rows[0]["group"]
    for row in rows[1:] + [None]:
        if row is None or row["group"] != group:
            end = row["episode"] if row else rows[-1]["episode"] + 1
            x0 = ax.x(start, x_lo, x_hi)
            x1 = ax.x(end, x_lo, x_hi)
            color = GROUP_COLORS.get(group, "#eeeeee")
            out.append(f'<rect x="{x0:.2f}" y="{ax.m}" width="{x1 - x0:.2f}" '
                       f'height="{ax.h - 2 * ax.m}" fill="{color}"/>\n')
            if row:
                start, group = row["episode"], row["group"]
    return out


def _smooth(values, window=25):
    if len(values) < 2:
        return list(values)
    out = []
    acc = 0.0
    from collections import deque
    q = deque()
    for v in values:
        q.append(v)
        acc += v
        if len(q) > window:
            acc -= q.popleft()
        out.append(acc / len(q))
    return out


def plot(run_dir: str) -> list[str]:
    """Write rewards.svg and assignment.svg into the run directory."""
    seed_dirs = sorted(d for d in os.listdir(run_dir) if d.startswith("seed_"))
    all_rows = [_read_metrics(os.path.join(run_dir, sd)) for sd in seed_dirs]
    ax = _Axes()
    written = []

    rows0 = all_rows[0] if all_rows else []
    x_hi = max((r["episode"] for rows in all_rows for r in rows), default=1)
    rewards = [r["reward"] for rows in all_rows for r in rows]
    y_lo, y_hi = (min(rewards), max(rewards)) if rewards else (0.0, 1.0)
    if y_lo == y_hi:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    svg = [_svg_header(ax.w, ax.h)]
    svg += _phase_bands(ax, rows0, 0, x_hi)
    for rows in all_rows:
        pts = [(ax.x(r["episode"], 0, x_hi), ax.y(r["reward"], y_lo, y_hi))
               for r in rows]
        if pts:
            svg.append(_polyline(pts, "#888888", 0.6, opacity=0.5))
    if rows0:
        sm = _smooth([r["reward"] for r in rows0])
        pts = [(ax.x(r["episode"], 0, x_hi), ax.y(v, y_lo, y_hi))
               for r, v in zip(rows0, sm)]
        svg.append(_polyline(pts, "#d62728", 1.6))
    svg.append(ax.frame("episode reward", "episode", "reward"))
    svg.append("</svg>\n")
    path = os.path.join(run_dir, "rewards.svg")
    with open(path, "w") as fh:
        fh.write("".join(svg))
    written.append(path)

    svg = [_svg_header(ax.w, ax.h)]
    decisions0 = _read_decisions(os.path.join(run_dir, seed_dirs[0])) if seed_dirs else []
    max_pol = max((d["chosen"] for d in decisions0), default=1)
    svg += _phase_bands(ax, rows0, 0, x_hi)
    if decisions0:
        pts = []
        prev = None
        for d in decisions0:
            x = ax.x(d["episode"], 0, x_hi)
            y = ax.y(d["chosen"], -0.5, max_pol + 0.5)
            if prev is not None:
                pts.append((x, prev))
            pts.append((x, y))
            prev = y
        svg.append(_polyline(pts, "#1f77b4", 1.5))
    svg.append(ax.frame("selected policy index per decision", "episode", "policy"))
    svg.append("</svg>\n")
    path = os.path.join(run_dir, "assignment.svg")
    with open(path, "w") as fh:
        fh.write("".join(svg))
    written.append(path)
    return written

"""Clipped-surrogate PPO with generalized advantage estimation.

The update maximizes mean(min(rho * A, clip(rho, 1-eps, 1+eps) * A)) with an
entropy bonus and a value MSE term, over shuffled minibatches for several
epochs, stopping early once the estimated KL(old || new) exceeds max_kl.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam
from .policy import PolicyBundle


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 3e-4
    entropy_coef: float = 0.001
    value_coef: float = 0.5
    max_kl: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.clip_eps and 0.0 <= self.gamma <= 1.0
                and 0.0 <= self.gae_lambda <= 1.0 and self.epochs >= 1
                and self.batch_size >= 1 and self.learning_rate > 0.0
                and self.max_kl > 0.0):
            raise ValueError("PpoConfig values out of range")


@dataclass
class Transition:
    obs: object
    action: np.ndarray
    pre_squash: np.ndarray
    reward: float
    log_prob_old: float
    value_old: float
    done: bool
    t: int

    def __post_init__(self):
        if not (np.isfinite(self.reward) and np.isfinite(self.log_prob_old)):
            raise ValueError("transition fields must be finite")


def compute_gae(rewards, values, dones, gamma: float, lam: float):
    """GAE over (possibly concatenated) steps.

    values has one bootstrap entry appended (V of the state after the last
    step; zero when that step ended the episode terminally).  dones masks
    both the bootstrap and the advantage chain at episode ends.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    t_len = len(rewards)
    if len(values) != t_len + 1 or len(dones) != t_len:
        raise ValueError("compute_gae: need len(values) == T+1 and len(dones) == T")
    deltas = rewards + gamma * values[1:] * (1.0 - dones) - values[:-1]
    advantages = np.zeros(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        acc = deltas[t] + gamma * lam * (1.0 - dones[t]) * acc
        advantages[t] = acc
    returns = advantages + values[:-1]
    return advantages, returns


class RolloutBuffer:
    """Ordered transitions from complete (or truncated) episodes."""

    def __init__(self):
        self._episodes: list[tuple[list[Transition], float]] = []
        self._open: list[Transition] = []
        self.advantages: np.ndarray | None = None
        self.returns: np.ndarray | None = None

    def add(self, tr: Transition):
        self._open.append(tr)

    def end_episode(self, bootstrap_value: float = 0.0):
        if self._open:
            self._episodes.append((self._open, float(bootstrap_value)))
            self._open = []

    def add_episode(self, transitions: list[Transition], bootstrap_value: float = 0.0):
        if transitions:
            self._episodes.append((list(transitions), float(bootstrap_value)))

    def __len__(self) -> int:
        return sum(len(ep) for ep, _ in self._episodes) + len(self._open)

    @property
    def n_episodes(self) -> int:
        return len(self._episodes)

    def transitions(self) -> list[Transition]:
        out = []
        for ep, _ in self._episodes:
            out.extend(ep)
        return out

    def clear(self):
        self._episodes = []
        self._open = []
        self.advantages = None
        self.returns = None

    def finalize(self, gamma: float, lam: float):
        """Compute per-episode GAE, then normalize advantages buffer-wide."""
        if self._open:
            raise ValueError("finalize with an unclosed episode; call end_episode")
        if not self._episodes:
            raise ValueError("finalize on an empty buffer")
        adv_parts, ret_parts = [], []
        for ep, bootstrap in self._episodes:
            rewards = [tr.reward for tr in ep]
            values = [tr.value_old for tr in ep] + [bootstrap]
            dones = [0.0] * (len(ep) - 1) + [1.0 if bootstrap == 0.0 else 0.0]
            adv, ret = compute_gae(rewards, values, dones, gamma, lam)
            adv_parts.append(adv)
            ret_parts.append(ret)
        adv = np.concatenate(adv_parts)
        self.returns = np.concatenate(ret_parts)
        std = adv.std()
        self.advantages = (adv - adv.mean()) / (std + 1e-8)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    kl: float
    explained_variance: float
    n_minibatches: int
    epochs_run: int
    early_stopped: bool
    surrogate_first: float = 0.0


def clip_loss(batch: dict, bundle: PolicyBundle, cfg: PpoConfig):
    """PPO loss on one minibatch; returns (loss, diagnostics)."""
    pre_mean, values = bundle.forward_batch(batch["images"], batch["vectors"])
    logp = bundle.log_prob_batch(pre_mean, batch["pre_squash"])
    log_ratio = ad.sub(logp, ad.constant(batch["log_prob_old"]))
    if not np.all(np.isfinite(log_ratio.values)):
        raise FloatingPointError("non-finite importance ratios")
    ratio = ad.exp(log_ratio)
    adv = ad.constant(batch["advantages"])
    surr = ad.minimum(ad.mul(ratio, adv),
                      ad.mul(ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv))
    surrogate = ad.mean(surr)
    err = ad.sub(values, ad.constant(batch["returns"]))
    value_mse = ad.mean(ad.mul(err, err))
    entropy = bundle.entropy()
    loss = ad.add(ad.sub(ad.mul(ad.constant(-1.0), surrogate),
                         ad.mul(ad.constant(cfg.entropy_coef), entropy)),
                  ad.mul(ad.constant(cfg.value_coef), value_mse))
    # nonnegative KL(old||new) estimator: mean((rho - 1) - log rho)
    lr_vals = log_ratio.values
    kl = float(np.mean(np.expm1(lr_vals) - lr_vals))
    diag = {"surrogate": float(surrogate.values), "value_loss": float(value_mse.values),
            "entropy": float(entropy.values), "kl": kl}
    return loss, diag


def _batch_dict(bundle: PolicyBundle, transitions, idx, adv, ret) -> dict:
    obs = [transitions[i].obs for i in idx]
    images, vectors = bundle.batch_arrays(obs)
    return {
        "images": images,
        "vectors": vectors,
        "pre_squash": np.stack([transitions[i].pre_squash for i in idx]),
        "log_prob_old": np.array([transitions[i].log_prob_old for i in idx]),
        "advantages": adv[idx],
        "returns": ret[idx],
    }


def explained_variance(returns: np.ndarray, values: np.ndarray) -> float:
    var = returns.var()
    if var == 0.0:
        return 0.0
    return float(1.0 - (returns - values).var() / var)


def update(bundle: PolicyBundle, buffer: RolloutBuffer, cfg: PpoConfig,
           rng: np.random.Generator, optimizer: Adam | None = None) -> UpdateStats:
    """Alg-style epochs of shuffled minibatches with KL early stop."""
    if len(buffer) == 0:
        raise ValueError("update on an empty rollout buffer")
    if buffer.advantages is None:
        buffer.finalize(cfg.gamma, cfg.gae_lambda)
    transitions = buffer.transitions()
    adv, ret = buffer.advantages, buffer.returns
    values_old = np.array([tr.value_old for tr in transitions])
    ev = explained_variance(ret, values_old)
    opt = optimizer or Adam(bundle.store, lr=cfg.learning_rate)
    n = len(transitions)
    last = {"surrogate": 0.0, "value_loss": 0.0, "entropy": 0.0, "kl": 0.0}
    first_surrogate = None
    n_minibatches = 0
    epochs_run = 0
    early = False
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = _batch_dict(bundle, transitions, idx, adv, ret)
            loss, diag = clip_loss(batch, bundle, cfg)
            if first_surrogate is None:
                first_surrogate = diag["surrogate"]
            if diag["kl"] > cfg.max_kl:
                early = True
                break
            bundle.store.zero_grad()
            loss.backward()
            opt.step()
            last = diag
            n_minibatches += 1
        epochs_run += 1
        if early:
            break
    return UpdateStats(policy_loss=-last["surrogate"], value_loss=last["value_loss"],
                       entropy=last["entropy"], kl=last["kl"], explained_variance=ev,
                       n_minibatches=n_minibatches, epochs_run=epochs_run,
                       early_stopped=early, surrogate_first=first_surrogate or 0.0)


def collect_episode(env, bundle: PolicyBundle, episode_seed: int,
                    rng: np.random.Generator,
                    deterministic: bool = False) -> tuple[list[Transition], float, dict]:
    """Roll one episode; returns (transitions, episode reward, final info).

    The transitions end with the episode; the caller appends them to a
    buffer together with the bootstrap value from this function's info
    ("bootstrap_value": 0 for terminal ends, V(s_T) for horizon truncation).
    """
    obs = env.reset(seed=episode_seed)
    transitions = []
    total = 0.0
    done = False
    info = {}
    t = 0
    while not done:
        res = bundle.sample_action(obs, rng, deterministic=deterministic)
        next_obs, reward, done, info = env.step(res.action)
        transitions.append(Transition(obs=obs, action=res.action,
                                      pre_squash=res.pre_squash, reward=reward,
                                      log_prob_old=res.log_prob, value_old=res.value,
                                      done=done, t=t))
        total += reward
        obs = next_obs
        t += 1
    if info.get("timeout"):
        info["bootstrap_value"] = bundle.value(obs)
    else:
        info["bootstrap_value"] = 0.0
    info["episode_reward"] = total
    info["episode_len"] = t
    return transitions, total, info

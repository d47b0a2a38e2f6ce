"""Actor-critic bundle on a shared feature extractor.

The equivariant variant outputs an action mean that transforms like the
action type (sign flips on dx/dy, trivial on dz/gripper) and a value that
is invariant by architecture: the policy head is an equivariant MLP on the
regular features, the value head a dense MLP on the pooled invariants.
Actions are tanh-squashed diagonal Gaussians with a state-independent,
group-invariant log_std, so squashing (odd) preserves equivariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import FieldTensor, ParamStore, no_grad
from .groups import GroupSpec, d2, direct_sum, irrep, trivial_rep
from .layers import (
    EquivariantLinearLayer,
    ExtractorConfig,
    FeatureExtractor,
    PlainConvExtractor,
    batch_observations,
    observation_arrays,
    regular_stack,
)

ACTION_DIM = 4
ACTION_LOW, ACTION_HIGH = -1.0, 1.0
LOG_STD_INIT = -0.5


@dataclass(frozen=True)
class ActionSpec:
    """dx, dy carry the two sign irreps; dz and gripper are invariant."""

    dim: int = ACTION_DIM
    low: float = ACTION_LOW
    high: float = ACTION_HIGH

    def representation(self, group: GroupSpec):
        return direct_sum([irrep(group, "x"), irrep(group, "y"),
                           trivial_rep(group), trivial_rep(group)])


@dataclass
class ActionDistribution:
    pre_mean: np.ndarray   # before tanh squashing
    mean: np.ndarray       # tanh(pre_mean), inside the action box
    std: np.ndarray


@dataclass
class SampleResult:
    action: np.ndarray
    log_prob: float
    pre_squash: np.ndarray  # u with action = tanh(u); stored for PPO ratios
    value: float


def _tanh_log_jacobian(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2) computed stably: 2(log 2 - u - softplus(-2u))."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class PolicyBundle:
    """One policy+value pair with its extractor; `kind` picks the ablation."""

    def __init__(self, seed: int, group: GroupSpec | None = None,
                 kind: str = "equivariant", cfg: ExtractorConfig | None = None,
                 policy_hidden_orbits: int = 8, value_hidden: int = 32,
                 cnn_policy_hidden: int = 16):
        group = group or d2()
        if kind not in ("equivariant", "cnn"):
            raise ValueError(f"unknown bundle kind {kind!r}")
        self.kind = kind
        self.group = group
        self.seed = seed
        self.action_spec = ActionSpec()
        store = ParamStore(seed)
        self.store = store
        if kind == "equivariant":
            self.extractor = FeatureExtractor(store, group, cfg)
            act_rep = self.action_spec.representation(group)
            hidden_rep = regular_stack(group, policy_hidden_orbits)
            self.policy_hidden = EquivariantLinearLayer(
                store, "policy.hidden", self.extractor.feature_rep, hidden_rep)
            self.policy_out = EquivariantLinearLayer(
                store, "policy.out", hidden_rep, act_rep)
        else:
            self.extractor = PlainConvExtractor(store, group, cfg)
            hid = cnn_policy_hidden
            d_in = self.extractor.policy_in_dim
            self.pw1 = store.create("policy.hidden.w", (hid, d_in),
                                    scale=np.sqrt(2.0 / d_in))
            self.pb1 = store.create("policy.hidden.b", (hid,), init="zeros")
            self.pw2 = store.create("policy.out.w", (ACTION_DIM, hid),
                                    scale=np.sqrt(2.0 / hid))
            self.pb2 = store.create("policy.out.b", (ACTION_DIM,), init="zeros")
        v_in = self.extractor.value_in_dim
        self.vw1 = store.create("value.hidden.w", (value_hidden, v_in),
                                scale=np.sqrt(2.0 / v_in))
        self.vb1 = store.create("value.hidden.b", (value_hidden,), init="zeros")
        self.vw2 = store.create("value.out.w", (1, value_hidden),
                                scale=np.sqrt(2.0 / value_hidden))
        self.vb2 = store.create("value.out.b", (1,), init="zeros")
        self.log_std = store.create("log_std", (ACTION_DIM,),
                                    values=np.full(ACTION_DIM, LOG_STD_INIT))

    # -- forward -----------------------------------------------------------

    def _policy_head(self, feats: FieldTensor) -> FieldTensor:
        if self.kind == "equivariant":
            h = ad.relu(self.policy_hidden(feats))
            return self.policy_out(h)
        h = ad.relu(ad.affine(feats, self.pw1, self.pb1))
        return ad.affine(h, self.pw2, self.pb2)

    def _value_head(self, feats: FieldTensor) -> FieldTensor:
        h = ad.relu(ad.affine(feats, self.vw1, self.vb1))
        v = ad.affine(h, self.vw2, self.vb2)
        return ad.reshape(v, v.values.shape[:-1])

    def forward_batch(self, images, vectors) -> tuple[FieldTensor, FieldTensor]:
        """(pre-squash action means (N, 4), values (N,)) as graph tensors."""
        pol_feats, val_feats = self.extractor.forward_batch(images, vectors)
        return self._policy_head(pol_feats), self._value_head(val_feats)

    # -- observation-level API ----------------------------------------------

    def action_dist(self, obs) -> ActionDistribution:
        image, vector = observation_arrays(obs)
        with no_grad():
            pre_mean, _ = self.forward_batch(image[None], vector[None])
        pre = pre_mean.values[0]
        if not np.all(np.isfinite(pre)):
            raise FloatingPointError("non-finite policy output")
        return ActionDistribution(pre_mean=pre, mean=np.tanh(pre),
                                  std=np.exp(self.log_std.values))

    def value(self, obs) -> float:
        image, vector = observation_arrays(obs)
        with no_grad():
            _, v = self.forward_batch(image[None], vector[None])
        return float(v.values[0])

    def sample_action(self, obs, rng: np.random.Generator,
                      noise: np.ndarray | None = None,
                      deterministic: bool = False) -> SampleResult:
        image, vector = observation_arrays(obs)
        with no_grad():
            pre_mean, v = self.forward_batch(image[None], vector[None])
        pre = pre_mean.values[0]
        if not np.all(np.isfinite(pre)):
            raise FloatingPointError("non-finite policy output")
        std = np.exp(self.log_std.values)
        if deterministic:
            xi = np.zeros(ACTION_DIM)
        elif noise is not None:
            xi = np.asarray(noise, dtype=np.float64)
        else:
            xi = rng.standard_normal(ACTION_DIM)
        u = pre + std * xi
        action = np.tanh(u)
        log_prob = self._log_prob_numpy(pre, u)
        return SampleResult(action=action, log_prob=log_prob, pre_squash=u,
                            value=float(v.values[0]))

    def _log_prob_numpy(self, pre_mean: np.ndarray, u: np.ndarray) -> float:
        # mirrors log_prob_batch exactly so importance ratios start at 1
        z = (u - pre_mean) * np.exp(-self.log_std.values)
        gauss = -0.5 * float((z * z + (2.0 * self.log_std.values + ad.LOG_2PI)).sum())
        return gauss - float(_tanh_log_jacobian(u).sum())

    def log_prob_batch(self, pre_mean: FieldTensor, u_batch: np.ndarray) -> FieldTensor:
        """Graph log-probs of stored pre-squash actions (N,) including the
        tanh change-of-variables term (constant w.r.t. parameters)."""
        gauss = ad.gaussian_logprob(pre_mean, self.log_std, u_batch)
        correction = _tanh_log_jacobian(np.asarray(u_batch)).sum(axis=-1)
        return ad.sub(gauss, ad.constant(correction))

    def entropy(self) -> FieldTensor:
        """Entropy of the pre-squash Gaussian (state-independent)."""
        return ad.add(ad.sum_op(self.log_std),
                      ad.constant(0.5 * ACTION_DIM * (1.0 + ad.LOG_2PI)))

    # -- bookkeeping ---------------------------------------------------------

    def num_parameters(self, prefix: str = "") -> int:
        return self.store.num_parameters(prefix)

    def batch_arrays(self, observations) -> tuple[np.ndarray, np.ndarray]:
        return batch_observations(observations)


def make_bundle(seed: int, kind: str = "equivariant",
                cfg: ExtractorConfig | None = None) -> PolicyBundle:
    return PolicyBundle(seed, kind=kind, cfg=cfg)

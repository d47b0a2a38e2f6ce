"""Group-equivariant layers and the multi-modal feature extractor.

Equivariant linear maps are parameterized by an orthonormal basis of the
intertwiner space {W : rho_out(g) W = W rho_in(g)}, found as the nullspace
of the stacked generator constraints.  Equivariant convolutions carry free
parameters only on orbit representatives; the full kernel is an exact
orbit copy, so the steerability identity holds with zero residual.
Hidden features are direct sums of regular-representation blocks (pointwise
ReLU commutes with the channel permutations); group max-pooling over each
block yields invariant features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import FieldTensor, ParamStore, grad_enabled, no_grad
from .groups import (
    GroupSpec,
    Representation,
    SpatialAction,
    direct_sum,
    generators,
    inverse,
    irrep,
    multiplication_table,
    regular_rep,
    trivial_rep,
)

_NULL_TOL = 1e-8  # singular values below tol * sigma_max count as zero


def _flatten_rep(rep: Representation) -> list[Representation]:
    if rep.kind == "direct_sum":
        out = []
        for p in rep.parts:
            out.extend(_flatten_rep(p))
        return out
    return [rep]


def _stacked_constraints(rep_in: Representation, rep_out: Representation,
                         group: GroupSpec) -> np.ndarray:
    """Rows of (rho_in(g)^T kron I - I kron rho_out(g)) over the generators."""
    din, dout = rep_in.dimension, rep_out.dimension
    blocks = []
    for g in generators(group):
        a = np.kron(rep_in.matrix(g).T, np.eye(dout))
        b = np.kron(np.eye(din), rep_out.matrix(g))
        blocks.append(a - b)
    if not blocks:
        return np.zeros((0, din * dout))
    return np.vstack(blocks)


def _nullspace_basis(rep_in: Representation, rep_out: Representation,
                     group: GroupSpec) -> np.ndarray:
    """Orthonormal intertwiner basis as an (nb, dout, din) array."""
    din, dout = rep_in.dimension, rep_out.dimension
    c = _stacked_constraints(rep_in, rep_out, group)
    dim = din * dout
    if c.shape[0] == 0:
        vecs = np.eye(dim)
    else:
        _, s, vt = np.linalg.svd(c, full_matrices=True)
        cutoff = _NULL_TOL * (s[0] if s.size else 0.0)
        rank = int((s > cutoff).sum())
        vecs = vt[rank:]
    # column-major vec: W = vec.reshape(din, dout).T
    return np.stack([v.reshape(din, dout).T for v in vecs]) if len(vecs) else \
        np.zeros((0, dout, din))


_PAIR_CACHE: dict[tuple, np.ndarray] = {}


def _atomic_pair_basis(rep_in: Representation, rep_out: Representation,
                       group: GroupSpec) -> np.ndarray:
    key = (group, rep_in, rep_out)
    if key not in _PAIR_CACHE:
        _PAIR_CACHE[key] = _nullspace_basis(rep_in, rep_out, group)
    return _PAIR_CACHE[key]


def solve_equivariant_basis(rep_in: Representation, rep_out: Representation,
                            group: GroupSpec) -> list[np.ndarray]:
    """Orthonormal basis of {W : rho_out(g) W = W rho_in(g) for all g}.

    Direct sums factor block-by-block (each block pair solved by the
    nullspace construction and embedded at its offsets), so large layers
    stay cheap.  An empty list is a valid result.
    """
    if rep_in.group != group or rep_out.group != group:
        raise ValueError("representations must live over the given group")
    ins = _flatten_rep(rep_in)
    outs = _flatten_rep(rep_out)
    if len(ins) == 1 and len(outs) == 1:
        return list(_atomic_pair_basis(ins[0], outs[0], group))
    din, dout = rep_in.dimension, rep_out.dimension
    in_offsets = np.cumsum([0] + [p.dimension for p in ins])
    out_offsets = np.cumsum([0] + [p.dimension for p in outs])
    basis = []
    for j, pout in enumerate(outs):
        for i, pin in enumerate(ins):
            small = _atomic_pair_basis(pin, pout, group)
            for b in small:
                w = np.zeros((dout, din))
                w[out_offsets[j]:out_offsets[j + 1],
                  in_offsets[i]:in_offsets[i + 1]] = b
                basis.append(w)
    return basis


def invariant_basis(rep: Representation) -> np.ndarray:
    """Orthonormal basis of the fixed subspace {b : rho(g) b = b}, (nb, d)."""
    group = rep.group
    triv = trivial_rep(group)
    mats = solve_equivariant_basis(triv, rep, group)
    if not mats:
        return np.zeros((0, rep.dimension))
    return np.stack([m[:, 0] for m in mats])


def regular_stack(group: GroupSpec, copies: int) -> Representation:
    return direct_sum([regular_rep(group)] * copies)


class EquivariantLinearLayer:
    """Linear map constrained to the intertwiner space, with invariant bias.

    W = sum_k c_k B_k; coefficients are the trainable parameters.  The bias
    lives in the fixed subspace of rho_out (empty for pure sign outputs).
    When both representations are stacks of regular blocks, the basis is
    kept in block-factored form instead of materialized dense matrices.
    """

    def __init__(self, store: ParamStore, name: str, rep_in: Representation,
                 rep_out: Representation, gain: float = 1.0):
        group = rep_in.group
        self.rep_in, self.rep_out = rep_in, rep_out
        self.group = group
        self.store = store
        self.name = name
        ins = _flatten_rep(rep_in)
        outs = _flatten_rep(rep_out)
        self._block_form = (all(p.kind == "regular" for p in ins)
                            and all(p.kind == "regular" for p in outs))
        scale = gain * np.sqrt(2.0 / rep_in.dimension)
        w0 = store.rng.standard_normal((rep_out.dimension, rep_in.dimension)) * scale
        if self._block_form:
            n = group.order
            self._n = n
            self._ji = len(ins)
            self._jo = len(outs)
            small = _atomic_pair_basis(ins[0], outs[0], group)  # (n, n, n)
            self._small = small
            self._small_flat = small.reshape(n, n * n)
            blocks = w0.reshape(self._jo, n, self._ji, n).transpose(0, 2, 1, 3)
            coef = np.einsum("jiab,kab->jik", blocks, small)
            self.coef = store.create(f"{name}.coef", (self._jo, self._ji, n),
                                     values=coef)
            self.n_basis = self._jo * self._ji * n
        else:
            basis = solve_equivariant_basis(rep_in, rep_out, group)
            if not basis:
                raise ValueError(f"{name}: intertwiner space is empty for "
                                 f"{rep_in} -> {rep_out}")
            self.basis = np.stack(basis)                      # (nb, dout, din)
            self.basis_flat = self.basis.reshape(len(basis), -1)
            coef = self.basis_flat @ w0.ravel()
            self.coef = store.create(f"{name}.coef", (len(basis),), values=coef)
            self.n_basis = len(basis)
        self.bias_basis = invariant_basis(rep_out)        # (nbias, dout)
        if len(self.bias_basis):
            self.bias_coef = store.create(f"{name}.bias", (len(self.bias_basis),),
                                          init="zeros")
        else:
            self.bias_coef = None
        self._cache = None

    def _weight_values(self) -> np.ndarray:
        if self._block_form:
            n, jo, ji = self._n, self._jo, self._ji
            wb = (self.coef.values.reshape(jo * ji, n) @ self._small_flat)
            wb = wb.reshape(jo, ji, n, n).transpose(0, 2, 1, 3)
            return wb.reshape(jo * n, ji * n)
        return (self.coef.values @ self.basis_flat).reshape(
            self.rep_out.dimension, self.rep_in.dimension)

    def _weight_graph(self) -> FieldTensor:
        if self._block_form:
            n, jo, ji = self._n, self._jo, self._ji
            flat = ad.reshape(self.coef, (jo * ji, n))
            wb = ad.matmul(flat, ad.constant(self._small_flat))
            wb = ad.transpose_axes(ad.reshape(wb, (jo, ji, n, n)), (0, 2, 1, 3))
            return ad.reshape(wb, (jo * n, ji * n))
        return ad.reshape(ad.matmul(self.coef, ad.constant(self.basis_flat)),
                          (self.rep_out.dimension, self.rep_in.dimension))

    def realized(self) -> tuple[np.ndarray, np.ndarray]:
        """Current dense (W, b) as plain arrays, cached per parameter version."""
        if self._cache is None or self._cache[0] != self.store.version:
            w = self._weight_values()
            if self.bias_coef is not None:
                b = self.bias_coef.values @ self.bias_basis
            else:
                b = np.zeros(self.rep_out.dimension)
            self._cache = (self.store.version, w, b)
        return self._cache[1], self._cache[2]

    def __call__(self, x: FieldTensor) -> FieldTensor:
        if not grad_enabled():
            w, b = self.realized()
            return FieldTensor(x.values @ w.T + b)
        w = self._weight_graph()
        if self.bias_coef is not None:
            b = ad.matmul(self.bias_coef, ad.constant(self.bias_basis))
        else:
            b = ad.constant(np.zeros(self.rep_out.dimension))
        return ad.affine(x, w, b)


@dataclass
class ConvSpec:
    in_orbits: int          # regular-field orbit count, or channel count if lift
    out_orbits: int
    kernel: int
    stride: int = 1
    pad: int = 0
    lift: bool = False      # True: input channels are trivial fields


class EquivariantConvLayer:
    """Steerable convolution with regular-representation output fields.

    Free parameters live on orbit representatives; `expand_kernel` copies
    them across the group orbit (spatial transform plus channel shift), so
    k(gx) = rho_out(g) k(x) rho_in(g^{-1}) holds exactly.
    """

    def __init__(self, store: ParamStore, name: str, group: GroupSpec,
                 spec: ConvSpec, gain: float = 1.0):
        self.group = group
        self.spec = spec
        self.store = store
        self.name = name
        self.action = SpatialAction(group)
        n = group.order
        k = spec.kernel
        cin_real = spec.in_orbits if spec.lift else spec.in_orbits * n
        if spec.lift:
            free_shape = (spec.out_orbits, spec.in_orbits, k, k)
        else:
            free_shape = (spec.out_orbits, spec.in_orbits, n, k, k)
        scale = gain * np.sqrt(2.0 / (cin_real * k * k))
        self.free = store.create(f"{name}.kernel", free_shape, scale=scale)
        self.bias = store.create(f"{name}.bias", (spec.out_orbits,), init="zeros")
        self._index_map = self._build_index_map()
        self._bias_index = np.repeat(np.arange(spec.out_orbits), n)
        self.out_channels = spec.out_orbits * n
        self.in_channels = cin_real
        self._cache = None

    def _build_index_map(self) -> np.ndarray:
        spec, group = self.spec, self.group
        n, k = group.order, spec.kernel
        table = multiplication_table(group)
        inv = np.array([inverse(g).index for g in group.elements()])
        # flat source index of the h-transformed filter at each kernel position
        base = np.arange(k * k).reshape(k, k)
        spatial = np.stack([self.action.apply(g, base).ravel()
                            for g in group.elements()])  # (n, k*k)
        o_count, i_count = spec.out_orbits, spec.in_orbits
        if spec.lift:
            idx = np.empty((o_count, n, i_count, k * k), dtype=np.intp)
            for h in range(n):
                for o in range(o_count):
                    for i in range(i_count):
                        idx[o, h, i] = ((o * i_count + i) * k * k) + spatial[h]
            return idx.reshape(o_count * n, i_count, k, k).ravel()
        idx = np.empty((o_count, n, i_count, n, k * k), dtype=np.intp)
        for h in range(n):
            hinv = inv[h]
            for u in range(n):
                src_u = table[hinv, u]
                for o in range(o_count):
                    for i in range(i_count):
                        flat_base = ((o * i_count + i) * n + src_u) * k * k
                        idx[o, h, i, u] = flat_base + spatial[h]
        return idx.reshape(o_count * n, i_count * n, k, k).ravel()

    def expanded_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.spec.kernel, self.spec.kernel)

    def expand_kernel_values(self) -> np.ndarray:
        return self.free.values.ravel()[self._index_map].reshape(self.expanded_shape())

    def realized(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is None or self._cache[0] != self.store.version:
            kern = self.expand_kernel_values()
            b = self.bias.values[self._bias_index]
            self._cache = (self.store.version, kern, b)
        return self._cache[1], self._cache[2]

    def __call__(self, x: FieldTensor) -> FieldTensor:
        spec = self.spec
        if not grad_enabled():
            kern, b = self.realized()
            out = ad.conv2d(FieldTensor(x.values), FieldTensor(kern),
                            stride=spec.stride, pad=spec.pad)
            return FieldTensor(out.values + b[:, None, None])
        kern = ad.gather(self.free, self._index_map, self.expanded_shape())
        out = ad.conv2d(x, kern, stride=spec.stride, pad=spec.pad)
        b = ad.reshape(ad.gather(self.bias, self._bias_index, (self.out_channels,)),
                       (self.out_channels, 1, 1))
        return ad.add(out, b)


def expand_kernel(layer: EquivariantConvLayer) -> np.ndarray:
    """Full kernel tensor built by orbit-copying the free parameters."""
    return layer.expand_kernel_values()


def group_pool(features: FieldTensor, group_order: int) -> FieldTensor:
    """Max over each group-sized channel block: regular fields -> invariants."""
    c = features.values.shape[-1]
    if c % group_order != 0:
        raise ValueError(f"channel count {c} not divisible by group order {group_order}")
    lead = features.values.shape[:-1]
    blocks = ad.reshape(features, lead + (c // group_order, group_order))
    return ad.max_over_axis(blocks, axis=-1)


@dataclass
class ExtractorConfig:
    image_channels: int = 4     # planes per frame; current + initial are stacked
    image_size: int = 15
    conv_orbits: tuple[int, int] = (8, 16)
    kernel: int = 3
    strides: tuple[int, int] = (2, 2)
    pads: tuple[int, int] = (0, 0)
    mlp_orbits: tuple[int, int] = (8, 8)
    state_dim: int = 4          # (x, y, z, gripper)
    aux_dim: int = 3            # (goal_x, goal_y, goal_z)
    # init gains calibrated so fresh-extractor inter-group Wasserstein
    # distances clear the assignment threshold while intra-group stay below;
    # inv_scale centers the threshold between the two regimes
    conv_gain: float = 2.0
    mlp_gain: float = 0.5
    inv_scale: float = 0.5

    def conv_in_channels(self) -> int:
        return 2 * self.image_channels


def _check_stride_exactness(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ValueError("kernel larger than padded input")
    if span % stride != 0:
        raise ValueError(
            f"conv geometry (size={size}, kernel={kernel}, stride={stride}, pad={pad}) "
            "is not reflection-exact: the strided sample grid must map to itself")
    return span // stride + 1


def observation_arrays(obs) -> tuple[np.ndarray, np.ndarray]:
    """Pack one observation into extractor inputs: stacked image planes
    (current + initial frame) and the typed state/auxiliary vector."""
    image = np.concatenate([obs.image, obs.initial_image], axis=0)
    vector = np.concatenate([obs.state, obs.auxiliary])
    return image, vector


def batch_observations(frames) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([np.concatenate([f.image, f.initial_image], axis=0)
                       for f in frames])
    vectors = np.stack([np.concatenate([f.state, f.auxiliary]) for f in frames])
    return images, vectors


class _ObservationInterface:
    """Observation-facing entry points shared by both extractor variants."""

    def extract(self, obs) -> tuple[FieldTensor, FieldTensor]:
        image, vector = observation_arrays(obs)
        equi, inv = self.forward_batch(image[None], vector[None])
        equi = ad.reshape(equi, (equi.values.shape[-1],))
        inv = ad.reshape(inv, (inv.values.shape[-1],))
        return equi, inv

    def invariant_batch(self, frames) -> np.ndarray:
        images, vectors = batch_observations(frames)
        with no_grad():
            _, inv = self.forward_batch(images, vectors)
        return inv.values


def extract(fx, obs) -> tuple[FieldTensor, FieldTensor]:
    """(equivariant features, invariant features) of one observation."""
    return fx.extract(obs)


class FeatureExtractor(_ObservationInterface):
    """Two-path equivariant extractor: conv stack on stacked image frames plus
    an equivariant MLP on typed vectors; outputs concatenated regular fields
    and their group-pooled invariant features."""

    kind = "equivariant"

    def __init__(self, store: ParamStore, group: GroupSpec,
                 cfg: ExtractorConfig | None = None, name: str = "extractor"):
        self.cfg = cfg = cfg or ExtractorConfig()
        self.group = group
        self.store = store
        self.name = name
        n = group.order
        size = cfg.image_size
        size = _check_stride_exactness(size, cfg.kernel, cfg.strides[0], cfg.pads[0])
        size = _check_stride_exactness(size, cfg.kernel, cfg.strides[1], cfg.pads[1])
        self.conv_out_size = size
        self.conv1 = EquivariantConvLayer(
            store, f"{name}.conv1", group,
            ConvSpec(cfg.conv_in_channels(), cfg.conv_orbits[0], cfg.kernel,
                     cfg.strides[0], cfg.pads[0], lift=True), gain=cfg.conv_gain)
        self.conv2 = EquivariantConvLayer(
            store, f"{name}.conv2", group,
            ConvSpec(cfg.conv_orbits[0], cfg.conv_orbits[1], cfg.kernel,
                     cfg.strides[1], cfg.pads[1]), gain=cfg.conv_gain)
        rx, ry, tr = irrep(group, "x"), irrep(group, "y"), trivial_rep(group)
        self.state_rep = direct_sum([rx, ry, tr, tr])
        self.aux_rep = direct_sum([rx, ry, tr])
        vec_rep = direct_sum([rx, ry, tr, tr, rx, ry, tr])
        self.mlp1 = EquivariantLinearLayer(
            store, f"{name}.mlp1", vec_rep, regular_stack(group, cfg.mlp_orbits[0]),
            gain=cfg.mlp_gain)
        self.mlp2 = EquivariantLinearLayer(
            store, f"{name}.mlp2", regular_stack(group, cfg.mlp_orbits[0]),
            regular_stack(group, cfg.mlp_orbits[1]), gain=cfg.mlp_gain)
        self._flatten_perm = self._build_flatten_perm()
        self.conv_feature_orbits = cfg.conv_orbits[1] * size * size
        self.out_orbits = self.conv_feature_orbits + cfg.mlp_orbits[1]
        self.feature_rep = regular_stack(group, self.out_orbits)
        self.equi_dim = self.out_orbits * n
        self.inv_dim = self.out_orbits
        self.policy_in_dim = self.equi_dim
        self.value_in_dim = self.inv_dim

    def _build_flatten_perm(self) -> np.ndarray:
        """Reorder flattened (channel, pixel) conv outputs into regular blocks.

        The joint action moves (orbit, h, pixel) to (orbit, g h, g pixel), so
        the pairs (h, g(p)) for fixed (orbit, p) form one free orbit; listing
        them in canonical element order yields a regular block per (orbit,
        pixel) pair, keeping spatial structure without breaking equivariance.
        """
        s = self.conv_out_size
        n = self.group.order
        action = SpatialAction(self.group)
        base = np.arange(s * s).reshape(s, s)
        fwd = []
        for g in self.group.elements():
            inv_map = action.apply(g, base).ravel()  # target -> source index
            f = np.empty(s * s, dtype=np.intp)
            f[inv_map] = np.arange(s * s)
            fwd.append(f)                            # source -> target index
        orbits = self.cfg.conv_orbits[1]
        perm = np.empty(orbits * s * s * n, dtype=np.intp)
        k = 0
        for o in range(orbits):
            for p in range(s * s):
                for gi in range(n):
                    perm[k] = (o * n + gi) * s * s + fwd[gi][p]
                    k += 1
        return perm

    def _validate(self, images: np.ndarray, vectors: np.ndarray):
        cfg = self.cfg
        if images.shape[-3:] != (cfg.conv_in_channels(), cfg.image_size, cfg.image_size):
            raise ValueError(f"image batch shape {images.shape} does not match "
                             f"extractor input {(cfg.conv_in_channels(), cfg.image_size, cfg.image_size)}")
        if vectors.shape[-1] != cfg.state_dim + cfg.aux_dim:
            raise ValueError("state/auxiliary vector has wrong dimension")

    def forward_batch(self, images, vectors) -> tuple[FieldTensor, FieldTensor]:
        """(equi_features, inv_features) for stacked inputs.

        images: (N, 2C, H, W) current+initial planes; vectors: (N, 7).
        """
        images = np.asarray(images, dtype=np.float64)
        vectors = np.asarray(vectors, dtype=np.float64)
        self._validate(images, vectors)
        x = FieldTensor(images)
        v = FieldTensor(vectors)
        c = ad.relu(self.conv1(x))
        c = ad.relu(self.conv2(c))                    # (N, Co*|G|, S, S)
        lead = c.values.shape[:-3]
        c = ad.reshape(c, lead + (int(np.prod(c.values.shape[-3:])),))
        c = ad.permute_last(c, self._flatten_perm)    # regular blocks, position kept
        h = ad.relu(self.mlp1(v))
        h = ad.relu(self.mlp2(h))
        equi = ad.concat([c, h], axis=-1)
        inv = ad.mul(group_pool(equi, self.group.order),
                     ad.constant(self.cfg.inv_scale))
        return equi, inv


class PlainConvExtractor(_ObservationInterface):
    """Unconstrained conv+MLP twin of FeatureExtractor (the ablation).

    Channel widths are chosen so the trainable parameter count matches the
    equivariant extractor within a few percent.  There is no group pooling;
    policy and value heads both consume the raw features.
    """

    kind = "cnn"

    def __init__(self, store: ParamStore, group: GroupSpec,
                 cfg: ExtractorConfig | None = None, name: str = "extractor",
                 conv_channels: tuple[int, int] = (14, 32),
                 mlp_widths: tuple[int, int] = (16, 16)):
        self.cfg = cfg = cfg or ExtractorConfig()
        self.group = group
        self.store = store
        self.name = name
        self.conv_channels = conv_channels
        self.mlp_widths = mlp_widths
        cin = cfg.conv_in_channels()
        k = cfg.kernel
        self.k1 = store.create(f"{name}.conv1.kernel", (conv_channels[0], cin, k, k),
                               scale=cfg.conv_gain * np.sqrt(2.0 / (cin * k * k)))
        self.b1 = store.create(f"{name}.conv1.bias", (conv_channels[0],), init="zeros")
        self.k2 = store.create(f"{name}.conv2.kernel",
                               (conv_channels[1], conv_channels[0], k, k),
                               scale=cfg.conv_gain * np.sqrt(2.0 / (conv_channels[0] * k * k)))
        self.b2 = store.create(f"{name}.conv2.bias", (conv_channels[1],), init="zeros")
        vec_dim = cfg.state_dim + cfg.aux_dim
        self.w1 = store.create(f"{name}.mlp1.w", (mlp_widths[0], vec_dim),
                               scale=cfg.mlp_gain * np.sqrt(2.0 / vec_dim))
        self.bw1 = store.create(f"{name}.mlp1.b", (mlp_widths[0],), init="zeros")
        self.w2 = store.create(f"{name}.mlp2.w", (mlp_widths[1], mlp_widths[0]),
                               scale=cfg.mlp_gain * np.sqrt(2.0 / mlp_widths[0]))
        self.bw2 = store.create(f"{name}.mlp2.b", (mlp_widths[1],), init="zeros")
        size = cfg.image_size
        size = _check_stride_exactness(size, cfg.kernel, cfg.strides[0], cfg.pads[0])
        size = _check_stride_exactness(size, cfg.kernel, cfg.strides[1], cfg.pads[1])
        self.conv_out_size = size
        self.out_dim = conv_channels[1] * size * size + mlp_widths[1]
        self.equi_dim = self.out_dim
        self.inv_dim = self.out_dim
        self.policy_in_dim = self.out_dim
        self.value_in_dim = self.out_dim

    def forward_batch(self, images, vectors) -> tuple[FieldTensor, FieldTensor]:
        images = np.asarray(images, dtype=np.float64)
        vectors = np.asarray(vectors, dtype=np.float64)
        cfg = self.cfg
        x = FieldTensor(images)
        v = FieldTensor(vectors)
        c = ad.relu(ad.add(ad.conv2d(x, self.k1, stride=cfg.strides[0], pad=cfg.pads[0]),
                           ad.reshape(self.b1, (self.conv_channels[0], 1, 1))))
        c = ad.relu(ad.add(ad.conv2d(c, self.k2, stride=cfg.strides[1], pad=cfg.pads[1]),
                           ad.reshape(self.b2, (self.conv_channels[1], 1, 1))))
        lead = c.values.shape[:-3]
        c = ad.reshape(c, lead + (int(np.prod(c.values.shape[-3:])),))
        h = ad.relu(ad.affine(v, self.w1, self.bw1))
        h = ad.relu(ad.affine(h, self.w2, self.bw2))
        feats = ad.concat([c, h], axis=-1)
        scaled = ad.mul(feats, ad.constant(self.cfg.inv_scale))
        return feats, scaled

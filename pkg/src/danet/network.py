"""Embedding network and attractor math.

A stack of bidirectional GRU layers followed by one linear map produces a
K-dimensional embedding per time-frequency bin. Attractors are mask-weighted
embedding means; dot products against them drive sigmoid masks and a
magnitude-weighted reconstruction loss. Both the forward pass and the exact
gradients are implemented here in plain numpy.

Embedding layout: V is K x (F*T) with column index t*F + f (frequency-major
within each frame). An F x T matrix M flattens to that layout via
M.ravel(order="F").
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _sigmoid

GATE_ORDER = "zrn"  # row-block order inside stacked gate tensors


@dataclass(frozen=True)
class ArchSpec:
    """Network dimensions. cell_kind 'lstm' exists for parameter counting only."""

    input_dim: int = 129
    num_layers: int = 4
    hidden_per_direction: int = 300
    embed_dim: int = 20
    cell_kind: str = "gru"

    def __post_init__(self):
        if min(self.input_dim, self.num_layers, self.hidden_per_direction) < 1:
            raise ValueError(f"non-positive architecture dimension in {self}")
        if self.embed_dim < 0:
            raise ValueError(f"embed_dim must be >= 0, got {self.embed_dim}")
        if self.cell_kind not in ("gru", "lstm"):
            raise ValueError(f"cell_kind must be 'gru' or 'lstm', got {self.cell_kind!r}")

    @property
    def fc_output(self) -> int:
        return self.embed_dim * self.input_dim

    def layer_input(self, layer: int) -> int:
        return self.input_dim if layer == 0 else 2 * self.hidden_per_direction


def count_params(arch: ArchSpec) -> int:
    """Closed-form trainable-parameter count.

    Per direction and layer: gates * (in*h + h*h + 2h) with 3 gates for GRU
    and 4 for LSTM; both an input and a recurrent bias per gate. The final
    linear map adds 2h * (K*F) weights plus K*F biases.
    """
    gates = 3 if arch.cell_kind == "gru" else 4
    h = arch.hidden_per_direction
    total = 0
    for layer in range(arch.num_layers):
        per_direction = gates * (arch.layer_input(layer) * h + h * h + 2 * h)
        total += 2 * per_direction
    total += 2 * h * arch.fc_output + arch.fc_output
    return total


@dataclass
class ModelParams:
    """Named parameter tensors plus the frozen feature statistics.

    Tensor order is the serialization contract: for each layer, for each
    direction (fw, bw): W (3h x in), U (3h x h), b_i (3h), b_h (3h), with
    gate rows stacked z, r, n; then fc.W (K*F x 2h) and fc.b (K*F).
    """

    arch: ArchSpec
    tensors: dict[str, np.ndarray]
    feat_mean: np.ndarray = field(default=None)
    feat_std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.feat_mean is None:
            self.feat_mean = np.zeros(self.arch.input_dim)
        if self.feat_std is None:
            self.feat_std = np.ones(self.arch.input_dim)
        expected = tensor_shapes(self.arch)
        if list(self.tensors.keys()) != list(expected.keys()):
            raise ValueError("parameter tensor names/order do not match architecture")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, "
                                 f"got {self.tensors[name].shape}")

    def cell(self, layer: int, direction: str) -> dict[str, np.ndarray]:
        prefix = f"l{layer}.{direction}."
        return {k: self.tensors[prefix + k] for k in ("W", "U", "b_i", "b_h")}

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                           self.feat_mean.copy(), self.feat_std.copy())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def tensor_shapes(arch: ArchSpec) -> dict[str, tuple]:
    if arch.cell_kind != "gru":
        raise ValueError("only GRU cells are trainable")
    h = arch.hidden_per_direction
    shapes: dict[str, tuple] = {}
    for layer in range(arch.num_layers):
        d_in = arch.layer_input(layer)
        for direction in ("fw", "bw"):
            prefix = f"l{layer}.{direction}."
            shapes[prefix + "W"] = (3 * h, d_in)
            shapes[prefix + "U"] = (3 * h, h)
            shapes[prefix + "b_i"] = (3 * h,)
            shapes[prefix + "b_h"] = (3 * h,)
    shapes["fc.W"] = (arch.fc_output, 2 * h)
    shapes["fc.b"] = (arch.fc_output,)
    return shapes


def init_params(arch: ArchSpec, seed: int) -> ModelParams:
    """Uniform init in [-1/sqrt(h), 1/sqrt(h)] per tensor, seeded."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(arch.hidden_per_direction)
    tensors = {name: rng.uniform(-bound, bound, size=shape)
               for name, shape in tensor_shapes(arch).items()}
    return ModelParams(arch, tensors)


def gru_cell(x: np.ndarray, h_prev: np.ndarray, cell: dict[str, np.ndarray]) -> np.ndarray:
    """One GRU step.

    z = sig(W_z x + U_z h + b_iz + b_hz), r likewise,
    n = tanh(W_n x + b_in + r * (U_n h + b_hn)), out = (1-z)*n + z*h.
    """
    h = h_prev.shape[-1]
    if x.shape[-1] != cell["W"].shape[1] or 3 * h != cell["U"].shape[0]:
        raise ValueError(f"dimension mismatch: x {x.shape}, h_prev {h_prev.shape}, "
                         f"W {cell['W'].shape}, U {cell['U'].shape}")
    a = x @ cell["W"].T + cell["b_i"]
    rec = h_prev @ cell["U"].T + cell["b_h"]
    z = _sigmoid(a[..., :h] + rec[..., :h])
    r = _sigmoid(a[..., h:2 * h] + rec[..., h:2 * h])
    n = np.tanh(a[..., 2 * h:] + r * rec[..., 2 * h:])
    return (1.0 - z) * n + z * h_prev


class _DirectionCache:
    """Per-timestep activations kept for backpropagation through time."""

    __slots__ = ("z", "r", "n", "rn", "h", "reverse")

    def __init__(self, z, r, n, rn, h, reverse):
        self.z, self.r, self.n, self.rn, self.h = z, r, n, rn, h
        self.reverse = reverse


def _run_direction(x_seq: np.ndarray, frame_mask: np.ndarray,
                   cell: dict[str, np.ndarray], reverse: bool):
    """Run one GRU direction over a padded batch.

    Padded steps (frame_mask 0) carry the hidden state through unchanged, so
    the backward direction of a short utterance starts from zeros at its true
    last frame rather than from padding.
    """
    B, T, _ = x_seq.shape
    h_dim = cell["U"].shape[1]
    a_in = x_seq @ cell["W"].T + cell["b_i"]

    z = np.empty((B, T, h_dim))
    r = np.empty((B, T, h_dim))
    n = np.empty((B, T, h_dim))
    rn = np.empty((B, T, h_dim))
    h_seq = np.empty((B, T, h_dim))

    h = np.zeros((B, h_dim))
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        rec = h @ cell["U"].T + cell["b_h"]
        z_t = _sigmoid(a_in[:, t, :h_dim] + rec[:, :h_dim])
        r_t = _sigmoid(a_in[:, t, h_dim:2 * h_dim] + rec[:, h_dim:2 * h_dim])
        rn_t = rec[:, 2 * h_dim:]
        n_t = np.tanh(a_in[:, t, 2 * h_dim:] + r_t * rn_t)
        h_new = (1.0 - z_t) * n_t + z_t * h
        m = frame_mask[:, t][:, None]
        h = m * h_new + (1.0 - m) * h
        z[:, t], r[:, t], n[:, t], rn[:, t], h_seq[:, t] = z_t, r_t, n_t, rn_t, h
    return h_seq, _DirectionCache(z, r, n, rn, h_seq, reverse)


def _h_prev_seq(cache: _DirectionCache) -> np.ndarray:
    """Hidden state seen as input at each step (zeros at the sequence start)."""
    h_prev = np.zeros_like(cache.h)
    if cache.reverse:
        h_prev[:, :-1] = cache.h[:, 1:]
    else:
        h_prev[:, 1:] = cache.h[:, :-1]
    return h_prev


def _backward_direction(d_out: np.ndarray, x_seq: np.ndarray, frame_mask: np.ndarray,
                        cell: dict[str, np.ndarray], cache: _DirectionCache):
    """BPTT for one direction; returns (dx_seq, grads for W/U/b_i/b_h)."""
    B, T, h_dim = d_out.shape
    h_prev = _h_prev_seq(cache)
    d_a = np.zeros((B, T, 3 * h_dim))    # pre-activation grads, input side (z, r, n)
    d_rec = np.zeros((B, T, 3 * h_dim))  # pre-activation grads, recurrent side (z, r, n)

    carry = np.zeros((B, h_dim))
    steps = range(T) if cache.reverse else range(T - 1, -1, -1)
    for t in steps:
        g = d_out[:, t] + carry
        m = frame_mask[:, t][:, None]
        d_new = g * m
        z_t, r_t, n_t, rn_t = cache.z[:, t], cache.r[:, t], cache.n[:, t], cache.rn[:, t]
        hp = h_prev[:, t]

        dz = d_new * (hp - n_t)
        dn = d_new * (1.0 - z_t)
        d_hp = d_new * z_t + g * (1.0 - m)

        dan = dn * (1.0 - n_t * n_t)
        dr = dan * rn_t
        drn = dan * r_t
        daz = dz * z_t * (1.0 - z_t)
        dar = dr * r_t * (1.0 - r_t)

        d_a[:, t, :h_dim] = daz
        d_a[:, t, h_dim:2 * h_dim] = dar
        d_a[:, t, 2 * h_dim:] = dan
        d_rec[:, t, :h_dim] = daz
        d_rec[:, t, h_dim:2 * h_dim] = dar
        d_rec[:, t, 2 * h_dim:] = drn

        carry = d_hp + d_rec[:, t] @ cell["U"]

    flat_a = d_a.reshape(B * T, 3 * h_dim)
    flat_rec = d_rec.reshape(B * T, 3 * h_dim)
    grads = {
        "W": flat_a.T @ x_seq.reshape(B * T, -1),
        "U": flat_rec.T @ h_prev.reshape(B * T, h_dim),
        "b_i": flat_a.sum(axis=0),
        "b_h": flat_rec.sum(axis=0),
    }
    dx_seq = d_a @ cell["W"]
    return dx_seq, grads


class _ForwardCache:
    __slots__ = ("layer_inputs", "direction_caches", "layer_out", "emb")

    def __init__(self):
        self.layer_inputs = []
        self.direction_caches = []
        self.layer_out = None
        self.emb = None


def _forward_batch(x: np.ndarray, frame_mask: np.ndarray, params: ModelParams):
    """BGRU stack + linear map on a padded batch.

    x: (B, T, F) features, frame_mask: (B, T) in {0, 1}.
    Returns emb (B, T, F, K) and the cache for the backward pass.
    """
    arch = params.arch
    cache = _ForwardCache()
    seq = x
    for layer in range(arch.num_layers):
        cache.layer_inputs.append(seq)
        h_fw, c_fw = _run_direction(seq, frame_mask, params.cell(layer, "fw"), False)
        h_bw, c_bw = _run_direction(seq, frame_mask, params.cell(layer, "bw"), True)
        cache.direction_caches.append((c_fw, c_bw))
        seq = np.concatenate([h_fw, h_bw], axis=2)
    cache.layer_out = seq

    B, T = x.shape[:2]
    y = seq @ params.tensors["fc.W"].T + params.tensors["fc.b"]
    cache.emb = y.reshape(B, T, arch.input_dim, arch.embed_dim)
    return cache.emb, cache


def _backward_batch(d_emb: np.ndarray, frame_mask: np.ndarray, params: ModelParams,
                    cache: _ForwardCache) -> dict[str, np.ndarray]:
    """Gradients of every parameter tensor given d loss / d embeddings."""
    arch = params.arch
    B, T = d_emb.shape[:2]
    dy = d_emb.reshape(B, T, arch.fc_output)
    flat_dy = dy.reshape(B * T, arch.fc_output)
    flat_out = cache.layer_out.reshape(B * T, -1)

    grads = {"fc.W": flat_dy.T @ flat_out, "fc.b": flat_dy.sum(axis=0)}
    d_seq = dy @ params.tensors["fc.W"]

    h = arch.hidden_per_direction
    for layer in range(arch.num_layers - 1, -1, -1):
        c_fw, c_bw = cache.direction_caches[layer]
        x_seq = cache.layer_inputs[layer]
        dx_fw, g_fw = _backward_direction(d_seq[..., :h], x_seq, frame_mask,
                                          params.cell(layer, "fw"), c_fw)
        dx_bw, g_bw = _backward_direction(d_seq[..., h:], x_seq, frame_mask,
                                          params.cell(layer, "bw"), c_bw)
        for key, grad in g_fw.items():
            grads[f"l{layer}.fw.{key}"] = grad
        for key, grad in g_bw.items():
            grads[f"l{layer}.bw.{key}"] = grad
        d_seq = dx_fw + dx_bw
    return {name: grads[name] for name in params.tensors}


def forward_embed(features: np.ndarray, params: ModelParams) -> np.ndarray:
    """Embed one utterance: (F, T) features -> V of shape (K, F*T)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != params.arch.input_dim:
        raise ValueError(f"expected {params.arch.input_dim} feature rows, "
                         f"got {features.shape[0]}")
    T = features.shape[1]
    x = features.T[None, :, :]
    emb, _ = _forward_batch(x, np.ones((1, T)), params)
    V = emb[0].reshape(T * features.shape[0], params.arch.embed_dim).T
    if not np.all(np.isfinite(V)):
        raise FloatingPointError("non-finite activations in forward pass")
    return V


def flatten_tf(mat: np.ndarray) -> np.ndarray:
    """F x T matrix -> length F*T vector in embedding column order (t*F + f)."""
    return np.asarray(mat).ravel(order="F")


def unflatten_tf(vec: np.ndarray, num_freqs: int) -> np.ndarray:
    """Inverse of flatten_tf: length F*T vector -> F x T matrix."""
    return np.asarray(vec).reshape(-1, num_freqs).T


def train_attractors(V: np.ndarray, ideal_masks: list[np.ndarray]) -> np.ndarray:
    """Mask-weighted embedding means, one K-vector row per speaker."""
    rows = []
    for i, mask in enumerate(ideal_masks):
        flat = flatten_tf(mask)
        if flat.size != V.shape[1]:
            raise ValueError(f"mask {i} has {flat.size} bins, embeddings have {V.shape[1]}")
        weight = flat.sum()
        if weight == 0:
            raise ValueError(f"mask {i} is all-zero; attractor undefined")
        rows.append((flat @ V.T) / weight)
    return np.stack(rows)


def estimate_masks(V: np.ndarray, attractors: np.ndarray, num_freqs: int) -> list[np.ndarray]:
    """Sigmoid of attractor--embedding dot products, reshaped to F x T."""
    attractors = np.atleast_2d(np.asarray(attractors, dtype=np.float64))
    if attractors.shape[1] != V.shape[0]:
        raise ValueError(f"attractor dim {attractors.shape[1]} != embedding dim {V.shape[0]}")
    scores = attractors @ V
    return [unflatten_tf(_sigmoid(row), num_freqs) for row in scores]


def reconstruction_loss(mix_mag: np.ndarray, ideal_masks: list[np.ndarray],
                        est_masks: list[np.ndarray]) -> float:
    """Mean over speakers of the squared magnitude-weighted mask error."""
    if len(ideal_masks) != len(est_masks):
        raise ValueError(f"{len(ideal_masks)} ideal masks vs {len(est_masks)} estimates")
    mix_mag = np.asarray(mix_mag, dtype=np.float64)
    total = 0.0
    for m, m_hat in zip(ideal_masks, est_masks):
        if m.shape != mix_mag.shape or m_hat.shape != mix_mag.shape:
            raise ValueError("mask shape does not match magnitude shape")
        diff = mix_mag * (np.asarray(m) - np.asarray(m_hat))
        total += float(np.sum(diff * diff))
    return total / len(ideal_masks)


def _pad_batch(features, mix_mags, ideal_masks, arch):
    B = len(features)
    if not (B == len(mix_mags) == len(ideal_masks)):
        raise ValueError("features, magnitudes and masks must align")
    n_spk = len(ideal_masks[0])
    F = arch.input_dim
    lengths = [f.shape[1] for f in features]
    T = max(lengths)

    x = np.zeros((B, T, F))
    X = np.zeros((B, T, F))
    M = np.zeros((B, n_spk, T, F))
    frame_mask = np.zeros((B, T))
    for b in range(B):
        t_b = lengths[b]
        x[b, :t_b] = np.asarray(features[b]).T
        X[b, :t_b] = np.asarray(mix_mags[b]).T
        frame_mask[b, :t_b] = 1.0
        if len(ideal_masks[b]) != n_spk:
            raise ValueError("speaker count differs across the batch")
        for i, mask in enumerate(ideal_masks[b]):
            M[b, i, :t_b] = np.asarray(mask).T
    return x, X, M, frame_mask, n_spk


def _attractor_masks(emb, M):
    """Per-utterance attractors and sigmoid mask estimates from a padded batch."""
    mass = M.sum(axis=(2, 3))
    if np.any(mass == 0):
        raise ValueError("an utterance has an all-zero ideal mask; attractor undefined")
    attractors = np.einsum("bitf,btfk->bik", M, emb) / mass[:, :, None]
    scores = np.einsum("bik,btfk->bitf", attractors, emb)
    return mass, attractors, _sigmoid(scores)


def batch_loss(features: list[np.ndarray], mix_mags: list[np.ndarray],
               ideal_masks: list[list[np.ndarray]], params: ModelParams) -> float:
    """Mean per-utterance loss over a padded batch, forward pass only."""
    x, X, M, frame_mask, n_spk = _pad_batch(features, mix_mags, ideal_masks, params.arch)
    emb, _ = _forward_batch(x, frame_mask, params)
    if not np.all(np.isfinite(emb)):
        raise FloatingPointError("non-finite activations in forward pass")
    _, _, m_hat = _attractor_masks(emb, M)
    err = M - m_hat
    return float(np.sum((X * X)[:, None] * err * err)) / (n_spk * len(features))


def batch_loss_and_grads(features: list[np.ndarray], mix_mags: list[np.ndarray],
                         ideal_masks: list[list[np.ndarray]], params: ModelParams):
    """Mean per-utterance loss and its exact parameter gradients.

    Utterances are zero-padded to a common frame count; a per-utterance frame
    mask keeps padded frames out of the recurrences and out of the loss.
    """
    B = len(features)
    x, X, M, frame_mask, n_spk = _pad_batch(features, mix_mags, ideal_masks, params.arch)

    emb, cache = _forward_batch(x, frame_mask, params)
    if not np.all(np.isfinite(emb)):
        raise FloatingPointError("non-finite activations in forward pass")

    mass, attractors, m_hat = _attractor_masks(emb, M)
    Xsq = X * X
    err = M - m_hat
    loss = float(np.sum(Xsq[:, None] * err * err)) / (n_spk * B)

    d_mhat = (2.0 / (n_spk * B)) * Xsq[:, None] * (m_hat - M)
    d_scores = d_mhat * m_hat * (1.0 - m_hat)
    d_attr = np.einsum("bitf,btfk->bik", d_scores, emb)
    d_emb = np.einsum("bitf,bik->btfk", d_scores, attractors)
    d_emb += np.einsum("bik,bitf->btfk", d_attr / mass[:, :, None], M)

    grads = _backward_batch(d_emb, frame_mask, params, cache)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    return loss, grads


def backward(features: np.ndarray, mix_mag: np.ndarray,
             ideal_masks: list[np.ndarray], params: ModelParams):
    """Single-utterance loss and exact gradients for every parameter tensor."""
    return batch_loss_and_grads([features], [mix_mag], [ideal_masks], params)


TINY_NET = ArchSpec(input_dim=5, num_layers=1, hidden_per_direction=4, embed_dim=3)


def finite_difference_check(arch: ArchSpec = TINY_NET, seed: int = 0,
                            step: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Compare analytic gradients against central finite differences.

    The numeric side re-evaluates the loss through the single-utterance
    operation chain (embed, attractors, masks, loss) and never touches the
    analytic backward pass. Returns the overall max relative error and the
    per-tensor maxima.
    """
    rng = np.random.default_rng(seed)
    T, n_spk = 4, 2
    params = init_params(arch, seed)
    features = rng.normal(size=(arch.input_dim, T))
    mix_mag = rng.uniform(0.2, 1.5, size=(arch.input_dim, T))
    owner = rng.integers(0, n_spk, size=(arch.input_dim, T))
    masks = [(owner == i).astype(float) for i in range(n_spk)]

    def loss_at() -> float:
        V = forward_embed(features, params)
        attractors = train_attractors(V, masks)
        est = estimate_masks(V, attractors, arch.input_dim)
        return reconstruction_loss(mix_mag, masks, est)

    _, analytic = backward(features, mix_mag, masks, params)

    per_tensor: dict[str, float] = {}
    for name, tensor in params.tensors.items():
        flat = tensor.ravel()
        a_flat = analytic[name].ravel()
        worst = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            plus = loss_at()
            flat[idx] = orig - step
            minus = loss_at()
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(a_flat[idx]), abs(numeric), 1e-5)
            worst = max(worst, abs(a_flat[idx] - numeric) / denom)
        per_tensor[name] = worst
    return max(per_tensor.values()), per_tensor


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm; returns the norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm

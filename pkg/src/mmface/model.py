"""The fusion model: TCN encoders, per-latent mixture fusion, decoders, losses.

Two forward implementations share one parameter set:

* a batched, tape-recorded path used for training and gradient checking
  (``encode_modality`` .. ``loss``), and
* a strictly per-frame causal evaluator used for offline inference
  (``infer``) whose arithmetic per output frame is independent of the
  clip length, so streaming with ring buffers reproduces it bit-exactly.

Model variants cover the ablation grid: KL placements (tags a-d), input
reconstruction removed (e), a direct regression baseline (f), and
single-modality models (audio_only / gaze_only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mmface import tensor as tt
from mmface.tensor import Tape, Tensor

MODALITIES = ("audio", "gaze")

VARIANT_TAGS = ("a", "b", "c", "d", "e", "f", "audio_only", "gaze_only")

VARIANT_DESCRIPTIONS = {
    "a": "no KL loss",
    "b": "KL on per-modality latents",
    "c": "KL on the shared latent",
    "d": "KL on per-modality and shared latents",
    "e": "no input reconstruction",
    "f": "direct regression baseline",
    "audio_only": "single-modality: audio",
    "gaze_only": "single-modality: gaze",
}


class ModelStateError(RuntimeError):
    """Parameters absent or incompatible with the requested model variant."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults give the full-size model."""
    channels: int = 128
    latent: int = 64
    layers: int = 5
    kernel: int = 5
    leak: float = 0.2
    audio_dim: int = 80
    gaze_dim: int = 4
    face_dim: int = 256
    lookahead: int = 0
    sigma_min: float = 1e-4
    sigma_max: float = 10.0

    def dilations(self):
        return [2 ** l for l in range(self.layers)]

    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations())

    def modality_dim(self, name: str) -> int:
        return {"audio": self.audio_dim, "gaze": self.gaze_dim,
                "face": self.face_dim}[name]


@dataclass(frozen=True)
class VariantSpec:
    tag: str
    modalities: tuple
    mixture: bool
    reconstructed: tuple      # modalities decoded back out during training
    kl_shared: bool
    kl_modality: bool
    regression: bool


def variant_spec(tag: str) -> VariantSpec:
    if tag not in VARIANT_TAGS:
        raise ValueError(f"unknown variant tag {tag!r}")
    both = ("audio", "gaze")
    table = {
        "a": VariantSpec("a", both, True, both, False, False, False),
        "b": VariantSpec("b", both, True, both, False, True, False),
        "c": VariantSpec("c", both, True, both, True, False, False),
        "d": VariantSpec("d", both, True, both, True, True, False),
        "e": VariantSpec("e", both, True, (), False, False, False),
        "f": VariantSpec("f", both, False, (), False, False, True),
        "audio_only": VariantSpec("audio_only", ("audio",), False, ("audio",),
                                  True, False, False),
        "gaze_only": VariantSpec("gaze_only", ("gaze",), False, ("gaze",),
                                 True, False, False),
    }
    return table[tag]


# ---------------------------------------------------------------------------
# domain types


@dataclass
class LatentGaussian:
    """Per-frame posterior for one modality: mu and sigma, each (T, L)."""
    mu: Tensor
    sigma: Tensor


@dataclass
class MixtureWeights:
    """Convex per-frame, per-latent-coefficient weights, (M, T, L)."""
    pi: Tensor

    def validate(self, atol: float = 1e-6) -> None:
        p = self.pi.data
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=0) - 1.0) > atol):
            raise ValueError("mixture weights must be convex per coordinate")


@dataclass
class FusedLatent:
    """Shared latent sample plus its analytic mean and standard deviation."""
    z: Tensor
    mu_fused: Tensor
    sigma_fused: Tensor


@dataclass
class LossBreakdown:
    face_rec: float
    audio_rec: float
    gaze_rec: float
    kl_shared: float
    kl_modality: float
    total: float
    total_tensor: Tensor | None = field(default=None, repr=False)

    def as_dict(self):
        return {"face_rec": self.face_rec, "audio_rec": self.audio_rec,
                "gaze_rec": self.gaze_rec, "kl_shared": self.kl_shared,
                "kl_modality": self.kl_modality, "total": self.total}


# ---------------------------------------------------------------------------
# parameters


def _stacks_for(spec: VariantSpec):
    if spec.regression:
        return ["reg"]
    stacks = [f"enc_{m}" for m in spec.modalities]
    if spec.mixture:
        stacks.append("enc_mix")
    stacks.append("dec_face")
    stacks += [f"dec_{m}" for m in spec.reconstructed]
    return stacks


def _trunk_input_dim(stack: str, cfg: ModelConfig, spec: VariantSpec) -> int:
    if stack == "reg" or stack == "enc_mix":
        return sum(cfg.modality_dim(m) for m in spec.modalities)
    if stack.startswith("enc_"):
        return cfg.modality_dim(stack[4:])
    return cfg.latent  # decoders read the latent


def _head_dims(stack: str, cfg: ModelConfig, spec: VariantSpec):
    """(head name, output width) pairs hanging off a trunk's top."""
    if stack == "enc_mix":
        return [("pi", len(spec.modalities) * cfg.latent)]
    if stack.startswith("enc_"):
        return [("mu", cfg.latent), ("logsig", cfg.latent)]
    if stack == "reg":
        return [("out", cfg.face_dim)]
    return [("out", cfg.modality_dim(stack[4:]))]


def init_params(cfg: ModelConfig, variant: str, seed: int = 0) -> dict:
    """Seeded parameter dictionary for one variant.

    Kernels draw uniformly from +-sqrt(1 / (fan_in * K)); biases start at
    zero.  Names follow "<stack>/<piece>" with pieces resize_w/b,
    conv<l>_w/b per dilated layer, and one or two head_w/b pairs.
    """
    spec = variant_spec(variant)
    rng = np.random.default_rng(seed)
    dtype = tt.default_dtype()
    params = {}

    def uniform(shape, fan_in, k=1):
        bound = math.sqrt(1.0 / (fan_in * k))
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                      requires_grad=True)

    for stack in _stacks_for(spec):
        d_in = _trunk_input_dim(stack, cfg, spec)
        c = cfg.channels
        params[f"{stack}/resize_w"] = uniform((c, d_in), d_in)
        params[f"{stack}/resize_b"] = Tensor(np.zeros(c, dtype), requires_grad=True)
        for l in range(cfg.layers):
            params[f"{stack}/conv{l}_w"] = uniform((c, c, cfg.kernel), c, cfg.kernel)
            params[f"{stack}/conv{l}_b"] = Tensor(np.zeros(c, dtype), requires_grad=True)
        for head, width in _head_dims(stack, cfg, spec):
            params[f"{stack}/{head}_w"] = uniform((width, c), c)
            params[f"{stack}/{head}_b"] = Tensor(np.zeros(width, dtype),
                                                 requires_grad=True)
    return params


def check_params(params: dict, cfg: ModelConfig, variant: str) -> None:
    """Raise ModelStateError if params do not cover the variant's tensors."""
    spec = variant_spec(variant)
    for stack in _stacks_for(spec):
        for name in (f"{stack}/resize_w", f"{stack}/conv0_w"):
            if name not in params:
                raise ModelStateError(
                    f"parameters missing {name!r}; checkpoint does not match "
                    f"variant {variant!r}")
    rs = params[f"{_stacks_for(spec)[0]}/resize_w"].data
    if rs.shape[0] != cfg.channels:
        raise ModelStateError("parameter widths disagree with the model config")


# ---------------------------------------------------------------------------
# batched (training) forward path


def _trunk(tape, params, stack, x_ct, cfg: ModelConfig) -> Tensor:
    """Shared TCN trunk over a (C_in, T) map: resize, dilated stack, skips."""
    h = tt.leaky_relu(tape, tt.pointwise_conv(
        tape, x_ct, params[f"{stack}/resize_w"], params[f"{stack}/resize_b"]),
        cfg.leak)
    for l, d in enumerate(cfg.dilations()):
        y = tt.conv1d_dilated(tape, h, params[f"{stack}/conv{l}_w"], dilation=d,
                              lookahead=cfg.lookahead)
        y = tt.leaky_relu(tape, tt.bias_add(tape, y, params[f"{stack}/conv{l}_b"]),
                          cfg.leak)
        h = tt.add(tape, h, y)
    return h


def _head(tape, params, stack, head, h_ct) -> Tensor:
    return tt.pointwise_conv(tape, h_ct, params[f"{stack}/{head}_w"],
                             params[f"{stack}/{head}_b"])


def encode_modality(tape, params, modality: str, feats_tl: Tensor,
                    cfg: ModelConfig) -> LatentGaussian:
    """TCN encoder for one modality: (T, D_m) features to a (T, L) Gaussian."""
    if feats_tl.data.shape[1] != cfg.modality_dim(modality):
        raise ValueError(
            f"{modality} features have width {feats_tl.data.shape[1]}, "
            f"expected {cfg.modality_dim(modality)}")
    h = _trunk(tape, params, f"enc_{modality}", tt.transpose2d(tape, feats_tl), cfg)
    mu = tt.transpose2d(tape, _head(tape, params, f"enc_{modality}", "mu", h))
    logsig = tt.transpose2d(tape, _head(tape, params, f"enc_{modality}", "logsig", h))
    sigma = tt.clamp(tape, tt.exp(tape, logsig), cfg.sigma_min, cfg.sigma_max)
    return LatentGaussian(mu=mu, sigma=sigma)


def encode_mixture(tape, params, feats_by_modality: dict,
                   cfg: ModelConfig) -> MixtureWeights:
    """Mixture encoder over concatenated raw features: weights (M, T, L).

    Softmax runs across the modality axis independently for every frame
    and latent coefficient, so each coefficient's weights sum to one.
    """
    for m in MODALITIES:
        if m not in feats_by_modality:
            raise ValueError(f"mixture encoder requires modality {m!r}")
    cat = tt.concat_rows(tape, [tt.transpose2d(tape, feats_by_modality[m])
                                for m in MODALITIES])
    h = _trunk(tape, params, "enc_mix", cat, cfg)
    logits = _head(tape, params, "enc_mix", "pi", h)       # (M*L, T)
    T = logits.data.shape[1]
    logits = tt.swap_last2(tape, tt.reshape(tape, logits,
                                            (len(MODALITIES), cfg.latent, T)))
    return MixtureWeights(pi=tt.softmax_over_modalities(tape, logits))


def sample_latent(tape, g: LatentGaussian, noise: Tensor) -> Tensor:
    """Reparameterized draw z = mu + sigma * noise; gradients reach both."""
    if noise.data.shape != g.mu.data.shape:
        raise ValueError("noise shape must match the latent shape")
    return tt.add(tape, g.mu, tt.mul(tape, g.sigma, noise))


def fuse(tape, z_by_modality: list, gaussians: list,
         weights: MixtureWeights) -> FusedLatent:
    """Convex per-coordinate combination of modality latents.

    z = sum_m pi_m * z_m; the fused distribution has mean sum_m pi_m * mu_m
    and variance sum_m pi_m^2 * sigma_m^2.
    """
    weights.validate()
    z_sum, mu_sum, var_sum = None, None, None
    for m, (z_m, g_m) in enumerate(zip(z_by_modality, gaussians)):
        pi_m = tt.index_first(tape, weights.pi, m)
        z_term = tt.mul(tape, pi_m, z_m)
        mu_term = tt.mul(tape, pi_m, g_m.mu)
        var_term = tt.mul(tape, tt.square(tape, pi_m), tt.square(tape, g_m.sigma))
        z_sum = z_term if z_sum is None else tt.add(tape, z_sum, z_term)
        mu_sum = mu_term if mu_sum is None else tt.add(tape, mu_sum, mu_term)
        var_sum = var_term if var_sum is None else tt.add(tape, var_sum, var_term)
    return FusedLatent(z=z_sum, mu_fused=mu_sum,
                       sigma_fused=tt.sqrt(tape, var_sum))


def kl_standard_normal(tape, mu: Tensor, sigma: Tensor) -> Tensor:
    """Mean over coordinates of KL(N(mu, sigma^2) || N(0, 1)).

    Closed form per coordinate: 0.5 * (mu^2 + sigma^2 - 1 - ln sigma^2).
    """
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    inner = tt.sub(tape, tt.add(tape, tt.square(tape, mu), tt.square(tape, sigma)),
                   tt.add_scalar(tape, tt.mul_scalar(tape, tt.log(tape, sigma), 2.0),
                                 1.0))
    return tt.mul_scalar(tape, tt.mean_all(tape, inner), 0.5)


def decode(tape, params, target: str, z_tl: Tensor, cfg: ModelConfig) -> Tensor:
    """TCN decoder from a (T, L) latent to (T, D_target)."""
    if z_tl.data.shape[1] != cfg.latent:
        raise ValueError(f"latent width {z_tl.data.shape[1]} != {cfg.latent}")
    stack = f"dec_{target}"
    if f"{stack}/resize_w" not in params:
        raise ValueError(f"no decoder parameters for target {target!r}")
    h = _trunk(tape, params, stack, tt.transpose2d(tape, z_tl), cfg)
    return tt.transpose2d(tape, _head(tape, params, stack, "out", h))


def _mse(tape, pred: Tensor, target: Tensor) -> Tensor:
    return tt.mean_all(tape, tt.square(tape, tt.sub(tape, pred, target)))


def loss(tape, params, variant: str, cfg: ModelConfig, clip, noise=None,
         kl_weight: float = 1.0) -> LossBreakdown:
    """Variant-dependent training loss on one aligned window.

    ``clip`` carries normalized (T, D) feature arrays (audio/gaze/face);
    ``noise`` maps each modality to a (T, L) standard-normal draw.  The
    facial reconstruction term is always active; input reconstruction and
    the two KL placements toggle per variant.  Inactive KL terms are still
    reported (diagnostics) but excluded from the total, which is

        face_rec + sum_m (D_m / D_face) * m_rec + kl_weight * KL terms,

    the width-proportional combination a plain sum of squared errors over
    reconstructed coordinates would give.
    """
    spec = variant_spec(variant)
    feats = {"audio": Tensor(clip.audio), "gaze": Tensor(clip.gaze)}
    face = Tensor(clip.face)
    T = clip.face.shape[0]

    if spec.regression:
        cat = tt.concat_rows(tape, [tt.transpose2d(tape, feats[m])
                                    for m in spec.modalities])
        h = _trunk(tape, params, "reg", cat, cfg)
        pred = tt.transpose2d(tape, _head(tape, params, "reg", "out", h))
        face_rec = _mse(tape, pred, face)
        total = face_rec
        return LossBreakdown(face_rec.item(), 0.0, 0.0, 0.0, 0.0, total.item(),
                             total_tensor=total)

    if noise is None:
        noise = {m: Tensor(np.zeros((T, cfg.latent))) for m in spec.modalities}
    gaussians = [encode_modality(tape, params, m, feats[m], cfg)
                 for m in spec.modalities]
    draws = [sample_latent(tape, g, noise[m] if isinstance(noise[m], Tensor)
                           else Tensor(noise[m]))
             for g, m in zip(gaussians, spec.modalities)]

    if spec.mixture:
        weights = encode_mixture(tape, params, feats, cfg)
        fused = fuse(tape, draws, gaussians, weights)
        z, mu_f, sigma_f = fused.z, fused.mu_fused, fused.sigma_fused
    else:
        z, mu_f, sigma_f = draws[0], gaussians[0].mu, gaussians[0].sigma

    face_pred = decode(tape, params, "face", z, cfg)
    face_rec = _mse(tape, face_pred, face)
    total = face_rec

    # input reconstruction enters width-proportionally, matching a plain
    # sum of squared errors over all reconstructed coordinates (face kept
    # at unit weight); reported per-term values stay width-independent means
    rec_terms = {"audio": 0.0, "gaze": 0.0}
    for m in spec.reconstructed:
        rec = _mse(tape, decode(tape, params, m, z, cfg), feats[m])
        rec_terms[m] = rec.item()
        scaled = tt.mul_scalar(tape, rec, cfg.modality_dim(m) / cfg.face_dim)
        total = tt.add(tape, total, scaled)

    # diagnostics-only KL values are computed off-tape so they cannot leak
    # gradients into the update
    kl_sh_val = kl_standard_normal(None, Tensor(mu_f.data),
                                   Tensor(sigma_f.data)).item()
    kl_mod_val = float(np.mean([kl_standard_normal(
        None, Tensor(g.mu.data), Tensor(g.sigma.data)).item() for g in gaussians]))

    if spec.kl_shared:
        term = tt.mul_scalar(tape, kl_standard_normal(tape, mu_f, sigma_f), kl_weight)
        total = tt.add(tape, total, term)
    if spec.kl_modality:
        acc = None
        for g in gaussians:
            k = kl_standard_normal(tape, g.mu, g.sigma)
            acc = k if acc is None else tt.add(tape, acc, k)
        term = tt.mul_scalar(tape, acc, kl_weight / len(gaussians))
        total = tt.add(tape, total, term)

    return LossBreakdown(face_rec.item(), rec_terms["audio"], rec_terms["gaze"],
                         kl_sh_val, kl_mod_val, total.item(), total_tensor=total)


# ---------------------------------------------------------------------------
# per-frame causal inference path


def _flat_kernel(w: np.ndarray) -> np.ndarray:
    """(C_out, C_in, K) kernel to (C_out, K*C_in) matching tap-major gathers."""
    c_out, c_in, K = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 1).reshape(c_out, K * c_in))


def _lrelu(x: np.ndarray, leak: float) -> np.ndarray:
    return np.where(x >= 0, x, x * x.dtype.type(leak))


class _FramewiseTrunk:
    """One TCN trunk evaluated frame by frame over full history arrays.

    Layer histories store every frame; reads clip negative indices to the
    zero padding a batched causal convolution would see.  Each output
    frame is produced by fixed-shape gathers and matrix-vector products,
    so its bit pattern does not depend on the clip length.
    """

    def __init__(self, params, stack, cfg: ModelConfig, capacity: int):
        dtype = params[f"{stack}/resize_w"].data.dtype
        self.cfg = cfg
        self.resize_w = params[f"{stack}/resize_w"].data
        self.resize_b = params[f"{stack}/resize_b"].data
        self.conv_w = [_flat_kernel(params[f"{stack}/conv{l}_w"].data)
                       for l in range(cfg.layers)]
        self.conv_b = [params[f"{stack}/conv{l}_b"].data for l in range(cfg.layers)]
        self.hist = [np.zeros((cfg.channels, capacity), dtype=dtype)
                     for _ in range(cfg.layers + 1)]

    def step(self, t: int, col: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        K = cfg.kernel
        h = _lrelu(self.resize_w @ col + self.resize_b, cfg.leak)
        self.hist[0][:, t] = h
        for l, d in enumerate(cfg.dilations()):
            cols = np.zeros((cfg.channels, K), dtype=h.dtype)
            for k in range(K):
                src = t - (K - 1 - k) * d
                if src >= 0:
                    cols[:, k] = self.hist[l][:, src]
            y = _lrelu(self.conv_w[l] @ cols.reshape(K * cfg.channels, order="F")
                       + self.conv_b[l], cfg.leak)
            h = self.hist[l][:, t] + y
            self.hist[l + 1][:, t] = h
        return h


def _head_col(params, stack, head, col):
    return params[f"{stack}/{head}_w"].data @ col + params[f"{stack}/{head}_b"].data


def softmax_pair_col(la: np.ndarray, lg: np.ndarray):
    """Two-way softmax per coordinate, stabilized; shared by both runtimes."""
    m = np.maximum(la, lg)
    ea = np.exp(la - m)
    eg = np.exp(lg - m)
    s = ea + eg
    return ea / s, eg / s


def normalize_frame(frame: np.ndarray, mean: np.ndarray, std: np.ndarray):
    """Z-score a feature frame; shared by offline and streaming paths."""
    return (frame - mean) / std


def fuse_mean_col(pi_a, mu_a, pi_g, mu_g):
    """Inference-time fused latent column (z_m = mu_m)."""
    return pi_a * mu_a + pi_g * mu_g


def infer(params, variant: str, cfg: ModelConfig, audio=None, gaze=None,
          stats=None) -> np.ndarray:
    """Deterministic offline inference: (T, 256) coefficients from features.

    Uses posterior means (no sampling), predicted mixture weights, and the
    face decoder only.  Evaluated causally frame by frame so that a
    streaming runtime can reproduce the output bit-exactly.
    """
    spec = variant_spec(variant)
    check_params(params, cfg, variant)
    dtype = params[next(iter(params))].data.dtype
    arrays = {}
    if "audio" in spec.modalities:
        if audio is None:
            raise ValueError("variant requires audio features")
        arrays["audio"] = np.asarray(audio, dtype=dtype)
    if "gaze" in spec.modalities:
        if gaze is None:
            raise ValueError("variant requires gaze features")
        arrays["gaze"] = np.asarray(gaze, dtype=dtype)
    if stats is not None:
        arrays = {m: stats.apply(m, arrays[m]) for m in arrays}
    T = min(len(a) for a in arrays.values())

    if spec.regression:
        trunk = _FramewiseTrunk(params, "reg", cfg, T)
        out = np.empty((T, cfg.face_dim), dtype=dtype)
        for t in range(T):
            col = np.concatenate([arrays[m][t] for m in spec.modalities])
            out[t] = _head_col(params, "reg", "out", trunk.step(t, col))
        return out

    encs = {m: _FramewiseTrunk(params, f"enc_{m}", cfg, T) for m in spec.modalities}
    mix = _FramewiseTrunk(params, "enc_mix", cfg, T) if spec.mixture else None
    dec = _FramewiseTrunk(params, "dec_face", cfg, T)
    L = cfg.latent
    out = np.empty((T, cfg.face_dim), dtype=dtype)
    for t in range(T):
        mus = {m: _head_col(params, f"enc_{m}", "mu",
                            encs[m].step(t, arrays[m][t]))
               for m in spec.modalities}
        if spec.mixture:
            cat = np.concatenate([arrays[m][t] for m in MODALITIES])
            logits = _head_col(params, "enc_mix", "pi", mix.step(t, cat))
            pi_a, pi_g = softmax_pair_col(logits[:L], logits[L:])
            z = fuse_mean_col(pi_a, mus["audio"], pi_g, mus["gaze"])
        else:
            z = mus[spec.modalities[0]]
        out[t] = _head_col(params, "dec_face", "out", dec.step(t, z))
    return out


def mixture_weights_for_clip(params, cfg: ModelConfig, audio, gaze,
                             stats=None) -> np.ndarray:
    """(M, T, L) inference-time mixture weights for diagnostics/heatmaps."""
    dtype = params[next(iter(params))].data.dtype
    a = np.asarray(audio, dtype=dtype)
    g = np.asarray(gaze, dtype=dtype)
    if stats is not None:
        a, g = stats.apply("audio", a), stats.apply("gaze", g)
    T = min(len(a), len(g))
    mix = _FramewiseTrunk(params, "enc_mix", cfg, T)
    L = cfg.latent
    pi = np.empty((2, T, L), dtype=a.dtype)
    for t in range(T):
        logits = _head_col(params, "enc_mix", "pi",
                           mix.step(t, np.concatenate([a[t], g[t]])))
        pi[0, t], pi[1, t] = softmax_pair_col(logits[:L], logits[L:])
    return pi

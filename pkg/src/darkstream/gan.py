"""Pseudo-speaker generator and critic, WGAN-QC losses, toy training and sampling.

Both networks work on small ``C x G x G`` feature maps::

    generator: z -> linear -> C x G x G -> 2 res -> (up2x, res) x2 -> 2 res -> flatten -> linear -> e
    critic:    e -> linear -> C x G x G -> 2 res -> (pool2x, res) x2 -> flatten -> linear -> score

Every function accepts parameters with extra leading axes (one slice per
parameter set), which lets finite-difference training evaluate hundreds of
perturbed networks in a single vectorised pass.

Sign convention used for the losses::

    L_D = E[D(real)] - E[D(G(z))] + lambda * E ||grad D(e_hat)||^2
    L_G = E[D(G(z))]

so the critic scores real embeddings low and the generator chases low
scores. ``L_D + L_G - penalty`` then equals ``E[D(real)]`` exactly.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .anonymizer import SpeakerEmbedding
from .errors import BudgetExceeded, ConfigWeightMismatch, EmptyBatch, ExhaustedTries, ShapeMismatch
from .metrics import cosine_similarity
from .weights import ParamSpec, WeightBundle, init_random, load_weights, save_weights

GEN = "gan.gen"
CRITIC = "gan.critic"
RES_NAMES = ("res0", "res1", "stage0", "stage1", "res2", "res3")


@dataclass(frozen=True)
class GanConfig:
    """Sizes of the generator/critic pair.

    ``grid`` is the side of the generator's first feature map; the critic's
    first map has side ``critic_grid`` (defaults to ``grid``).
    """

    noise_dim: int = 16
    embed_dim: int = 704
    channels: int = 3
    grid: int = 8
    critic_grid: int | None = None
    penalty: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if min(self.noise_dim, self.embed_dim, self.channels, self.grid) <= 0:
            raise ValueError("GAN dimensions must be positive")
        if self.cgrid % 4:
            raise ValueError(f"critic grid {self.cgrid} must be divisible by 4")

    @property
    def cgrid(self) -> int:
        return self.grid if self.critic_grid is None else self.critic_grid

    @classmethod
    def toy(cls, embed_dim=2, noise_dim=4, **kw) -> "GanConfig":
        kw.setdefault("channels", 1)
        kw.setdefault("grid", 1)
        kw.setdefault("critic_grid", 4)
        return cls(noise_dim=noise_dim, embed_dim=embed_dim, **kw)

    def param_specs(self) -> list:
        c, g, gc = self.channels, self.grid, self.cgrid
        specs = []

        def lin(name, n_out, n_in):
            specs.append(ParamSpec(f"{name}.weight", (n_out, n_in), fan_in=n_in))
            specs.append(ParamSpec(f"{name}.bias", (n_out,), fan_in=n_in))

        def res(name):
            for conv in ("conv1", "conv2"):
                specs.append(ParamSpec(f"{name}.{conv}.weight", (c, c, 3, 3), fan_in=9 * c))
                specs.append(ParamSpec(f"{name}.{conv}.bias", (c,), fan_in=9 * c))

        lin(f"{GEN}.in", c * g * g, self.noise_dim)
        for r in RES_NAMES:
            res(f"{GEN}.{r}")
        lin(f"{GEN}.out", self.embed_dim, c * (4 * g) ** 2)
        lin(f"{CRITIC}.in", c * gc * gc, self.embed_dim)
        for r in RES_NAMES[:4]:
            res(f"{CRITIC}.{r}")
        lin(f"{CRITIC}.out", 1, c * (gc // 4) ** 2)
        return specs

    def n_params(self) -> int:
        return sum(int(np.prod(s.shape)) for s in self.param_specs())


GanParams = WeightBundle


def init_gan(config: GanConfig, seed: int | None = None) -> GanParams:
    return init_random(config, config.seed if seed is None else seed)


def save_gan(params: Mapping, path) -> None:
    save_weights(WeightBundle({k: v for k, v in params.items() if k.startswith("gan.")}), path)


def load_gan(path) -> GanParams:
    params = load_weights(path)
    needed = [f"{GEN}.in.weight", f"{GEN}.out.weight", f"{CRITIC}.in.weight", f"{CRITIC}.out.weight"]
    needed += [f"{GEN}.{r}.conv1.weight" for r in RES_NAMES]
    missing = [k for k in needed if k not in params]
    if missing:
        raise ConfigWeightMismatch(f"{path}: not a GAN bundle, missing {missing[0]!r}")
    return params


# -- forward passes -----------------------------------------------------------

def _linear(x, p):
    """Dense layer on (..., N, in) with weights that may carry leading batch axes."""
    w, b = p["weight"], p["bias"]
    return np.einsum("...ni,...oi->...no", x, w) + b[..., None, :]


def _channels(p):
    return p["res0.conv1.weight"].shape[-3]


def generate(z, params: Mapping) -> np.ndarray:
    """Map noise ``z`` (noise_dim,) or (N, noise_dim) to embeddings."""
    p = nn.sub(params, GEN)
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[-1] != p["in.weight"].shape[-1]:
        raise ShapeMismatch(f"noise dim {z.shape[-1]} vs generator input {p['in.weight'].shape[-1]}")
    c = _channels(p)
    h = _linear(z, nn.sub(p, "in"))
    g = int(round(np.sqrt(h.shape[-1] // c)))
    h = h.reshape(h.shape[:-1] + (c, g, g))
    h = nn.resnet2d_block(h, nn.sub(p, "res0"))
    h = nn.resnet2d_block(h, nn.sub(p, "res1"))
    for s in ("stage0", "stage1"):
        h = nn.resnet2d_block(nn.upsample2x(h), nn.sub(p, s))
    h = nn.resnet2d_block(h, nn.sub(p, "res2"))
    h = nn.resnet2d_block(h, nn.sub(p, "res3"))
    e = _linear(h.reshape(h.shape[:-3] + (-1,)), nn.sub(p, "out"))
    return e[..., 0, :] if single else e


def critic(e, params: Mapping) -> np.ndarray:
    """Score embeddings ``e`` (embed_dim,) or (N, embed_dim); returns (N,) or a scalar."""
    p = nn.sub(params, CRITIC)
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    e = np.atleast_2d(e)
    if e.shape[-1] != p["in.weight"].shape[-1]:
        raise ShapeMismatch(f"embedding dim {e.shape[-1]} vs critic input {p['in.weight'].shape[-1]}")
    c = _channels(p)
    h = _linear(e, nn.sub(p, "in"))
    g = int(round(np.sqrt(h.shape[-1] // c)))
    h = h.reshape(h.shape[:-1] + (c, g, g))
    h = nn.resnet2d_block(h, nn.sub(p, "res0"))
    h = nn.resnet2d_block(h, nn.sub(p, "res1"))
    for s in ("stage0", "stage1"):
        h = nn.resnet2d_block(nn.avgpool2x(h), nn.sub(p, s))
    d = _linear(h.reshape(h.shape[:-3] + (-1,)), nn.sub(p, "out"))[..., 0]
    return d[..., 0] if single else d


# -- losses -------------------------------------------------------------------

def input_gradient(params: Mapping, e_hat, epsilon=1e-3) -> np.ndarray:
    """Central-difference estimate of dD/de at each row of ``e_hat``."""
    e_hat = np.asarray(e_hat, dtype=np.float64)
    n, dim = e_hat.shape[-2:]
    step = epsilon * np.eye(dim)
    probes = np.stack([e_hat[..., :, None, :] + step, e_hat[..., :, None, :] - step], axis=-3)
    d = critic(probes.reshape(probes.shape[:-4] + (2 * n * dim, dim)), params)
    d = d.reshape(d.shape[:-1] + (n, 2, dim))
    return (d[..., 0, :] - d[..., 1, :]) / (2.0 * epsilon)


def grad_penalty(params: Mapping, e_hat, epsilon=1e-3, penalty=10.0):
    """``penalty * mean ||grad D(e_hat)||^2`` with a finite-difference gradient."""
    grad = input_gradient(params, np.atleast_2d(e_hat), epsilon)
    return penalty * np.mean(np.sum(grad * grad, axis=-1), axis=-1)


def interpolate(real, fake, u):
    u = np.asarray(u, dtype=np.float64)[:, None]
    return u * real + (1.0 - u) * fake


def wganqc_losses(real_batch, z_batch, params: Mapping, u=None, seed=0, penalty=10.0,
                  epsilon=1e-3, return_penalty=False):
    """Critic and generator losses for one batch.

    ``u`` holds one interpolation weight per sample; it is drawn from
    ``seed`` when omitted. With ``return_penalty`` the gradient-penalty term
    is returned as a third value.
    """
    real = np.atleast_2d(np.asarray(real_batch, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    if real.shape[0] == 0 or z.shape[0] == 0:
        raise EmptyBatch("WGAN-QC losses need non-empty real and noise batches")
    if real.shape[0] != z.shape[0]:
        raise ShapeMismatch(f"real batch {real.shape[0]} vs noise batch {z.shape[0]}")
    if u is None:
        u = np.random.default_rng(seed).uniform(size=real.shape[0])
    fake = generate(z, params)
    return _losses(real, fake, params, u, penalty, epsilon, return_penalty)


def _losses(real, fake, params, u, penalty, epsilon, return_penalty=False):
    d_real = np.mean(critic(real, params), axis=-1)
    d_fake = np.mean(critic(fake, params), axis=-1)
    gp = grad_penalty(params, interpolate(real, fake, u), epsilon, penalty)
    loss_d = d_real - d_fake + gp
    loss_g = d_fake
    return (loss_d, loss_g, gp) if return_penalty else (loss_d, loss_g)


# -- finite-difference training ----------------------------------------------

class FlatParams:
    """Maps a named parameter set to one flat vector and back."""

    def __init__(self, params: Mapping):
        self.names = list(params)
        self.shapes = [tuple(params[k].shape) for k in self.names]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def pack(self, params: Mapping) -> np.ndarray:
        return np.concatenate([np.asarray(params[k], np.float64).reshape(-1) for k in self.names])

    def unpack(self, theta) -> dict:
        """Inverse of :meth:`pack`; leading axes of ``theta`` are kept."""
        lead = theta.shape[:-1]
        return {
            k: theta[..., a:b].reshape(lead + s)
            for k, s, a, b in zip(self.names, self.shapes, self.offsets[:-1], self.offsets[1:])
        }

    def indices(self, prefix: str) -> np.ndarray:
        idx = [np.arange(a, b) for k, a, b in zip(self.names, self.offsets[:-1], self.offsets[1:])
               if k.startswith(prefix + ".")]
        return np.concatenate(idx)


def fd_gradient(loss: Callable, theta, idx, epsilon=1e-3) -> np.ndarray:
    """Central-difference gradient of ``loss`` w.r.t. ``theta[idx]``.

    ``loss`` maps a (B, P) stack of parameter vectors to (B,) values.
    """
    k = len(idx)
    probes = np.repeat(theta[None, :], 2 * k, axis=0)
    rows = np.arange(k)
    probes[rows, idx] += epsilon
    probes[k + rows, idx] -= epsilon
    vals = loss(probes)
    grad = np.zeros_like(theta)
    grad[idx] = (vals[:k] - vals[k:]) / (2.0 * epsilon)
    return grad


@dataclass
class LossTrace:
    """Per generator step: critic loss, generator loss and mean D(real) - mean D(fake)."""

    critic: list = field(default_factory=list)
    generator: list = field(default_factory=list)
    gap: list = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.critic, self.generator, self.gap]).reshape(-1, 3)


def train_toy(gan_config: GanConfig, target_sampler: Callable, steps: int, seed: int = 0,
              batch: int = 32, lr: float = 1e-2, n_critic: int = 5, epsilon: float = 1e-3,
              budget_s: float | None = None, init: Mapping | None = None):
    """Train a small generator/critic pair with finite-difference gradient descent.

    Each of the ``steps`` generator updates follows ``n_critic`` critic
    updates. ``target_sampler(rng, n)`` returns ``n`` real embeddings.

    Returns:
        (GanParams, LossTrace)

    Raises:
        BudgetExceeded: if training runs longer than ``budget_s`` seconds.
    """
    start = time.perf_counter()
    params = init_gan(gan_config, seed) if init is None else init
    flat = FlatParams(params)
    theta = flat.pack(params)
    c_idx, g_idx = flat.indices(CRITIC), flat.indices(GEN)
    rng = np.random.default_rng(seed)
    lam = gan_config.penalty
    trace = LossTrace()

    def draw():
        real = np.asarray(target_sampler(rng, batch), dtype=np.float64)
        z = rng.standard_normal((batch, gan_config.noise_dim))
        u = rng.uniform(size=batch)
        return real, z, u

    for _ in range(steps):
        for _ in range(n_critic):
            real, z, u = draw()
            fake = generate(z, flat.unpack(theta))

            def critic_loss(stack):
                return _losses(real, fake, flat.unpack(stack), u, lam, epsilon)[0]

            theta = theta - lr * fd_gradient(critic_loss, theta, c_idx, epsilon)

        real, z, u = draw()

        def gen_loss(stack):
            return np.mean(critic(generate(z, flat.unpack(stack)), flat.unpack(stack)), axis=-1)

        theta = theta - lr * fd_gradient(gen_loss, theta, g_idx, epsilon)

        p = flat.unpack(theta)
        fake = generate(z, p)
        loss_d, loss_g = _losses(real, fake, p, u, lam, epsilon)
        trace.critic.append(float(loss_d))
        trace.generator.append(float(loss_g))
        trace.gap.append(float(np.mean(critic(real, p)) - np.mean(critic(fake, p))))
        if budget_s is not None and time.perf_counter() - start > budget_s:
            raise BudgetExceeded(f"toy training exceeded {budget_s:.1f} s")
    return WeightBundle(flat.unpack(theta)), trace


# -- rejection sampling -------------------------------------------------------

def try_rng(seed: int, attempt: int) -> np.random.Generator:
    """Independent generator for one sampling attempt."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(attempt,)))


def sample_pseudo_speaker(params: Mapping, sources, threshold=0.65, max_tries=100, seed=0):
    """Draw ``G(z)`` until its cosine similarity to every source is below ``threshold``.

    Returns:
        (SpeakerEmbedding, number of rejected draws)

    Raises:
        ExhaustedTries: if no draw passes within ``max_tries``.
    """
    sources = [s.values if isinstance(s, SpeakerEmbedding) else np.asarray(s, np.float64) for s in sources]
    if not sources:
        raise ValueError("at least one source embedding is required")
    noise_dim = params[f"{GEN}.in.weight"].shape[-1]
    for attempt in range(max_tries):
        e = generate(try_rng(seed, attempt).standard_normal(noise_dim), params)
        # judge the value that will actually be stored
        e = e.astype("<f4").astype(np.float64)
        if not np.any(e):
            continue
        if all(cosine_similarity(e, s) < threshold for s in sources):
            return SpeakerEmbedding(e), attempt
    raise ExhaustedTries(f"no pseudo-speaker below cosine {threshold} in {max_tries} tries")

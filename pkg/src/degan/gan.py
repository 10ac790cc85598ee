"""Encoder-decoder GAN for identity-disentangled expression representations.

The generator encodes an expression image into a representation vector,
concatenates it with a one-hot identity code and a noise vector, and decodes
an image carrying the input expression on the coded identity. The
discriminator is a multi-task CNN with two heads: expression logits over
n_expr + 1 classes (the extra class marks generated images) and identity
logits over n_id classes. There is no separate real/fake head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError, DimensionError, LabelError, StateError
from .nn import Adam, LayerSpec, build_network
from .tensor import Tensor


@dataclass
class DeGanConfig:
    """Model geometry. Training hyperparameters live in TrainSettings."""

    n_expr: int
    n_id: int
    n_z: int = 50
    rep_dim: int = 350
    image_size: int = 32
    image_channels: int = 1
    encoder_channels: tuple = (16, 32, 64)
    disc_channels: tuple = (16, 32, 64)
    disc_trunk_units: int = 128
    leak: float = 0.2

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.disc_channels = tuple(self.disc_channels)
        if self.n_expr < 2 or self.n_id < 2:
            raise ContractError("need at least two expression classes and two identities")
        if min(self.n_z, self.rep_dim, self.image_size, self.image_channels) < 1:
            raise ContractError("n_z, rep_dim, image_size, image_channels must be positive")

    @property
    def image_shape(self):
        return (self.image_channels, self.image_size, self.image_size)

    @property
    def fake_class(self):
        return self.n_expr

    @property
    def decoder_input_dim(self):
        return self.rep_dim + self.n_id + self.n_z


def _stage_plan(image_size: int, n_stages: int):
    """Per-stage kernel sizes so conv (stride 2, pad 1) halves the spatial size
    exactly and the mirrored conv_transpose stack restores it exactly.

    Even sizes use kernel 4, odd sizes kernel 3; works for any size >= 2
    (e.g. 32 -> 16 -> 8 -> 4 and 75 -> 38 -> 19 -> 10).
    """
    sizes = [image_size]
    kernels = []
    s = image_size
    for _ in range(n_stages):
        kernels.append(4 if s % 2 == 0 else 3)
        s = (s + 1) // 2
        sizes.append(s)
    if sizes[-1] < 1:
        raise ContractError(f"image size {image_size} too small for {n_stages} conv stages")
    return kernels, sizes


def _encoder_specs(cfg: DeGanConfig):
    kernels, _ = _stage_plan(cfg.image_size, len(cfg.encoder_channels))
    specs = []
    for ch, k in zip(cfg.encoder_channels, kernels):
        specs.append(LayerSpec("conv", channels=ch, kernel=k, stride=2, padding=1))
        specs.append(LayerSpec("activation", activation="leaky_relu", slope=cfg.leak))
    specs.append(LayerSpec("reshape", shape=(-1,)))
    specs.append(LayerSpec("dense", units=cfg.rep_dim))
    return specs


def _decoder_specs(cfg: DeGanConfig):
    kernels, sizes = _stage_plan(cfg.image_size, len(cfg.encoder_channels))
    base = sizes[-1]
    c0 = cfg.encoder_channels[-1]
    specs = [
        LayerSpec("dense", units=c0 * base * base),
        LayerSpec("activation", activation="leaky_relu", slope=cfg.leak),
        LayerSpec("reshape", shape=(c0, base, base)),
    ]
    out_channels = list(reversed(cfg.encoder_channels))[1:] + [cfg.image_channels]
    for i, (ch, k) in enumerate(zip(out_channels, reversed(kernels))):
        specs.append(LayerSpec("conv_transpose", channels=ch, kernel=k, stride=2, padding=1))
        last = i == len(out_channels) - 1
        specs.append(
            LayerSpec("activation", activation="tanh" if last else "leaky_relu", slope=cfg.leak)
        )
    return specs


def _disc_trunk_specs(cfg: DeGanConfig):
    kernels, _ = _stage_plan(cfg.image_size, len(cfg.disc_channels))
    specs = []
    for ch, k in zip(cfg.disc_channels, kernels):
        specs.append(LayerSpec("conv", channels=ch, kernel=k, stride=2, padding=1))
        specs.append(LayerSpec("activation", activation="leaky_relu", slope=cfg.leak))
    specs.append(LayerSpec("reshape", shape=(-1,)))
    specs.append(LayerSpec("dense", units=cfg.disc_trunk_units))
    specs.append(LayerSpec("activation", activation="leaky_relu", slope=cfg.leak))
    return specs


@dataclass
class DiscriminatorOutput:
    expr_logits: Tensor  # (N, n_expr + 1); the last class marks generated images
    id_logits: Tensor    # (N, n_id)


def one_hot(indices, n: int) -> np.ndarray:
    """(N, n) one-hot rows from integer indices (scalar allowed)."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.min() < 0 or idx.max() >= n:
        raise LabelError(f"identity index out of range [0, {n}): {idx.min()}..{idx.max()}")
    out = np.zeros((idx.size, n))
    out[np.arange(idx.size), idx] = 1.0
    return out


def _check_one_hot(code: np.ndarray):
    ok = np.all(np.isin(code, (0.0, 1.0))) and np.all(code.sum(axis=1) == 1.0)
    if not ok:
        raise ContractError("identity code rows must be one-hot (exactly one 1, rest 0)")


class DeGanModel:
    """Holds the encoder, decoder, and discriminator networks."""

    def __init__(self, config: DeGanConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.trained = False
        self.step_count = 0
        enc_s, dec_s, trunk_s, he_s, hi_s = np.random.SeedSequence(seed).spawn(5)
        self.encoder = build_network(_encoder_specs(config), config.image_shape, enc_s)
        self.decoder = build_network(_decoder_specs(config), (config.decoder_input_dim,), dec_s)
        self.disc_trunk = build_network(_disc_trunk_specs(config), config.image_shape, trunk_s)
        trunk_out = (config.disc_trunk_units,)
        self.disc_expr_head = build_network([LayerSpec("dense", units=config.n_expr + 1)], trunk_out, he_s)
        self.disc_id_head = build_network([LayerSpec("dense", units=config.n_id)], trunk_out, hi_s)

    # -- shape plumbing ----------------------------------------------------

    def _batched_images(self, x):
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        single = data.ndim == 3
        if single:
            data = data[None]
        if data.ndim != 4 or tuple(data.shape[1:]) != self.config.image_shape:
            raise DimensionError(
                f"expected image shape {self.config.image_shape} "
                f"(optionally batched), got {tuple(data.shape)}"
            )
        t = x if isinstance(x, Tensor) and not single else Tensor(data)
        return t, single

    @staticmethod
    def _batched_rows(v, width, what):
        if isinstance(v, Tensor):
            single = v.ndim == 1
            t = v.reshape(1, -1) if single else v
        else:
            arr = np.asarray(v, dtype=np.float64)
            single = arr.ndim == 1
            t = Tensor(arr[None] if single else arr)
        if t.ndim != 2 or t.shape[1] != width:
            raise DimensionError(f"{what} must have length {width}, got shape {t.shape}")
        return t, single

    # -- forward passes ------------------------------------------------------

    def encode(self, x) -> Tensor:
        """Expression representation; one row per image, length rep_dim."""
        t, single = self._batched_images(x)
        rep = self.encoder(t)
        return rep.reshape(-1) if single else rep

    def decode(self, f_exp, identity_code, z) -> Tensor:
        """Decode (representation, one-hot identity, noise) into an image."""
        f, single = self._batched_rows(f_exp, self.config.rep_dim, "representation")
        code, _ = self._batched_rows(identity_code, self.config.n_id, "identity code")
        noise, _ = self._batched_rows(z, self.config.n_z, "noise vector")
        _check_one_hot(code.data)
        if not (f.shape[0] == code.shape[0] == noise.shape[0]):
            raise DimensionError(
                f"row counts differ: representation {f.shape[0]}, "
                f"code {code.shape[0]}, noise {noise.shape[0]}"
            )
        img = self.decoder(T.concat([f, code, noise], axis=1))
        return img.reshape(self.config.image_shape) if single else img

    def discriminate(self, x) -> DiscriminatorOutput:
        t, _ = self._batched_images(x)
        trunk = self.disc_trunk(t)
        return DiscriminatorOutput(self.disc_expr_head(trunk), self.disc_id_head(trunk))

    def transfer(self, x, target_id: int, z) -> np.ndarray:
        """Re-render the expression of ``x`` on the identity ``target_id``."""
        if not self.trained:
            raise StateError("expression transfer requires a trained model")
        code = one_hot(target_id, self.config.n_id)
        f = self.encode(x)
        single = f.ndim == 1
        if single:
            code = code[0]
        out = self.decode(f, code, z)
        return out.data.copy()

    # -- parameters ----------------------------------------------------------

    def _groups(self):
        return {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "disc_trunk": self.disc_trunk,
            "disc_expr_head": self.disc_expr_head,
            "disc_id_head": self.disc_id_head,
        }

    def named_parameters(self):
        out = []
        for gname, net in self._groups().items():
            out.extend((f"{gname}.{n}", p) for n, p in net.named_parameters())
        return out

    def generator_parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def discriminator_parameters(self):
        return (
            self.disc_trunk.parameters()
            + self.disc_expr_head.parameters()
            + self.disc_id_head.parameters()
        )

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None, optim: dict | None = None):
        params = {name: p.data for name, p in self.named_parameters()}
        meta = {
            "kind": "degan-model",
            "config": asdict(self.config),
            "seed": self.seed,
            "trained": self.trained,
            "step_count": self.step_count,
        }
        if extra_meta:
            meta.update(extra_meta)
        nn.save_checkpoint(path, params, meta, optim)

    @classmethod
    def load(cls, path):
        ck = nn.load_checkpoint(path)
        cfg = dict(ck.meta["config"])
        cfg["encoder_channels"] = tuple(cfg["encoder_channels"])
        cfg["disc_channels"] = tuple(cfg["disc_channels"])
        model = cls(DeGanConfig(**cfg), seed=ck.meta.get("seed", 0))
        for name, p in model.named_parameters():
            p.data = np.array(ck.params[name], dtype=np.float64)
        model.trained = bool(ck.meta.get("trained", False))
        model.step_count = int(ck.meta.get("step_count", 0))
        return model, ck


# -- objectives ----------------------------------------------------------------


def _check_expr_labels(labels, n_expr: int):
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= n_expr):
        raise LabelError(
            f"expression labels must lie in [0, {n_expr}); the synthetic class "
            f"{n_expr} is never a valid target"
        )
    return arr


def generator_loss(d_out_fake: DiscriminatorOutput, y_e, y_idx) -> Tensor:
    """Cross-entropy pushing generated images toward the source expression and
    the coded identity under the discriminator. Minimizing this maximizes the
    generator's objective."""
    n_expr = d_out_fake.expr_logits.shape[1] - 1
    y_e = _check_expr_labels(y_e, n_expr)
    expr_term, _ = T.softmax_cross_entropy(d_out_fake.expr_logits, y_e)
    id_term, _ = T.softmax_cross_entropy(d_out_fake.id_logits, y_idx)
    return expr_term + id_term


def discriminator_loss(
    d_out_real: DiscriminatorOutput, y_e, y_id, d_out_fake: DiscriminatorOutput
) -> Tensor:
    """Cross-entropy for true expression and identity on real images plus the
    synthetic class on generated ones. Generated images carry no identity term."""
    n_expr = d_out_real.expr_logits.shape[1] - 1
    y_e = _check_expr_labels(y_e, n_expr)
    real_expr, _ = T.softmax_cross_entropy(d_out_real.expr_logits, y_e)
    real_id, _ = T.softmax_cross_entropy(d_out_real.id_logits, y_id)
    n_fake = d_out_fake.expr_logits.shape[0]
    fake_targets = np.full(n_fake, n_expr, dtype=np.int64)
    fake_expr, _ = T.softmax_cross_entropy(d_out_fake.expr_logits, fake_targets)
    return real_expr + real_id + fake_expr


# -- training -------------------------------------------------------------------


@dataclass
class TrainSettings:
    batch_size: int = 32
    total_steps: int = 2000
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    g_updates_early: int = 1
    g_updates_late: int = 2
    k_switch_fraction: float = 0.5
    recon_weight: float = 0.0
    seed: int = 7


@dataclass
class StepReport:
    step: int
    d_loss: float
    g_loss: float
    k: int


class Trainer:
    """Runs the adversarial schedule: one discriminator update then k generator
    updates per step, k switching from the early to the late value partway
    through training.

    ``paired_targets(y_e, y_idx) -> images`` supplies ground-truth renders for
    the optional L1 reconstruction term; it is only consulted when
    ``recon_weight > 0``.
    """

    def __init__(self, model: DeGanModel, settings: TrainSettings, paired_targets=None):
        self.model = model
        self.settings = settings
        self.paired_targets = paired_targets
        self.rng = np.random.default_rng(settings.seed)
        s = settings
        self.opt_g = Adam(model.generator_parameters(), s.lr, s.beta1, s.beta2, s.epsilon)
        self.opt_d = Adam(model.discriminator_parameters(), s.lr, s.beta1, s.beta2, s.epsilon)
        self.step_count = 0
        if s.recon_weight > 0 and paired_targets is None:
            raise ContractError("recon_weight > 0 requires a paired_targets callback")

    def k_for_step(self, step: int) -> int:
        switch = int(self.settings.total_steps * self.settings.k_switch_fraction)
        return self.settings.g_updates_early if step < switch else self.settings.g_updates_late

    def train_step(self, x, y_e, y_id) -> StepReport:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[0] == 0:
            raise ContractError(f"train_step needs a non-empty (N,C,H,W) batch, got {x.shape}")
        y_e = np.asarray(y_e, dtype=np.int64)
        y_id = np.asarray(y_id, dtype=np.int64)
        cfg = self.model.config
        n = x.shape[0]
        k = self.k_for_step(self.step_count)

        y_idx = self.rng.integers(0, cfg.n_id, size=n)
        z = self.rng.standard_normal((n, cfg.n_z))
        code = one_hot(y_idx, cfg.n_id)

        # Discriminator phase; the generated batch is detached so no gradient
        # reaches the generator.
        fake = self.model.decode(self.model.encode(x), code, z).detach()
        d_loss = discriminator_loss(
            self.model.discriminate(x), y_e, y_id, self.model.discriminate(fake)
        )
        self.model.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        g_losses = []
        targets = None
        if self.settings.recon_weight > 0:
            targets = Tensor(np.asarray(self.paired_targets(y_e, y_idx), dtype=np.float64))
        for _ in range(k):
            fake = self.model.decode(self.model.encode(x), code, z)
            g_loss = generator_loss(self.model.discriminate(fake), y_e, y_idx)
            if targets is not None:
                g_loss = g_loss + self.settings.recon_weight * T.tmean(T.tabs(fake - targets))
            self.model.zero_grad()
            g_loss.backward()
            self.opt_g.step()
            g_losses.append(float(g_loss.data))

        report = StepReport(self.step_count, float(d_loss.data), float(np.mean(g_losses)), k)
        self.step_count += 1
        return report

    def run(self, images, y_e, y_id, log_fn=None):
        """Train for settings.total_steps over the given sample arrays."""
        images = np.asarray(images, dtype=np.float64)
        y_e = np.asarray(y_e, dtype=np.int64)
        y_id = np.asarray(y_id, dtype=np.int64)
        if images.shape[0] == 0:
            raise ContractError("cannot train on an empty dataset")
        n = images.shape[0]
        reports = []
        for _ in range(self.settings.total_steps):
            idx = self.rng.integers(0, n, size=self.settings.batch_size)
            report = self.train_step(images[idx], y_e[idx], y_id[idx])
            reports.append(report)
            if log_fn is not None:
                log_fn(report)
        self.model.trained = True
        self.model.step_count = self.step_count
        return reports

    def save_checkpoint(self, path):
        names_g = [f"g{i}" for i in range(len(self.opt_g.params))]
        names_d = [f"d{i}" for i in range(len(self.opt_d.params))]
        s = self.settings
        optim = {
            "g": {"arrays": self.opt_g.state_arrays(names_g), "t": self.opt_g.t},
            "d": {"arrays": self.opt_d.state_arrays(names_d), "t": self.opt_d.t},
        }
        extra = {"train_settings": json.loads(json.dumps(asdict(s)))}
        self.model.save(path, extra_meta=extra, optim=optim)

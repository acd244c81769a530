"""Gender-adversarial auto-encoder: model, training loop, protected inference.

The model is a single-layer encoder (ReLU then batch norm), a clip-then-noise
privacy layer on the latent code, a single-layer tanh decoder, and a small
discriminator that predicts speaker gender from the noisy latent code.
Training alternates one auto-encoder update (adversarial + reconstruction
loss, discriminator frozen) with one discriminator update on a fresh forward
pass. The latent clipping threshold is fixed to the median L1 norm observed
during a warm-up phase that runs without the privacy layer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dpmech import BudgetLedger, DpConfig, DpLayer, NoiseSource, dp_transform
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    ShapeError,
    StateError,
    TrainingDivergenceError,
)
from .nncore import (
    Adam,
    BatchNormLayer,
    LinearLayer,
    ReLU,
    Sigmoid,
    Tanh,
    as_matrix,
    bce_loss,
    cosine_loss,
)

CHECKPOINT_MAGIC = b"GAAE"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIddB")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    warmup_epochs: int = 1
    seed: int = 0
    epsilon_tr: float = 15.0
    adv_weight: float = 1.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2 (batch norm)")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 0 or self.warmup_epochs < 1:
            raise ConfigError("need epochs >= 0 and at least one warm-up epoch")
        if not self.epsilon_tr > 0:
            raise ConfigError("training privacy budget must be positive (inf allowed)")
        if self.adv_weight < 0:
            raise ConfigError("adversarial weight must be nonnegative")


@dataclass
class StepRecord:
    phase: str
    epoch: int
    step: int
    loss_disc: float
    loss_adv: float
    loss_rec: float
    z_l1_mean: float
    z_l1_median: float
    z_l1_max: float


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    n_steps: int
    loss_disc: float
    loss_adv: float
    loss_rec: float
    z_l1_median: float


@dataclass
class TrainTrace:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    clip_threshold: float | None = None

    def add_epoch_summary(self, phase: str, epoch: int) -> None:
        recs = [r for r in self.steps if r.phase == phase and r.epoch == epoch]
        if not recs:
            return
        self.epochs.append(
            EpochRecord(
                phase=phase,
                epoch=epoch,
                n_steps=len(recs),
                loss_disc=float(np.mean([r.loss_disc for r in recs])),
                loss_adv=float(np.mean([r.loss_adv for r in recs])),
                loss_rec=float(np.mean([r.loss_rec for r in recs])),
                z_l1_median=float(np.median([r.z_l1_median for r in recs])),
            )
        )


class GaaeModel:
    """Encoder, privacy layer, decoder and discriminator as one unit."""

    def __init__(self, input_dim: int = 192, latent_dim: int = 64,
                 disc_hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.disc_hidden = int(disc_hidden)
        self.enc_lin = LinearLayer(self.input_dim, self.latent_dim, rng)
        self.enc_act = ReLU()
        self.enc_bn = BatchNormLayer(self.latent_dim)
        self.dp = DpLayer(None)
        self.dec_lin = LinearLayer(self.latent_dim, self.input_dim, rng)
        self.dec_act = Tanh()
        self.disc_lin1 = LinearLayer(self.latent_dim, self.disc_hidden, rng)
        self.disc_act = ReLU()
        self.disc_lin2 = LinearLayer(self.disc_hidden, 1, rng)
        self.disc_out = Sigmoid()
        self.epsilon_tr: float | None = None
        self.trained = False
        self.has_discriminator = True

    @property
    def clip_threshold(self) -> float | None:
        return None if self.dp.cfg is None else self.dp.cfg.clip_threshold

    def train_mode(self) -> None:
        self.enc_bn.mode = "train"

    def eval_mode(self) -> None:
        self.enc_bn.mode = "eval"

    def encode(self, x) -> np.ndarray:
        return self.enc_bn.forward(self.enc_act.forward(self.enc_lin.forward(x)))

    def decode(self, z) -> np.ndarray:
        return self.dec_act.forward(self.dec_lin.forward(z))

    def discriminate(self, z) -> np.ndarray:
        h = self.disc_act.forward(self.disc_lin1.forward(z))
        return self.disc_out.forward(self.disc_lin2.forward(h))

    def phi_parameters(self):
        """Auto-encoder parameters (encoder, batch norm, decoder)."""
        return (
            self.enc_lin.parameters()
            + self.enc_bn.parameters()
            + self.dec_lin.parameters()
        )

    def theta_parameters(self):
        """Discriminator parameters."""
        return self.disc_lin1.parameters() + self.disc_lin2.parameters()

    def zero_grads(self) -> None:
        for layer in (self.enc_lin, self.enc_bn, self.dec_lin, self.disc_lin1, self.disc_lin2):
            layer.zero_grad()

    def parameter_arrays(self):
        """All parameter tensors plus batch-norm running statistics."""
        return [
            self.enc_lin.weight, self.enc_lin.bias,
            self.enc_bn.gamma, self.enc_bn.beta,
            self.enc_bn.running_mean, self.enc_bn.running_var,
            self.dec_lin.weight, self.dec_lin.bias,
            self.disc_lin1.weight, self.disc_lin1.bias,
            self.disc_lin2.weight, self.disc_lin2.bias,
        ]


def forward_train(model: GaaeModel, x, source: NoiseSource | None):
    """Full training-time forward pass.

    Returns ``(z_dp, x_hat, p)``: the noisy latent code, the reconstruction,
    and the discriminator's per-row female probability. The privacy layer is
    applied before the latent code reaches either the decoder or the
    discriminator.
    """
    z = model.encode(x)
    z_dp = model.dp.forward(z, source)
    x_hat = model.decode(z_dp)
    p = model.discriminate(z_dp).ravel()
    return z_dp, x_hat, p


def _check_finite(name: str, value: float, trace: TrainTrace | None) -> None:
    if not math.isfinite(value):
        raise TrainingDivergenceError(f"{name} became non-finite ({value})", trace=trace)


def update_autoencoder(model: GaaeModel, x, y, opt_phi: Adam, source: NoiseSource | None,
                       adv_weight: float = 1.0, trace: TrainTrace | None = None):
    """One auto-encoder step: minimize adversarial + reconstruction loss.

    Discriminator parameters stay frozen but gradients flow through it to
    the encoder. Returns ``(loss_adv, loss_rec, z_l1_norms)`` where the
    norms are taken on the latent code before the privacy layer.
    """
    x = as_matrix(x)
    z = model.encode(x)
    z_norms = np.abs(z).sum(axis=1)
    z_dp = model.dp.forward(z, source)
    x_hat = model.decode(z_dp)
    p = model.discriminate(z_dp).ravel()

    loss_adv, grad_p = bce_loss(p, y, flipped=True)
    loss_rec, grad_xhat = cosine_loss(x, x_hat)
    _check_finite("adversarial loss", loss_adv, trace)
    _check_finite("reconstruction loss", loss_rec, trace)

    g = model.disc_out.backward(adv_weight * grad_p.reshape(-1, 1))
    g = model.disc_lin2.backward(g)
    g = model.disc_act.backward(g)
    grad_zdp_disc = model.disc_lin1.backward(g)

    g = model.dec_act.backward(grad_xhat)
    grad_zdp_dec = model.dec_lin.backward(g)

    g = model.dp.backward(grad_zdp_disc + grad_zdp_dec)
    g = model.enc_bn.backward(g)
    g = model.enc_act.backward(g)
    model.enc_lin.backward(g)

    opt_phi.step()
    model.zero_grads()  # also drops the stray discriminator gradients
    return loss_adv, loss_rec, z_norms


def update_discriminator(model: GaaeModel, x, y, opt_theta: Adam,
                         source: NoiseSource | None,
                         trace: TrainTrace | None = None) -> float:
    """One discriminator step on a fresh forward pass; encoder frozen."""
    z = model.encode(as_matrix(x))
    z_dp = model.dp.forward(z, source)
    p = model.discriminate(z_dp).ravel()
    loss_disc, grad_p = bce_loss(p, y, flipped=False)
    _check_finite("discriminator loss", loss_disc, trace)

    g = model.disc_out.backward(grad_p.reshape(-1, 1))
    g = model.disc_lin2.backward(g)
    g = model.disc_act.backward(g)
    model.disc_lin1.backward(g)

    opt_theta.step()
    model.zero_grads()
    return loss_disc


def train_step(model: GaaeModel, x, y, opt_phi: Adam, opt_theta: Adam,
               source: NoiseSource | None, adv_weight: float = 1.0,
               trace: TrainTrace | None = None):
    """One alternating update: auto-encoder first, then the discriminator.

    Returns ``(loss_disc, loss_adv, loss_rec, z_l1_norms)``.
    """
    loss_adv, loss_rec, z_norms = update_autoencoder(
        model, x, y, opt_phi, source, adv_weight=adv_weight, trace=trace
    )
    loss_disc = update_discriminator(model, x, y, opt_theta, source, trace=trace)
    return loss_disc, loss_adv, loss_rec, z_norms


def exact_median(values) -> float:
    """Median with midpoint interpolation for even counts."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot take the median of an empty collection")
    return float(np.median(values))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= 2:  # batch norm cannot handle singleton tails
            yield idx


def _run_epoch(model, vectors, labels, cfg, opt_phi, opt_theta, shuffle_rng, source,
               trace: TrainTrace, phase: str, epoch: int, collect_norms=None) -> None:
    for step, idx in enumerate(_minibatches(len(vectors), cfg.batch_size, shuffle_rng)):
        x, y = vectors[idx], labels[idx]
        loss_disc, loss_adv, loss_rec, z_norms = train_step(
            model, x, y, opt_phi, opt_theta, source, adv_weight=cfg.adv_weight, trace=trace
        )
        if collect_norms is not None:
            collect_norms.append(z_norms)
        trace.steps.append(
            StepRecord(
                phase=phase,
                epoch=epoch,
                step=step,
                loss_disc=loss_disc,
                loss_adv=loss_adv,
                loss_rec=loss_rec,
                z_l1_mean=float(z_norms.mean()),
                z_l1_median=float(np.median(z_norms)),
                z_l1_max=float(z_norms.max()),
            )
        )
    trace.add_epoch_summary(phase, epoch)


def estimate_clip_threshold(model: GaaeModel, vectors, labels, cfg: TrainConfig, *,
                            opt_phi: Adam | None = None, opt_theta: Adam | None = None,
                            shuffle_rng: np.random.Generator | None = None,
                            source: NoiseSource | None = None,
                            trace: TrainTrace | None = None) -> float:
    """Warm-up training without the privacy layer; returns the median latent norm.

    Runs ``cfg.warmup_epochs`` epochs of plain adversarial training with the
    privacy layer disabled, collecting the L1 norm of every latent code seen
    in the auto-encoder phase, and returns their exact median. The model's
    privacy layer stays disabled; the caller decides what to do with the
    threshold.
    """
    vectors = as_matrix(vectors)
    if len(vectors) < 2:
        raise DataError("warm-up needs at least one batch of data")
    opt_phi = opt_phi or Adam(model.phi_parameters(), lr=cfg.lr)
    opt_theta = opt_theta or Adam(model.theta_parameters(), lr=cfg.lr)
    shuffle_rng = shuffle_rng or np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,))
    )
    trace = trace if trace is not None else TrainTrace()

    model.train_mode()
    model.dp.cfg = None
    collected: list[np.ndarray] = []
    for epoch in range(cfg.warmup_epochs):
        _run_epoch(model, vectors, labels, cfg, opt_phi, opt_theta, shuffle_rng,
                   source, trace, "warmup", epoch, collect_norms=collected)
    threshold = exact_median(np.concatenate(collected))
    if not (threshold > 0 and math.isfinite(threshold)):
        raise DataError(f"estimated clipping threshold is degenerate: {threshold}")
    return threshold


def train(model: GaaeModel, vectors, labels, cfg: TrainConfig):
    """Full training: warm-up, threshold estimation, then noisy adversarial loop.

    Returns ``(model, trace)``. The trained model keeps its discriminator in
    memory (and in full checkpoints) but is left in eval mode with batch-norm
    statistics frozen; the protected inference path never touches the
    discriminator.
    """
    vectors = as_matrix(vectors)
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if len(labels) != len(vectors):
        raise ShapeError("labels and vectors disagree on the number of rows")
    classes = np.unique(labels)
    if not np.array_equal(classes, np.array([0.0, 1.0])):
        raise DataError(f"training data must contain both gender classes, got {classes}")

    opt_phi = Adam(model.phi_parameters(), lr=cfg.lr)
    opt_theta = Adam(model.theta_parameters(), lr=cfg.lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    source = NoiseSource(cfg.seed, spawn_key=(2,))
    trace = TrainTrace()

    threshold = estimate_clip_threshold(
        model, vectors, labels, cfg,
        opt_phi=opt_phi, opt_theta=opt_theta,
        shuffle_rng=shuffle_rng, source=source, trace=trace,
    )
    trace.clip_threshold = threshold
    model.dp.cfg = DpConfig(clip_threshold=threshold, epsilon=cfg.epsilon_tr)

    for epoch in range(cfg.epochs):
        _run_epoch(model, vectors, labels, cfg, opt_phi, opt_theta, shuffle_rng,
                   source, trace, "main", epoch)

    model.epsilon_tr = float(cfg.epsilon_tr)
    model.trained = True
    model.eval_mode()
    return model, trace


def protect(model: GaaeModel, x, epsilon_ts: float, source: NoiseSource | None = None,
            ledger: BudgetLedger | None = None, release_id: str | None = None) -> np.ndarray:
    """Produce protected embeddings: encode, clip, add noise, decode.

    Uses frozen batch-norm statistics and never evaluates the discriminator,
    so everything after the noise addition is a deterministic map and the
    output inherits the privacy guarantee of the noisy latent code. With an
    infinite ``epsilon_ts`` the noise layer reduces to pure clipping and the
    output is deterministic. Finite releases are appended to ``ledger`` when
    one is supplied (one entry per call).
    """
    if not model.trained:
        raise StateError("protect requires a trained model")
    if model.clip_threshold is None:
        raise StateError("model has no clipping threshold; train it first")
    x = as_matrix(x)
    if x.shape[1] != model.input_dim:
        raise ShapeError(
            f"expected embeddings of dimension {model.input_dim}, got {x.shape[1]}"
        )
    model.eval_mode()
    z = model.encode(x)
    cfg = DpConfig(clip_threshold=model.clip_threshold, epsilon=float(epsilon_ts))
    z_dp = dp_transform(z, cfg, source)
    out = model.decode(z_dp)
    if ledger is not None and math.isfinite(float(epsilon_ts)):
        ledger.record(float(epsilon_ts), release_id=release_id)
    return out


def save_checkpoint(model: GaaeModel, path, include_discriminator: bool = True) -> None:
    """Write the versioned binary checkpoint.

    Layout: magic ``GAAE``, u32 version, u32 input dim, u32 latent dim,
    u32 discriminator hidden dim, f64 clipping threshold, f64 training
    budget, u8 discriminator flag, then the parameter tensors as raw
    little-endian f64 in declared order (encoder weight/bias, batch-norm
    gamma/beta/running mean/running variance, decoder weight/bias, and, if
    the flag is set, both discriminator layers).
    """
    if not model.trained or model.clip_threshold is None:
        raise StateError("only trained models can be checkpointed")
    tensors = [
        model.enc_lin.weight, model.enc_lin.bias,
        model.enc_bn.gamma, model.enc_bn.beta,
        model.enc_bn.running_mean, model.enc_bn.running_var,
        model.dec_lin.weight, model.dec_lin.bias,
    ]
    has_disc = bool(include_discriminator and model.has_discriminator)
    if has_disc:
        tensors += [
            model.disc_lin1.weight, model.disc_lin1.bias,
            model.disc_lin2.weight, model.disc_lin2.bias,
        ]
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                model.input_dim, model.latent_dim, model.disc_hidden,
                float(model.clip_threshold),
                float(model.epsilon_tr if model.epsilon_tr is not None else math.inf),
                1 if has_disc else 0,
            )
        )
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def _tensor_shapes(input_dim: int, latent_dim: int, disc_hidden: int, has_disc: bool):
    shapes = [
        (latent_dim, input_dim), (latent_dim,),
        (latent_dim,), (latent_dim,), (latent_dim,), (latent_dim,),
        (input_dim, latent_dim), (input_dim,),
    ]
    if has_disc:
        shapes += [(disc_hidden, latent_dim), (disc_hidden,), (1, disc_hidden), (1,)]
    return shapes


def load_checkpoint(path) -> GaaeModel:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise FormatError(
            f"{path}: truncated header, {len(data)} bytes where {_CKPT_HEADER.size} "
            f"are needed (error at byte {len(data)})"
        )
    magic, version, input_dim, latent_dim, disc_hidden, threshold, epsilon_tr, flag = (
        _CKPT_HEADER.unpack_from(data, 0)
    )
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at byte 4")
    if flag not in (0, 1):
        raise FormatError(f"{path}: invalid discriminator flag {flag} at byte {_CKPT_HEADER.size - 1}")
    has_disc = bool(flag)
    shapes = _tensor_shapes(input_dim, latent_dim, disc_hidden, has_disc)
    expected = _CKPT_HEADER.size + sum(int(np.prod(s)) * 8 for s in shapes)
    if len(data) != expected:
        raise FormatError(
            f"{path}: body length mismatch, expected {expected} bytes but file has "
            f"{len(data)} (error at byte {min(len(data), expected)})"
        )

    model = GaaeModel(input_dim=input_dim, latent_dim=latent_dim, disc_hidden=disc_hidden, seed=0)
    offset = _CKPT_HEADER.size
    tensors = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors.append(arr.astype(np.float64))
        offset += count * 8
    (model.enc_lin.weight, model.enc_lin.bias,
     model.enc_bn.gamma, model.enc_bn.beta,
     model.enc_bn.running_mean, model.enc_bn.running_var,
     model.dec_lin.weight, model.dec_lin.bias) = tensors[:8]
    if has_disc:
        (model.disc_lin1.weight, model.disc_lin1.bias,
         model.disc_lin2.weight, model.disc_lin2.bias) = tensors[8:]
    model.has_discriminator = has_disc
    model.dp.cfg = DpConfig(clip_threshold=threshold,
                            epsilon=epsilon_tr if epsilon_tr > 0 else math.inf)
    model.epsilon_tr = float(epsilon_tr)
    model.trained = True
    model.eval_mode()
    return model

"""Training loop (Adam, LR halving on validation plateaus, checkpoints) and
the clustering-based separation procedure used at test time."""

import csv
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import corpus as corpus_mod
from .clustering import cluster_attractors
from .dsp import (
    FEATURE_FLOOR_EPS,
    StftConfig,
    Waveform,
    feature_stats,
    istft,
    log_features,
    magnitude,
    phase,
    read_wav,
    stft,
)
from .masking import apply_mask, binarize, wiener_like_masks
from .network import (
    ArchSpec,
    ModelParams,
    batch_loss,
    batch_loss_and_grads,
    clip_grads,
    estimate_masks,
    forward_embed,
    tensor_shapes,
)

CHECKPOINT_MAGIC = b"DANC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HyperParams:
    lr0: float = 1e-3
    lr_halve_patience: int = 3
    lr_min: float = 1e-6
    epochs: int = 50          # desk-scale default; the full-size run uses 150
    batch_size: int = 8
    grad_clip: float = 200.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > self.lr_min > 0:
            raise ValueError(f"need lr0 > lr_min > 0, got {self.lr0}, {self.lr_min}")
        if self.lr_halve_patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.tensors.items()},
                   v={k: np.zeros_like(p) for k, p in params.tensors.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.tensors[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class LrSchedule:
    """Halve the rate when the best validation loss stalls for `patience` epochs."""

    def __init__(self, lr0: float, patience: int, lr_min: float,
                 best: float = np.inf, since_best: int = 0):
        self.lr = lr0
        self.patience = patience
        self.lr_min = lr_min
        self.best = best
        self.since_best = since_best

    def update(self, val_loss: float) -> bool:
        """Feed one epoch's validation loss; True when this is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.since_best = 0
            return True
        self.since_best += 1
        if self.since_best >= self.patience:
            self.lr = max(self.lr / 2.0, self.lr_min)
            self.since_best = 0
        return False


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    stft_cfg: StftConfig
    sample_rate: int
    epoch: int
    best_val_loss: float
    lr: float
    epochs_since_best: int = 0
    version: int = CHECKPOINT_VERSION

    @property
    def arch(self) -> ArchSpec:
        return self.params.arch

    def copy(self) -> "Checkpoint":
        return replace(self, params=self.params.copy(), adam=self.adam.copy())


def _tensor_stream(ckpt: Checkpoint) -> list[np.ndarray]:
    """Serialization order: params, Adam first moments, Adam second moments
    (each layer-major, direction-major, gates stacked z/r/n), then the
    per-frequency feature mean and standard deviation."""
    names = list(ckpt.params.tensors)
    return ([ckpt.params.tensors[n] for n in names]
            + [ckpt.adam.m[n] for n in names]
            + [ckpt.adam.v[n] for n in names]
            + [ckpt.params.feat_mean, ckpt.params.feat_std])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arch, cfg = ckpt.arch, ckpt.stft_cfg
    header_items = [
        ("arch.input_dim", arch.input_dim),
        ("arch.num_layers", arch.num_layers),
        ("arch.hidden_per_direction", arch.hidden_per_direction),
        ("arch.embed_dim", arch.embed_dim),
        ("arch.cell_kind", arch.cell_kind),
        ("stft.win_len", cfg.win_len),
        ("stft.hop", cfg.hop),
        ("stft.fft_size", cfg.fft_size),
        ("sample_rate", ckpt.sample_rate),
        ("epoch", ckpt.epoch),
        ("lr", repr(ckpt.lr)),
        ("best_val_loss", repr(ckpt.best_val_loss)),
        ("epochs_since_best", ckpt.epochs_since_best),
        ("adam_t", ckpt.adam.t),
    ]
    header = "".join(f"{k}={v}\n" for k, v in header_items).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for tensor in _tensor_stream(ckpt):
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic bytes)")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<I", blob[8:12])[0]
    header = dict(line.split("=", 1)
                  for line in blob[12:12 + header_len].decode().splitlines())

    arch = ArchSpec(input_dim=int(header["arch.input_dim"]),
                    num_layers=int(header["arch.num_layers"]),
                    hidden_per_direction=int(header["arch.hidden_per_direction"]),
                    embed_dim=int(header["arch.embed_dim"]),
                    cell_kind=header["arch.cell_kind"])
    cfg = StftConfig(win_len=int(header["stft.win_len"]), hop=int(header["stft.hop"]),
                     fft_size=int(header["stft.fft_size"]))

    shapes = tensor_shapes(arch)
    offset = 12 + header_len

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        out = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += nbytes
        return out.copy()

    tensors = {name: take(shape) for name, shape in shapes.items()}
    m = {name: take(shape) for name, shape in shapes.items()}
    v = {name: take(shape) for name, shape in shapes.items()}
    feat_mean = take((arch.input_dim,))
    feat_std = take((arch.input_dim,))
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")

    params = ModelParams(arch, tensors, feat_mean, feat_std)
    adam = AdamState(m, v, int(header["adam_t"]))
    return Checkpoint(params=params, adam=adam, stft_cfg=cfg,
                      sample_rate=int(header["sample_rate"]),
                      epoch=int(header["epoch"]),
                      best_val_loss=float(header["best_val_loss"]),
                      lr=float(header["lr"]),
                      epochs_since_best=int(header["epochs_since_best"]),
                      version=version)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    rows: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for r in self.rows:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                                 repr(r.lr), f"{r.seconds:.3f}"])

    def deterministic_rows(self) -> list[tuple]:
        """Everything except wall time, which cannot be reproducible."""
        return [(r.epoch, r.train_loss, r.val_loss, r.lr) for r in self.rows]


@dataclass
class _Utterance:
    features: np.ndarray          # standardized log magnitude, F x T
    mix_mag: np.ndarray           # linear magnitude, F x T
    masks: list[np.ndarray]       # binary ideal masks, F x T each


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: TrainLog


def _load_split(records: list[corpus_mod.MixtureRecord], cfg: StftConfig,
                tau: float = 0.5) -> list[tuple[np.ndarray, list[np.ndarray]]]:
    """Raw log-feature and mask material per utterance (stats applied later)."""
    out = []
    for rec in records:
        mix = read_wav(rec.mixture_path)
        spec = stft(mix, cfg)
        mix_mag = magnitude(spec)
        source_mags = [magnitude(stft(read_wav(p), cfg)) for p in rec.source_paths]
        masks = [binarize(m, tau) for m in wiener_like_masks(source_mags)]
        raw_logmag = log_features(mix_mag, FEATURE_FLOOR_EPS)
        out.append((raw_logmag, mix_mag, masks))
    return out


def _standardize(raw, mean, std) -> list[_Utterance]:
    safe = np.maximum(std, 1e-8)
    return [_Utterance((logmag - mean[:, None]) / safe[:, None], mag, masks)
            for logmag, mag, masks in raw]


def train(manifest_path, hyper: HyperParams, arch: ArchSpec,
          stft_cfg: StftConfig = StftConfig(), resume_from: Checkpoint | None = None,
          progress=None) -> TrainResult:
    """Run the full training loop over a manifest's train/valid splits.

    Per epoch: seeded shuffle, padded batches, forward/backward, global-norm
    gradient clip, Adam step; then a validation pass drives the LR schedule.
    The best-validation checkpoint is the product; the last-epoch checkpoint
    supports exact resumption (per-epoch RNG is derived from (seed, epoch)).
    """
    records = corpus_mod.load_manifest(manifest_path)
    train_records = [r for r in records if r.split == "train"]
    valid_records = [r for r in records if r.split == "valid"]
    if not train_records or not valid_records:
        raise ValueError("manifest needs non-empty train and valid splits")

    raw_train = _load_split(train_records, stft_cfg)
    raw_valid = _load_split(valid_records, stft_cfg)

    if resume_from is not None:
        ckpt = resume_from.copy()
        if ckpt.arch != arch:
            raise ValueError(f"resume architecture {ckpt.arch} != requested {arch}")
        mean, std = ckpt.params.feat_mean, ckpt.params.feat_std
        schedule = LrSchedule(ckpt.lr, hyper.lr_halve_patience, hyper.lr_min,
                              best=ckpt.best_val_loss, since_best=ckpt.epochs_since_best)
        start_epoch = ckpt.epoch
        params, adam = ckpt.params, ckpt.adam
    else:
        from .network import init_params

        mean, std = feature_stats([logmag for logmag, _, _ in raw_train])
        params = init_params(arch, hyper.seed)
        params.feat_mean, params.feat_std = mean, std
        adam = AdamState.zeros(params)
        schedule = LrSchedule(hyper.lr0, hyper.lr_halve_patience, hyper.lr_min)
        start_epoch = 0

    train_utts = _standardize(raw_train, mean, std)
    valid_utts = _standardize(raw_valid, mean, std)

    def validation_loss() -> float:
        total = 0.0
        for i in range(0, len(valid_utts), hyper.batch_size):
            chunk = valid_utts[i:i + hyper.batch_size]
            total += batch_loss([u.features for u in chunk], [u.mix_mag for u in chunk],
                                [u.masks for u in chunk], params) * len(chunk)
        return total / len(valid_utts)

    log = TrainLog()
    best_ckpt = None

    def snapshot(epoch) -> Checkpoint:
        return Checkpoint(params=params.copy(), adam=adam.copy(), stft_cfg=stft_cfg,
                          sample_rate=8000, epoch=epoch, best_val_loss=schedule.best,
                          lr=schedule.lr, epochs_since_best=schedule.since_best)

    for epoch in range(start_epoch + 1, start_epoch + hyper.epochs + 1):
        started = time.perf_counter()
        lr_this_epoch = schedule.lr
        order = np.random.default_rng([hyper.seed, epoch]).permutation(len(train_utts))
        total = 0.0
        for i in range(0, len(order), hyper.batch_size):
            chunk = [train_utts[j] for j in order[i:i + hyper.batch_size]]
            loss, grads = batch_loss_and_grads(
                [u.features for u in chunk], [u.mix_mag for u in chunk],
                [u.masks for u in chunk], params)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch} (loss {loss}); "
                    f"last losses: {[r.train_loss for r in log.rows[-3:]]}")
            clip_grads(grads, hyper.grad_clip)
            adam_step(params, grads, adam, schedule.lr,
                      hyper.beta1, hyper.beta2, hyper.eps)
            total += loss * len(chunk)
        train_loss = total / len(train_utts)
        val_loss = validation_loss()

        improved = schedule.update(val_loss)
        log.rows.append(EpochRecord(epoch, train_loss, val_loss, lr_this_epoch,
                                    time.perf_counter() - started))
        if improved or best_ckpt is None:
            best_ckpt = snapshot(epoch)
        if progress is not None:
            progress(log.rows[-1])

    last_ckpt = snapshot(start_epoch + hyper.epochs)
    return TrainResult(best=best_ckpt, last=last_ckpt, log=log)


def separate(mixture: Waveform, ckpt: Checkpoint, n_speakers: int = 2,
             algo: str = "gmm", seed: int = 0) -> list[Waveform]:
    """Testing procedure: embed the mixture, cluster the embeddings into
    attractors, mask the magnitude, and invert with the mixture phase."""
    if mixture.sample_rate != ckpt.sample_rate:
        raise ValueError(f"mixture is {mixture.sample_rate} Hz but the checkpoint "
                         f"expects {ckpt.sample_rate} Hz")
    if n_speakers < 1:
        raise ValueError(f"n_speakers must be >= 1, got {n_speakers}")

    spec = stft(mixture, ckpt.stft_cfg)
    mix_phase = phase(spec)
    mix_mag = magnitude(spec)
    feats = log_features(mix_mag, FEATURE_FLOOR_EPS,
                         mean=ckpt.params.feat_mean, std=ckpt.params.feat_std)
    V = forward_embed(feats, ckpt.params)
    attractors = cluster_attractors(V, n_speakers, algo=algo, seed=seed)
    masks = estimate_masks(V, attractors, ckpt.stft_cfg.num_freqs)
    return [istft(apply_mask(mix_mag, m, mix_phase, spec.source_len, spec.cfg),
                  ckpt.stft_cfg, mixture.sample_rate)
            for m in masks]

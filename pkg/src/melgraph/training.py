"""Cross-entropy training with Adam, a single step-decay learning rate and best-val checkpointing."""

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .features import spec_augment

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


@dataclass
class TrainConfig:
    lr0: float = 1.5e-3
    decay_epoch: int = 90
    decay_factor: float = 0.5
    batch_size: int = 16
    epochs: int = 130
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not self.decay_epoch < self.epochs:
            raise ValueError("decay_epoch must be smaller than epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "shipsear": TrainConfig(lr0=1.5e-3, decay_epoch=90, batch_size=16, epochs=130),
    "deepship": TrainConfig(lr0=1.2e-3, decay_epoch=130, batch_size=64, epochs=180),
}


def preset(name, **overrides):
    return replace(PRESETS[name], **overrides)


def lr_at(epoch, cfg):
    """Learning rate for a 1-based epoch: lr0 up to decay_epoch, then lr0 * decay_factor."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch must lie in 1..{cfg.epochs}")
    return cfg.lr0 if epoch <= cfg.decay_epoch else cfg.lr0 * cfg.decay_factor


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, state, lr, grads=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update in place.

    ``params`` maps names to Tensors; gradients come from ``grads`` (same
    keys) or from each tensor's ``.grad``.  A missing gradient counts as
    zero.  All gradients are checked before anything is touched, so a
    non-finite value leaves parameters and moments unchanged.
    """
    g_all = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        g_all[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = g_all[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


def iter_batches(n, batch_size, rng=None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def n_steps(n, batch_size):
    return -(-n // batch_size)


@dataclass
class EpochStats:
    loss: float
    oa: float
    steps: int


def train_epoch(model, X, y, cfg, rng, state, lr):
    """One pass over (X, y) in shuffled mini-batches; returns EpochStats.

    X holds normalised spectrograms (n, T, F).  Training-mode predictions of
    each batch are counted toward the reported train OA.
    """
    n = len(X)
    if n == 0:
        raise ValueError("empty training data")
    y = np.asarray(y)
    tape = ad.get_tape()
    total_loss, correct, steps = 0.0, 0, 0
    for idx in iter_batches(n, cfg.batch_size, rng):
        xb = np.asarray(X[idx])
        if cfg.augment:
            xb = np.stack([spec_augment(s, rng)[0] for s in xb])
        tape.clear()
        model.zero_grad()
        logits = model.forward(xb, training=True)
        loss = ad.cross_entropy(logits, y[idx])
        ad.backward(loss)
        adam_step(model.params, state, lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        total_loss += float(loss.data) * len(idx)
        correct += int(np.sum(np.argmax(logits.data, axis=-1) == y[idx]))
        steps += 1
    return EpochStats(total_loss / n, correct / n, steps)


def predict(model, X, batch_size=32):
    """Inference-mode class predictions; parameters and BN statistics stay untouched."""
    out = []
    with ad.no_grad():
        for i in range(0, len(X), batch_size):
            out.append(np.argmax(model.forward(np.asarray(X[i:i + batch_size]), training=False).data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(model, X, y, batch_size=32):
    if len(X) == 0:
        return float("nan")
    return float(np.mean(predict(model, X, batch_size) == np.asarray(y)))


HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "train_oa", "val_oa"]


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_COLUMNS})


def read_history(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_COLUMNS[1:]}}
                for r in csv.DictReader(fh)]


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_val_oa: float
    best_state: tuple
    checkpoint: str = None


def fit(model, train, val, cfg, out_dir=None, meta=None):
    """Train for cfg.epochs, validating after every epoch.

    ``train`` and ``val`` are (X, y) pairs of normalised spectrograms.
    The model is left holding the weights with the best validation OA
    (first epoch wins ties).  With ``out_dir`` the history CSV and the
    best checkpoint (``best.gtck``) are written there.
    """
    from .gtransformer import save_checkpoint

    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    history = []
    best = (-1.0, 0, None)
    ckpt = os.path.join(out_dir, "best.gtck") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch, cfg)
        stats = train_epoch(model, train[0], train[1], cfg, rng, state, lr)
        val_oa = accuracy(model, val[0], val[1], cfg.batch_size) if len(val[0]) else 0.0
        history.append({"epoch": epoch, "lr": lr, "train_loss": stats.loss,
                        "train_oa": stats.oa, "val_oa": val_oa})
        log.info("epoch %d lr %.3g loss %.4f train_oa %.3f val_oa %.3f",
                 epoch, lr, stats.loss, stats.oa, val_oa)
        if val_oa > best[0]:
            best = (val_oa, epoch, model.state_dict())
            if ckpt:
                save_checkpoint(ckpt, model, {**(meta or {}), "epoch": epoch, "val_oa": val_oa,
                                              "train": cfg.to_dict()})
        if out_dir:
            write_history(os.path.join(out_dir, "history.csv"), history)
    model.load_state(*best[2])
    return FitResult(history, best[1], best[0], best[2], ckpt)


# ------------------------------------------------------------------ data

@dataclass
class Split:
    X: np.ndarray          # (n, 512, 128) float32, normalised
    y: np.ndarray
    refs: list             # (source path, start offset s)


def load_dataset(manifest_path, stats=None, dtype=np.float32):
    """Featurise a manifest into train/val/test Splits.

    Rows carrying a ``split`` column are taken as given.  Plain rows are
    segmented and split along each recording's timeline.  Normalisation
    statistics come from the train split unless ``stats`` is supplied.
    Returns (splits dict, FeatureStats).
    """
    from .audio_io import read_manifest, load_segments, split_by_time
    from .features import FeatureStats, mel_spectrogram, normalize

    rows = read_manifest(manifest_path)
    items = {"train": [], "val": [], "test": []}
    plain = [r for r in rows if not r.split]
    for r in rows:
        if r.split:
            if r.split not in items:
                raise ValueError(f"unknown split {r.split!r} in {manifest_path}")
            segs = load_segments(r)
            if not segs:
                raise ValueError(f"{r.path}: no segment at offset {r.start_offset_s}")
            items[r.split].append(segs[0])
    if plain:
        segs = [s for r in plain for s in load_segments(r)]
        lookup = {(s.source_id, s.start_offset): s for s in segs}
        for e in split_by_time(segs).entries:
            items[e.split].append(lookup[(e.source_id, e.start_offset_s)])
    specs = {k: [mel_spectrogram(s.samples) for s in v] for k, v in items.items()}
    if stats is None:
        stats = FeatureStats.from_arrays(specs["train"])
    out = {}
    for k, v in items.items():
        X = np.stack([normalize(s, stats) for s in specs[k]]).astype(dtype) if v else \
            np.zeros((0, 512, 128), dtype=dtype)
        out[k] = Split(X, np.array([s.class_label for s in v], dtype=int),
                       [(s.source_id, s.start_offset) for s in v])
    return out, stats

"""Datasets, the three training regimes, and ensembles.

Forward:      layout patch     -> fabricated patch
Independent:  fabricated patch -> layout patch
Tandem:       fabricated patch -> corrector -> frozen forward ensemble -> fabricated patch

All three use mini-batch Adam on mean BCE with early stopping on the
held-out split; the weights returned are the ones with the lowest held-out
loss seen, not the last epoch's.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import neural
from .errors import (InvariantError, OptimizerError, ParameterError, SizeError,
                     TrainingError)
from .fabsim import FabParams, fabricate
from .neural import PATCH_SIZE
from .raster import as_bitmap

TRAIN_FRACTION = 0.8


# -- dataset ------------------------------------------------------------------

@dataclass
class Dataset:
    """Co-sliced (layout, fabricated) patch pairs.

    The rasters are kept whole; pair ``i`` is the ``patch_size`` window at
    ``index[i] = (raster, y, x)`` of both. ``split[i]`` is True for training.
    """

    layouts: list
    fabricated: list
    index: np.ndarray
    split: np.ndarray
    patch_size: int = PATCH_SIZE
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.index)

    @property
    def train_indices(self):
        return np.flatnonzero(self.split)

    @property
    def test_indices(self):
        return np.flatnonzero(~self.split)

    def indices(self, split):
        if split == "train":
            return self.train_indices
        if split == "test":
            return self.test_indices
        if split == "all":
            return np.arange(len(self))
        raise ParameterError(f"unknown split {split!r}")

    def pairs(self, idx):
        """(layout, fabricated) float32 batches of shape (n, P, P, 1)."""
        idx = np.atleast_1d(idx)
        p = self.patch_size
        lay = np.empty((len(idx), p, p, 1), dtype=np.float32)
        fab = np.empty_like(lay)
        for j, i in enumerate(idx):
            r, y, x = self.index[i]
            lay[j, :, :, 0] = self.layouts[r][y:y + p, x:x + p]
            fab[j, :, :, 0] = self.fabricated[r][y:y + p, x:x + p]
        return lay, fab

    def pair(self, i):
        lay, fab = self.pairs([i])
        return lay[0, :, :, 0], fab[0, :, :, 0]


def split_mask(n, seed=0, train_fraction=TRAIN_FRACTION):
    """Boolean train mask with round(train_fraction * n) True entries, seeded."""
    n_train = int(round(train_fraction * n))
    mask = np.zeros(n, dtype=bool)
    mask[np.random.default_rng(seed).permutation(n)[:n_train]] = True
    return mask


def _window_offsets(dim, patch_size, stride):
    return np.arange(0, dim - patch_size + 1, stride)


def build_dataset(corpus, fab=FabParams(), stride=32, split_seed=0, fab_runs=1,
                  patch_size=PATCH_SIZE):
    """Fabricate every pattern and index its overlapping patch pairs.

    Each pattern is fabricated ``fab_runs`` times with noise seeds
    ``fab.seed + k*len(corpus) + i`` for run ``k`` of pattern ``i``. Windows
    tile each raster at ``stride`` without padding.
    """
    if len(corpus) == 0:
        raise ParameterError("corpus is empty")
    if stride < 1 or fab_runs < 1:
        raise ParameterError(f"stride and fab_runs must be >= 1, got {stride}, {fab_runs}")
    layouts, fabricated, index = [], [], []
    for k in range(fab_runs):
        for i, pattern in enumerate(corpus):
            pattern = as_bitmap(pattern)
            h, w = pattern.shape
            if h < patch_size or w < patch_size:
                raise SizeError(f"pattern {i} is {w}x{h}, smaller than the "
                                f"{patch_size}x{patch_size} patch")
            run = replace(fab, seed=fab.seed + k * len(corpus) + i)
            r = len(layouts)
            layouts.append(pattern)
            fabricated.append(fabricate(pattern, run))
            ys = _window_offsets(h, patch_size, stride)
            xs = _window_offsets(w, patch_size, stride)
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            index.append(np.stack([np.full(yy.size, r), yy.ravel(), xx.ravel()], axis=1))
    index = np.concatenate(index).astype(np.int64)
    meta = {"fab": fab.to_dict(), "stride": stride, "split_seed": split_seed,
            "fab_runs": fab_runs, "n_patterns": len(corpus), "n_pairs": len(index)}
    return Dataset(layouts, fabricated, index, split_mask(len(index), split_seed),
                   patch_size, meta)


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    stride: int = 32
    ensemble_size: int = 10
    lr: float = 1e-3
    augment: bool = False       # random flip/rotation of each training pair

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patience", "stride", "ensemble_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- ensembles ------------------------------------------------------------------

ROLES = ("forward", "corrector")


@dataclass
class Ensemble:
    members: list
    role: str = "forward"

    def __post_init__(self):
        if not self.members:
            raise ParameterError("an ensemble needs at least one member")
        if self.role not in ROLES:
            raise ParameterError(f"role must be one of {ROLES}, got {self.role!r}")
        sizes = {m.patch_size for m in self.members}
        if len(sizes) != 1:
            raise ParameterError(f"ensemble members disagree on patch size: {sorted(sizes)}")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def patch_size(self):
        return self.members[0].patch_size

    def predict(self, batch):
        """Mean of the members' output probabilities, (N, P, P, 1)."""
        out = neural.forward(self.members[0], batch)
        for m in self.members[1:]:
            out += neural.forward(m, batch)
        if len(self.members) > 1:
            out /= len(self.members)
        return out

    def digest(self):
        return [m.digest() for m in self.members]


def save_ensemble(ensemble, directory):
    """One weight file per member plus ``ensemble.json``; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    names = []
    for i, m in enumerate(ensemble.members):
        name = f"{ensemble.role}_{i:02d}.fxw"
        neural.save_weights(m, os.path.join(directory, name), role=ensemble.role, member=i)
        names.append(name)
    with open(os.path.join(directory, "ensemble.json"), "w", encoding="utf-8") as fh:
        json.dump({"role": ensemble.role, "members": names}, fh, indent=2)
    return [os.path.join(directory, n) for n in names]


def load_ensemble(directory):
    with open(os.path.join(directory, "ensemble.json"), encoding="utf-8") as fh:
        info = json.load(fh)
    members = [neural.load_weights(os.path.join(directory, n)) for n in info["members"]]
    return Ensemble(members, info["role"])


def write_history(path, ensemble_or_weights):
    """Epoch log as CSV: member, epoch, train_bce, test_bce."""
    members = (ensemble_or_weights.members if isinstance(ensemble_or_weights, Ensemble)
               else [ensemble_or_weights])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["member", "epoch", "train_bce", "test_bce"])
        for i, m in enumerate(members):
            for row in m.meta.get("history", []):
                w.writerow([i, row["epoch"], f"{row['train_bce']:.6f}", f"{row['test_bce']:.6f}"])


# -- training loop --------------------------------------------------------------

def dihedral(batch, codes):
    """Apply one of the 8 square symmetries per sample of an (n, P, P, c) batch.

    Code ``c`` rotates by ``c % 4`` quarter turns, then transposes if ``c >= 4``.
    """
    out = np.empty_like(batch)
    for c in np.unique(codes):
        sel = codes == c
        t = np.rot90(batch[sel], int(c) % 4, axes=(1, 2))
        if c >= 4:
            t = t.transpose(0, 2, 1, 3)
        out[sel] = t
    return out


def _batches(idx, size):
    for i in range(0, len(idx), size):
        yield idx[i:i + size]


def _fit(dataset, config, step, evaluate, regime, log=None):
    """Shared epoch loop.

    ``step(weights, state, batch_idx, codes)`` performs one update and
    returns the batch loss, with ``codes`` the per-pair symmetry (or None);
    ``evaluate(weights, idx)`` returns mean loss over ``idx``.
    """
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    train_idx = dataset.train_indices
    test_idx = dataset.test_indices
    if len(train_idx) == 0:
        raise ParameterError("dataset has no training pairs")
    if len(test_idx) == 0:
        test_idx = train_idx        # nothing held out: stop on training loss

    weights = neural.init_weights(config.seed, dataset.patch_size)
    state = neural.AdamState.for_weights(weights, lr=config.lr)
    order_rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])
    best, best_loss, best_epoch = weights.copy(), np.inf, 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        total, count = 0.0, 0
        for b in _batches(order_rng.permutation(train_idx), config.batch_size):
            codes = aug_rng.integers(0, 8, len(b)) if config.augment else None
            try:
                loss = step(weights, state, b, codes)
            except OptimizerError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", epoch=epoch) from None
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            total += loss * len(b)
            count += len(b)
        test_loss = evaluate(weights, test_idx)
        if not np.isfinite(test_loss):
            raise TrainingError(f"non-finite test loss at epoch {epoch}", epoch=epoch)
        row = {"epoch": epoch, "train_bce": total / count, "test_bce": test_loss}
        history.append(row)
        if log is not None:
            log(row)
        if test_loss < best_loss:
            best, best_loss, best_epoch = weights.copy(), test_loss, epoch
        elif epoch - best_epoch >= config.patience:
            break
    best.meta = {"regime": regime, "best_epoch": best_epoch, "test_bce": best_loss,
                 "epochs_run": len(history), "history": history,
                 "config": config.to_dict()}
    return best


def _supervised(dataset, config, swap, regime, log):
    def io(idx):
        lay, fab = dataset.pairs(idx)
        return (fab, lay) if swap else (lay, fab)

    def step(weights, state, idx, codes):
        x, y = io(idx)
        if codes is not None:
            x, y = dihedral(x, codes), dihedral(y, codes)
        loss, grads = neural.loss_and_grads(weights, x, y)
        neural.adam_step(weights, grads, state)
        return loss

    def evaluate(weights, idx):
        def loss(b):
            x, y = io(b)
            return neural.bce(neural.forward(weights, x), y)
        return _mean_loss(idx, config.batch_size * 4, loss)

    return _fit(dataset, config, step, evaluate, regime, log)


def _mean_loss(idx, chunk, fn):
    total = 0.0
    for b in _batches(idx, chunk):
        total += fn(b) * len(b)
    return total / len(idx)


def train_forward(dataset, config=TrainConfig(), log=None):
    """Forward predictor: layout -> fabricated."""
    return _supervised(dataset, config, False, "forward", log)


def train_inverse_independent(dataset, config=TrainConfig(), log=None):
    """Inverse corrector trained directly: fabricated -> layout."""
    return _supervised(dataset, config, True, "independent", log)


def tandem_loss_and_grads(corrector, forward, fab, param_grads=True):
    """Tandem loss and corrector gradients.

    loss = BCE(mean_k sigmoid(f_k(c(fab))), fab); the forward members are
    only read.
    """
    logits_c, cache_c = neural.forward_logits(corrector, fab)
    s = corrector.patch_size
    p_c = neural.sigmoid(logits_c)
    x = p_c.reshape(-1, s, s, 1)
    k = len(forward.members)
    probs, caches = [], []
    for m in forward.members:
        lg, cache = neural.forward_logits(m, x)
        probs.append(neural.sigmoid(lg))
        caches.append(cache)
    p_mean = probs[0].copy()
    for p in probs[1:]:
        p_mean += p
    p_mean /= k
    y = np.asarray(fab, dtype=p_mean.dtype).reshape(p_mean.shape)
    loss = neural.bce(p_mean, y)
    if not param_grads:
        return loss, None
    g_mean = neural.bce_grad_prob(p_mean, y) / k
    g_x = None
    for m, p, cache in zip(forward.members, probs, caches):
        _, gi = neural.backward_from_logits(m, cache, g_mean * p * (1 - p),
                                            param_grads=False, input_grad=True)
        g_x = gi if g_x is None else g_x + gi
    g_logits_c = g_x.reshape(p_c.shape) * p_c * (1 - p_c)
    grads, _ = neural.backward_from_logits(corrector, cache_c, g_logits_c)
    return loss, grads


def _freeze(ensemble):
    flags = []
    for m in ensemble.members:
        for a in m.blocks.values():
            flags.append((a, a.flags.writeable))
            a.flags.writeable = False
    return flags


def train_inverse_tandem(dataset, forward, config=TrainConfig(), log=None):
    """Corrector trained through the frozen forward ensemble."""
    if forward.role != "forward":
        raise ParameterError(f"tandem training needs a forward ensemble, got role {forward.role!r}")
    if forward.patch_size != dataset.patch_size:
        raise ParameterError("forward ensemble and dataset disagree on patch size")
    before = forward.digest()

    def step(weights, state, idx, codes):
        _, fab = dataset.pairs(idx)
        if codes is not None:
            fab = dihedral(fab, codes)
        loss, grads = tandem_loss_and_grads(weights, forward, fab)
        neural.adam_step(weights, grads, state)
        return loss

    def evaluate(weights, idx):
        return _mean_loss(idx, config.batch_size * 4,
                          lambda b: tandem_loss_and_grads(weights, forward, dataset.pairs(b)[1],
                                                          param_grads=False)[0])

    flags = _freeze(forward)
    try:
        best = _fit(dataset, config, step, evaluate, "tandem", log)
    finally:
        for a, w in flags:
            a.flags.writeable = w
    after = forward.digest()
    if after != before:
        raise InvariantError("forward ensemble weights changed during tandem training")
    best.meta["forward_digest"] = before
    return best


def train_ensemble(trainer, dataset, config=TrainConfig(), forward=None, log=None):
    """``config.ensemble_size`` members with seeds seed, seed+1, ...

    ``trainer`` is one of the three training functions; ``forward`` is
    required for the tandem trainer.
    """
    members = []
    for i in range(config.ensemble_size):
        cfg = replace(config, seed=config.seed + i)
        member_log = None if log is None else (lambda row, i=i: log({"member": i, **row}))
        if trainer is train_inverse_tandem:
            if forward is None:
                raise ParameterError("tandem ensemble training needs a forward ensemble")
            members.append(trainer(dataset, forward, cfg, log=member_log))
        else:
            members.append(trainer(dataset, cfg, log=member_log))
    role = "forward" if trainer is train_forward else "corrector"
    return Ensemble(members, role)

"""SGD with momentum, plateau learning-rate decay and the training driver."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .layers import FRESH, PRETRAINED, euclidean_loss
from .ops import DimensionError

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class OptimizerState:
    lr: dict = field(default_factory=lambda: {PRETRAINED: 2e-4, FRESH: 2e-3})
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_factor: float = 5.0
    window: int = 3
    rel_eps: float = 0.005
    n_decays: int = 0
    segment_start: int = 0  # index of the first validation loss since the last decay

    def decayed(self, at_index: int) -> "OptimizerState":
        lr = {g: v / self.decay_factor for g, v in self.lr.items()}
        return replace(self, lr=lr, n_decays=self.n_decays + 1, segment_start=at_index)


# Desk-scale profile. The trunk starts from random weights rather than
# pretrained ones, so both groups share one rate. Per-pixel-mean gradients
# are tiny next to 5e-4 * w, which then drags every weight to zero; the
# decay is divided by the 48x64 input pixel count to restore the balance.
DESK_OPTIMIZER = OptimizerState(lr={PRETRAINED: 1.0, FRESH: 1.0}, weight_decay=5e-4 / (48 * 64))


def optimizer_for(config) -> OptimizerState:
    """Default optimizer state for a network config (desk profile or the full one)."""
    return DESK_OPTIMIZER if config.name == "desk" else OptimizerState()


def sgd_step(params, state: OptimizerState):
    """Classical momentum with weight decay folded into the gradient.

    ``v <- momentum * v - lr * (g + weight_decay * w)``; ``w <- w + v``.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {p.name}")
    for p in params:
        lr = state.lr[p.group]
        p.velocity *= state.momentum
        p.velocity -= lr * (p.grad + state.weight_decay * p.data)
        p.data += p.velocity


def plateau_schedule(val_losses, state: OptimizerState) -> OptimizerState:
    """Divide every group's learning rate when validation loss stalls.

    A plateau is declared when none of the last ``window`` losses improves on
    the best loss seen earlier in the current segment by more than
    ``rel_eps`` (relative). After a decay the segment restarts at the latest
    loss, so the next decay needs another ``window`` stalled evaluations.
    """
    if len(val_losses) == 0:
        raise ValueError("plateau_schedule needs at least one validation loss")
    seg = list(val_losses[state.segment_start:])
    if len(seg) < state.window + 1:
        return state
    reference = min(seg[:-state.window])
    recent = min(seg[-state.window:])
    if recent < reference * (1.0 - state.rel_eps):
        return state
    log.info("validation plateau at %.6g; dividing learning rates by %g", recent, state.decay_factor)
    return state.decayed(len(val_losses) - 1)


@dataclass
class Dataset:
    """In-memory samples: images (N, 3, H, W), maps (N, H, W), fixations."""
    images: np.ndarray
    maps: np.ndarray
    fixations: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = list(idx)
        return Dataset(self.images[idx], self.maps[idx],
                       [self.fixations[i] for i in idx] if self.fixations else [],
                       [self.ids[i] for i in idx])


@dataclass
class TrainRun:
    seed: int
    config: dict
    iteration: int = 0
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)  # (iteration, loss)
    lr_log: list = field(default_factory=list)  # (iteration, lr_pretrained, lr_fresh)

    def to_lines(self) -> str:
        """Tab-separated records: iteration, train_loss, val_loss, lr_pretrained, lr_fresh."""
        val = dict(self.val_losses)
        lines = ["iteration\ttrain_loss\tval_loss\tlr_pretrained\tlr_fresh"]
        for (it, loss), (_, lp, lf) in zip(self.train_losses, self.lr_log):
            v = f"{val[it]!r}" if it in val else "-"
            lines.append(f"{it}\t{loss!r}\t{v}\t{lp!r}\t{lf!r}")
        return "\n".join(lines) + "\n"


def _batch_tensor(x, dtype):
    return np.ascontiguousarray(x, dtype=dtype)


OUTPUT_STRIDE = 8


def pool_maps(maps, factor=OUTPUT_STRIDE):
    """Box-average (N, H, W) maps down to the network's output grid."""
    maps = np.asarray(maps, dtype=np.float64)
    n, h, w = maps.shape
    if h % factor or w % factor:
        raise DimensionError(f"map size {h}x{w} is not a multiple of {factor}")
    return maps.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def validation_loss(network, data: Dataset, batch=8):
    """Euclidean loss at the output resolution, averaged over samples."""
    total, n = 0.0, 0
    for start in range(0, len(data), batch):
        x = data.images[start:start + batch]
        out = network.forward(x, train=False)[:, 0]
        loss, _ = euclidean_loss(out, pool_maps(data.maps[start:start + batch]))
        total += loss * len(x)
        n += len(x)
    return total / n


def train(network, data: Dataset, state: OptimizerState | None = None, *, iters=1000, batch=4,
          seed=0, val_data: Dataset | None = None, eval_every=100, run: TrainRun | None = None,
          early_stop=True):
    """Minibatch SGD on the euclidean loss at the output resolution.

    Targets are the ground-truth maps box-averaged by the network's stride;
    bicubic upsampling only happens at prediction time.

    Passing the ``run`` and returned ``state`` of a previous call continues
    training on a new dataset (two-stage training). Returns ``(run, state)``.
    """
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    if data.images.shape[2:] != data.maps.shape[1:]:
        raise DimensionError(
            f"image size {data.images.shape[2:]} differs from map size {data.maps.shape[1:]}")
    state = state or OptimizerState()
    if run is None:
        run = TrainRun(seed=seed, config=asdict(network.config))
    rng = np.random.default_rng(seed)
    params = network.params()
    targets = pool_maps(data.maps)
    order = np.empty(0, dtype=int)
    decays_without_improvement, best_at_decay = 0, np.inf
    for _ in range(iters):
        if len(order) < batch:
            order = np.concatenate([order, rng.permutation(len(data))])
        idx, order = order[:batch], order[batch:]
        x = data.images[idx]
        network.zero_grad()
        out = network.forward(x, train=True, dropout_seed=int(rng.integers(2**31)))[:, 0]
        loss, grad = euclidean_loss(out, targets[idx])
        if not np.isfinite(loss):
            bad = [data.ids[i] for i, o in zip(idx, out) if not np.all(np.isfinite(o))]
            bad = bad or [data.ids[i] for i in idx]
            raise NumericalError(f"non-finite loss at iteration {run.iteration}; samples {bad}")
        network.backward(grad[:, None])
        sgd_step(params, state)
        run.iteration += 1
        run.train_losses.append((run.iteration, loss))
        run.lr_log.append((run.iteration, state.lr[PRETRAINED], state.lr[FRESH]))
        if val_data is not None and len(val_data) and run.iteration % eval_every == 0:
            vloss = validation_loss(network, val_data)
            run.val_losses.append((run.iteration, vloss))
            before = state.n_decays
            state = plateau_schedule([v for _, v in run.val_losses], state)
            if state.n_decays > before:
                best = min(v for _, v in run.val_losses)
                if best < best_at_decay:
                    best_at_decay, decays_without_improvement = best, 0
                else:
                    decays_without_improvement += 1
                if early_stop and decays_without_improvement >= 2:
                    log.info("early stop at iteration %d", run.iteration)
                    break
    return run, state


def minmax(m):
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def compute_mean_map(maps):
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ValueError("need at least one training map")
    shape = maps[0].shape
    for k, m in enumerate(maps):
        if m.shape != shape:
            raise DimensionError(f"map {k} is {m.shape}, expected {shape}")
    return np.mean(maps, axis=0)


def apply_explicit_cb(prediction, mean_map, weight=1.0, renormalize=True):
    """Add a weighted dataset mean map to a prediction."""
    prediction = np.asarray(prediction, dtype=np.float64)
    if prediction.shape != np.shape(mean_map):
        raise DimensionError(f"prediction {prediction.shape} vs mean map {np.shape(mean_map)}")
    out = prediction + weight * mean_map
    return minmax(out) if renormalize else out

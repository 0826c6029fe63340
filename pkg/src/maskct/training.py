"""BCE training with Adam, plateau learning-rate decay and best-CF1 checkpoints."""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from maskct.augment import MaskConfig, PhotometricRanges, apply_mask1
from maskct.checkpoint import atomic_write_bytes, config_hash, load_tensors, save_tensors
from maskct.config import RunConfig
from maskct.data import DataError, DatasetManifest, decode_image, prepare_sample, resize
from maskct.labels import LabelState, all_masked, sample_mask
from maskct.metrics import MetricsReport, aggregate, binarize
from maskct.model import MaskCT, to_tensor

log = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    pass


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def bce_loss(logits: torch.Tensor, targets: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy over classes (and batch), computed from logits.

    ``softplus(x) - y * x`` is the stable form of
    ``-[y log sigmoid(x) + (1 - y) log(1 - sigmoid(x))]``. ``weight`` selects
    which entries count; the mean is taken over the selected ones.
    """
    if not torch.all((targets == 0) | (targets == 1)):
        raise ValueError("targets must be binary")
    targets = targets.to(logits.dtype)
    # softplus(x) = -logsigmoid(-x); F.softplus goes linear above 20 and loses ~1e-9 of gradient
    per = -F.logsigmoid(-logits) - targets * logits
    if weight is None:
        return per.mean()
    weight = weight.to(logits.dtype)
    return (per * weight).sum() / weight.sum().clamp_min(1.0)


class PlateauScheduler:
    """Multiply the lr by ``factor`` once ``patience`` epochs pass without a new best.

    Watches a metric to maximise; the lr never increases.
    """

    def __init__(self, optimizer: torch.optim.Optimizer, factor: float = 0.1, patience: int = 3, min_lr: float = 0.0):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = -math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; returns True when the lr was reduced."""
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return False
        for g in self.optimizer.param_groups:
            g["lr"] = max(g["lr"] * self.factor, self.min_lr)
        self.bad_epochs = 0
        return True

    def state_dict(self) -> dict[str, Any]:
        return {"best": self.best, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.best = state["best"]
        self.bad_epochs = state["bad_epochs"]


class Samples:
    """Images (arrays or paths) with their truth bits."""

    def __init__(self, images: Sequence[np.ndarray | str], truth: np.ndarray):
        if len(images) != len(truth):
            raise DataError("image and label counts differ")
        self.images = list(images)
        self.truth = np.asarray(truth, dtype=np.int64)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, preload: bool = True) -> "Samples":
        paths = [r.path for r in manifest.records]
        return cls([decode_image(p) for p in paths] if preload else paths, manifest.truth())

    def __len__(self) -> int:
        return len(self.images)

    def image(self, i: int) -> np.ndarray:
        img = self.images[i]
        return decode_image(img) if isinstance(img, str) else img


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def train_example(img: np.ndarray, cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    size = cfg.model.image_size
    a = cfg.augment
    out = prepare_sample(img, "train", size, rng, a.noise_sigma)
    if a.mask1:
        ranges = PhotometricRanges(a.beta_range, a.alpha_range, a.threshold)
        out = apply_mask1(out, a.fragments, MaskConfig(a.box, a.fill), rng, ranges)
        out = resize(out, size)
    return out


@dataclass
class Batch:
    ids: np.ndarray
    images: torch.Tensor
    truth: torch.Tensor
    states: torch.Tensor


def make_train_batch(samples: Samples, ids: Sequence[int], cfg: RunConfig, epoch: int) -> Batch:
    imgs, states = [], []
    for i in ids:
        rng = sample_rng(cfg.seed, epoch, int(i))
        imgs.append(train_example(samples.image(int(i)), cfg, rng))
        states.append(sample_mask(samples.truth[i], cfg.train.mask_ratio, rng).state)
    ids = np.asarray(ids)
    return Batch(ids, to_tensor(imgs), torch.as_tensor(samples.truth[ids]), torch.as_tensor(np.stack(states)))


def epoch_batches(samples: Samples, cfg: RunConfig, epoch: int) -> Iterator[Batch]:
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
    bs = cfg.train.batch_size
    for start in range(0, len(order), bs):
        yield make_train_batch(samples, order[start : start + bs], cfg, epoch)


def prefetch(items: Iterable, depth: int) -> Iterator:
    """Produce ``items`` on a worker thread through a queue of ``depth`` slots."""
    if depth <= 0:
        yield from items
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def work():
        try:
            for it in items:
                q.put(it)
        except BaseException as e:  # surfaced on the consumer side
            q.put(e)
        q.put(done)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    while True:
        it = q.get()
        if it is done:
            break
        if isinstance(it, BaseException):
            raise it
        yield it
    t.join()


def build_optimizer(model: MaskCT, cfg: RunConfig) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    t = cfg.train
    return torch.optim.Adam(params, lr=t.lr_init, betas=(t.adam_beta1, t.adam_beta2))


def train_step(model: MaskCT, optimizer: torch.optim.Optimizer, batch: Batch, loss_scope: str = "all") -> float:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    lr = optimizer.param_groups[0]["lr"]
    try:
        logits = model(batch.images, batch.states)
    except FloatingPointError as e:
        raise NumericalAbort(f"{e} on batch ids {batch.ids.tolist()} at lr {lr:g}") from e
    weight = (batch.states == LabelState.MASKED) if loss_scope == "masked" else None
    loss = bce_loss(logits, batch.truth, weight)
    if not torch.isfinite(loss):
        raise NumericalAbort(f"non-finite loss {loss.item()} on batch ids {batch.ids.tolist()} at lr {lr:g}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def predict_probs(
    model: MaskCT,
    samples: Samples,
    size: int,
    batch_size: int = 32,
    states: np.ndarray | None = None,
) -> np.ndarray:
    """Eval-mode probabilities; all labels Masked unless ``states`` pins some."""
    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        idx = range(start, min(start + batch_size, len(samples)))
        imgs = to_tensor([prepare_sample(samples.image(i), "eval", size) for i in idx])
        if states is None:
            st = torch.as_tensor(np.stack([all_masked(samples.truth[i]).state for i in idx]))
        else:
            st = torch.as_tensor(states[list(idx)])
        out.append(torch.sigmoid(model(imgs, st)).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.num_labels))


def evaluate(model: MaskCT, samples: Samples, cfg: RunConfig, vocab: Sequence[str] = ()) -> MetricsReport:
    probs = predict_probs(model, samples, cfg.model.image_size, cfg.train.batch_size)
    pred = binarize(probs, cfg.train.threshold)
    return aggregate(samples.truth, pred, cfg.train.threshold, vocab)


def build_model(cfg: RunConfig, num_labels: int) -> MaskCT:
    torch.manual_seed(cfg.seed)
    return MaskCT(cfg.model, num_labels, seed=cfg.seed)


def checkpoint_metadata(cfg: RunConfig, vocab: Sequence[str], epoch: int) -> dict[str, Any]:
    conf = cfg.to_dict()
    return {"config": conf, "config_hash": config_hash(conf), "vocab": list(vocab), "epoch": epoch}


def save_checkpoint(path: str | Path, model: MaskCT, cfg: RunConfig, vocab: Sequence[str], epoch: int) -> None:
    path = Path(path)
    meta = checkpoint_metadata(cfg, vocab, epoch)
    save_tensors(path, model.state_dict(), meta)
    atomic_write_bytes(path.with_suffix(".json"), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())


def load_checkpoint(path: str | Path) -> tuple[MaskCT, RunConfig, tuple[str, ...], dict[str, Any]]:
    tensors, meta = load_tensors(path)
    cfg = RunConfig.from_dict(meta["config"])
    cfg.model.pretrained = None
    vocab = tuple(meta["vocab"])
    model = MaskCT(cfg.model, len(vocab), seed=cfg.seed)
    model.load_state_dict(tensors)
    model.eval()
    return model, cfg, vocab, meta


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    best_metric: float = -math.inf
    scheduler: dict[str, Any] = field(default_factory=dict)


def save_train_state(path: str | Path, model: MaskCT, optimizer, scheduler: PlateauScheduler, state: TrainState) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    opt = optimizer.state_dict()
    for pid, st in opt["state"].items():
        for name, value in st.items():
            tensors[f"optim.{pid}.{name}"] = torch.as_tensor(value)
    tensors["rng.torch"] = torch.get_rng_state()
    meta = {
        "epoch": state.epoch,
        "lr": scheduler.lr,
        "best_metric": state.best_metric if math.isfinite(state.best_metric) else None,
        "scheduler": scheduler.state_dict() | {"best": scheduler.best if math.isfinite(scheduler.best) else None},
        "param_groups": opt["param_groups"],
    }
    save_tensors(path, tensors, {"train_state": meta})


def load_train_state(path: str | Path, model: MaskCT, optimizer, scheduler: PlateauScheduler) -> TrainState:
    tensors, meta = load_tensors(path)
    meta = meta["train_state"]
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    opt_state: dict[int, dict[str, torch.Tensor]] = {}
    for k, v in tensors.items():
        if k.startswith("optim."):
            _, pid, name = k.split(".", 2)
            opt_state.setdefault(int(pid), {})[name] = v
    optimizer.load_state_dict({"state": opt_state, "param_groups": meta["param_groups"]})
    torch.set_rng_state(tensors["rng.torch"])
    sched = dict(meta["scheduler"])
    sched["best"] = -math.inf if sched["best"] is None else sched["best"]
    scheduler.load_state_dict(sched)
    best = meta["best_metric"]
    return TrainState(meta["epoch"], meta["lr"], -math.inf if best is None else best, sched)


def train_loop(
    train: Samples,
    val: Samples,
    cfg: RunConfig,
    vocab: Sequence[str],
    out_dir: str | Path | None = None,
    model: MaskCT | None = None,
    resume: str | Path | None = None,
) -> tuple[MaskCT, list[dict[str, Any]]]:
    """Epoch loop with validation CF1, plateau decay and best-CF1 checkpointing.

    Writes ``best.safetensors`` (+ JSON config), ``last_state.safetensors`` for
    exact resume, and ``history.jsonl`` into ``out_dir`` when given.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("train and validation splits must be non-empty")
    set_determinism(cfg.seed)
    model = model or build_model(cfg, len(vocab))
    optimizer = build_optimizer(model, cfg)
    scheduler = PlateauScheduler(optimizer, cfg.train.plateau_factor, cfg.train.plateau_patience)
    state = TrainState(lr=cfg.train.lr_init)
    out = Path(out_dir) if out_dir else None
    history: list[dict[str, Any]] = []
    if resume is not None:
        state = load_train_state(resume, model, optimizer, scheduler)
        if out and (out / "history.jsonl").exists():
            history = [json.loads(ln) for ln in (out / "history.jsonl").read_text().splitlines() if ln]
            history = history[: state.epoch]

    if out and state.epoch == 0:
        save_checkpoint(out / "best.safetensors", model, cfg, vocab, 0)

    for epoch in range(state.epoch + 1, cfg.train.max_epochs + 1):
        losses = []
        for batch in prefetch(epoch_batches(train, cfg, epoch), cfg.train.prefetch):
            losses.append(train_step(model, optimizer, batch, cfg.train.loss_scope))
        report = evaluate(model, val, cfg, vocab)
        for name in ("CP", "CR", "CF1", "OP"):
            if not math.isfinite(getattr(report, name)):
                raise NumericalAbort(f"validation {name} is not finite at epoch {epoch}")
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "lr": scheduler.lr,
            **{k: getattr(report, k) for k in ("CP", "CR", "CF1", "OP", "OR", "OF1")},
        }
        history.append(row)
        log.info("epoch %d loss %.5f lr %g CF1 %.4f", epoch, row["loss"], row["lr"], report.CF1)
        if report.CF1 > state.best_metric:
            state.best_metric = report.CF1
            if out:
                save_checkpoint(out / "best.safetensors", model, cfg, vocab, epoch)
        scheduler.step(report.CF1)
        state.epoch = epoch
        if out:
            save_train_state(out / "last_state.safetensors", model, optimizer, scheduler, state)
            text = "".join(json.dumps(h) + "\n" for h in history)
            atomic_write_bytes(out / "history.jsonl", text.encode())
    if out and not (out / "history.jsonl").exists():
        atomic_write_bytes(out / "history.jsonl", b"")
    return model, history

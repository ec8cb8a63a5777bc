"""Four-step optimization schedule, fused-feature MLP training, and inference.

Step 1 He-initializes everything.  Step 2 trains the global extractor with its
classification heads.  Step 3 regresses the localizer onto centered
ground-truth boxes with the global extractor frozen.  Step 4 alternates between
training the local network on zoomed crops (localizer frozen) and fine-tuning
the localizer alone through the boxcar gradient (local network frozen).  The
fused-feature MLPs are trained last on frozen features.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint
from .data import PreparedSet, PreprocessConfig, Sample, prepare, sample_rng
from .losses import LossConfig, classification_loss, polarity_loss, smooth_l1, type_loss
from .model import CLASSIFIER_POOL_OUT, VarifocalModel, pool_to
from .numeric import ops
from .numeric.optim import Adam, step_decay_lr
from .numeric.tensor import NonFiniteError, Tensor, no_grad
from .zoom import (LOCALIZER_POOL_OUT, RelativeBox, box_to_pixels, crop_and_zoom, localization_backward,
                   map_gradient_to_image)

logger = logging.getLogger(__name__)

STAGES = ("init", "gnet", "localizer", "alternate", "ensemble")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs_gnet: int = 30
    epochs_localizer: int = 10
    epochs_lnet: int = 30
    epochs_localizer_ft: int = 1
    epochs_ensemble: int = 20
    alternation_rounds: int = 3
    plateau_tol: float = 1e-4
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    width_scale: float = 1.0
    seed: int = 0
    lam: float = 0.5
    reduction: str = "mean"
    augment: bool = True
    val_fraction: float = 0.1

    def __post_init__(self):
        for name in ("epochs_gnet", "epochs_localizer", "epochs_lnet", "epochs_localizer_ft", "epochs_ensemble"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("alternation_rounds", "batch_size", "lr", "lr_decay_every", "width_scale", "lam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lam, self.reduction)

    def lr_at(self, epoch: int) -> float:
        return step_decay_lr(self.lr, epoch, self.lr_decay, self.lr_decay_every)

    def optimizer(self, params) -> Adam:
        return Adam(list(params), lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)


@dataclass
class LossLog:
    """One row per training epoch; ``epoch`` counts across all phases."""

    rows: list = field(default_factory=list)

    def add(self, split: str, l_t=None, l_p=None, l_u=None) -> None:
        self.rows.append({"epoch": len(self.rows), "split": split, "L_t": l_t, "L_p": l_p, "L_u": l_u})
        logger.info("epoch %d %s L_t=%s L_p=%s L_u=%s", len(self.rows) - 1, split, l_t, l_p, l_u)

    @classmethod
    def read_csv(cls, path) -> "LossLog":
        log = cls()
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                log.rows.append({"epoch": int(row["epoch"]), "split": row["split"],
                                 **{k: (float(row[k]) if row[k] else None) for k in ("L_t", "L_p", "L_u")}})
        return log

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "split", "L_t", "L_p", "L_u"])
            w.writeheader()
            for row in self.rows:
                w.writerow({k: ("" if v is None else (f"{v:.8g}" if isinstance(v, float) else v)) for k, v in row.items()})


@dataclass
class TrainData:
    """Raw samples (re-augmented every epoch) plus their un-augmented preparation."""

    samples: list
    prepared: PreparedSet
    pre: PreprocessConfig

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], pre: PreprocessConfig, consts) -> "TrainData":
        return cls(list(samples), prepare(samples, pre, consts), pre)


# ---------------------------------------------------------------------------
# helpers


def _freeze_all_but(model: VarifocalModel, *groups: str) -> list:
    trainable = []
    for name, params in model.parameter_groups().items():
        for p in params:
            p.trainable = name in groups
        if name in groups:
            trainable += params
    return trainable


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _phase_rng(cfg: TrainConfig, phase: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, phase, epoch]))


def _guard(what: str, fn: Callable):
    try:
        return fn()
    except NonFiniteError as exc:
        raise TrainingDivergence(f"{what} diverged: {exc}") from exc


def global_pooled(model: VarifocalModel, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """Frozen global features pooled to the localizer grid (N×C×8×8)."""
    model.g_extractor.eval()
    out = []
    with no_grad():
        for s in range(0, len(images), batch):
            f = model.g_extractor(Tensor(images[s:s + batch]))
            out.append(pool_to(f, LOCALIZER_POOL_OUT).data)
    return np.concatenate(out) if out else np.zeros((0,))


def predict_boxes(model: VarifocalModel, g_pooled: np.ndarray, batch: int = 256) -> np.ndarray:
    with no_grad():
        return np.concatenate([model.localizer.head(Tensor(g_pooled[s:s + batch])).data
                               for s in range(0, len(g_pooled), batch)]).astype(np.float64)


def zoom_batch(model: VarifocalModel, images: np.ndarray, u: np.ndarray) -> np.ndarray:
    c = model.consts
    out = np.empty((len(images), 1, c.zoom_side, c.zoom_side), dtype=images.dtype)
    for i in range(len(images)):
        box = box_to_pixels(RelativeBox.from_array(np.clip(u[i], 0.0, 1.0)), c)
        out[i] = crop_and_zoom(images[i], box, c).data
    return out


def local_features(model: VarifocalModel, crops: np.ndarray, batch: int = 128) -> np.ndarray:
    model.l_extractor.eval()
    with no_grad():
        return np.concatenate([model.l_extractor(Tensor(crops[s:s + batch])).data
                               for s in range(0, len(crops), batch)])


def _flip_crops(crops: np.ndarray, pols: np.ndarray, rng: np.random.Generator):
    crops, pols = crops.copy(), pols.copy()
    h = rng.random(len(crops)) < 0.5
    v = rng.random(len(crops)) < 0.5
    crops[h] = crops[h][..., ::-1]
    crops[v] = crops[v][..., ::-1, :]
    pols[v] = 1 - pols[v]
    return crops, pols


def _cls_step(extractor, heads, x: np.ndarray, types, pols, cfg: TrainConfig, opt: Adam):
    feats = extractor(Tensor(x))
    tl, pl = heads(feats)
    total, lt, lp = classification_loss(tl, types, pl, pols, cfg.loss)
    opt.zero_grad()
    total.backward()
    opt.step()
    return lt.item(), lp.item()


# ---------------------------------------------------------------------------
# schedule


def step1_initialize(model: VarifocalModel, cfg: TrainConfig) -> VarifocalModel:
    return model.initialize(cfg.seed)


def step2_train_gnet(model: VarifocalModel, data: TrainData, cfg: TrainConfig, log: Optional[LossLog] = None):
    params = _freeze_all_but(model, "g_net")
    opt = cfg.optimizer(params)
    model.g_extractor.train()
    for epoch in range(cfg.epochs_gnet):
        opt.set_lr(cfg.lr_at(epoch))
        prep = (prepare(data.samples, data.pre, model.consts, augment_seed=cfg.seed, epoch=epoch)
                if cfg.augment else data.prepared)
        sums = np.zeros(2)
        for idx in _batches(len(prep), cfg.batch_size, _phase_rng(cfg, 2, epoch)):
            lt, lp = _guard(f"step 2 epoch {epoch}", lambda: _cls_step(
                model.g_extractor, model.g_heads, prep.images[idx], prep.types[idx], prep.polarities[idx], cfg, opt))
            sums += np.array([lt, lp]) * len(idx)
        sums /= max(len(prep), 1)
        if log is not None:
            log.add("gnet", float(sums[0]), float(sums[1]))
    return model


def step3_pretrain_localizer(model: VarifocalModel, data: TrainData, cfg: TrainConfig,
                             log: Optional[LossLog] = None, g_pooled: Optional[np.ndarray] = None):
    boxes = data.prepared.boxes
    if boxes is None or len(boxes) != len(data.prepared) or not np.isfinite(boxes).all():
        raise ValueError("ground-truth boxes missing for some samples")
    params = _freeze_all_but(model, "localizer")
    opt = cfg.optimizer(params)
    pooled = global_pooled(model, data.prepared.images) if g_pooled is None else g_pooled
    for epoch in range(cfg.epochs_localizer):
        opt.set_lr(cfg.lr_at(epoch))
        total = 0.0
        for idx in _batches(len(pooled), cfg.batch_size, _phase_rng(cfg, 3, epoch)):
            def run():
                u = model.localizer.head(Tensor(pooled[idx]))
                loss = smooth_l1(u, boxes[idx], reduction=cfg.reduction)
                opt.zero_grad()
                loss.backward()
                opt.step()
                return loss.item()
            total += _guard(f"step 3 epoch {epoch}", run) * len(idx)
        if log is not None:
            log.add("localizer", l_u=total / max(len(pooled), 1))
    return model


def lnet_validation_loss(model: VarifocalModel, val: PreparedSet, cfg: TrainConfig,
                         g_pooled: Optional[np.ndarray] = None) -> float:
    pooled = global_pooled(model, val.images) if g_pooled is None else g_pooled
    crops = zoom_batch(model, val.images, predict_boxes(model, pooled))
    feats = local_features(model, crops)
    with no_grad():
        tl, pl = model.l_heads(Tensor(feats))
        total, _, _ = classification_loss(tl, val.types, pl, val.polarities, LossConfig(cfg.lam, "mean"))
    return total.item()


def _finetune_localizer_batch(model, pooled, images, types, pols, cfg, opt) -> float:
    u = model.localizer.head(Tensor(pooled))
    c = model.consts
    boxes = [box_to_pixels(RelativeBox.from_array(np.clip(row, 0.0, 1.0)), c) for row in u.data]
    crops = Tensor(np.stack([crop_and_zoom(images[i], b, c).data for i, b in enumerate(boxes)]), requires_grad=True)
    tl, pl = model.l_heads(model.l_extractor(crops))
    total, _, _ = classification_loss(tl, types, pl, pols, cfg.loss)
    total.backward()
    du = np.stack([
        localization_backward(map_gradient_to_image(crops.grad[i], b, c), b, RelativeBox.from_array(np.clip(u.data[i], 0, 1)), c)
        for i, b in enumerate(boxes)
    ])
    opt.zero_grad()
    u.backward(du.astype(u.dtype))
    opt.step()
    return total.item()


def step4_alternate(model: VarifocalModel, data: TrainData, cfg: TrainConfig, val: Optional[PreparedSet] = None,
                    log: Optional[LossLog] = None, g_pooled: Optional[np.ndarray] = None) -> list[float]:
    """Alternate local-network training and localizer fine-tuning; returns validation losses per round."""
    prep = data.prepared
    pooled = global_pooled(model, prep.images) if g_pooled is None else g_pooled
    val = val if val is not None else prep
    val_pooled = global_pooled(model, val.images) if val is not prep else pooled
    # optimizers only keep parameters that are trainable when built
    opt_l = cfg.optimizer(_freeze_all_but(model, "l_net"))
    opt_loc = cfg.optimizer(_freeze_all_but(model, "localizer"))
    history: list[float] = []
    l_epoch = loc_epoch = 0
    for rnd in range(cfg.alternation_rounds):
        # (a) local network, localizer fixed
        _freeze_all_but(model, "l_net")
        crops = zoom_batch(model, prep.images, predict_boxes(model, pooled))
        model.l_extractor.train()
        for _ in range(cfg.epochs_lnet):
            opt_l.set_lr(cfg.lr_at(l_epoch))
            rng = _phase_rng(cfg, 40 + rnd, l_epoch)
            x, pols = _flip_crops(crops, prep.polarities, rng) if cfg.augment else (crops, prep.polarities)
            sums = np.zeros(2)
            for idx in _batches(len(prep), cfg.batch_size, rng):
                lt, lp = _guard(f"step 4a round {rnd}", lambda: _cls_step(
                    model.l_extractor, model.l_heads, x[idx], prep.types[idx], pols[idx], cfg, opt_l))
                sums += np.array([lt, lp]) * len(idx)
            sums /= len(prep)
            if log is not None:
                log.add("lnet", float(sums[0]), float(sums[1]))
            l_epoch += 1

        # (b) localizer alone, local network fixed
        _freeze_all_but(model, "localizer")
        model.l_extractor.eval()
        before = lnet_validation_loss(model, val, cfg, val_pooled) if cfg.epochs_localizer_ft else None
        saved = [p.data.copy() for p in model.localizer.parameters()]
        for _ in range(cfg.epochs_localizer_ft):
            opt_loc.set_lr(cfg.lr_at(loc_epoch))
            total = 0.0
            for idx in _batches(len(prep), cfg.batch_size, _phase_rng(cfg, 50 + rnd, loc_epoch)):
                total += _guard(f"step 4b round {rnd}", lambda: _finetune_localizer_batch(
                    model, pooled[idx], prep.images[idx], prep.types[idx], prep.polarities[idx], cfg, opt_loc)) * len(idx)
            if log is not None:
                log.add("localizer_ft", l_t=total / len(prep))
            loc_epoch += 1

        history.append(lnet_validation_loss(model, val, cfg, val_pooled))
        logger.info("alternation round %d validation loss %.6f", rnd, history[-1])
        if before is not None and history[-1] > before:
            # fine-tuning raised the loss it minimizes: keep the previous boxes and stop
            for p, a in zip(model.localizer.parameters(), saved):
                p.data[...] = a
            logger.info("localizer fine-tune raised validation loss %.6f -> %.6f; reverted", before, history[-1])
            history[-1] = before
            break
        if len(history) > 1 and history[-2] - history[-1] < cfg.plateau_tol:
            break
    return history


def fused_features(model: VarifocalModel, images: np.ndarray, g_pooled: Optional[np.ndarray] = None) -> np.ndarray:
    pooled = global_pooled(model, images) if g_pooled is None else g_pooled
    crops = zoom_batch(model, images, predict_boxes(model, pooled))
    lf = local_features(model, crops)
    with no_grad():
        return model.fused_features(Tensor(pooled), Tensor(lf)).data


def train_ensemble_mlps(model: VarifocalModel, data: TrainData, cfg: TrainConfig, log: Optional[LossLog] = None,
                        g_pooled: Optional[np.ndarray] = None):
    prep = data.prepared
    feats = fused_features(model, prep.images, g_pooled)
    if feats.shape[1] != model.ensemble_dim:
        raise ValueError(f"fused feature dimension {feats.shape[1]} != {model.ensemble_dim}")
    opt = cfg.optimizer(_freeze_all_but(model, "ensemble"))
    for epoch in range(cfg.epochs_ensemble):
        opt.set_lr(cfg.lr_at(epoch))
        sums = np.zeros(2)
        for idx in _batches(len(prep), cfg.batch_size, _phase_rng(cfg, 6, epoch)):
            def run():
                x = Tensor(feats[idx])
                lt = type_loss(model.type_mlp(x), prep.types[idx], cfg.reduction)
                lp = polarity_loss(model.polarity_mlp(x), prep.polarities[idx], cfg.reduction)
                opt.zero_grad()
                ops.add(lt, lp).backward()
                opt.step()
                return lt.item(), lp.item()
            lt, lp = _guard(f"ensemble epoch {epoch}", run)
            sums += np.array([lt, lp]) * len(idx)
        if log is not None:
            log.add("ensemble", float(sums[0] / len(prep)), float(sums[1] / len(prep)))
    return model


# ---------------------------------------------------------------------------
# inference


def _softmax(z: np.ndarray) -> np.ndarray:
    with no_grad():
        return ops.softmax(Tensor(z.astype(np.float64)), axis=-1).data


def predict_batch(model: VarifocalModel, images: np.ndarray, batch: int = 64) -> dict:
    """Probabilities from the fused classifiers plus each single-scale network."""
    model.eval()
    out = {k: [] for k in ("type_probs", "polarity_probs", "g_type_probs", "g_polarity_probs",
                           "l_type_probs", "l_polarity_probs", "boxes")}
    with no_grad():
        for s in range(0, len(images), batch):
            x = images[s:s + batch]
            gf = model.g_extractor(Tensor(x))
            pooled = pool_to(gf, LOCALIZER_POOL_OUT)
            u = model.localizer.head(pooled).data.astype(np.float64)
            crops = zoom_batch(model, x, u)
            lf = model.l_extractor(Tensor(crops))
            gt, gp = model.g_heads(gf)
            lt, lp = model.l_heads(lf)
            fused = model.fused_features(pooled, lf)
            out["type_probs"].append(_softmax(model.type_mlp(fused).data))
            out["polarity_probs"].append(_softmax(model.polarity_mlp(fused).data))
            out["g_type_probs"].append(_softmax(gt.data))
            out["g_polarity_probs"].append(_softmax(gp.data))
            out["l_type_probs"].append(_softmax(lt.data))
            out["l_polarity_probs"].append(_softmax(lp.data))
            out["boxes"].append(u)
    return {k: np.concatenate(v) for k, v in out.items()}


def predict(model: VarifocalModel, image: np.ndarray):
    """``(type_probs[24], polarity_probs[2], RelativeBox)`` for one normalized ``1×S×S`` image."""
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    res = predict_batch(model, img.reshape((1,) + img.shape[-3:]).astype(model.g_extractor.stem.weight.dtype))
    return res["type_probs"][0], res["polarity_probs"][0], RelativeBox.from_array(np.clip(res["boxes"][0], 0, 1))


# ---------------------------------------------------------------------------
# full run with checkpoints


def save_model(path, model: VarifocalModel, stage: int, extra: Optional[dict] = None) -> None:
    arrays = dict(model.meta())
    arrays["meta.stage"] = np.array([stage], dtype=np.int64)
    arrays.update({f"model.{k}": v for k, v in model.state_dict().items()})
    if extra:
        arrays.update(extra)
    checkpoint.save(path, arrays)


def load_model(path) -> tuple[VarifocalModel, int]:
    arrays = checkpoint.load(path)
    try:
        model = VarifocalModel.from_meta(arrays)
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"{path}: missing metadata {exc}") from exc
    model.load_state_dict({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    return model, int(arrays["meta.stage"][0])


def run_schedule(model: VarifocalModel, data: TrainData, cfg: TrainConfig, val: Optional[PreparedSet] = None,
                 out_dir=None, log: Optional[LossLog] = None, start_stage: int = 0) -> VarifocalModel:
    """Run stages ``start_stage..4`` (init, G-Net, localizer, alternation, ensemble),
    checkpointing after each when ``out_dir`` is given."""
    log = log if log is not None else LossLog()
    out = Path(out_dir) if out_dir is not None else None
    pooled = None

    def done(stage: int):
        if out is not None:
            save_model(out / f"stage{stage}_{STAGES[stage]}.vfn", model, stage)
            log.write_csv(out / "loss_log.csv")

    for stage in range(start_stage, len(STAGES)):
        logger.info("stage %d: %s", stage, STAGES[stage])
        if stage == 0:
            step1_initialize(model, cfg)
        elif stage == 1:
            step2_train_gnet(model, data, cfg, log)
        else:
            if pooled is None:
                pooled = global_pooled(model, data.prepared.images)
            if stage == 2:
                step3_pretrain_localizer(model, data, cfg, log, pooled)
            elif stage == 3:
                step4_alternate(model, data, cfg, val, log, pooled)
            else:
                train_ensemble_mlps(model, data, cfg, log, pooled)
        done(stage)
    for p in model.parameters():
        p.trainable = True
    model.eval()
    return model


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

"""Synthetic two-blob task, the assembled model, training and evaluation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .encoders import ImageEncoder, TextEncoder
from .fusion import AdditionFusion, ContextAwareFusion, CorrelationMap, GazeHead
from .gazegraph import GraphBuilder
from .matcher import Matcher, correspondence_loss
from .tensorcore import ParamStore, Tensor

logger = logging.getLogger(__name__)

PAD, BOS, EOS = 0, 1, 2
CLASS_TOKEN0 = 3
N_CLASSES = 4
PCK_THRESHOLDS = (0.2, 0.3, 0.4)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    seed: int = 7
    image_size: int = 128
    k: int = 8
    vocab: int = 16
    tokens: int = 4
    stage_channels: tuple[int, int, int, int] = (8, 16, 32, 32)
    c1: int = 64
    c2: int = 32
    c3: int = 16
    text_dim: int = 64
    fusion_width: int = 32
    model_dim: int = 64
    node_dim: int = 64
    heads: int = 4
    lr: float = 1e-3  # 1e-6 when fine-tuning pretrained encoders
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 12  # 30 does not fit the 15 CPU-minute budget on one core
    alpha: float = 1.0
    beta: float = 0.1
    sinkhorn_iters: int = 20
    fusion: str = "context"  # or "addition" (baseline)
    text_blind: bool = False
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16")
        if self.grid < 6:
            raise ValueError(f"gaze grid {self.grid} is smaller than the 6×6 crop")
        if self.fusion not in ("context", "addition"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels needs four entries")

    @property
    def grid(self) -> int:
        return self.image_size // 8

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # H×W in [0, 1]
    tokens: np.ndarray  # M ids
    gaze: np.ndarray  # K×2 normalized (x, y)
    valid: np.ndarray  # K bools
    meta: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    mse: float
    mae: float
    pck02: float
    pck03: float
    pck04: float
    n: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- synthetic data -------------------------------------------------------------
def blob_radius(cls: int) -> float:
    return 4.0 + 2.0 * cls


def query_tokens(cls: int) -> np.ndarray:
    return np.array([BOS, CLASS_TOKEN0 + cls, EOS, PAD], dtype=np.int64)


def render_blob(size: int, center, cls: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cx, cy = center[0] * size, center[1] * size
    r = blob_radius(cls)
    return 0.9 * np.exp(-((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) / (2.0 * r * r))


def synth_sample(rng: np.random.Generator, cfg: TrainConfig, margin: float = 0.1,
                 min_sep: float = 0.3, max_tries: int = 1000) -> Sample:
    """Two blobs of distinct classes; the query names one, gaze stars around it."""
    size = cfg.image_size
    classes = rng.choice(N_CLASSES, size=2, replace=False)
    for _ in range(max_tries):
        centers = rng.uniform(margin, 1.0 - margin, size=(2, 2))
        if np.linalg.norm(centers[0] - centers[1]) >= min_sep:
            break
    else:
        raise RuntimeError("could not place separated blob centers")
    target = int(rng.integers(2))
    image = rng.uniform(0.0, 0.1, size=(size, size))
    for c, cls in zip(centers, classes):
        image = image + render_blob(size, c, int(cls))
    image = np.clip(image, 0.0, 1.0)
    center = centers[target]
    gaze = np.empty((cfg.k, 2))
    gaze[0] = center
    gaze[1:] = np.clip(rng.normal(center, 0.04, size=(cfg.k - 1, 2)), 0.0, 1.0)
    cls = int(classes[target])
    return Sample(
        image=image,
        tokens=query_tokens(cls),
        gaze=gaze,
        valid=np.ones(cfg.k, dtype=bool),
        meta={
            "center": center.tolist(),
            "cls": cls,
            "other_center": centers[1 - target].tolist(),
            "other_cls": int(classes[1 - target]),
        },
    )


SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


def make_split(cfg: TrainConfig, split: str, n: int, seed: int | None = None) -> list[Sample]:
    """``n`` samples, each drawn from its own (seed, split, index) sub-stream."""
    seed = cfg.seed if seed is None else seed
    return [
        synth_sample(np.random.default_rng([seed, SPLIT_IDS[split], i]), cfg) for i in range(n)
    ]


def fit_gaze_count(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Resample with replacement up to k points or truncate beyond k."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise ValueError("sample has no gaze points")
    if len(points) >= k:
        return points[:k].copy()
    extra = rng.integers(len(points), size=k - len(points))
    return np.concatenate([points, points[extra]], axis=0)


def stack(samples: Sequence[Sample]):
    images = np.stack([s.image for s in samples])[:, None]
    tokens = np.stack([s.tokens for s in samples])
    gaze = np.stack([s.gaze for s in samples])
    valid = np.stack([s.valid for s in samples])
    return images, tokens, gaze, valid


# -- model ------------------------------------------------------------------------
class GEMModel:
    """Encoders, fusion, gaze head, graph builder and matcher over one ParamStore."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.params = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        self.image_encoder = ImageEncoder(self.params, rng, cfg.stage_channels, cfg.c1, cfg.c2, cfg.c3)
        self.text_encoder = TextEncoder(self.params, rng, cfg.vocab, cfg.text_dim)
        if cfg.fusion == "context":
            self.fusion = ContextAwareFusion(
                self.params, rng, cfg.c1, cfg.c2, cfg.c3, cfg.text_dim,
                cfg.fusion_width, cfg.model_dim, cfg.heads,
            )
        else:
            self.fusion = AdditionFusion(self.params, rng, cfg.c1, cfg.text_dim, cfg.fusion_width, cfg.model_dim)
        self.head = GazeHead(self.params, rng, cfg.grid * cfg.grid, cfg.model_dim, cfg.k)
        self.graphs = GraphBuilder(self.params, rng, cfg.model_dim, cfg.node_dim, cfg.heads)
        self.matcher = Matcher(self.params, self.graphs, cfg.node_dim, cfg.sinkhorn_iters)

    def correlation_map(self, images, tokens) -> CorrelationMap:
        images = tc.as_tensor(images)
        pyramid = self.image_encoder(images)
        text = self.text_encoder(tokens)
        if self.cfg.text_blind:
            text.global_ = tc.Tensor(np.zeros(text.global_.shape))
            text.local = tc.Tensor(np.zeros(text.local.shape))
        return self.fusion(pyramid, text)

    def forward(self, images, tokens) -> tuple[CorrelationMap, Tensor]:
        hmap = self.correlation_map(images, tokens)
        return hmap, self.head(hmap).points

    def predict(self, images, tokens) -> np.ndarray:
        with tc.no_grad():
            return self.forward(images, tokens)[1].data.copy()

    def correspondence(self, hmap: CorrelationMap, gt: np.ndarray, pred: np.ndarray, valid: np.ndarray):
        """Soft correspondence between GT and predicted graphs, one per sample.

        Samples with all points valid are matched as one batch; others are
        matched on their valid subset.
        """
        if valid.all():
            g_t = self.graphs.build(hmap, gt)
            g_s = self.graphs.build(hmap, pred)
            return [self.matcher(g_t, g_s)]
        out = []
        for b in range(len(gt)):
            sel = valid[b]
            sub = CorrelationMap(tokens=hmap.tokens[b : b + 1], grid=hmap.grid)
            g_t = self.graphs.build(sub, gt[b : b + 1, sel])
            g_s = self.graphs.build(sub, pred[b : b + 1, sel])
            out.append(self.matcher(g_t, g_s))
        return out

    def loss(self, images, tokens, gaze, valid, alpha=None, beta=None):
        alpha = self.cfg.alpha if alpha is None else alpha
        beta = self.cfg.beta if beta is None else beta
        hmap, pred = self.forward(images, tokens)
        corr = None
        # non-finite points have no crop cell; the NaN MSE is reported by the caller
        if beta > 0 and np.isfinite(pred.data).all():
            corr = self.correspondence(hmap, gaze, pred.data, valid)
        total, parts = total_loss(pred, gaze, valid, corr, alpha, beta)
        return total, parts


def masked_mse(pred: Tensor, gt: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean over valid points of the per-point mean squared coordinate error."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid gaze points")
    w = valid[..., None].astype(np.float64) / (2.0 * n)
    return tc.sum_(tc.square(pred - gt) * w)


def total_loss(pred: Tensor, gt: np.ndarray, valid: np.ndarray, corr, alpha: float = 1.0, beta: float = 0.1):
    """alpha * MSE + beta * correspondence CE; returns (loss, {"mse", "ce"})."""
    mse = masked_mse(pred, gt, valid)
    loss = mse * alpha
    parts = {"mse": mse.item(), "ce": float("nan")}
    if corr is not None and beta > 0:
        if isinstance(corr, Tensor):
            corr = [corr]
        ces = [correspondence_loss(c) for c in corr]
        ce = ces[0] if len(ces) == 1 else tc.mean(tc.concat([c.reshape(1) for c in ces]))
        loss = loss + ce * beta
        parts["ce"] = ce.item()
    return loss, parts


# -- optimisation -----------------------------------------------------------------
class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update


def train_epoch(model: GEMModel, opt: AdamW, dataset: Sequence[Sample], epoch: int = 0) -> list[dict]:
    """One shuffled pass; returns per-batch {"loss", "mse", "ce"} in order."""
    if not dataset:
        raise ValueError("empty training set")
    cfg = model.cfg
    order = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(len(dataset))
    trace = []
    for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
        batch = [dataset[i] for i in order[lo : lo + cfg.batch_size]]
        images, tokens, gaze, valid = stack(batch)
        model.params.zero_grad()
        loss, parts = model.loss(images, tokens, gaze, valid)
        if not np.isfinite(loss.data):
            raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {bi}")
        loss.backward()
        opt.step()
        trace.append({"loss": loss.item(), **parts})
    return trace


# -- metrics ----------------------------------------------------------------------
def gaze_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None,
                 thresholds: Sequence[float] = PCK_THRESHOLDS) -> MetricsReport:
    """Index-paired MSE / MAE over coordinates and PCK (percent, inclusive) over valid points."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.ones(gt.shape[:-1], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    diff = (pred - gt)[valid]
    if diff.size == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, 0.0, 0)
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    pck = [100.0 * float(np.mean(dist <= t)) for t in thresholds]
    return MetricsReport(
        mse=float(np.mean(diff ** 2)),
        mae=float(np.mean(np.abs(diff))),
        pck02=pck[0],
        pck03=pck[1],
        pck04=pck[2],
        n=int(gt.shape[0]),
    )


def predict_dataset(model: GEMModel, dataset: Sequence[Sample], batch_size: int = 50) -> np.ndarray:
    out = []
    for lo in range(0, len(dataset), batch_size):
        images, tokens, _, _ = stack(dataset[lo : lo + batch_size])
        out.append(model.predict(images, tokens))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.k, 2))


def evaluate(model: GEMModel, dataset: Sequence[Sample],
             thresholds: Sequence[float] = PCK_THRESHOLDS) -> MetricsReport:
    pred = predict_dataset(model, dataset)
    gt = np.stack([s.gaze for s in dataset])
    valid = np.stack([s.valid for s in dataset])
    return gaze_metrics(pred, gt, valid, thresholds)


def fit(
    model: GEMModel,
    train: Sequence[Sample],
    val: Sequence[Sample],
    on_epoch: Callable[[dict], None] | None = None,
):
    """Train for ``cfg.epochs``; returns (best state by val PCK@0.2, epoch records)."""
    cfg = model.cfg
    opt = AdamW(model.params, cfg.lr, weight_decay=cfg.weight_decay)
    best_state, best_pck = model.params.state(), -1.0
    records = []
    for epoch in range(cfg.epochs):
        trace = train_epoch(model, opt, train, epoch)
        report = evaluate(model, val) if val else None
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean([t["loss"] for t in trace])),
            "train_mse": float(np.mean([t["mse"] for t in trace])),
            "train_ce": float(np.mean([t["ce"] for t in trace])) if cfg.beta > 0 else None,
        }
        if report is not None:
            rec.update({k: v for k, v in report.to_dict().items() if k != "n"})
            if report.pck02 > best_pck:
                best_pck, best_state = report.pck02, model.params.state()
        records.append(rec)
        logger.info("epoch %d: %s", epoch, rec)
        if on_epoch is not None:
            on_epoch(rec)
    if not val:
        best_state = model.params.state()
    return best_state, records

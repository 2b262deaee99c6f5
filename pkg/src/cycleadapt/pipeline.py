"""Four-stage adaptation pipeline with cyclic refinement.

Stage 1 trains the image model on labeled source images with adversarial
feature alignment against unlabeled target frames. Stage 2 pseudo-labels
target videos through the image model and trains the video model on the
survivors. Stage 3 transfers category knowledge back: video-model pseudo
labels are disseminated onto frames and the image model is retrained with
one of four strategies (default: source classification plus cross-domain
contrastive alignment). Stage 4 repeats stage 2 with the refined labels at
a higher keep-ratio. Stages 3 and 4 iterate.

Every random choice is drawn from an independent stream keyed by
(seed, purpose, epoch, video id, ...), so results are bitwise reproducible
for a fixed (config, data, seed) and insensitive to dataset ordering.

The mixed-source variant runs through the same code path: labeled source
videos contribute sampled frames to stages 1 and 3 and a supervised loss
to stages 2 and 4. The plain setting is exactly the empty source-video
set, so the variants coincide structurally at fraction zero.

Target train labels never enter any training decision here; they are read
only through the metrics probe when one is supplied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .losses import (LossValue, add_loss, beta_schedule, ce_loss,
                     contrastive_loss, stage1_objective, stage3_objective)
from .models import (ModelDims, image_forward, init_image_model,
                     init_video_model, video_forward)
from .pseudolabel import (AGGREGATION_STRATEGIES, THRESH_THEN_AVG,
                          VideoPseudoLabels, aggregate, compute_threshold,
                          disseminate, predict_frames, predict_videos)
from .synthdata import SyntheticDataset, VideoSet, midpoint_frames, sample_frames
from .utils import rng_for

TARGET_CE_ONLY = "target_ce_only"
SOURCE_TARGET_CE = "source_target_ce"
SOURCE_TARGET_CE_ADD = "source_target_ce_add"
SOURCE_CE_CONTRASTIVE = "source_ce_contrastive"
STAGE3_STRATEGIES = (TARGET_CE_ONLY, SOURCE_TARGET_CE,
                     SOURCE_TARGET_CE_ADD, SOURCE_CE_CONTRASTIVE)
# ablation-table letters for the stage-3 strategy comparison
STAGE3_STRATEGY_LETTERS = {"A": TARGET_CE_ONLY, "B": SOURCE_TARGET_CE,
                           "C": SOURCE_TARGET_CE_ADD, "D": SOURCE_CE_CONTRASTIVE}

ABLATION_CASES = ("A", "B", "C", "D", "E", "F")


@dataclass
class StageConfig:
    epochs_stage1: int = 90
    epochs_stage2: int = 60
    epochs_stage3: int = 20
    epochs_stage4: int = 60
    batch_size: int = 32
    lr_image: float = 0.01
    # stage 3 fine-tunes an already-aligned encoder; at the stage-1 rate
    # the class-aware retraining walks it off the alignment optimum and
    # the stage-4 labels come out worse than the stage-2 ones
    lr_image_stage3: float = 0.003
    # with momentum 0.9 the video model diverges intermittently above
    # ~0.05: loss collapses to the uniform plateau and never recovers
    lr_video: float = 0.03
    lr_heads: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-3
    p2: float = 0.7
    p3: float = 0.8
    p4: float = 0.8
    tau: float = 0.05
    aggregation: str = THRESH_THEN_AVG
    stage3_strategy: str = SOURCE_CE_CONTRASTIVE
    hidden_width: int = 32
    feat_width: int = 16
    stage4_finetune: bool = False
    stage3_reset_head: bool = True
    # True: each cycle iteration keeps refining the current image model
    # (and, when fine-tuning, the current video model). False: stages 3
    # and 4 restart from the stage-1/stage-2 models every iteration.
    cycle_reuse_models: bool = True
    # fraction of final stage-1 epochs whose end-of-epoch weights are averaged
    # into the returned model; the adversarial game orbits rather than
    # converging, so the last iterate is a lottery while the orbit center is
    # stable. 0 disables averaging.
    stage1_tail_avg: float = 0.25
    # same tail averaging for stage 3; its labels feed stage 4, so
    # end-of-training jitter there costs whole videos at the threshold
    stage3_tail_avg: float = 0.25
    # minimum image-model top1-top2 probability margin for a disseminated
    # frame label to join stage-3 training; 0 disables the gate
    s3_frame_gate: float = 0.5

    def validate(self) -> None:
        for name in ("epochs_stage1", "epochs_stage2", "epochs_stage3",
                     "epochs_stage4", "batch_size", "hidden_width", "feat_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr_image", "lr_video", "lr_heads", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("p2", "p3", "p4"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in (0,1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0,1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.stage1_tail_avg < 1.0:
            raise ValueError("stage1_tail_avg must be in [0,1)")
        if not 0.0 <= self.stage3_tail_avg < 1.0:
            raise ValueError("stage3_tail_avg must be in [0,1)")
        if not 0.0 <= self.s3_frame_gate < 1.0:
            raise ValueError("s3_frame_gate must be in [0,1)")
        if self.aggregation not in AGGREGATION_STRATEGIES:
            raise ValueError(f"unknown aggregation strategy: {self.aggregation!r}")
        if self.stage3_strategy not in STAGE3_STRATEGIES:
            raise ValueError(f"unknown stage-3 strategy: {self.stage3_strategy!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown stage config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class AdaptationData:
    """Everything a run may train on. Target train labels are absent."""

    num_classes: int
    source_images_x: np.ndarray   # (n_img, d)
    source_images_y: np.ndarray   # (n_img,)
    source_videos: VideoSet       # labeled source clips; may be empty
    source_video_labels: np.ndarray
    target_train: VideoSet

    @property
    def d_in(self) -> int:
        return self.source_images_x.shape[1]

    @property
    def frames_per_video(self) -> int:
        return self.target_train.clips.shape[1]

    @property
    def n_segments_default(self) -> int:
        return 5


@dataclass
class MetricsProbe:
    """Metrics-only channel: hidden train labels plus the labeled test split."""

    train_labels_of: Callable[[np.ndarray], np.ndarray]
    test_videos: VideoSet
    test_labels: np.ndarray


def make_adaptation_data(ds: SyntheticDataset,
                         source_video_fraction: float = 0.0) -> AdaptationData:
    """Bundle a dataset for training; keep the first ceil(f*n) labeled
    source videos per class (ascending id) so fractions nest monotonically."""
    if not 0.0 <= source_video_fraction <= 1.0:
        raise ValueError("source_video_fraction must be in [0,1]")
    clips = ds.source_videos.clips
    vids = ds.source_videos.video_ids
    labels = ds.source_video_labels
    keep_rows: list[int] = []
    if source_video_fraction > 0.0 and len(vids) > 0:
        for c in np.unique(labels):
            rows = np.flatnonzero(labels == c)
            rows = rows[np.argsort(vids[rows])]
            k = math.ceil(source_video_fraction * rows.shape[0])
            keep_rows.extend(rows[:k].tolist())
    keep_rows.sort()
    sel = np.asarray(keep_rows, dtype=np.int64)
    return AdaptationData(
        num_classes=ds.spec.num_classes,
        source_images_x=ds.source_images.features,
        source_images_y=ds.source_images.labels,
        source_videos=VideoSet(clips[sel], vids[sel]),
        source_video_labels=labels[sel],
        target_train=ds.train_videos,
    )


def make_probe(ds: SyntheticDataset) -> MetricsProbe:
    return MetricsProbe(train_labels_of=ds.metrics_train_labels,
                        test_videos=ds.test_videos,
                        test_labels=ds.test_labels)


def model_dims(cfg: StageConfig, data: AdaptationData) -> ModelDims:
    return ModelDims(d_in=data.d_in, hidden=cfg.hidden_width,
                     feat=cfg.feat_width, num_classes=data.num_classes)


# ----------------------------------------------------------------- optimizer


class SGD:
    """SGD with momentum, L2 weight decay, and per-parameter learning rates.

    Weight decay keeps the adversarial stage inside the responsive region
    of the sigmoids: without it the encoder/discriminator race inflates
    feature norms until every unit saturates and the game freezes.
    """

    def __init__(self, params: dict[str, Tensor], lr_for: Callable[[str], float],
                 momentum: float, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr = {name: lr_for(name) for name in params}
        self.vel = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self.vel[name]
            v *= self.momentum
            v += g
            t.data -= self.lr[name] * v


def _image_lr(cfg: StageConfig, encoder_lr: float | None = None) -> Callable[[str], float]:
    enc_lr = cfg.lr_image if encoder_lr is None else encoder_lr
    return lambda name: enc_lr if name.startswith("enc") else cfg.lr_heads


def _video_lr(cfg: StageConfig) -> Callable[[str], float]:
    return lambda name: cfg.lr_video


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(t.data.copy()) for k, t in params.items()}


# ------------------------------------------------------------------ sampling


def _epoch_frame_indices(video_ids: np.ndarray, n_frames: int, n_segments: int,
                         seed: int, *key) -> np.ndarray:
    """(N, n_segments) indices; stream keyed per video id so dataset order
    cannot perturb the draw."""
    out = np.empty((video_ids.shape[0], n_segments), dtype=np.int64)
    for i, vid in enumerate(video_ids.tolist()):
        out[i] = sample_frames(n_frames, n_segments,
                               rng_for(seed, *key, int(vid)))
    return out


def _gather_frames(clips: np.ndarray, frame_idx: np.ndarray) -> np.ndarray:
    n = clips.shape[0]
    return clips[np.arange(n)[:, None], frame_idx]


def _wrap_take(order: np.ndarray, start: int, count: int) -> np.ndarray:
    idx = (np.arange(count) + start) % order.shape[0]
    return order[idx]


# ------------------------------------------------------------------- metrics


def _mean_part(parts_list: list[dict], key: str) -> float:
    vals = [p[key] for p in parts_list if key in p]
    return float(np.mean(vals)) if vals else 0.0


def _frame_majority_labels(image_params, videos: VideoSet, n_segments: int) -> VideoPseudoLabels:
    T = videos.clips.shape[1]
    idx = np.tile(midpoint_frames(T, n_segments), (len(videos), 1))
    preds = predict_frames(image_params, videos.clips, videos.video_ids, idx)
    return aggregate(preds, -np.inf, THRESH_THEN_AVG)


def image_majority_accuracy(image_params, videos: VideoSet, labels: np.ndarray,
                            n_segments: int = 5) -> float:
    """Frame-majority video accuracy of the image model (all frames kept)."""
    agg = _frame_majority_labels(image_params, videos, n_segments)
    pos = {int(v): i for i, v in enumerate(videos.video_ids)}
    truth = np.asarray([labels[pos[int(v)]] for v in agg.video_ids])
    return float(np.mean(agg.class_ids == truth))


def image_frame_accuracy(image_params, videos: VideoSet, labels: np.ndarray,
                         n_segments: int = 5) -> float:
    """Per-frame accuracy of the image model on midpoint-sampled frames."""
    T = videos.clips.shape[1]
    idx = np.tile(midpoint_frames(T, n_segments), (len(videos), 1))
    preds = predict_frames(image_params, videos.clips, videos.video_ids, idx)
    truth = np.repeat(np.asarray(labels), idx.shape[1])
    return float(np.mean(preds.class_ids == truth))


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray  # rows: true class, cols: predicted
    n_videos: int


def video_predictions(video_params, videos: VideoSet, n_segments: int = 5) -> np.ndarray:
    T = videos.clips.shape[1]
    idx = np.tile(midpoint_frames(T, n_segments), (len(videos), 1))
    out = video_forward(video_params, _gather_frames(videos.clips, idx))
    return out.class_probs.data.argmax(axis=1)


def evaluate(video_params, test_videos: VideoSet, test_labels: np.ndarray,
             n_segments: int = 5) -> EvalReport:
    """Top-1 accuracy plus per-class breakdown and a confusion matrix."""
    if len(test_videos) == 0:
        raise ValueError("empty test set")
    pred = video_predictions(video_params, test_videos, n_segments)
    truth = np.asarray(test_labels, dtype=np.int64)
    k = max(int(truth.max()), int(pred.max())) + 1
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    row_tot = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), row_tot,
                          out=np.zeros(k), where=row_tot > 0)
    return EvalReport(accuracy=float(np.mean(pred == truth)),
                      per_class_accuracy=per_class,
                      confusion=confusion,
                      n_videos=len(test_videos))


def _pseudo_accuracy(labels: VideoPseudoLabels, probe: MetricsProbe | None) -> float | None:
    if probe is None or len(labels) == 0:
        return None
    truth = probe.train_labels_of(labels.video_ids)
    return float(np.mean(labels.class_ids == truth))


# ------------------------------------------------------------------- stage 1


def run_stage1(cfg: StageConfig, data: AdaptationData, seed: int,
               adversarial: bool = True, records: list | None = None,
               probe: MetricsProbe | None = None) -> dict[str, Tensor]:
    """Train the image model on source labels, optionally with adversarial
    alignment against per-epoch-resampled target frames."""
    cfg.validate()
    if data.source_images_x.shape[0] == 0:
        raise ValueError("stage 1 requires source images")
    if len(data.target_train) == 0:
        raise ValueError("stage 1 requires target videos")
    dims = model_dims(cfg, data)
    params = init_image_model(dims, (seed, "s1"))
    opt = SGD(params, _image_lr(cfg), cfg.momentum, cfg.weight_decay)
    T = data.frames_per_video
    nseg = data.n_segments_default
    has_src_vid = len(data.source_videos) > 0

    n_epochs = cfg.epochs_stage1
    steps_done = 0
    # total steps must be known up front for the adversarial-weight ramp
    n_source = data.source_images_x.shape[0] + len(data.source_videos) * nseg
    steps_per_epoch = max(1, math.ceil(n_source / cfg.batch_size))
    total_steps = n_epochs * steps_per_epoch
    n_tail = max(1, round(cfg.stage1_tail_avg * n_epochs)) \
        if cfg.stage1_tail_avg > 0.0 else 0
    tail_sum: dict[str, np.ndarray] = {}
    for epoch in range(n_epochs):
        src_x, src_y = data.source_images_x, data.source_images_y
        if has_src_vid:
            fs_idx = _epoch_frame_indices(data.source_videos.video_ids, T, nseg,
                                          seed, "s1-srcvid-frames", epoch)
            fs = _gather_frames(data.source_videos.clips, fs_idx)
            src_x = np.concatenate([src_x, fs.reshape(-1, data.d_in)])
            src_y = np.concatenate([src_y, np.repeat(data.source_video_labels, nseg)])
        tgt_idx = _epoch_frame_indices(data.target_train.video_ids, T, nseg,
                                       seed, "s1-tgt-frames", epoch)
        tgt_pool = _gather_frames(data.target_train.clips, tgt_idx).reshape(-1, data.d_in)

        order = rng_for(seed, "s1-order", epoch).permutation(src_x.shape[0])
        tgt_order = rng_for(seed, "s1-tgt-order", epoch).permutation(tgt_pool.shape[0])
        parts_list = []
        for step in range(steps_per_epoch):
            rows = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            if rows.shape[0] == 0:
                continue
            bx, by = src_x[rows], src_y[rows]
            src_out = image_forward(params, bx)
            ce = ce_loss(src_out.class_probs, by)
            if adversarial:
                progress = steps_done / max(1, total_steps - 1)
                beta = beta_schedule(min(1.0, progress))
                trows = _wrap_take(tgt_order, step * cfg.batch_size, rows.shape[0])
                tgt_out = image_forward(params, tgt_pool[trows])
                obj = stage1_objective(ce, add_loss(src_out.domain_probs,
                                                    tgt_out.domain_probs), beta)
            else:
                obj = LossValue(ce.total, None,
                                {**ce.parts, "add": 0.0, "beta": 0.0,
                                 "total": ce.scalar})
            opt.zero_grads()
            obj.total.backward()
            opt.step()
            steps_done += 1
            parts_list.append(obj.parts)
        if n_tail and epoch >= n_epochs - n_tail:
            for name, t in params.items():
                if name in tail_sum:
                    tail_sum[name] += t.data
                else:
                    tail_sum[name] = t.data.copy()
        if records is not None:
            rec = {"record": "epoch", "stage": 1, "iteration": 0, "epoch": epoch,
                   "loss_total": _mean_part(parts_list, "total"),
                   "loss_ce": _mean_part(parts_list, "ce"),
                   "loss_add": _mean_part(parts_list, "add"),
                   "beta": _mean_part(parts_list, "beta"),
                   "n_steps": len(parts_list)}
            records.append(rec)
    if n_tail:
        for name, t in params.items():
            t.data = tail_sum[name] / n_tail
    return params


# -------------------------------------------------------------- stages 2 & 4


def _train_video_model(cfg: StageConfig, data: AdaptationData,
                       labels: VideoPseudoLabels, seed: int, tag: str,
                       epochs: int, init_params: dict[str, Tensor] | None,
                       records: list | None, stage_no: int, iteration: int) -> dict[str, Tensor]:
    """Shared trainer behind stages 2 and 4 and video self-training."""
    dims = model_dims(cfg, data)
    params = clone_params(init_params) if init_params is not None \
        else init_video_model(dims, (seed, tag))
    opt = SGD(params, _video_lr(cfg), cfg.momentum, cfg.weight_decay)
    T = data.frames_per_video
    nseg = data.n_segments_default

    has_tgt = len(labels) > 0
    has_src = len(data.source_videos) > 0
    if not has_tgt and not has_src:
        raise RuntimeError("no pseudo-labeled target videos and no labeled "
                           "source videos: nothing to train on")
    row_of = {int(v): i for i, v in enumerate(data.target_train.video_ids)}
    tgt_rows = np.asarray([row_of[int(v)] for v in labels.video_ids], dtype=np.int64)
    tgt_y = labels.class_ids

    n_driver = len(labels) if has_tgt else len(data.source_videos)
    steps_per_epoch = max(1, math.ceil(n_driver / cfg.batch_size))
    for epoch in range(epochs):
        parts_list = []
        if has_tgt:
            t_idx = _epoch_frame_indices(labels.video_ids, T, nseg,
                                         seed, tag, "tgt-frames", epoch)
            t_order = rng_for(seed, tag, "tgt-order", epoch).permutation(len(labels))
        if has_src:
            s_idx = _epoch_frame_indices(data.source_videos.video_ids, T, nseg,
                                         seed, tag, "src-frames", epoch)
            s_order = rng_for(seed, tag, "src-order", epoch).permutation(
                len(data.source_videos))
        for step in range(steps_per_epoch):
            loss_terms = []
            parts: dict = {}
            if has_tgt:
                rows = t_order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                if rows.shape[0] > 0:
                    clips = _gather_frames(
                        data.target_train.clips[tgt_rows[rows]], t_idx[rows])
                    out = video_forward(params, clips)
                    ce_t = ce_loss(out.class_probs, tgt_y[rows])
                    loss_terms.append(ce_t.total)
                    parts["ce_target"] = ce_t.scalar
            if has_src:
                n_take = min(cfg.batch_size, len(data.source_videos))
                srows = _wrap_take(s_order, step * n_take, n_take)
                clips = _gather_frames(
                    data.source_videos.clips[srows], s_idx[srows])
                out = video_forward(params, clips)
                ce_s = ce_loss(out.class_probs, data.source_video_labels[srows])
                loss_terms.append(ce_s.total)
                parts["ce_source"] = ce_s.scalar
            if not loss_terms:
                continue
            total = loss_terms[0]
            for t in loss_terms[1:]:
                total = total + t
            parts["total"] = total.item()
            opt.zero_grads()
            total.backward()
            opt.step()
            parts_list.append(parts)
        if records is not None:
            records.append({"record": "epoch", "stage": stage_no,
                            "iteration": iteration, "epoch": epoch,
                            "loss_total": _mean_part(parts_list, "total"),
                            "loss_ce_target": _mean_part(parts_list, "ce_target"),
                            "loss_ce_source": _mean_part(parts_list, "ce_source"),
                            "n_steps": len(parts_list)})
    return params


def _image_pseudo_labels(cfg: StageConfig, data: AdaptationData, image_params,
                         p: float, seed: int) -> tuple[VideoPseudoLabels, float]:
    """Frame predictions -> keep-ratio threshold -> temporal aggregation."""
    T = data.frames_per_video
    nseg = data.n_segments_default
    # one fixed frame sample per (seed, video) shared by every labeling
    # pass: labels then change only when a model changes, so successive
    # cycle iterations refine labels instead of re-rolling them
    idx = _epoch_frame_indices(data.target_train.video_ids, T, nseg,
                               seed, "pl-frames")
    preds = predict_frames(image_params, data.target_train.clips,
                           data.target_train.video_ids, idx)
    delta = compute_threshold(preds, p)
    labels = aggregate(preds, delta, cfg.aggregation, keep_ratio=p)
    return labels, delta


def run_stage2(image_params, cfg: StageConfig, data: AdaptationData, seed: int,
               records: list | None = None, probe: MetricsProbe | None = None,
               stage_no: int = 2, iteration: int = 0, p: float | None = None,
               init_video: dict[str, Tensor] | None = None,
               ) -> tuple[dict[str, Tensor], VideoPseudoLabels]:
    """Pseudo-label target videos with the image model, then train the
    video model. Stage 4 is this same routine at keep-ratio p4."""
    cfg.validate()
    keep = cfg.p2 if p is None else p
    tag = f"s{stage_no}-it{iteration}"
    labels, delta = _image_pseudo_labels(cfg, data, image_params, keep, seed)
    if len(labels) == 0 and len(data.source_videos) == 0:
        raise RuntimeError("every target video was filtered out and there are "
                           "no labeled source videos")
    epochs = cfg.epochs_stage2 if stage_no == 2 else cfg.epochs_stage4
    params = _train_video_model(cfg, data, labels, seed, tag, epochs,
                                init_video, records, stage_no, iteration)
    if records is not None:
        rec = {"record": "stage", "stage": stage_no, "iteration": iteration,
               "pseudo_count": int(len(labels)), "delta": float(delta),
               "pseudo_acc": _pseudo_accuracy(labels, probe)}
        if probe is not None:
            rec["test_acc"] = evaluate(params, probe.test_videos,
                                       probe.test_labels).accuracy
        records.append(rec)
    return params, labels


def run_stage4(image_params, cfg: StageConfig, data: AdaptationData, seed: int,
               iteration: int = 1, records: list | None = None,
               probe: MetricsProbe | None = None,
               prev_video: dict[str, Tensor] | None = None,
               ) -> tuple[dict[str, Tensor], VideoPseudoLabels]:
    init = prev_video if cfg.stage4_finetune else None
    return run_stage2(image_params, cfg, data, seed, records=records,
                      probe=probe, stage_no=4, iteration=iteration,
                      p=cfg.p4, init_video=init)


# ------------------------------------------------------------------- stage 3


def _source_class_index(y: np.ndarray, num_classes: int) -> list[np.ndarray]:
    return [np.flatnonzero(y == c) for c in range(num_classes)]


def run_stage3(image_params, video_params, cfg: StageConfig,
               data: AdaptationData, seed: int, iteration: int = 1,
               records: list | None = None, probe: MetricsProbe | None = None,
               contrastive_probe: tuple | None = None,
               ) -> tuple[dict[str, Tensor], list[float]]:
    """Class-aware retraining of the image model under the configured
    strategy, supervised by video-model pseudo labels disseminated onto
    per-epoch-resampled target frames.

    Returns the new image parameters and, when contrastive_probe is given
    as (anchors, positives, negatives) arrays, the probe contrastive value
    after every optimizer step of the first epoch.
    """
    cfg.validate()
    dims = model_dims(cfg, data)
    T = data.frames_per_video
    nseg = data.n_segments_default
    strategy = cfg.stage3_strategy

    # category knowledge from the video model, thresholded at p3; the
    # fixed labeling frame sample (see _image_pseudo_labels) keeps these
    # labels stable across iterations unless the video model moved
    vl_idx = _epoch_frame_indices(data.target_train.video_ids, T, nseg,
                                  seed, "pl-frames")
    vlabels = predict_videos(video_params, data.target_train.clips,
                             data.target_train.video_ids, vl_idx, cfg.p3)

    params = clone_params(image_params)
    if cfg.stage3_reset_head:
        rng = rng_for(seed, "s3-head", iteration)
        bound = 1.0 / np.sqrt(dims.feat)
        params["cls.w"] = Tensor(rng.uniform(-bound, bound,
                                             size=(dims.feat, dims.num_classes)))
        params["cls.b"] = Tensor(rng.uniform(-bound, bound, size=dims.num_classes))
    opt = SGD(params, _image_lr(cfg, cfg.lr_image_stage3), cfg.momentum,
              cfg.weight_decay)

    has_src_vid = len(data.source_videos) > 0
    n_source = data.source_images_x.shape[0] + len(data.source_videos) * nseg
    drive_on_target = strategy == TARGET_CE_ONLY
    probe_curve: list[float] = []
    n_skipped_total = 0
    steps_done = 0
    steps_per_epoch_ref = None
    n_tail = max(1, round(cfg.stage3_tail_avg * cfg.epochs_stage3)) \
        if cfg.stage3_tail_avg > 0.0 else 0
    tail_sum: dict[str, np.ndarray] = {}
    for epoch in range(cfg.epochs_stage3):
        # target frames inherit their video's pseudo label for this epoch
        t_idx = _epoch_frame_indices(data.target_train.video_ids, T, nseg,
                                     seed, f"s3-it{iteration}", "tgt-frames", epoch)
        flabels = disseminate(vlabels, data.target_train.video_ids, t_idx)
        row_of = {int(v): i for i, v in enumerate(data.target_train.video_ids)}
        if len(flabels) > 0:
            frows = np.asarray([row_of[int(v)] for v in flabels.video_ids])
            tgt_x = data.target_train.clips[frows, flabels.frame_indices]
            tgt_y = flabels.class_ids
            if cfg.s3_frame_gate > 0.0:
                # a video-level label is only trustworthy on frames the image
                # model itself finds decidable; ambiguous frames (confusable
                # pairs look identical outside their bursts) otherwise force
                # the loss to separate near-identical inputs. Gate on the
                # top1-top2 margin, not max prob: a maturing model grows
                # confident on ambiguous frames too, but its mass there stays
                # split between the mates, so the margin keeps them out
                probs = np.sort(image_forward(params, tgt_x).class_probs.data,
                                axis=1)
                keep = probs[:, -1] - probs[:, -2] >= cfg.s3_frame_gate
                tgt_x, tgt_y = tgt_x[keep], tgt_y[keep]
        else:
            tgt_x = np.zeros((0, data.d_in))
            tgt_y = np.zeros(0, dtype=np.int64)

        src_x, src_y = data.source_images_x, data.source_images_y
        if has_src_vid:
            fs_idx = _epoch_frame_indices(data.source_videos.video_ids, T, nseg,
                                          seed, f"s3-it{iteration}",
                                          "srcvid-frames", epoch)
            fs = _gather_frames(data.source_videos.clips, fs_idx)
            src_x = np.concatenate([src_x, fs.reshape(-1, data.d_in)])
            src_y = np.concatenate([src_y, np.repeat(data.source_video_labels, nseg)])
        by_class = _source_class_index(src_y, dims.num_classes)

        src_order = rng_for(seed, f"s3-it{iteration}", "src-order",
                            epoch).permutation(src_x.shape[0])
        tgt_order = rng_for(seed, f"s3-it{iteration}", "tgt-order",
                            epoch).permutation(tgt_x.shape[0])
        n_driver = tgt_x.shape[0] if drive_on_target else src_x.shape[0]
        steps_per_epoch = math.ceil(n_driver / cfg.batch_size) if n_driver else 0
        if steps_per_epoch_ref is None:
            steps_per_epoch_ref = steps_per_epoch
        total_steps = cfg.epochs_stage3 * (steps_per_epoch_ref or 1)
        parts_list = []
        for step in range(steps_per_epoch):
            if drive_on_target:
                trows = tgt_order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            else:
                srows = src_order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                trows = _wrap_take(tgt_order, step * cfg.batch_size,
                                   min(cfg.batch_size, tgt_x.shape[0])) \
                    if tgt_x.shape[0] else np.zeros(0, dtype=np.int64)

            terms: list[LossValue] = []
            if strategy == TARGET_CE_ONLY:
                out_t = image_forward(params, tgt_x[trows])
                obj = ce_loss(out_t.class_probs, tgt_y[trows])
                obj = LossValue(obj.total, None, {"ce_target": obj.scalar,
                                                  "total": obj.scalar})
            elif strategy in (SOURCE_TARGET_CE, SOURCE_TARGET_CE_ADD):
                out_s = image_forward(params, src_x[srows])
                ce_s = ce_loss(out_s.class_probs, src_y[srows])
                total = ce_s.total
                parts = {"ce": ce_s.scalar}
                if trows.shape[0] > 0:
                    out_t = image_forward(params, tgt_x[trows])
                    ce_t = ce_loss(out_t.class_probs, tgt_y[trows])
                    total = total + ce_t.total
                    parts["ce_target"] = ce_t.scalar
                if strategy == SOURCE_TARGET_CE_ADD and trows.shape[0] > 0:
                    progress = min(1.0, steps_done / max(1, total_steps - 1))
                    beta = beta_schedule(progress)
                    addv = add_loss(out_s.domain_probs, out_t.domain_probs)
                    # same domain-discrimination cross-entropy form as stage 1
                    total = total + beta * (-addv.total)
                    parts.update({"add": addv.scalar, "beta": beta})
                parts["total"] = total.item()
                obj = LossValue(total, None, parts)
            else:  # SOURCE_CE_CONTRASTIVE
                out_s = image_forward(params, src_x[srows])
                ce_s = ce_loss(out_s.class_probs, src_y[srows])
                anchors_x, pos_x, neg_x, n_skipped = _sample_triplets(
                    tgt_x, tgt_y, trows, src_x, src_y, by_class,
                    rng_for(seed, f"s3-it{iteration}", "triplets", epoch, step))
                n_skipped_total += n_skipped
                if anchors_x.shape[0] > 0:
                    a_feats = image_forward(params, anchors_x).features
                    p_feats = image_forward(params, pos_x).features
                    n_feats = image_forward(params, neg_x).features
                    con = contrastive_loss(a_feats, p_feats, n_feats, cfg.tau)
                else:
                    con = contrastive_loss(Tensor(np.zeros((0, dims.feat))),
                                           Tensor(np.zeros((0, dims.feat))),
                                           Tensor(np.zeros((0, dims.feat))), cfg.tau)
                obj = stage3_objective(ce_s, con)
            opt.zero_grads()
            obj.total.backward()
            opt.step()
            steps_done += 1
            parts_list.append(obj.parts)
            if contrastive_probe is not None and epoch == 0:
                pa, pp, pn = contrastive_probe
                probe_curve.append(contrastive_loss(
                    image_forward(params, pa).features,
                    image_forward(params, pp).features,
                    image_forward(params, pn).features, cfg.tau).scalar)
        if records is not None:
            records.append({"record": "epoch", "stage": 3, "iteration": iteration,
                            "epoch": epoch,
                            "loss_total": _mean_part(parts_list, "total"),
                            "loss_ce": _mean_part(parts_list, "ce"),
                            "loss_ce_target": _mean_part(parts_list, "ce_target"),
                            "loss_contrastive": _mean_part(parts_list, "contrastive"),
                            "loss_add": _mean_part(parts_list, "add"),
                            "n_steps": len(parts_list)})
        if n_tail and epoch >= cfg.epochs_stage3 - n_tail:
            for name, t in params.items():
                if name in tail_sum:
                    tail_sum[name] += t.data
                else:
                    tail_sum[name] = t.data.copy()
    if n_tail:
        for name, t in params.items():
            t.data = tail_sum[name] / n_tail
    if records is not None:
        rec = {"record": "stage", "stage": 3, "iteration": iteration,
               "pseudo_count": int(len(vlabels)),
               "pseudo_acc": _pseudo_accuracy(vlabels, probe),
               "skipped_anchors": int(n_skipped_total)}
        if probe is not None:
            rec["test_acc"] = image_majority_accuracy(
                params, probe.test_videos, probe.test_labels, nseg)
        records.append(rec)
    return params, probe_curve


def _sample_triplets(tgt_x, tgt_y, trows, src_x, src_y, by_class, rng):
    """Anchor = pseudo-labeled target frame; positive = source sample of the
    same class; negative = source sample of a different class. Anchors
    whose class has no source exemplar are skipped and counted."""
    anchors, pos, neg = [], [], []
    n_skipped = 0
    n_src = src_x.shape[0]
    for r in trows.tolist():
        c = int(tgt_y[r])
        pool = by_class[c]
        if pool.shape[0] == 0 or n_src - pool.shape[0] == 0:
            n_skipped += 1
            continue
        p_idx = int(pool[rng.integers(pool.shape[0])])
        while True:
            n_idx = int(rng.integers(n_src))
            if int(src_y[n_idx]) != c:
                break
        anchors.append(tgt_x[r])
        pos.append(src_x[p_idx])
        neg.append(src_x[n_idx])
    if not anchors:
        d = src_x.shape[1]
        return (np.zeros((0, d)), np.zeros((0, d)), np.zeros((0, d)), n_skipped)
    return (np.asarray(anchors), np.asarray(pos), np.asarray(neg), n_skipped)


# ------------------------------------------------------------ full pipeline


@dataclass
class CycleState:
    iteration: int
    image_params: dict[str, Tensor]
    video_params: dict[str, Tensor] | None
    pseudo_labels: VideoPseudoLabels | None
    records: list = field(default_factory=list)


def run_cycle(cfg: StageConfig, data: AdaptationData, n_iterations: int,
              seed: int, probe: MetricsProbe | None = None,
              adversarial_stage1: bool = True) -> CycleState:
    """stage1 -> stage2 -> (stage3 -> stage4) x n_iterations.

    Emits exactly 2 + 2*n_iterations stage records (plus epoch records).
    """
    if n_iterations < 1:
        raise ValueError("n_iterations must be >= 1")
    cfg.validate()
    records: list = []
    image_params = run_stage1(cfg, data, seed, adversarial=adversarial_stage1,
                              records=records, probe=probe)
    rec = {"record": "stage", "stage": 1, "iteration": 0,
           "pseudo_count": 0, "pseudo_acc": None}
    if probe is not None:
        rec["test_acc"] = image_majority_accuracy(
            image_params, probe.test_videos, probe.test_labels)
        rec["target_frame_acc"] = image_frame_accuracy(
            image_params, probe.test_videos, probe.test_labels)
    records.append(rec)

    video_params, labels = run_stage2(image_params, cfg, data, seed,
                                      records=records, probe=probe)
    state = CycleState(0, image_params, video_params, labels, records)
    # Iteration coupling: by default each stage 3 refines the image model
    # it currently has, so successive iterations keep improving the same
    # encoder. The alternative restarts stage 3 from the stage-1 model
    # (and a fine-tuning stage 4 from the stage-2 model) every iteration,
    # coupling iterations only through the label channel.
    stage1_image, stage2_video = image_params, video_params
    for it in range(1, n_iterations + 1):
        img_init = image_params if cfg.cycle_reuse_models else stage1_image
        vid_init = video_params if cfg.cycle_reuse_models else stage2_video
        image_params, _ = run_stage3(img_init, video_params, cfg, data,
                                     seed, iteration=it, records=records,
                                     probe=probe)
        video_params, labels = run_stage4(image_params, cfg, data, seed,
                                          iteration=it, records=records,
                                          probe=probe, prev_video=vid_init)
        state = CycleState(it, image_params, video_params, labels, records)
    return state


def run_mixed_source(cfg: StageConfig, data: AdaptationData, n_iterations: int,
                     seed: int, probe: MetricsProbe | None = None) -> CycleState:
    """Mixed-source adaptation; the plain setting is the empty source-video
    case of the same runner, so a zero fraction is structurally identical."""
    return run_cycle(cfg, data, n_iterations, seed, probe=probe)


def _video_self_train(video_params, cfg: StageConfig, data: AdaptationData,
                      seed: int, round_no: int, records: list | None,
                      probe: MetricsProbe | None) -> dict[str, Tensor]:
    """Self-training alternative to stage 3: the video model's own labels
    retrain a fresh video model."""
    T = data.frames_per_video
    nseg = data.n_segments_default
    tag = f"selftrain-{round_no}"
    idx = _epoch_frame_indices(data.target_train.video_ids, T, nseg,
                               seed, "pl-frames")
    labels = predict_videos(video_params, data.target_train.clips,
                            data.target_train.video_ids, idx, cfg.p4)
    params = _train_video_model(cfg, data, labels, seed, tag,
                                cfg.epochs_stage4, None, records,
                                stage_no=4, iteration=round_no)
    if records is not None:
        rec = {"record": "stage", "stage": 4, "iteration": round_no,
               "pseudo_count": int(len(labels)),
               "pseudo_acc": _pseudo_accuracy(labels, probe),
               "self_train": True}
        if probe is not None:
            rec["test_acc"] = evaluate(params, probe.test_videos,
                                       probe.test_labels).accuracy
        records.append(rec)
    return params


def run_ablation_case(case: str, cfg: StageConfig, data: AdaptationData,
                      seed: int, probe: MetricsProbe,
                      n_iterations: int = 1) -> tuple[float, list]:
    """One stage-wise ablation case; returns (final test accuracy, records).

    A: source-only image model, frame-majority evaluation.
    B: A's image model + video-model training on its pseudo labels.
    C: adversarial stage 1 + video-model training.
    D/E: case C plus one/two rounds of video self-training.
    F: the full four-stage cycle.
    """
    if case not in ABLATION_CASES:
        raise ValueError(f"unknown ablation case: {case!r}")
    records: list = []
    if case == "F":
        state = run_cycle(cfg, data, n_iterations, seed, probe=probe)
        return evaluate(state.video_params, probe.test_videos,
                        probe.test_labels).accuracy, state.records

    adversarial = case not in ("A", "B")
    image_params = run_stage1(cfg, data, seed, adversarial=adversarial,
                              records=records, probe=probe)
    acc_image = image_majority_accuracy(image_params, probe.test_videos,
                                        probe.test_labels)
    records.append({"record": "stage", "stage": 1, "iteration": 0,
                    "pseudo_count": 0, "pseudo_acc": None,
                    "test_acc": acc_image})
    if case == "A":
        return acc_image, records

    video_params, _ = run_stage2(image_params, cfg, data, seed,
                                 records=records, probe=probe)
    if case in ("D", "E"):
        rounds = 1 if case == "D" else 2
        for r in range(1, rounds + 1):
            video_params = _video_self_train(video_params, cfg, data, seed,
                                             r, records, probe)
    return evaluate(video_params, probe.test_videos,
                    probe.test_labels).accuracy, records

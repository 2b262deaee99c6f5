"""Pseudo-label lifecycle: frame prediction, keep-ratio thresholding,
temporal aggregation, video-to-frame dissemination, and video-level
pseudo-labeling.

Aggregation strategies:
  thresh_then_avg (default) — drop frames below the threshold, then
    majority-vote the survivors per video; videos with no surviving frame
    are dropped.
  avg_then_thresh — average frame probabilities per video first, then
    keep the top keep_ratio fraction of videos by averaged confidence.
  avg_then_class_balanced_thresh — as above but the keep-ratio threshold
    is computed within each predicted class.

Majority-vote ties break by highest summed confidence among the tied
classes, then by lowest class id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import image_forward, video_forward

THRESH_THEN_AVG = "thresh_then_avg"
AVG_THEN_THRESH = "avg_then_thresh"
AVG_THEN_CLASS_BALANCED = "avg_then_class_balanced_thresh"
AGGREGATION_STRATEGIES = (THRESH_THEN_AVG, AVG_THEN_THRESH, AVG_THEN_CLASS_BALANCED)


@dataclass
class FramePredictions:
    """Columnar per-frame predictions; one row per sampled frame."""

    video_ids: np.ndarray     # (n,) int64
    frame_indices: np.ndarray  # (n,) int64
    probs: np.ndarray         # (n, K) float64, rows sum to 1

    @property
    def class_ids(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    def __len__(self) -> int:
        return self.video_ids.shape[0]


@dataclass
class VideoPseudoLabels:
    """One row per surviving video, sorted by video id."""

    video_ids: np.ndarray    # (m,) int64
    class_ids: np.ndarray    # (m,) int64
    confidences: np.ndarray  # (m,) float64

    def __len__(self) -> int:
        return self.video_ids.shape[0]

    def to_text(self) -> str:
        lines = [f"{v}\t{c}\t{conf!r}" for v, c, conf in
                 zip(self.video_ids, self.class_ids, self.confidences)]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> "VideoPseudoLabels":
        vids, cids, confs = [], [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            v, c, conf = line.split("\t")
            vids.append(int(v))
            cids.append(int(c))
            confs.append(float(conf))
        return cls(np.asarray(vids, dtype=np.int64),
                   np.asarray(cids, dtype=np.int64),
                   np.asarray(confs, dtype=np.float64))


@dataclass
class FrameLabels:
    """Frame-level labels produced by disseminating video labels."""

    video_ids: np.ndarray     # (n,) int64
    frame_indices: np.ndarray  # (n,) int64
    class_ids: np.ndarray     # (n,) int64

    def __len__(self) -> int:
        return self.video_ids.shape[0]


def predict_frames(image_params, clips: np.ndarray, video_ids: np.ndarray,
                   frame_indices: np.ndarray) -> FramePredictions:
    """Run the image model on the selected frames of every video.

    clips is (N, T, d_in); frame_indices is (N, F) selecting F frames per
    video. Returns one prediction row per (video, selected frame).
    """
    clips = np.asarray(clips)
    video_ids = np.asarray(video_ids, dtype=np.int64)
    frame_indices = np.asarray(frame_indices, dtype=np.int64)
    if clips.ndim != 3 or clips.shape[0] == 0:
        raise ValueError("need a nonempty (N, T, d_in) clip array")
    if frame_indices.ndim != 2 or frame_indices.shape[0] != clips.shape[0]:
        raise ValueError("frame_indices must be (N, F) matching the clips")
    if frame_indices.shape[1] == 0:
        raise ValueError("no frames selected per video")
    n, f = frame_indices.shape
    frames = clips[np.arange(n)[:, None], frame_indices]  # (N, F, d)
    out = image_forward(image_params, frames.reshape(n * f, clips.shape[2]))
    return FramePredictions(
        video_ids=np.repeat(video_ids, f),
        frame_indices=frame_indices.reshape(-1),
        probs=out.class_probs.data.copy(),
    )


def threshold_from_scores(scores: np.ndarray, p: float) -> float:
    """Keep-ratio threshold: midpoint rule on descending-sorted scores.

    Sorted descending as [s_1..s_N], the threshold is the midpoint of
    s_floor(pN) and the next score, so exactly floor(p*N) scores lie at or
    above it when all scores are distinct. Boundary cases place the
    threshold just beyond the extreme score (p=1 keeps everything; a keep
    count of zero excludes everything).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if n == 0:
        raise ValueError("cannot compute a threshold over zero scores")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"keep ratio must be in (0,1], got {p}")
    s = np.sort(scores)[::-1]
    # +1e-9 guards floor against float artifacts like 0.7*10 = 6.999...
    m = int(np.floor(p * n + 1e-9))
    if m <= 0:
        return float(np.nextafter(s[0], np.inf))
    if m >= n:
        return float(np.nextafter(s[-1], -np.inf))
    return float((s[m - 1] + s[m]) / 2.0)


def compute_threshold(frame_predictions: FramePredictions, p: float) -> float:
    """Threshold over per-video maximum frame confidences."""
    if len(frame_predictions) == 0:
        raise ValueError("empty prediction set")
    _, per_video_max = _per_video_max(frame_predictions)
    return threshold_from_scores(per_video_max, p)


def _per_video_max(preds: FramePredictions) -> tuple[np.ndarray, np.ndarray]:
    """Unique video ids (sorted) and each video's max frame confidence."""
    order = np.argsort(preds.video_ids, kind="stable")
    vids = preds.video_ids[order]
    confs = preds.confidences[order]
    uniq, starts = np.unique(vids, return_index=True)
    maxima = np.maximum.reduceat(confs, starts)
    return uniq, maxima


def _vote(class_ids: np.ndarray, confidences: np.ndarray, num_classes: int) -> tuple[int, float]:
    """Majority vote with the documented tie rule.

    Returns (winning class, mean confidence of the winner's frames).
    """
    counts = np.bincount(class_ids, minlength=num_classes)
    top = counts.max()
    tied = np.flatnonzero(counts == top)
    if tied.shape[0] > 1:
        sums = np.bincount(class_ids, weights=confidences, minlength=num_classes)
        tied_sums = sums[tied]
        tied = tied[tied_sums == tied_sums.max()]
    winner = int(tied[0])
    mask = class_ids == winner
    return winner, float(confidences[mask].mean())


def aggregate(frame_predictions: FramePredictions, delta: float, strategy: str,
              keep_ratio: float | None = None) -> VideoPseudoLabels:
    """Aggregate frame predictions into video pseudo labels.

    delta applies per frame for thresh_then_avg. The averaging strategies
    threshold whole-video confidences instead, which requires keep_ratio
    so the cut can be derived from the averaged scores themselves.
    """
    preds = frame_predictions
    if strategy not in AGGREGATION_STRATEGIES:
        raise ValueError(f"unknown aggregation strategy: {strategy!r}")
    num_classes = preds.probs.shape[1]
    order = np.argsort(preds.video_ids, kind="stable")
    vids = preds.video_ids[order]
    uniq, starts = np.unique(vids, return_index=True)
    bounds = np.append(starts, vids.shape[0])

    if strategy == THRESH_THEN_AVG:
        cls = preds.class_ids[order]
        conf = preds.confidences[order]
        out_v, out_c, out_conf = [], [], []
        for vid, lo, hi in zip(uniq, bounds[:-1], bounds[1:]):
            keep = conf[lo:hi] >= delta
            if not keep.any():
                continue
            winner, wconf = _vote(cls[lo:hi][keep], conf[lo:hi][keep], num_classes)
            out_v.append(vid)
            out_c.append(winner)
            out_conf.append(wconf)
        return VideoPseudoLabels(np.asarray(out_v, dtype=np.int64),
                                 np.asarray(out_c, dtype=np.int64),
                                 np.asarray(out_conf, dtype=np.float64))

    # averaging strategies: mean probs per video, then a video-level cut
    probs = preds.probs[order]
    avg = np.add.reduceat(probs, starts, axis=0)
    avg /= (bounds[1:] - bounds[:-1])[:, None]
    v_cls = avg.argmax(axis=1)
    v_conf = avg.max(axis=1)

    if strategy == AVG_THEN_THRESH:
        cut = delta if keep_ratio is None else threshold_from_scores(v_conf, keep_ratio)
        keep = v_conf >= cut
    else:
        if keep_ratio is None:
            raise ValueError("class-balanced thresholding requires keep_ratio")
        keep = np.zeros(uniq.shape[0], dtype=bool)
        for c in np.unique(v_cls):
            in_c = v_cls == c
            cut = threshold_from_scores(v_conf[in_c], keep_ratio)
            keep[in_c] = v_conf[in_c] >= cut
    return VideoPseudoLabels(uniq[keep].astype(np.int64),
                             v_cls[keep].astype(np.int64),
                             v_conf[keep].astype(np.float64))


def disseminate(video_labels: VideoPseudoLabels, video_ids: np.ndarray,
                frame_indices: np.ndarray) -> FrameLabels:
    """Copy each labeled video's class onto its sampled frames.

    video_ids (N,) and frame_indices (N, F) describe the current frame
    sample of every video; only videos present in video_labels contribute.
    """
    video_ids = np.asarray(video_ids, dtype=np.int64)
    frame_indices = np.asarray(frame_indices, dtype=np.int64)
    label_of = dict(zip(video_labels.video_ids.tolist(),
                        video_labels.class_ids.tolist()))
    out_v, out_f, out_c = [], [], []
    for row, vid in enumerate(video_ids.tolist()):
        cls = label_of.get(vid)
        if cls is None:
            continue
        for fi in frame_indices[row]:
            out_v.append(vid)
            out_f.append(int(fi))
            out_c.append(cls)
    return FrameLabels(np.asarray(out_v, dtype=np.int64),
                       np.asarray(out_f, dtype=np.int64),
                       np.asarray(out_c, dtype=np.int64))


def predict_videos(video_params, clips: np.ndarray, video_ids: np.ndarray,
                   frame_indices: np.ndarray, p: float) -> VideoPseudoLabels:
    """Video-model pseudo labels, confidence-thresholded at keep-ratio p.

    Clips are reduced to their sampled frames (frame_indices, shape (N, F))
    before the forward pass, matching how the video model is trained.
    """
    clips = np.asarray(clips)
    video_ids = np.asarray(video_ids, dtype=np.int64)
    frame_indices = np.asarray(frame_indices, dtype=np.int64)
    n = clips.shape[0]
    sub = clips[np.arange(n)[:, None], frame_indices]  # (N, F, d)
    out = video_forward(video_params, sub)
    probs = out.class_probs.data
    cls = probs.argmax(axis=1).astype(np.int64)
    conf = probs.max(axis=1)
    cut = threshold_from_scores(conf, p)
    keep = conf >= cut
    order = np.argsort(video_ids[keep], kind="stable")
    return VideoPseudoLabels(video_ids[keep][order],
                             cls[keep][order],
                             conf[keep][order])

"""Seeded synthetic benchmark with controllable domain shift and a
temporal modality gap.

Every class c has a spatial prototype mu_c and a temporal signature
s_c(t) applied along a class direction u_c:

  source image   = mu_c + swing * u_c + sigma * eps
  source clip[t] = mu_c + s_c(t) * u_c + sigma * eps
  target clip[t] = R(mu_c) + bias + s_c(t) * u_c + sigma * eps

R (a rotation by shift_angle in random planes) and the bias vector realize
the spatial domain shift. Per-image swing is drawn from the class's
per-frame signature marginal, so single frames and single images are
distributed alike and the only systematic domain difference is spatial.

Non-pair classes use sinusoid signatures. Confusable pairs share mu_c and
differ only through short bursts: s(t) = +amp inside each mate's window,
exactly 0 elsewhere, with each mate bursting along its own orthonormal
direction. Baseline frames of a pair are therefore indistinguishable in
principle, so a frame classifier stays near chance on pairs and whole-clip
frame majorities stay weak, while burst frames are rare but separable.
Confidence-filtered voting and temporal models resolve the pair; plain
per-frame reading cannot.

Each mate owns a wing direction rather than the two sharing one axis with
opposite signs: with a shared axis, both linear heads must score the
common baseline blob equally and each head learns to subtract its own
wing component, which makes it fire on the mate's wing and caps wing
confidence structurally. Orthogonal wings remove that cap.

The two mates also burst at different amplitudes (the second mate at
burst_amp_ratio of the first). Fully symmetric wings would make the pair
unidentifiable under an unknown feature-space rotation: a reflection
exchanging the two wing axes swaps the mates while leaving every density
match intact, so no unsupervised alignment could orient the pair better
than a coin flip. The amplitude asymmetry breaks that symmetry and gives
alignment a real signal to lock onto, while equal window lengths keep
both mates equally represented in training.

A hard_fraction of every pair class's videos bursts at hard_amp_scale of
full amplitude. Confidence filtering at a fixed keep ratio drops this
hard band for an image-only labeler — symmetrically across classes, so
nothing starves — which caps what can be learned from image pseudo labels
alone and leaves measurable headroom that later, better-aligned labeling
passes can convert. Source images draw their swing from the same mixture
so per-frame marginals still match across domains.

Prototypes are orthonormal, as are all wing directions, so pair structure
never bleeds into other classes.
"""

from __future__ import annotations

import binascii
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .utils import rng_for


@dataclass(frozen=True)
class BenchmarkSpec:
    num_classes: int = 12
    d_in: int = 16
    images_per_class: int = 50
    train_videos_per_class: int = 30
    test_videos_per_class: int = 20
    source_videos_per_class: int = 30
    frames_per_video: int = 16
    n_segments: int = 5
    shift_angle: float = 0.6
    shift_bias_scale: float = 0.25
    noise_sigma: float = 0.1
    signature_amp: float = 0.6
    burst_amp: float = 1.2
    # second pair mate's burst amplitude as a fraction of burst_amp; the
    # amplitude asymmetry keeps mate orientation identifiable under an
    # unknown rotation without starving either mate of training mass
    burst_amp_ratio: float = 0.8
    burst_duty: float = 0.375
    confusable_pairs: tuple = ((0, 1), (2, 3), (4, 5))
    # fraction of each pair class's videos whose bursts are scaled by
    # hard_amp_scale. The hard band sits below the confidence threshold of
    # an image-only model, symmetrically for both mates, so confidence
    # filtering drops it without starving either class and the cycle's
    # later, better-aligned labeling passes can reach into it.
    hard_fraction: float = 0.25
    hard_amp_scale: float = 0.5

    def burst_lens(self) -> tuple[int, int]:
        """(first mate, second mate) burst window lengths in frames."""
        n = max(2, round(self.burst_duty * self.frames_per_video))
        return n, n

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.frames_per_video < 4:
            raise ValueError(f"frames_per_video must be >= 4, got {self.frames_per_video}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 1 <= self.n_segments <= self.frames_per_video:
            raise ValueError("n_segments must be in [1, frames_per_video]")
        # burst must stay a minority of frames or pairs lose the property
        # that plain frame majorities are weak on them
        if not 0.0 < self.burst_duty <= 0.5:
            raise ValueError(f"burst_duty must be in (0, 0.5], got {self.burst_duty}")
        if not 0.0 < self.burst_amp_ratio <= 1.0:
            raise ValueError(f"burst_amp_ratio must be in (0, 1], got {self.burst_amp_ratio}")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError(f"hard_fraction must be in [0, 1], got {self.hard_fraction}")
        if not 0.0 < self.hard_amp_scale <= 1.0:
            raise ValueError(f"hard_amp_scale must be in (0, 1], got {self.hard_amp_scale}")
        for name in ("images_per_class", "train_videos_per_class", "test_videos_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.source_videos_per_class < 0:
            raise ValueError("source_videos_per_class must be >= 0")
        pairs = tuple(tuple(p) for p in self.confusable_pairs)
        seen: set[int] = set()
        for p in pairs:
            if len(p) != 2 or p[0] == p[1]:
                raise ValueError(f"confusable pair must name two distinct classes: {p}")
            for c in p:
                if not 0 <= c < self.num_classes:
                    raise ValueError(f"confusable pair class {c} out of range")
                if c in seen:
                    raise ValueError(f"class {c} appears in more than one confusable pair")
                seen.add(c)
        if self.d_in < self.num_classes + len(pairs):
            raise ValueError(
                f"d_in={self.d_in} too small for {self.num_classes} orthonormal "
                f"prototypes plus {len(pairs)} pair directions")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusable_pairs"] = [list(p) for p in self.confusable_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown benchmark spec keys: {sorted(unknown)}")
        d = dict(d)
        if "confusable_pairs" in d:
            d["confusable_pairs"] = tuple(tuple(int(c) for c in p)
                                          for p in d["confusable_pairs"])
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class ImageSet:
    features: np.ndarray  # (n, d_in)
    labels: np.ndarray    # (n,) int64


@dataclass
class VideoSet:
    """Clips plus ids only — training code never sees target labels."""

    clips: np.ndarray      # (n, T, d_in)
    video_ids: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return self.clips.shape[0]


@dataclass
class SyntheticDataset:
    spec: BenchmarkSpec
    seed: int
    source_images: ImageSet
    source_videos: VideoSet
    source_video_labels: np.ndarray   # (n_src_vid,) labeled source domain
    train_videos: VideoSet
    test_videos: VideoSet
    test_labels: np.ndarray           # (n_test,)
    hidden_train_labels: np.ndarray = field(repr=False)  # metrics-only channel

    def metrics_train_labels(self, video_ids: np.ndarray) -> np.ndarray:
        """Hidden train labels for the given ids — metrics and tests only."""
        pos = {int(v): i for i, v in enumerate(self.train_videos.video_ids)}
        idx = np.asarray([pos[int(v)] for v in np.asarray(video_ids)], dtype=np.int64)
        return self.hidden_train_labels[idx]


@dataclass
class GenerationParams:
    prototypes: np.ndarray    # (K, d)
    directions: np.ndarray    # (K, d) signature direction per class
    amps: np.ndarray          # (K,)
    freqs: np.ndarray         # (K,) integer cycles per clip
    phases: np.ndarray        # (K,)
    burst_starts: np.ndarray  # (K,) window start frame, -1 for non-pair classes
    burst_signs: np.ndarray   # (K,) +/-1 inside a pair, 0 for non-pair classes
    burst_lens: np.ndarray    # (K,) window length, 0 for non-pair classes
    rotation: np.ndarray      # (d, d)
    bias: np.ndarray          # (d,)


def _orthonormal(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def derive_generation_params(spec: BenchmarkSpec, seed: int) -> GenerationParams:
    """All deterministic per-class structure behind a (spec, seed) pair."""
    spec.validate()
    K, d = spec.num_classes, spec.d_in
    pairs = tuple(tuple(p) for p in spec.confusable_pairs)

    basis = _orthonormal(rng_for(seed, "prototypes"), d)
    prototypes = basis[:, :K].T.copy()
    for a, b in pairs:
        prototypes[b] = prototypes[a]

    rng_dir = rng_for(seed, "directions")
    directions = np.zeros((K, d))
    in_pair = {c for p in pairs for c in p}
    for c in range(K):
        if c not in in_pair:
            v = rng_dir.standard_normal(d)
            directions[c] = v / np.linalg.norm(v)
    for i, (a, b) in enumerate(pairs):
        # one dedicated orthonormal wing axis per mate. Shared-axis opposite
        # wings would cap linear-head confidence: both heads must score the
        # shared baseline blob equally, and a head trained to subtract its
        # own wing direction then fires on the mate's wing. The second mate
        # reuses the basis column its shared prototype freed.
        directions[a] = basis[:, K + i]
        directions[b] = basis[:, b]

    rng_sig = rng_for(seed, "signatures")
    amps = np.full(K, spec.signature_amp)
    freqs = np.zeros(K, dtype=np.int64)
    phases = np.zeros(K)
    burst_starts = np.full(K, -1, dtype=np.int64)
    burst_signs = np.zeros(K)
    burst_lens = np.zeros(K, dtype=np.int64)
    for c in range(K):
        if c in in_pair:
            continue
        freqs[c] = rng_sig.integers(1, 3)
        phases[c] = rng_sig.uniform(0.0, 2.0 * np.pi)
    len_long, len_short = spec.burst_lens()
    for a, b in pairs:
        start = int(rng_sig.integers(0, spec.frames_per_video))
        burst_starts[a] = burst_starts[b] = start
        burst_signs[a] = 1.0
        burst_signs[b] = 1.0
        burst_lens[a] = len_long
        burst_lens[b] = len_short
        # larger excursion than the sinusoid classes: burst frames must be
        # confidently classifiable or threshold filtering starves the pair
        amps[a] = spec.burst_amp
        amps[b] = spec.burst_amp * spec.burst_amp_ratio

    rng_shift = rng_for(seed, "shift")
    plane_basis = _orthonormal(rng_shift, d)
    block = np.eye(d)
    cos_t, sin_t = np.cos(spec.shift_angle), np.sin(spec.shift_angle)
    for i in range(0, d - 1, 2):
        block[i, i] = cos_t
        block[i, i + 1] = -sin_t
        block[i + 1, i] = sin_t
        block[i + 1, i + 1] = cos_t
    rotation = plane_basis @ block @ plane_basis.T
    bias = spec.shift_bias_scale * rng_shift.standard_normal(d)

    return GenerationParams(prototypes, directions, amps, freqs, phases,
                            burst_starts, burst_signs, burst_lens,
                            rotation, bias)


def signature_values(params: GenerationParams, c: int, T: int) -> np.ndarray:
    """Per-frame signature scalars s_c(t), t = 0..T-1."""
    t = np.arange(T, dtype=np.float64)
    if params.burst_starts[c] >= 0:
        inside = ((np.arange(T) - params.burst_starts[c]) % T) < params.burst_lens[c]
        return params.burst_signs[c] * params.amps[c] * inside.astype(np.float64)
    return params.amps[c] * np.sin(
        2.0 * np.pi * params.freqs[c] * t / T + params.phases[c])


def _make_clips(spec: BenchmarkSpec, params: GenerationParams, per_class: int,
                rng_key: tuple, seed: int, shifted: bool) -> tuple[np.ndarray, np.ndarray]:
    """Stack of per-class clips plus their labels, classes in order."""
    K, T, d = spec.num_classes, spec.frames_per_video, spec.d_in
    clips = np.zeros((K * per_class, T, d))
    labels = np.repeat(np.arange(K, dtype=np.int64), per_class)
    for c in range(K):
        rng = rng_for(seed, *rng_key, c)
        base = (params.rotation @ params.prototypes[c] + params.bias) if shifted \
            else params.prototypes[c]
        sig = signature_values(params, c, T)
        # the first round(hard_fraction * per_class) videos of a pair class
        # burst at hard_amp_scale of full amplitude
        scale = np.ones(per_class)
        if params.burst_starts[c] >= 0:
            scale[:round(spec.hard_fraction * per_class)] = spec.hard_amp_scale
        block = base[None, None, :] + scale[:, None, None] * sig[None, :, None] \
            * params.directions[c][None, None, :]
        noise = spec.noise_sigma * rng.standard_normal((per_class, T, d))
        clips[c * per_class:(c + 1) * per_class] = block + noise
    return clips, labels


def generate(spec: BenchmarkSpec, seed: int) -> SyntheticDataset:
    """Deterministic dataset for (spec, seed); same inputs, same bytes."""
    spec.validate()
    params = derive_generation_params(spec, seed)
    K, d = spec.num_classes, spec.d_in

    n_img = spec.images_per_class
    images = np.zeros((K * n_img, d))
    image_labels = np.repeat(np.arange(K, dtype=np.int64), n_img)
    for c in range(K):
        rng = rng_for(seed, "source-images", c)
        # source images carry per-image swing drawn from the class's
        # per-frame signature marginal, so frames and images spread alike
        # along the signature direction and the only systematic domain
        # difference is the spatial shift. Without this a feature
        # discriminator keys on the signature spread itself and the
        # alignment stage has to destroy that subspace.
        if params.burst_starts[c] >= 0:
            duty = params.burst_lens[c] / spec.frames_per_video
            hit = rng.uniform(0.0, 1.0, size=n_img) < duty
            # match the per-frame marginal of the hard-band mixture too
            hard = rng.uniform(0.0, 1.0, size=n_img) < spec.hard_fraction
            factor = np.where(hard, spec.hard_amp_scale, 1.0)
            swing = params.burst_signs[c] * params.amps[c] * factor * \
                hit.astype(np.float64)
        else:
            swing = params.amps[c] * np.sin(rng.uniform(0.0, 2.0 * np.pi, size=n_img))
        images[c * n_img:(c + 1) * n_img] = params.prototypes[c] + \
            swing[:, None] * params.directions[c][None, :] + \
            spec.noise_sigma * rng.standard_normal((n_img, d))

    train_clips, train_labels = _make_clips(
        spec, params, spec.train_videos_per_class, ("train-videos",), seed, shifted=True)
    test_clips, test_labels = _make_clips(
        spec, params, spec.test_videos_per_class, ("test-videos",), seed, shifted=True)
    src_clips, src_labels = _make_clips(
        spec, params, spec.source_videos_per_class, ("source-videos",), seed, shifted=False) \
        if spec.source_videos_per_class > 0 else (
            np.zeros((0, spec.frames_per_video, d)), np.zeros(0, dtype=np.int64))

    n_train = train_clips.shape[0]
    n_test = test_clips.shape[0]
    train_ids = np.arange(n_train, dtype=np.int64)
    test_ids = np.arange(n_train, n_train + n_test, dtype=np.int64)
    src_ids = np.arange(n_train + n_test,
                        n_train + n_test + src_clips.shape[0], dtype=np.int64)

    return SyntheticDataset(
        spec=spec,
        seed=seed,
        source_images=ImageSet(images, image_labels),
        source_videos=VideoSet(src_clips, src_ids),
        source_video_labels=src_labels,
        train_videos=VideoSet(train_clips, train_ids),
        test_videos=VideoSet(test_clips, test_ids),
        test_labels=test_labels,
        hidden_train_labels=train_labels,
    )


def sample_frames(n_frames: int, n_segments: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn frame index per segment, strictly increasing.

    Segment s covers [floor(s*T/n), floor((s+1)*T/n)).
    """
    if n_segments > n_frames:
        raise ValueError(f"cannot split {n_frames} frames into {n_segments} segments")
    out = np.empty(n_segments, dtype=np.int64)
    for s in range(n_segments):
        lo = (s * n_frames) // n_segments
        hi = ((s + 1) * n_frames) // n_segments
        out[s] = rng.integers(lo, hi)
    return out


def midpoint_frames(n_frames: int, n_segments: int) -> np.ndarray:
    """Deterministic per-segment midpoints, for evaluation-time clips."""
    out = np.empty(n_segments, dtype=np.int64)
    for s in range(n_segments):
        lo = (s * n_frames) // n_segments
        hi = ((s + 1) * n_frames) // n_segments
        out[s] = (lo + hi - 1) // 2
    return out


# ------------------------------------------------------------- serialization

_DATA_MAGIC = b"CYCLDATA"
_DATA_VERSION = 1


class DatasetFileError(ValueError):
    """Malformed, truncated, version-mismatched or corrupted dataset file."""


_SECTIONS = (
    ("source_features", "<f8"),
    ("source_labels", "<i8"),
    ("source_video_clips", "<f8"),
    ("source_video_ids", "<i8"),
    ("source_video_labels", "<i8"),
    ("train_clips", "<f8"),
    ("train_ids", "<i8"),
    ("hidden_train_labels", "<i8"),
    ("test_clips", "<f8"),
    ("test_ids", "<i8"),
    ("test_labels", "<i8"),
)


def _dataset_arrays(ds: SyntheticDataset) -> dict[str, np.ndarray]:
    return {
        "source_features": ds.source_images.features,
        "source_labels": ds.source_images.labels,
        "source_video_clips": ds.source_videos.clips,
        "source_video_ids": ds.source_videos.video_ids,
        "source_video_labels": ds.source_video_labels,
        "train_clips": ds.train_videos.clips,
        "train_ids": ds.train_videos.video_ids,
        "hidden_train_labels": ds.hidden_train_labels,
        "test_clips": ds.test_videos.clips,
        "test_ids": ds.test_videos.video_ids,
        "test_labels": ds.test_labels,
    }


def save(ds: SyntheticDataset, path) -> None:
    """Versioned, checksummed binary layout; save/load/save is byte-stable."""
    arrays = _dataset_arrays(ds)
    header = json.dumps({
        "spec": ds.spec.to_dict(),
        "seed": ds.seed,
        "sections": [[name, dtype, list(arrays[name].shape)]
                     for name, dtype in _SECTIONS],
    }, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", _DATA_VERSION)
    body += struct.pack("<I", len(header))
    body += header
    for name, dtype in _SECTIONS:
        body += np.ascontiguousarray(arrays[name], dtype=dtype).tobytes()
    crc = binascii.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load(path) -> SyntheticDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_DATA_MAGIC) + 12 or blob[:len(_DATA_MAGIC)] != _DATA_MAGIC:
        raise DatasetFileError("not a dataset file")
    body, tail = blob[len(_DATA_MAGIC):-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", tail)
    if binascii.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise DatasetFileError("dataset checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 0)
    if version != _DATA_VERSION:
        raise DatasetFileError(f"unsupported dataset version {version}")
    (hlen,) = struct.unpack_from("<I", body, 4)
    header = json.loads(body[8:8 + hlen].decode("utf-8"))
    spec = BenchmarkSpec.from_dict(header["spec"])
    offset = 8 + hlen
    arrays: dict[str, np.ndarray] = {}
    for name, dtype, shape in header["sections"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        arrays[name] = arr.reshape(shape).copy()
        offset += arr.nbytes
    if offset != len(body):
        raise DatasetFileError("dataset has trailing or missing data")
    return SyntheticDataset(
        spec=spec,
        seed=int(header["seed"]),
        source_images=ImageSet(arrays["source_features"], arrays["source_labels"]),
        source_videos=VideoSet(arrays["source_video_clips"], arrays["source_video_ids"]),
        source_video_labels=arrays["source_video_labels"],
        train_videos=VideoSet(arrays["train_clips"], arrays["train_ids"]),
        test_videos=VideoSet(arrays["test_clips"], arrays["test_ids"]),
        test_labels=arrays["test_labels"],
        hidden_train_labels=arrays["hidden_train_labels"],
    )


def export_metadata(ds: SyntheticDataset) -> str:
    """Debug text dump of per-sample metadata (includes hidden labels)."""
    lines = [f"# spec {json.dumps(ds.spec.to_dict(), sort_keys=True)} seed {ds.seed}"]
    for vid, lab in zip(ds.train_videos.video_ids, ds.hidden_train_labels):
        lines.append(f"train\t{vid}\t{lab}")
    for vid, lab in zip(ds.test_videos.video_ids, ds.test_labels):
        lines.append(f"test\t{vid}\t{lab}")
    for vid, lab in zip(ds.source_videos.video_ids, ds.source_video_labels):
        lines.append(f"source\t{vid}\t{lab}")
    return "\n".join(lines) + "\n"

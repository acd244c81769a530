"""Embedding dataset model: EMB1 binary files, synthetic data, splits, trials.

The EMB1 container stores labelled speaker embeddings::

    magic  b"EMB1"
    u32    format version (currently 1)
    u32    record count
    u32    embedding dimension d
    then per record: u32 speaker_id, u32 segment_id, u8 gender, d * f64

All integers and floats are little-endian; gender is 0 for male and 1 for
female. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
_HEADER = struct.Struct("<4sIII")

GENDER_MALE = 0
GENDER_FEMALE = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    speaker_id: int
    segment_id: int
    gender: int
    vector: np.ndarray


@dataclass
class EmbeddingSet:
    """Column-wise container for one embedding file."""

    speaker_ids: np.ndarray  # (n,) int64
    segment_ids: np.ndarray  # (n,) int64
    genders: np.ndarray      # (n,) uint8
    vectors: np.ndarray      # (n, d) float64

    def __post_init__(self):
        self.speaker_ids = np.asarray(self.speaker_ids, dtype=np.int64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        self.genders = np.asarray(self.genders, dtype=np.uint8)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DataError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        n = self.vectors.shape[0]
        if not (len(self.speaker_ids) == len(self.segment_ids) == len(self.genders) == n):
            raise DataError("embedding set columns have inconsistent lengths")

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def validate(self) -> None:
        """Check the per-file invariants; raises DataError on violation."""
        if np.any(self.speaker_ids < 0) or np.any(self.speaker_ids > 0xFFFFFFFF):
            raise DataError("speaker ids must fit in an unsigned 32-bit integer")
        if np.any(self.segment_ids < 0) or np.any(self.segment_ids > 0xFFFFFFFF):
            raise DataError("segment ids must fit in an unsigned 32-bit integer")
        if np.any(self.genders > 1):
            raise DataError("gender labels must be 0 (male) or 1 (female)")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("embedding vectors must be finite")
        pairs = set(zip(self.speaker_ids.tolist(), self.segment_ids.tolist()))
        if len(pairs) != len(self):
            raise DataError("(speaker_id, segment_id) pairs must be unique per file")

    def subset(self, index) -> "EmbeddingSet":
        return EmbeddingSet(
            self.speaker_ids[index],
            self.segment_ids[index],
            self.genders[index],
            self.vectors[index],
        )

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingSet":
        """Same ids and labels, new vectors (e.g. after protection)."""
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape != self.vectors.shape:
            raise DataError(
                f"replacement vectors shaped {vectors.shape} do not match {self.vectors.shape}"
            )
        return EmbeddingSet(
            self.speaker_ids.copy(), self.segment_ids.copy(), self.genders.copy(), vectors
        )

    def records(self):
        for i in range(len(self)):
            yield EmbeddingRecord(
                int(self.speaker_ids[i]),
                int(self.segment_ids[i]),
                int(self.genders[i]),
                self.vectors[i],
            )


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [("speaker", "<u4"), ("segment", "<u4"), ("gender", "u1"), ("vector", "<f8", (dim,))]
    )


def write_embedding_file(es: EmbeddingSet, path) -> None:
    es.validate()
    dim = es.dim
    rec = np.zeros(len(es), dtype=_record_dtype(dim))
    rec["speaker"] = es.speaker_ids
    rec["segment"] = es.segment_ids
    rec["gender"] = es.genders
    rec["vector"] = es.vectors
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, EMB_VERSION, len(es), dim))
        fh.write(rec.tobytes())


def read_embedding_file(path) -> EmbeddingSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header, file has {len(data)} bytes "
            f"but the header needs {_HEADER.size} (error at byte {len(data)})"
        )
    magic, version, count, dim = _HEADER.unpack_from(data, 0)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {EMB_MAGIC!r}")
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    dtype = _record_dtype(dim)
    expected = _HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(
            f"{path}: body length mismatch, expected {expected} bytes for {count} "
            f"records of dimension {dim} but file has {len(data)} "
            f"(error at byte {min(len(data), expected)})"
        )
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=_HEADER.size)
    es = EmbeddingSet(
        rec["speaker"].astype(np.int64),
        rec["segment"].astype(np.int64),
        rec["gender"].copy(),
        rec["vector"].astype(np.float64),
    )
    bad_gender = np.nonzero(es.genders > 1)[0]
    if bad_gender.size:
        i = int(bad_gender[0])
        offset = _HEADER.size + i * dtype.itemsize + 8
        raise FormatError(f"{path}: invalid gender byte for record {i} at byte {offset}")
    bad_vec = np.nonzero(~np.all(np.isfinite(es.vectors), axis=1))[0]
    if bad_vec.size:
        i = int(bad_vec[0])
        offset = _HEADER.size + i * dtype.itemsize + 9
        raise FormatError(f"{path}: non-finite vector in record {i} at byte {offset}")
    pairs = set(zip(es.speaker_ids.tolist(), es.segment_ids.tolist()))
    if len(pairs) != len(es):
        raise FormatError(f"{path}: duplicate (speaker_id, segment_id) pair")
    return es


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic embedding generator.

    Each speaker gets a random unit identity direction scaled by
    ``speaker_spread`` plus ``gender_gap`` along a fixed gender axis (the
    first basis vector, positive for female speakers). Each segment adds an
    isotropic perturbation whose expected norm is ``segment_noise`` (per
    component standard deviation ``segment_noise / sqrt(dim)``) and is then
    L2-normalized. ``gender_gap = 0`` yields gender-uninformative data.
    """

    n_speakers: int = 2000
    segments_per_speaker: int = 10
    dim: int = 192
    gender_gap: float = 0.6
    speaker_spread: float = 1.0
    segment_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ConfigError("need at least 2 speakers so both genders are represented")
        if self.segments_per_speaker < 1:
            raise ConfigError("need at least 1 segment per speaker")
        if self.dim < 2:
            raise ConfigError("embedding dimension must be at least 2")
        if self.gender_gap < 0:
            raise ConfigError("gender gap must be nonnegative")
        if not self.speaker_spread > 0:
            raise ConfigError("speaker spread must be positive")
        if self.segment_noise < 0:
            raise ConfigError("segment noise must be nonnegative")


def generate_synthetic(cfg: SynthConfig) -> EmbeddingSet:
    """Deterministic synthetic embeddings with identity and gender factors."""
    n = cfg.n_speakers * cfg.segments_per_speaker
    vectors = np.empty((n, cfg.dim))
    speaker_ids = np.repeat(np.arange(cfg.n_speakers, dtype=np.int64), cfg.segments_per_speaker)
    segment_ids = np.tile(np.arange(cfg.segments_per_speaker, dtype=np.int64), cfg.n_speakers)
    # alternate genders so per-gender speaker counts differ by at most 1
    speaker_genders = (np.arange(cfg.n_speakers) % 2).astype(np.uint8)
    genders = np.repeat(speaker_genders, cfg.segments_per_speaker)

    axis = np.zeros(cfg.dim)
    axis[0] = 1.0
    sigma = cfg.segment_noise / np.sqrt(cfg.dim)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_speakers)
    row = 0
    for s in range(cfg.n_speakers):
        rng = np.random.default_rng(children[s])
        direction = rng.standard_normal(cfg.dim)
        direction /= np.linalg.norm(direction)
        sign = 1.0 if speaker_genders[s] == GENDER_FEMALE else -1.0
        center = cfg.speaker_spread * direction + cfg.gender_gap * sign * axis
        for _ in range(cfg.segments_per_speaker):
            x = center + sigma * rng.standard_normal(cfg.dim)
            norm = np.linalg.norm(x)
            if norm == 0.0:
                raise DataError("generated a zero-norm embedding; adjust the generator config")
            vectors[row] = x / norm
            row += 1
    return EmbeddingSet(speaker_ids, segment_ids, genders, vectors)


@dataclass(frozen=True)
class Trial:
    enroll_speaker: int
    test_speaker: int
    test_segment: int
    target: bool


@dataclass(frozen=True)
class SplitSpec:
    """Speaker-disjoint role assignment for one experiment.

    Speakers are partitioned into an auto-encoder training pool, an attacker
    training pool, and an evaluation pool. Evaluation speakers contribute
    both enrollment and test segments (split per speaker by
    ``enroll_fraction``); the pools themselves never share a speaker.
    """

    aae_fraction: float = 0.5
    attacker_fraction: float = 0.25
    enroll_fraction: float = 0.5
    n_target_trials: int = 2000
    n_nontarget_trials: int = 2000

    def __post_init__(self):
        for name in ("aae_fraction", "attacker_fraction", "enroll_fraction"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if self.aae_fraction + self.attacker_fraction >= 1.0:
            raise ConfigError("aae_fraction + attacker_fraction must leave room for evaluation")
        if self.n_target_trials < 1 or self.n_nontarget_trials < 1:
            raise ConfigError("trial counts must be positive")


SPLIT_ROLES = ("aae_train", "attacker_train", "eval_enroll", "eval_test")


def _interleave(a: list, b: list) -> list:
    out = []
    for i in range(max(len(a), len(b))):
        if i < len(a):
            out.append(a[i])
        if i < len(b):
            out.append(b[i])
    return out


def make_splits(es: EmbeddingSet, spec: SplitSpec, seed: int):
    """Split into the four roles and build a trial list.

    Returns ``(splits, trials)`` where ``splits`` maps role names to
    embedding sets. The assignment shuffles male and female speakers
    separately and interleaves them, so roles stay close to gender-balanced.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(101,)))
    speakers = np.unique(es.speaker_ids)
    n = len(speakers)
    speaker_gender = {}
    for sid in speakers:
        g = np.unique(es.genders[es.speaker_ids == sid])
        if len(g) != 1:
            raise DataError(f"speaker {sid} has inconsistent gender labels")
        speaker_gender[int(sid)] = int(g[0])

    n_eval = max(2, int(round((1.0 - spec.aae_fraction - spec.attacker_fraction) * n)))
    n_attacker = max(1, int(round(spec.attacker_fraction * n)))
    n_aae = n - n_eval - n_attacker
    if n_aae < 1:
        raise ConfigError(
            f"{n} speakers cannot fill three disjoint pools "
            f"(need at least 1 + 1 + 2 = 4)"
        )

    males = [int(s) for s in speakers if speaker_gender[int(s)] == GENDER_MALE]
    females = [int(s) for s in speakers if speaker_gender[int(s)] == GENDER_FEMALE]
    males = [males[i] for i in rng.permutation(len(males))]
    females = [females[i] for i in rng.permutation(len(females))]
    ordered = _interleave(males, females)

    aae_speakers = set(ordered[:n_aae])
    attacker_speakers = set(ordered[n_aae:n_aae + n_attacker])
    eval_speakers = set(ordered[n_aae + n_attacker:])

    aae_mask = np.isin(es.speaker_ids, sorted(aae_speakers))
    attacker_mask = np.isin(es.speaker_ids, sorted(attacker_speakers))

    enroll_rows: list[int] = []
    test_rows: list[int] = []
    for sid in sorted(eval_speakers):
        rows = np.nonzero(es.speaker_ids == sid)[0]
        k = len(rows)
        n_enroll = max(1, int(round(spec.enroll_fraction * k)))
        if n_enroll >= k:
            n_enroll = k - 1
        if n_enroll < 1:
            raise DataError(
                f"speaker {sid} has {k} segments; need at least 2 to split enroll/test"
            )
        picked = rng.permutation(k)
        enroll_rows.extend(rows[picked[:n_enroll]].tolist())
        test_rows.extend(rows[picked[n_enroll:]].tolist())

    splits = {
        "aae_train": es.subset(aae_mask),
        "attacker_train": es.subset(attacker_mask),
        "eval_enroll": es.subset(np.array(sorted(enroll_rows), dtype=np.int64)),
        "eval_test": es.subset(np.array(sorted(test_rows), dtype=np.int64)),
    }
    trials = _build_trials(splits["eval_test"], sorted(eval_speakers), spec, rng)
    return splits, trials


def _build_trials(test: EmbeddingSet, eval_speakers: list[int], spec: SplitSpec,
                  rng: np.random.Generator) -> list[Trial]:
    if len(eval_speakers) < 2:
        raise DataError("need at least 2 evaluation speakers to form nontarget trials")
    segments = list(zip(test.speaker_ids.tolist(), test.segment_ids.tolist()))

    target_pairs = [(sid, sid, seg) for sid, seg in segments]
    if len(target_pairs) > spec.n_target_trials:
        idx = rng.choice(len(target_pairs), size=spec.n_target_trials, replace=False)
        target_pairs = [target_pairs[i] for i in sorted(idx.tolist())]

    nontarget_pairs = [
        (enroll, sid, seg)
        for enroll in eval_speakers
        for sid, seg in segments
        if enroll != sid
    ]
    if len(nontarget_pairs) > spec.n_nontarget_trials:
        idx = rng.choice(len(nontarget_pairs), size=spec.n_nontarget_trials, replace=False)
        nontarget_pairs = [nontarget_pairs[i] for i in sorted(idx.tolist())]

    trials = [Trial(e, s, g, True) for e, s, g in target_pairs]
    trials += [Trial(e, s, g, False) for e, s, g in nontarget_pairs]
    return trials


def write_trial_list(trials, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            label = "target" if t.target else "nontarget"
            fh.write(f"{t.enroll_speaker}\t{t.test_speaker}\t{t.test_segment}\t{label}\n")


def read_trial_list(path) -> list[Trial]:
    trials: list[Trial] = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in ("target", "nontarget"):
                raise FormatError(f"{path}: malformed trial on line {ln}: {line!r}")
            try:
                enroll, test_spk, test_seg = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise FormatError(f"{path}: non-integer id on line {ln}: {line!r}") from None
            trials.append(Trial(enroll, test_spk, test_seg, parts[3] == "target"))
    if not trials:
        raise DataError(f"{path}: empty trial list")
    return trials

"""Synthetic segmented-feature corpora, tokenisation, batching and file I/O.

A sample is a run of gloss segments: every gloss has a fixed random
prototype vector and a segment is that prototype repeated for a random
number of frames plus Gaussian noise.  The target sentence is the gloss
sequence rendered as words, optionally reordered by a fixed rule.  The gold
segmentation is kept for analysis only; see :func:`segmentation_guard`.
"""

from __future__ import annotations

import contextlib
import csv
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
SPLITS = ("train", "dev", "test")

MAGIC = b"GASL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")


class SpecError(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class UnsupportedVersionError(FeatureFormatError):
    pass


class TruncatedFileError(FeatureFormatError):
    pass


# ---------------------------------------------------------------------------
# gloss-free guard
# ---------------------------------------------------------------------------

_SEGMENTS_LOCKED = False


@contextlib.contextmanager
def segmentation_guard() -> Iterator[None]:
    """Make any read of ``Sample.segments`` raise inside the block.

    Wrap model training/evaluation in it to show no model code path touches
    the gold segmentation.
    """
    global _SEGMENTS_LOCKED
    prev = _SEGMENTS_LOCKED
    _SEGMENTS_LOCKED = True
    try:
        yield
    finally:
        _SEGMENTS_LOCKED = prev


class SegmentationAccessError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    glosses: int = 20
    feature_dim: int = 32
    segment_min: int = 8
    segment_max: int = 20
    sentence_min: int = 3
    sentence_max: int = 6
    noise: float = 0.8
    reorder: bool = True
    distinct_glosses: bool = True
    n_train: int = 500
    n_dev: int = 50
    n_test: int = 50
    seed: int = 42

    def validate(self) -> None:
        if self.segment_min < 1 or self.segment_max < self.segment_min:
            raise SpecError(f"segment range [{self.segment_min}, {self.segment_max}] is invalid")
        if self.sentence_min < 1 or self.sentence_max < self.sentence_min:
            raise SpecError(f"sentence range [{self.sentence_min}, {self.sentence_max}] is invalid")
        if self.glosses < 2:
            raise SpecError("need at least 2 glosses")
        if self.distinct_glosses and self.glosses < self.sentence_max:
            raise SpecError(
                f"glosses={self.glosses} < sentence_max={self.sentence_max} with distinct_glosses set"
            )
        if self.feature_dim < 1 or self.noise < 0:
            raise SpecError("feature_dim must be >= 1 and noise >= 0")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise SpecError("corpus sizes must be non-negative")

    def sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}


@dataclass
class Sample:
    id: str
    features: np.ndarray  # (T, feature_dim), float32-representable values
    sentence: str
    _segments: list[tuple[int, int]] | None = field(default=None, repr=False)

    @property
    def segments(self) -> list[tuple[int, int]] | None:
        """Gold ``(gloss, n_frames)`` pairs; analysis tooling only."""
        if _SEGMENTS_LOCKED:
            raise SegmentationAccessError(f"gold segmentation of {self.id} read under segmentation_guard")
        return self._segments

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def words(self) -> list[str]:
        return self.sentence.split()


@dataclass
class Corpus:
    spec: SyntheticSpec | None
    splits: dict[str, list[Sample]]
    vocab: "Vocab"

    def __getitem__(self, split: str) -> list[Sample]:
        if split not in self.splits:
            raise KeyError(f"split {split!r} not present; have {sorted(self.splits)}")
        return self.splits[split]

    def find(self, sample_id: str) -> Sample:
        for samples in self.splits.values():
            for s in samples:
                if s.id == sample_id:
                    return s
        raise KeyError(f"sample id {sample_id!r} not found")


class Vocab:
    """Whitespace vocabulary with reserved PAD/UNK/BOS/EOS ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, sentences: Sequence[str]) -> "Vocab":
        words = sorted({w for s in sentences for w in s.split()})
        return cls(list(SPECIALS) + words)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, sentence: str) -> list[int]:
        return [self.stoi.get(w, UNK) for w in sentence.split()]

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.itos[i])
        return " ".join(words)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def gloss_label(g: int) -> str:
    return f"g{g:02d}"


def gloss_word(g: int) -> str:
    return f"w{g:02d}"


def reorder_glosses(glosses: Sequence[int]) -> list[int]:
    """Fixed grammar rule: the final gloss moves to the front."""
    glosses = list(glosses)
    if len(glosses) < 2:
        return glosses
    return [glosses[-1]] + glosses[:-1]


def _draw_sentence(rng: np.random.Generator, spec: SyntheticSpec) -> list[int]:
    m = int(rng.integers(spec.sentence_min, spec.sentence_max + 1))
    if spec.distinct_glosses:
        return [int(g) for g in rng.permutation(spec.glosses)[:m]]
    out: list[int] = []
    while len(out) < m:
        g = int(rng.integers(spec.glosses))
        if not out or g != out[-1]:
            out.append(g)
    return out


def generate_corpus(spec: SyntheticSpec) -> Corpus:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    prototypes = rng.normal(size=(spec.glosses, spec.feature_dim))
    splits: dict[str, list[Sample]] = {}
    for split, n in spec.sizes().items():
        samples = []
        for i in range(n):
            glosses = _draw_sentence(rng, spec)
            lengths = rng.integers(spec.segment_min, spec.segment_max + 1, size=len(glosses))
            frames = np.concatenate(
                [prototypes[g] + spec.noise * rng.normal(size=(int(L), spec.feature_dim)) for g, L in zip(glosses, lengths)]
            )
            order = reorder_glosses(glosses) if spec.reorder else glosses
            samples.append(
                Sample(
                    id=f"{split}{i:04d}",
                    features=frames.astype(np.float32).astype(np.float64),
                    sentence=" ".join(gloss_word(g) for g in order),
                    _segments=[(g, int(L)) for g, L in zip(glosses, lengths)],
                )
            )
        splits[split] = samples
    vocab = Vocab.build([s.sentence for s in splits["train"]])
    return Corpus(spec, splits, vocab)


# ---------------------------------------------------------------------------
# similarity oracle
# ---------------------------------------------------------------------------


@dataclass
class SimilarityMatrix:
    ids: list[str]
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.ids)
        if self.values.shape != (n, n):
            raise ValueError(f"similarity matrix shape {self.values.shape} does not match {n} ids")
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    @property
    def n(self) -> int:
        return len(self.ids)

    def index(self, sample_id: str) -> int:
        return self._index[sample_id]

    def submatrix(self, sample_ids: Sequence[str]) -> np.ndarray:
        idx = [self._index[s] for s in sample_ids]
        return self.values[np.ix_(idx, idx)]


def compute_similarity_oracle(sentences: Sequence[str], ids: Sequence[str] | None = None) -> SimilarityMatrix:
    """Cosine of term-frequency vectors; an empty sentence counts as one UNK."""
    if len(sentences) < 2:
        raise ValueError("similarity oracle needs at least 2 sentences")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(sentences))]
    counts = [Counter(s.split() or [SPECIALS[UNK]]) for s in sentences]
    terms = sorted({w for c in counts for w in c})
    col = {w: j for j, w in enumerate(terms)}
    tf = np.zeros((len(sentences), len(terms)))
    for i, c in enumerate(counts):
        for w, k in c.items():
            tf[i, col[w]] = k
    unit = tf / np.linalg.norm(tf, axis=1, keepdims=True)
    values = np.clip(unit @ unit.T, 0.0, 1.0)
    np.fill_diagonal(values, 1.0)
    return SimilarityMatrix(ids, values)


def write_similarity(path, sim: SimilarityMatrix) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *sim.ids])
        for sid, row in zip(sim.ids, sim.values):
            w.writerow([sid, *(repr(float(v)) for v in row)])


def read_similarity(path) -> SimilarityMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "id":
        raise ValueError(f"{path}: missing header row")
    ids = rows[0][1:]
    body = rows[1:]
    if [r[0] for r in body] != ids:
        raise ValueError(f"{path}: row ids do not match header")
    return SimilarityMatrix(ids, np.array([[float(v) for v in r[1:]] for r in body]))


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    """``GASL`` | u16 version | u32 T | u32 D | T*D little-endian float32."""
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("features must be finite")
    T, D = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, FORMAT_VERSION, T, D) + payload)


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, version, T, D = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * T * D
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FeatureFormatError(f"{path}: expected {expected} bytes, got {len(raw)} (trailing data)")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=T * D)
    return data.reshape(T, D).astype(np.float64)


# ---------------------------------------------------------------------------
# corpus on disk
# ---------------------------------------------------------------------------


def spec_to_lines(spec: SyntheticSpec) -> list[str]:
    return [f"{k}={v}" for k, v in asdict(spec).items()]


def parse_spec(lines: Sequence[str]) -> SyntheticSpec:
    from .config import parse_key_values, coerce_dataclass

    return coerce_dataclass(SyntheticSpec, parse_key_values(lines))


def write_corpus(corpus: Corpus, out_dir) -> None:
    """Lay out a corpus under ``out_dir``.

    ``spec.txt`` and ``manifest.txt`` (key=value), ``vocab.txt`` (one token per
    line), and per split ``<split>/sentences.txt`` (``id<TAB>sentence``),
    ``<split>/segments.txt`` (gold segmentation, analysis only),
    ``<split>/features/<id>.gasl`` and ``similarity_<split>.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if corpus.spec is not None:
        (out / "spec.txt").write_text("\n".join(spec_to_lines(corpus.spec)) + "\n", encoding="utf-8")
    (out / "vocab.txt").write_text("\n".join(corpus.vocab.itos) + "\n", encoding="utf-8")
    manifest = []
    for split, samples in corpus.splits.items():
        feat_dir = out / split / "features"
        feat_dir.mkdir(parents=True, exist_ok=True)
        with open(out / split / "sentences.txt", "w", encoding="utf-8") as fh:
            for s in samples:
                fh.write(f"{s.id}\t{s.sentence}\n")
        with open(out / split / "segments.txt", "w", encoding="utf-8") as fh:
            for s in samples:
                segs = " ".join(f"{gloss_label(g)}:{n}" for g, n in (s._segments or []))
                fh.write(f"{s.id}\t{segs}\n")
        for s in samples:
            write_features(feat_dir / f"{s.id}.gasl", s.features)
        if len(samples) >= 2:
            write_similarity(
                out / f"similarity_{split}.csv",
                compute_similarity_oracle([s.sentence for s in samples], [s.id for s in samples]),
            )
        manifest.append(f"{split}={len(samples)}")
    manifest.append(f"total={sum(len(v) for v in corpus.splits.values())}")
    manifest.append(f"vocab_size={len(corpus.vocab)}")
    dim = next((s.features.shape[1] for v in corpus.splits.values() for s in v), 0)
    manifest.append(f"feature_dim={dim}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")


def read_corpus(data_dir, splits: Sequence[str] = SPLITS) -> Corpus:
    """Load sentences and features.  Gold segmentation is not read."""
    root = Path(data_dir)
    if not (root / "vocab.txt").exists():
        raise FileNotFoundError(f"{root}: no corpus (vocab.txt missing)")
    vocab = Vocab((root / "vocab.txt").read_text(encoding="utf-8").splitlines())
    spec = parse_spec((root / "spec.txt").read_text(encoding="utf-8").splitlines()) if (root / "spec.txt").exists() else None
    out: dict[str, list[Sample]] = {}
    for split in splits:
        path = root / split / "sentences.txt"
        if not path.exists():
            continue
        samples = []
        for line in path.read_text(encoding="utf-8").splitlines():
            sid, _, sentence = line.partition("\t")
            samples.append(Sample(sid, read_features(root / split / "features" / f"{sid}.gasl"), sentence))
        out[split] = samples
    return Corpus(spec, out, vocab)


def read_segments(data_dir, split: str) -> dict[str, list[tuple[int, int]]]:
    """Gold segmentation for analysis tooling."""
    out = {}
    for line in (Path(data_dir) / split / "segments.txt").read_text(encoding="utf-8").splitlines():
        sid, _, rest = line.partition("\t")
        out[sid] = [(int(a[1:]), int(b)) for a, b in (item.split(":") for item in rest.split())]
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # (B, T_max, D)
    feature_mask: np.ndarray  # (B, T_max) bool
    lengths: np.ndarray  # (B,)
    tokens_in: np.ndarray  # (B, M_max + 1): BOS + sentence, PAD-filled
    tokens_out: np.ndarray  # (B, M_max + 1): sentence + EOS, PAD-filled
    token_mask: np.ndarray  # (B, M_max + 1) bool
    references: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def collate(samples: Sequence[Sample], vocab: Vocab) -> Batch:
    B = len(samples)
    T = max(s.length for s in samples)
    D = samples[0].features.shape[1]
    feats = np.zeros((B, T, D))
    fmask = np.zeros((B, T), dtype=bool)
    encoded = [vocab.encode(s.sentence) for s in samples]
    M = max(len(e) for e in encoded) + 1
    t_in = np.full((B, M), PAD, dtype=np.int64)
    t_out = np.full((B, M), PAD, dtype=np.int64)
    tmask = np.zeros((B, M), dtype=bool)
    for b, (s, ids) in enumerate(zip(samples, encoded)):
        feats[b, : s.length] = s.features
        fmask[b, : s.length] = True
        t_in[b, : len(ids) + 1] = [BOS, *ids]
        t_out[b, : len(ids) + 1] = [*ids, EOS]
        tmask[b, : len(ids) + 1] = True
    return Batch(
        [s.id for s in samples], feats, fmask, fmask.sum(axis=1), t_in, t_out, tmask, [s.sentence for s in samples]
    )


def batch_and_mask(samples: Sequence[Sample], batch_size: int, vocab: Vocab) -> list[Batch]:
    """Consecutive batches of ``batch_size`` (last may be short), right-padded."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return [collate(samples[i : i + batch_size], vocab) for i in range(0, len(samples), batch_size)]


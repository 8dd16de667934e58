"""Synthetic paired audio/visual corpus.

Audio frames come from a phoneme codebook, visual frames from a smaller viseme
codebook reached through a many-to-one phoneme -> viseme map, so visual speech
is structurally less discriminable than audio. Targets are a deterministic
token-level "translation" of the phoneme sequence with local reordering.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

BOS, EOS, PAD = 0, 1, 2
N_RESERVED = 3

FEATURE_MAGIC = b"AVMS"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHII")

SPLITS = ("train", "valid", "test")
_SPLIT_IDS = {name: i for i, name in enumerate(SPLITS)}
_CODEBOOK_STREAM = 7


class CorpusError(ValueError):
    pass


class FeatureFileError(CorpusError):
    pass


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


@dataclass
class CorpusSpec:
    n_phonemes: int = 40
    n_visemes: int = 12
    tgt_vocab: int = 60
    frames_per_token: int = 3
    feature_dim: int = 16
    sigma_audio: float = 0.1
    sigma_visual: float = 0.5
    min_len: int = 4
    max_len: int = 16
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    master_seed: int = 20230

    @property
    def splits(self) -> dict[str, int]:
        return {"train": self.n_train, "valid": self.n_valid, "test": self.n_test}

    def validate(self) -> None:
        if self.n_visemes < 1:
            raise CorpusError("n_visemes must be >= 1")
        if not self.n_visemes < self.n_phonemes:
            raise CorpusError(
                f"invariant n_visemes < n_phonemes violated ({self.n_visemes} >= {self.n_phonemes})"
            )
        if self.feature_dim < 2:
            raise CorpusError(f"invariant feature_dim >= 2 violated ({self.feature_dim})")
        if self.frames_per_token < 1:
            raise CorpusError(f"invariant frames_per_token >= 1 violated ({self.frames_per_token})")
        if self.sigma_audio < 0 or self.sigma_visual < 0:
            raise CorpusError("noise scales must be non-negative")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError(f"bad sentence length range [{self.min_len}, {self.max_len}]")
        if self.tgt_vocab - N_RESERVED < 1:
            raise CorpusError("tgt_vocab must exceed the 3 reserved ids")
        for name in ("n_train", "n_valid", "n_test"):
            if getattr(self, name) < 0:
                raise CorpusError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise CorpusError(f"unknown CorpusSpec field(s): {', '.join(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec


@dataclass
class Utterance:
    id: str
    audio: np.ndarray
    visual: np.ndarray
    src_tokens: list[int]
    tgt_tokens: list[int]

    @property
    def n_frames(self) -> int:
        return self.audio.shape[0]


def build_viseme_map(n_phonemes: int, n_visemes: int, seed: int) -> np.ndarray:
    """Balanced random surjection phoneme -> viseme; preimage sizes differ by at most one."""
    if not 1 <= n_visemes <= n_phonemes:
        raise CorpusError(f"need 1 <= n_visemes <= n_phonemes, got {n_visemes}, {n_phonemes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_phonemes) % n_visemes
    return rng.permutation(labels).astype(np.int64)


def translate_tokens(src_tokens, tgt_vocab: int = 60, n_phonemes: int | None = None) -> list[int]:
    eff = tgt_vocab - N_RESERVED
    mapped = []
    for i in src_tokens:
        i = int(i)
        if i < 0 or (n_phonemes is not None and i >= n_phonemes):
            raise CorpusError(f"source token {i} out of range")
        mapped.append(N_RESERVED + (7 * i) % eff)
    for j in range(0, len(mapped) - 1, 2):
        mapped[j], mapped[j + 1] = mapped[j + 1], mapped[j]
    return [BOS, *mapped, EOS]


def make_codebooks(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Viseme map plus audio and visual codebooks, all fixed by the master seed."""
    ss = np.random.SeedSequence([spec.master_seed, _CODEBOOK_STREAM])
    map_seed, book_seed = ss.spawn(2)
    vmap = build_viseme_map(spec.n_phonemes, spec.n_visemes,
                            int(map_seed.generate_state(1)[0]))
    rng = np.random.default_rng(book_seed)
    audio_book = rng.standard_normal((spec.n_phonemes, spec.feature_dim))
    visual_book = rng.standard_normal((spec.n_visemes, spec.feature_dim))
    return vmap, audio_book, visual_book


def utterance_seed(master_seed: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, _SPLIT_IDS[split], index])


def synth_utterance(spec: CorpusSpec, viseme_map: np.ndarray, audio_codebook: np.ndarray,
                    visual_codebook: np.ndarray, seed, uid: str = "utt") -> Utterance:
    rng = np.random.default_rng(seed)
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    src = rng.integers(0, spec.n_phonemes, size=length)
    per_frame = np.repeat(src, spec.frames_per_token)
    t, d = per_frame.shape[0], spec.feature_dim
    audio = audio_codebook[per_frame] + spec.sigma_audio * rng.standard_normal((t, d))
    visual = visual_codebook[viseme_map[per_frame]] + spec.sigma_visual * rng.standard_normal((t, d))
    src_list = [int(x) for x in src]
    return Utterance(uid, audio, visual, src_list,
                     translate_tokens(src_list, spec.tgt_vocab, spec.n_phonemes))


def add_noise(audio: np.ndarray, snr_db: float, seed) -> np.ndarray:
    """Additive white Gaussian noise at ``snr_db`` relative to the matrix's mean-square power.

    ``snr_db = inf`` means clean. The noise draw depends only on ``seed``, so
    sweeping SNR with a fixed seed scales one noise realization.
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size == 0:
        raise CorpusError("add_noise: empty audio")
    if math.isinf(snr_db) and snr_db > 0:
        return audio.copy()
    power = float(np.mean(audio * audio))
    if power == 0.0:
        raise CorpusError("add_noise: all-zero audio has undefined signal power")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    return audio + sigma * np.random.default_rng(seed).standard_normal(audio.shape)


def parse_snr(value) -> float:
    if value is None:
        return math.inf
    if isinstance(value, str):
        if value.strip().lower() == "clean":
            return math.inf
        return float(value)
    return float(value)


# --- feature files ----------------------------------------------------------


def encode_features(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FeatureFileError(f"feature matrix must be 2-D, got shape {m.shape}")
    t, d = m.shape
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, d) + m.astype("<f4").tobytes()


def decode_features(blob: bytes) -> np.ndarray:
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise BadMagicError("bad magic")
    if len(blob) < _FEATURE_HEADER.size:
        raise TruncatedPayloadError("truncated header")
    _, version, t, d = _FEATURE_HEADER.unpack_from(blob)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"version mismatch: file {version}, expected {FEATURE_VERSION}")
    need = _FEATURE_HEADER.size + 4 * t * d
    if len(blob) != need:
        raise TruncatedPayloadError(f"truncated payload: {len(blob)} bytes, expected {need}")
    return np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(t, d).copy()


def write_features(path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(matrix))


def read_features(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


# --- corpus directories -----------------------------------------------------


def generate_corpus(spec: CorpusSpec, out_dir) -> dict[str, int]:
    spec.validate()
    out = Path(out_dir)
    feats = out / "features"
    feats.mkdir(parents=True, exist_ok=True)
    vmap, audio_book, visual_book = make_codebooks(spec)
    counts = {}
    for split in SPLITS:
        n = spec.splits[split]
        lines = []
        for i in range(n):
            uid = f"{split}-{i:06d}"
            utt = synth_utterance(spec, vmap, audio_book, visual_book,
                                  utterance_seed(spec.master_seed, split, i), uid)
            a_rel = f"features/{uid}.audio.avms"
            v_rel = f"features/{uid}.visual.avms"
            write_features(out / a_rel, utt.audio)
            write_features(out / v_rel, utt.visual)
            lines.append(json.dumps({
                "id": uid, "audio_path": a_rel, "visual_path": v_rel,
                "src_tokens": utt.src_tokens, "tgt_tokens": utt.tgt_tokens,
            }))
        (out / f"manifest.{split}.jsonl").write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8")
        counts[split] = n
    (out / "corpus.spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n",
                                          encoding="utf-8")
    return counts


def load_manifest(path) -> list[Utterance]:
    """Read a manifest and its feature files; feature paths resolve relative to the manifest."""
    path = Path(path)
    base = path.parent
    utts = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                audio = read_features(base / rec["audio_path"]).astype(np.float64)
                visual = read_features(base / rec["visual_path"]).astype(np.float64)
                utt = Utterance(rec["id"], audio, visual,
                                [int(x) for x in rec["src_tokens"]],
                                [int(x) for x in rec["tgt_tokens"]])
            except (KeyError, json.JSONDecodeError, FileNotFoundError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
            if audio.shape != visual.shape:
                raise CorpusError(f"{path}:{lineno}: audio/visual shapes differ")
            utts.append(utt)
    return utts

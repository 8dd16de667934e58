"""Modality-missing inputs, frame-level audio/visual stream mixing, and the mixing-ratio curriculum."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

AUDIO = "audio"
VISUAL = "visual"
STOCHASTIC_TOL = 1e-6


def concat_unimodal(stream: np.ndarray, modality: str) -> np.ndarray:
    """Pad a single stream with zeros for the missing one: audio -> [A | 0], visual -> [0 | V]."""
    stream = np.asarray(stream, dtype=np.float64)
    if stream.size == 0:
        raise ValueError("concat_unimodal: empty stream")
    zeros = np.zeros_like(stream)
    if modality == AUDIO:
        return np.concatenate([stream, zeros], axis=-1)
    if modality == VISUAL:
        return np.concatenate([zeros, stream], axis=-1)
    raise ValueError(f"unknown modality {modality!r}")


def mix_streams(audio: np.ndarray, visual: np.ndarray, phi: float, seed,
                orientation: str = AUDIO) -> tuple[np.ndarray, np.ndarray]:
    """Draw each frame from one stream: p ~ U(0,1) per frame, p < phi picks the audio frame.

    With ``orientation="visual"`` the comparison selects the visual frame
    instead, which is the literal reading of the mixing equation.
    Works on ``(T, D)`` or batched ``(..., T, D)`` inputs; returns the mixed
    ``(..., T, 2D)`` features and the boolean audio mask ``(..., T)``.
    """
    audio = np.asarray(audio, dtype=np.float64)
    visual = np.asarray(visual, dtype=np.float64)
    if audio.shape != visual.shape:
        raise ValueError(f"mix_streams: audio {audio.shape} and visual {visual.shape} not synchronous")
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"mix_streams: phi={phi} outside [0, 1]")
    p = np.random.default_rng(seed).random(audio.shape[:-1])
    hit = p < phi
    audio_mask = hit if orientation == AUDIO else ~hit
    if orientation not in (AUDIO, VISUAL):
        raise ValueError(f"unknown orientation {orientation!r}")
    keep = audio_mask[..., None]
    zeros = np.zeros_like(audio)
    mixed = np.concatenate([np.where(keep, audio, zeros), np.where(keep, zeros, visual)], axis=-1)
    return mixed, audio_mask


def _check_stochastic(probs: np.ndarray) -> None:
    if np.any(probs < -STOCHASTIC_TOL) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > STOCHASTIC_TOL):
        raise ValueError("probability rows are not row-stochastic")


def row_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats of each row; 0 log 0 taken as 0."""
    probs = np.asarray(probs, dtype=np.float64)
    safe = np.where(probs > 0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=-1)


def uncertainty(probs: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean per-step entropy of an ``S x V`` distribution sequence.

    For a batch ``(B, S, V)`` with a ``(B, S)`` validity mask, each
    utterance's mean over its valid steps is computed first and the batch
    value is the mean of those.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if mask is None:
        _check_stochastic(probs)
        return float(row_entropy(probs).mean())
    mask = np.asarray(mask, dtype=bool)
    _check_stochastic(probs[mask])
    h = row_entropy(probs) * mask
    per_utt = h.sum(axis=-1) / np.maximum(mask.sum(axis=-1), 1)
    return float(per_utt.mean())


@dataclass(frozen=True)
class MixState:
    phi: float = 0.1
    streak: int = 0
    alpha: float = 1.2
    k: float = 0.05
    n: int = 20
    phi_min: float = 0.1
    phi_max: float = 0.9
    fires: int = 0

    def __post_init__(self):
        if not self.phi_min <= self.phi <= self.phi_max:
            raise ValueError(f"phi={self.phi} outside [{self.phi_min}, {self.phi_max}]")
        if self.alpha <= 1.0:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")
        if self.n < 1 or not 0 <= self.streak <= self.n:
            raise ValueError(f"bad streak/n: {self.streak}/{self.n}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class UncertaintyReading:
    u_uni: float
    u_mix: float

    def __post_init__(self):
        for v in (self.u_uni, self.u_mix):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"uncertainty must be finite and non-negative, got {v}")


def scheduler_update(reading: UncertaintyReading, state: MixState) -> MixState:
    """One curriculum step.

    Mixed speech counts as not discriminative enough when
    ``u_uni - u_mix < k * u_uni``. After ``n`` consecutive such steps phi is
    multiplied by alpha (clamped) and the streak restarts.
    """
    if reading.u_uni - reading.u_mix < state.k * reading.u_uni:
        streak = state.streak + 1
    else:
        streak = 0
    if streak >= state.n:
        phi = max(state.phi_min, min(state.phi_max, state.alpha * state.phi))
        return replace(state, phi=phi, streak=0, fires=state.fires + 1)
    return replace(state, streak=streak)

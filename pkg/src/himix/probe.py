"""Layer-wise cosine similarity between each layer's output and the input rows."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .decoder import ForwardTrace
from .numkit import ShapeError

AGGREGATION = "mean of per-token cosine"


@dataclass
class SimilarityProfile:
    language: list[float]
    vision: list[float] | None = None
    excluded: dict[str, list[int]] = field(default_factory=dict)
    aggregation: str = AGGREGATION

    @property
    def n_layers(self) -> int:
        return len(self.language)


def _token_cosines(ref: np.ndarray, out: np.ndarray) -> tuple[float, int]:
    ref = ref.reshape(-1, ref.shape[-1])
    out = out.reshape(-1, out.shape[-1])
    nr = np.linalg.norm(ref, axis=-1)
    no = np.linalg.norm(out, axis=-1)
    ok = (nr > 0) & (no > 0)
    if not ok.any():
        return float("nan"), int((~ok).sum())
    cos = (ref[ok] * out[ok]).sum(axis=-1) / (nr[ok] * no[ok])
    return float(np.clip(cos, -1.0, 1.0).mean()), int((~ok).sum())


def cosine_profile(trace: ForwardTrace, language_ref: np.ndarray | None = None,
                   vision_ref: np.ndarray | None = None) -> SimilarityProfile:
    """Per layer, the mean over tokens of cos(reference row, layer output row).

    References default to the trace's own layer-0 inputs (post-connector for
    vision). Zero-norm rows are skipped and counted in ``excluded``.
    Traces without propagated vision rows yield ``vision=None``.
    """
    lang_ref = trace.language_input if language_ref is None else np.asarray(language_ref)
    has_vision = trace.layers and trace.layers[0].vision_out is not None
    if lang_ref.shape != trace.layers[0].language_out.shape:
        raise ShapeError(f"language reference {lang_ref.shape} vs trace rows {trace.layers[0].language_out.shape}")
    profile = SimilarityProfile(language=[], excluded={"language": []})
    for rec in trace.layers:
        v, k = _token_cosines(lang_ref, rec.language_out)
        profile.language.append(v)
        profile.excluded["language"].append(k)
    if has_vision:
        vis_ref = trace.vision_input if vision_ref is None else np.asarray(vision_ref)
        if vis_ref.shape != trace.layers[0].vision_out.shape:
            raise ShapeError(f"vision reference {vis_ref.shape} vs trace rows {trace.layers[0].vision_out.shape}")
        profile.vision, profile.excluded["vision"] = [], []
        for rec in trace.layers:
            v, k = _token_cosines(vis_ref, rec.vision_out)
            profile.vision.append(v)
            profile.excluded["vision"].append(k)
    return profile


def profile_csv(profile: SimilarityProfile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "modality", "mean_cos", "excluded_tokens"])
    tracks = [("language", profile.language)]
    if profile.vision is not None:
        tracks.append(("vision", profile.vision))
    for modality, values in tracks:
        for i, v in enumerate(values):
            w.writerow([i + 1, modality, repr(v), profile.excluded[modality][i]])
    return buf.getvalue()

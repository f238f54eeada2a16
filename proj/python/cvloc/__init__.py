"""Text-query cross-view geo-localization: Python access to the C++ core."""

import json

from ._cvloc import (
    ContractError,
    DimensionError,
    Error,
    FormatError,
    ParameterError,
    ServiceError,
    confidence_rerank,
    contrastive_loss,
    describe_scene,
    expand_positional_embedding,
    fuse_scores,
    ground_resolution,
    haversine,
)
from ._cvloc import Localizer as _Localizer
from ._cvloc import text_stats_json


def text_stats(texts):
    return json.loads(text_stats_json(list(texts)))


class Localizer:
    """Localize text queries against a trained checkpoint and reference index."""

    def __init__(self, checkpoint, index, corpus, explainer="mock"):
        self._impl = _Localizer(str(checkpoint), str(index), str(corpus), explainer)

    def localize(self, text, lat, lon, M=100, K=5, explain=False):
        return json.loads(self._impl.localize_json(text, lat, lon, M, K, explain))

    def refine(self, session_id, text):
        return json.loads(self._impl.refine_json(session_id, text))

    def rerank(self, session_id):
        return json.loads(self._impl.rerank_json(session_id))


__all__ = [
    "ContractError",
    "DimensionError",
    "Error",
    "FormatError",
    "Localizer",
    "ParameterError",
    "ServiceError",
    "confidence_rerank",
    "contrastive_loss",
    "describe_scene",
    "expand_positional_embedding",
    "fuse_scores",
    "ground_resolution",
    "haversine",
    "text_stats",
]

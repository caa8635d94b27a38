"""Tg prediction from PSMILES via Schulz-Zimm sampled multi-chain graphs."""

__version__ = "0.1.0"

from .errors import PolychainError  # noqa: E402
from .psmiles import from_psmiles, parse, tokenize  # noqa: E402
from .mmd import gamma_cdf, gamma_quantile, parameterize, sample_cup  # noqa: E402
from .graphs import BuildConfig, PolymerGraph, PolymerGraphBuilder, PolymerRecord, build_cup  # noqa: E402
from .training import QuantileTransform  # noqa: E402
from .estimators import MaskedGraphPretrainer, TgRegressor  # noqa: E402

__all__ = [
    "PolychainError", "from_psmiles", "parse", "tokenize", "gamma_cdf", "gamma_quantile", "parameterize",
    "sample_cup", "BuildConfig", "PolymerGraph", "PolymerGraphBuilder", "PolymerRecord", "build_cup",
    "QuantileTransform", "MaskedGraphPretrainer", "TgRegressor",
]

"""
Model registry.

Maps the model ids used in experiment configs to factories, and checks a
model's capabilities against what an algorithm needs before it runs.
"""

import logging
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from ..errors import CapabilityError, ConfigError
from ..gaussian import LgssSpec
from .base import FEATURES, StateSpaceModel
from .dengue import dengue_model
from .hmm import toy_hmm
from .lgss import LgssModel, demo_spec, lgss_model
from .watertank import watertank_model

logger = logging.getLogger(__name__)

# Features each algorithm needs from a model
ALGORITHM_REQUIREMENTS: Dict[str, Tuple[str, ...]] = {
    "smc": (),
    "twisted-smc": ("linearization",),
    "gradsearch": ("grad_logs",),
    "pem": ("exact_likelihood",),
    "psaem": ("transition_density",),
    "mh": ("exact_likelihood",),
    "pmmh": (),
    "pg": ("parameter_conditional",),
    "pgas": ("parameter_conditional", "transition_density"),
}


def _lgss(A=None, B=None, C=None, D=None, Q=None, R=None, mu1=None, P1=None, **options) -> LgssModel:
    """LGSS from explicit matrices; every matrix is required."""
    matrices = {"A": A, "B": B, "C": C, "D": D, "Q": Q, "R": R, "mu1": mu1, "P1": P1}
    missing = sorted(name for name, value in matrices.items() if value is None)
    if missing:
        raise ConfigError("LGSS model needs every system matrix", missing=missing)
    spec = LgssSpec(**{name: np.asarray(value, dtype=float) for name, value in matrices.items()})
    return lgss_model(spec, **options)


def _lgss_demo(with_input: bool = False, **options) -> LgssModel:
    return lgss_model(demo_spec(with_input), with_input=with_input, **options)


class ModelRegistry:
    """
    Builds models by id and reports their capabilities.

    Example:
        registry = ModelRegistry()
        model = registry.build("watertank", structure="k1356")
        registry.check_algorithm(model, "pgas")
    """

    def __init__(self, factories: Optional[Mapping[str, Callable[..., StateSpaceModel]]] = None):
        self.factories: Dict[str, Callable[..., StateSpaceModel]] = {
            "lgss": _lgss,
            "lgss-demo": _lgss_demo,
            "watertank": watertank_model,
            "dengue": dengue_model,
            "hmm": toy_hmm,
        }
        if factories:
            self.factories.update(factories)

    @property
    def model_ids(self) -> List[str]:
        return sorted(self.factories)

    def build(self, model_id: str, **options: Any) -> StateSpaceModel:
        """
        Instantiate a model.

        Raises:
            ConfigError: unknown id or options the factory rejects
        """
        factory = self.factories.get(model_id)
        if factory is None:
            raise ConfigError("Unknown model", model=model_id, known=self.model_ids)
        try:
            model = factory(**options)
        except TypeError as e:
            raise ConfigError("Invalid model options", model=model_id, reason=str(e)) from e
        logger.debug("Built %r", model)
        return model

    def check_algorithm(self, model: StateSpaceModel, algorithm: str) -> None:
        """
        Raise CapabilityError unless the model offers what the algorithm needs.

        Raises:
            ConfigError: unknown algorithm
            CapabilityError: a required feature is missing
        """
        if algorithm not in ALGORITHM_REQUIREMENTS:
            raise ConfigError("Unknown algorithm", algorithm=algorithm, known=sorted(ALGORITHM_REQUIREMENTS))
        for feature in ALGORITHM_REQUIREMENTS[algorithm]:
            model.require(feature, algorithm)
        if algorithm == "pem" and not isinstance(model, LgssModel):
            raise CapabilityError("pem runs on linear-Gaussian models only", model=model.name, algorithm=algorithm)
        if algorithm == "psaem" and not model.supports_feature("sufficient_statistics"):
            logger.info("Model %s has no sufficient statistics; PSAEM uses a numerical M-step", model.name)

    def supported_algorithms(self, model: StateSpaceModel) -> List[str]:
        supported = []
        for algorithm in ALGORITHM_REQUIREMENTS:
            try:
                self.check_algorithm(model, algorithm)
            except CapabilityError:
                continue
            supported.append(algorithm)
        return supported

    def get_capabilities(self, **options_by_id: Mapping[str, Any]) -> Dict[str, Dict[str, bool]]:
        """Capability table of every registered model built with default options."""
        table = {}
        for model_id in self.model_ids:
            if model_id == "lgss" and model_id not in options_by_id:
                continue
            model = self.build(model_id, **dict(options_by_id.get(model_id, {})))
            table[model_id] = model.get_capabilities()
        return table

    def has_feature(self, feature: str) -> bool:
        """True if any default-built model supports the feature."""
        if feature not in FEATURES:
            return False
        return any(caps.get(feature, False) for caps in self.get_capabilities().values())

    def __repr__(self) -> str:
        return f"ModelRegistry(models={self.model_ids})"
